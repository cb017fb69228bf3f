"""Experiment grids that regenerate the evaluation tables and figures.

Each experiment maps a validated :class:`ExperimentConfig` to a list of
aggregate rows, written as CSV next to a JSON manifest.  Columns listed
in ``WALL_CLOCK_COLUMNS`` hold timings; every other column is a pure
function of (config, seeds).

Grid keys per experiment (defaults in ``DEFAULT_GRIDS``):

* ``fig2_qber_vs_keysize``: ``key_sizes``, ``ratios``.  One A->B quantum
  authentication per seed and cell; QBER is recorded whatever the verdict.
* ``fig3_rate_vs_error``: ``errors``, ``protocols`` (``proposed``,
  ``sarg04``, ``MDI``, ``TF``).  Simulated protocols run the in-process
  key-establishment pipeline; MDI and TF use the analytic models.
* ``table2_runtime``: ``qubits``, ``auth_share``, ``protocols``.  Full
  sessions; ``n_signal`` is the qubit count and the authentication
  sequence holds ``max(16, auth_share * qubits)`` slots.
* ``table4_efficiency``: ``protocols``.  Full sessions.
* ``attack_matrix``: ``attacks``, a list of ``{name, overrides}``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from ..channel import ChannelParams
from ..handshake import handshake
from ..kem import get_provider
from ..qkd.pipeline import run_qkd
from ..qkd.rates import AnalyticRateParams, analytic_rate
from ..quantum_auth import authenticate_direction
from .config import ExperimentConfig, SessionConfig
from .runner import execute_session, session_rngs

WALL_CLOCK_COLUMNS = ("auth_time", "qkd_time", "total_time", "bits_per_second", "wall_time")

DEFAULT_GRIDS = {
    "fig2_qber_vs_keysize": {"key_sizes": [64, 128, 256, 512, 1024], "ratios": [0.5, 0.7, 0.9]},
    "fig3_rate_vs_error": {"errors": [0.0, 0.05, 0.10, 0.15],
                           "protocols": ["proposed", "sarg04", "MDI", "TF"]},
    "table2_runtime": {"qubits": [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000],
                       "auth_share": 0.05, "protocols": ["proposed", "sarg04"]},
    "table4_efficiency": {"protocols": ["proposed", "sarg04"]},
    "attack_matrix": {"attacks": [
        {"name": "none", "overrides": {}},
        {"name": "passive", "overrides": {"adversary.strategy": "passive"}},
        {"name": "intercept_resend", "overrides": {"adversary.strategy": "intercept_resend"}},
        {"name": "quantum_impersonate", "overrides": {"adversary.strategy": "quantum_impersonate"}},
        {"name": "classical_mitm_tamper", "overrides": {"adversary.strategy": "classical_mitm",
                                                        "adversary.mode": "tamper_ct"}},
        {"name": "classical_mitm_impersonate", "overrides": {"adversary.strategy": "classical_mitm",
                                                             "adversary.mode": "impersonate"}},
        {"name": "pns_split", "overrides": {"adversary.strategy": "pns_split",
                                            "channel.pulse_model": "weak_coherent",
                                            "auth.sequence_len": 100000}},
    ]},
}

DEFAULT_SESSIONS = {
    "fig2_qber_vs_keysize": {"channel": {"flip_prob": 0.01}},
    "fig3_rate_vs_error": {"n_signal": 20000},
    "table2_runtime": {},
    "table4_efficiency": {"n_signal": 20000, "channel": {"flip_prob": 0.005}},
    "attack_matrix": {},
}

QUANTUM_KINDS = {"QAUTH_READY", "QAUTH_ACK", "QAUTH_REVEAL", "QAUTH_VERDICT", "PULSE"}


@dataclass
class ExperimentResult:
    experiment: str
    columns: list
    rows: list
    partial_cells: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        """``True`` marks PartialResults: some cell had no successful session."""
        return bool(self.partial_cells)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\r\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row.get(k)) for k in self.columns})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def default_config(experiment: str, seeds=None, **session_overrides) -> ExperimentConfig:
    session = SessionConfig.from_dict(DEFAULT_SESSIONS[experiment])
    if session_overrides:
        session = session.with_overrides(**session_overrides)
    return ExperimentConfig(experiment, list(seeds if seeds is not None else range(10)), session,
                            json.loads(json.dumps(DEFAULT_GRIDS[experiment]))).validate()


def _stats(values) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), (float(arr.std(ddof=1)) if len(arr) > 1 else 0.0)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# -- fig 2 --------------------------------------------------------------------

def _fig2_one(args):
    session_dict, key_size, ratio, seed = args
    cfg = SessionConfig.from_dict(session_dict).with_overrides(
        **{"auth.sequence_len": key_size, "auth.auth_fraction": ratio})
    rngs = session_rngs(seed)
    kem = get_provider(cfg.kem)
    ka, kb = kem.keygen(rngs["kem"]), kem.keygen(rngs["kem"])
    hs = handshake(ka, kb, kem, rngs["alice"], rngs["bob"])
    v = authenticate_direction(hs.ss_a, hs.ss_b, hs.session_id, "A2B", cfg.auth.ratio(),
                               cfg.channel.params(), None, rngs["alice"], rngs["bob"], rngs["channel"])
    return v.auth_qber, v.decoy_mismatch_rate, v.accepted, v.auth_measured


def fig2(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    cols = ["key_size", "auth_fraction", "sessions", "auth_qber_mean", "auth_qber_std",
            "decoy_mismatch_mean", "accept_rate", "auth_slots"]
    rows, partial = [], []
    base = cfg.session.to_dict()
    for ratio in cfg.grid["ratios"]:
        for size in cfg.grid["key_sizes"]:
            out = _map(_fig2_one, [(base, size, ratio, s) for s in cfg.seeds], workers)
            q_mean, q_std = _stats([o[0] for o in out])
            d_mean, _ = _stats([o[1] for o in out])
            accept = sum(o[2] for o in out) / len(out)
            if accept == 0:
                partial.append({"key_size": size, "auth_fraction": ratio})
            rows.append(dict(key_size=size, auth_fraction=ratio, sessions=len(out),
                             auth_qber_mean=q_mean, auth_qber_std=q_std,
                             decoy_mismatch_mean=d_mean, accept_rate=accept,
                             auth_slots=out[0][3]))
    return ExperimentResult(cfg.experiment, cols, rows, partial)


# -- fig 3 --------------------------------------------------------------------

def _fig3_one(args):
    session_dict, protocol, error, seed = args
    cfg = SessionConfig.from_dict(session_dict)
    params = ChannelParams(error, cfg.channel.loss_prob, cfg.channel.params().pulse_model)
    engine = "bb84" if protocol == "proposed" else protocol
    t0 = time.perf_counter()
    out = run_qkd(engine, cfg.n_signal, params, np.random.default_rng(seed), settings=cfg.qkd)
    dt = time.perf_counter() - t0
    bits = len(out.final_a) if out.established else 0
    return bits, dt, out.established, out.stats.qber_estimate


def fig3(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    cols = ["error_rate", "protocol", "model", "sessions", "established_rate",
            "bits_per_pulse_mean", "bits_per_pulse_std", "qber_mean", "bits_per_second"]
    rows, partial = [], []
    base = cfg.session.to_dict()
    n = cfg.session.n_signal
    params = AnalyticRateParams(**cfg.grid.get("analytic", {}))
    for err in cfg.grid["errors"]:
        for proto in cfg.grid["protocols"]:
            if proto.upper() in ("MDI", "TF"):
                r = analytic_rate(proto, err, params)
                rows.append(dict(error_rate=err, protocol=proto.upper(), model="analytic", sessions=0,
                                 established_rate=None, bits_per_pulse_mean=r, bits_per_pulse_std=0.0,
                                 qber_mean=err, bits_per_second=None))
                continue
            out = _map(_fig3_one, [(base, proto, err, s) for s in cfg.seeds], workers)
            est = sum(o[2] for o in out) / len(out)
            if est == 0:
                partial.append({"error_rate": err, "protocol": proto})
            m, sd = _stats([o[0] / n if n else 0.0 for o in out])
            q, _ = _stats([o[3] for o in out])
            total_t = sum(o[1] for o in out)
            rows.append(dict(error_rate=err, protocol=proto, model="simulated", sessions=len(out),
                             established_rate=est, bits_per_pulse_mean=m, bits_per_pulse_std=sd,
                             qber_mean=q, bits_per_second=sum(o[0] for o in out) / total_t))
    return ExperimentResult(cfg.experiment, cols, rows, partial)


# -- full-session experiments -------------------------------------------------

def _session_one(args):
    session_dict, seed = args
    run = execute_session(SessionConfig.from_dict(session_dict), seed)
    m = run.metrics
    kinds = run.transcript.kinds()
    quantum_after_abort = m.outcome == "Aborted" and m.abort_reason == "ClassicalAuth" and \
        any(k in QUANTUM_KINDS for k in kinds)
    pool_ok = _pools_disjoint(run)
    return m, quantum_after_abort, pool_ok


def _pools_disjoint(run) -> bool:
    for ep in (run.alice, run.bob):
        spans = sorted((a, b) for a, b, _ in ep.pool.audit_log)
        if any(spans[i][1] > spans[i + 1][0] for i in range(len(spans) - 1)):
            return False
    return True


def table2(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    # timings are taken serially regardless of ``workers``
    cols = ["qubits", "protocol", "sessions", "established", "auth_slots", "auth_time",
            "qkd_time", "total_time"]
    rows, partial = [], []
    share = cfg.grid.get("auth_share", 0.05)
    for q in cfg.grid["qubits"]:
        for proto in cfg.grid["protocols"]:
            slots = max(16, int(round(share * q)))
            sess = cfg.session.with_overrides(protocol=proto, n_signal=q, **{"auth.sequence_len": slots})
            ms = [execute_session(sess, s).metrics for s in cfg.seeds]
            est = sum(m.outcome == "Established" for m in ms)
            rows.append(dict(qubits=q, protocol=proto, sessions=len(ms), established=est,
                             auth_slots=slots if proto == "proposed" else 0,
                             auth_time=float(np.median([m.auth_time for m in ms])),
                             qkd_time=float(np.median([m.qkd_time for m in ms])),
                             total_time=float(np.median([m.total_time for m in ms]))))
    return ExperimentResult(cfg.experiment, cols, rows, partial)


def table4(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    cols = ["protocol", "sessions", "established", "efficiency_mean", "efficiency_std",
            "qber_mean", "sifted_mean", "final_key_mean", "keys_match"]
    rows, partial = [], []
    for proto in cfg.grid["protocols"]:
        sess = cfg.session.with_overrides(protocol=proto)
        out = _map(_session_one, [(sess.to_dict(), s) for s in cfg.seeds], workers)
        ms = [o[0] for o in out]
        est = [m for m in ms if m.outcome == "Established"]
        if not est:
            partial.append({"protocol": proto})
        e_mean, e_std = _stats([m.efficiency for m in est])
        rows.append(dict(protocol=proto, sessions=len(ms), established=len(est),
                         efficiency_mean=e_mean, efficiency_std=e_std,
                         qber_mean=_stats([m.qber_estimate for m in ms])[0],
                         sifted_mean=_stats([m.key_len for m in est])[0],
                         final_key_mean=_stats([m.final_key_len for m in est])[0],
                         keys_match=all(m.keys_match for m in est)))
    return ExperimentResult(cfg.experiment, cols, rows, partial)


def attack_matrix(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    cols = ["attack", "sessions", "aborted", "abort_rate", "abort_reasons",
            "quantum_messages_after_classical_abort", "established_keys_match"]
    rows, partial = [], []
    for attack in cfg.grid["attacks"]:
        sess = cfg.session.with_overrides(**attack.get("overrides", {}))
        out = _map(_session_one, [(sess.to_dict(), s) for s in cfg.seeds], workers)
        ms = [o[0] for o in out]
        aborted = [m for m in ms if m.outcome == "Aborted"]
        if len(aborted) == len(ms) and attack["name"] in ("none", "passive"):
            partial.append({"attack": attack["name"]})
        reasons: dict = {}
        for m in aborted:
            reasons[m.abort_reason] = reasons.get(m.abort_reason, 0) + 1
        rows.append(dict(attack=attack["name"], sessions=len(ms), aborted=len(aborted),
                         abort_rate=len(aborted) / len(ms),
                         abort_reasons=";".join(f"{k}:{v}" for k, v in sorted(reasons.items())),
                         quantum_messages_after_classical_abort=sum(o[1] for o in out),
                         established_keys_match=all(m.keys_match for m in ms if m.outcome == "Established")))
    return ExperimentResult(cfg.experiment, cols, rows, partial)


RUNNERS = {
    "fig2_qber_vs_keysize": fig2,
    "fig3_rate_vs_error": fig3,
    "table2_runtime": table2,
    "table4_efficiency": table4,
    "attack_matrix": attack_matrix,
}


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None, workers: int = 1) -> ExperimentResult:
    """Run the grid, and write ``out`` plus ``<out>.manifest.json`` when a path is given."""
    cfg.validate()
    grid = {**DEFAULT_GRIDS[cfg.experiment], **cfg.grid}
    cfg = ExperimentConfig(cfg.experiment, cfg.seeds, cfg.session, grid, cfg.output, cfg.schema_version)
    result = RUNNERS[cfg.experiment](cfg, workers)
    path = out or cfg.output
    if path:
        write_outputs(result, cfg, path)
    return result


def manifest(result: ExperimentResult, cfg: ExperimentConfig) -> dict:
    return {
        "experiment": cfg.experiment,
        "config_digest": cfg.digest(),
        "seeds": list(cfg.seeds),
        "software_version": __version__,
        "columns": result.columns,
        "wall_clock_columns": [c for c in result.columns if c in WALL_CLOCK_COLUMNS],
        "partial_results": result.partial,
        "partial_cells": result.partial_cells,
        "config": cfg.to_dict(),
    }


def write_outputs(result: ExperimentResult, cfg: ExperimentConfig, path) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(result.to_csv().encode("utf-8"))
    man = path.with_name(path.name + ".manifest.json")
    man.write_text(json.dumps(manifest(result, cfg), indent=2, sort_keys=True, default=str) + "\n",
                   encoding="utf-8")
    return path, man


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return list(reader.fieldnames or []), list(reader)


def strip_wall_clock(csv_text: str) -> str:
    """CSV with timing columns removed, for determinism comparisons."""
    reader = csv.DictReader(io.StringIO(csv_text))
    keep = [c for c in reader.fieldnames if c not in WALL_CLOCK_COLUMNS]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keep, lineterminator="\r\n", extrasaction="ignore")
    w.writeheader()
    for row in reader:
        w.writerow(row)
    return buf.getvalue()


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return float(slope), float(intercept), r2


def binomial_ci(p: float, n: int, z: float = 2.5758293035489004) -> tuple[float, float]:
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half
