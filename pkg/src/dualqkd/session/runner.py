"""Drive one session end to end and summarise it as a :class:`MetricsRecord`."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..adversary import Adversary
from ..kem import get_provider
from ..qkd.pool import KeyPool
from ..qkd.rates import efficiency
from .config import SessionConfig
from .endpoint import Endpoint, State
from .transport import TRANSPORTS, Middlebox, Transcript

WALL_CLOCK_FIELDS = ("auth_time", "qkd_time", "total_time")


@dataclass
class MetricsRecord:
    session_id: str
    seed: int
    config_digest: str
    protocol: str
    outcome: str
    abort_reason: Optional[str]
    n_signal: int
    n_received: Optional[int]
    n_sifted: Optional[int]
    sift_ratio: Optional[float]
    qber_estimate: Optional[float]
    auth_qber_a2b: Optional[float]
    auth_qber_b2a: Optional[float]
    decoy_mismatch_a2b: Optional[float]
    decoy_mismatch_b2a: Optional[float]
    leaked_bits: Optional[int]
    key_len: Optional[int]
    final_key_len: int
    efficiency: Optional[float]
    keys_match: bool
    messages: int
    auth_time: float
    qkd_time: float
    total_time: float

    def as_row(self) -> dict:
        return dataclasses.asdict(self)

    def deterministic_view(self) -> dict:
        row = self.as_row()
        for k in WALL_CLOCK_FIELDS:
            row.pop(k)
        return row


@dataclass
class SessionRun:
    metrics: MetricsRecord
    alice: Endpoint
    bob: Endpoint
    transcript: Transcript
    adversary: Optional[Adversary]


def session_rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(5)
    names = ("alice", "bob", "channel", "eve", "kem")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _times(alice: Endpoint, bob: Endpoint) -> tuple[float, float, float]:
    ta, tb = alice.phase_times(), bob.phase_times()
    start = min(t[State.CLASSICAL_AUTH.value] for t in (ta, tb) if State.CLASSICAL_AUTH.value in t)
    end = max(alice.history[-1][1], bob.history[-1][1])
    se = [t[State.SIGNAL_EXCHANGE.value] for t in (ta, tb) if State.SIGNAL_EXCHANGE.value in t]
    if len(se) == 2:
        mid = max(se)
        return mid - start, end - mid, end - start
    return end - start, 0.0, end - start


def _verdict(ep: Endpoint, direction: str, field_name: str):
    v = ep.verdicts.get(direction)
    return None if v is None else float(getattr(v, field_name))


def summarize(config: SessionConfig, seed: int, alice: Endpoint, bob: Endpoint,
              transcript: Transcript) -> MetricsRecord:
    established = alice.state == State.ESTABLISHED and bob.state == State.ESTABLISHED
    reason = alice.abort_reason or bob.abort_reason
    stats = bob.stats or alice.stats
    final_len = len(alice.final_key) if established else 0
    keys_match = bool(established and np.array_equal(alice.final_key, bob.final_key))
    eff = efficiency(final_len, alice.key_len) if established and alice.key_len else None
    auth_t, qkd_t, total_t = _times(alice, bob)
    return MetricsRecord(
        session_id=alice.session_id.hex() or bob.session_id.hex(),
        seed=seed,
        config_digest=config.digest(),
        protocol=config.protocol,
        outcome="Established" if established else "Aborted",
        abort_reason=None if established else reason,
        n_signal=config.n_signal,
        n_received=None if stats is None else stats.n_received,
        n_sifted=None if stats is None else stats.n_sifted,
        sift_ratio=None if stats is None else stats.sift_ratio,
        qber_estimate=None if stats is None else stats.qber_estimate,
        auth_qber_a2b=_verdict(bob, "A2B", "auth_qber"),
        auth_qber_b2a=_verdict(alice, "B2A", "auth_qber"),
        decoy_mismatch_a2b=_verdict(bob, "A2B", "decoy_mismatch_rate"),
        decoy_mismatch_b2a=_verdict(alice, "B2A", "decoy_mismatch_rate"),
        leaked_bits=alice.leaked_bits if stats is not None else None,
        key_len=alice.key_len if stats is not None else None,
        final_key_len=final_len,
        efficiency=eff,
        keys_match=keys_match,
        messages=len(transcript),
        auth_time=auth_t,
        qkd_time=qkd_t,
        total_time=total_t,
    )


def execute_session(config: SessionConfig, seed: int, transport: str = "inproc",
                    pools: Optional[tuple] = None, reserve=None) -> SessionRun:
    """Run both endpoints for one seed.  ``pools`` lets callers chain
    rounds; ``reserve`` switches classical auth to reserved QKD bits."""
    config.validate()
    if transport not in TRANSPORTS:
        raise ValueError(f"transport must be one of {sorted(TRANSPORTS)}")
    rngs = session_rngs(seed)
    kem = get_provider(config.kem)
    keys_a, keys_b = kem.keygen(rngs["kem"]), kem.keygen(rngs["kem"])
    pool_a, pool_b = pools if pools is not None else (KeyPool(), KeyPool())
    alice = Endpoint("A", config, keys_a, keys_b.public, kem, rngs["alice"], pool_a, reserve)
    bob = Endpoint("B", config, keys_b, keys_a.public, kem, rngs["bob"], pool_b, reserve)
    adv = None
    a = config.adversary
    if a.strategy is not None:
        adv = Adversary(a.strategy, a.fraction, a.mode, a.p_block, tuple(a.directions),
                        tuple(a.phases), rngs["eve"], kem, {"A": keys_a.public, "B": keys_b.public})
    middlebox = Middlebox(config.channel.params(), rngs["channel"], adv)
    transcript = TRANSPORTS[transport](alice, bob, middlebox)
    metrics = summarize(config, seed, alice, bob, transcript)
    return SessionRun(metrics, alice, bob, transcript, adv)


def run_session(config: SessionConfig, seed: int, transport: str = "inproc") -> MetricsRecord:
    return execute_session(config, seed, transport).metrics
