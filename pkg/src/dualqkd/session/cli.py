"""Command-line front end: ``simulate``, ``bench``, ``attack`` and ``report``.

Exit codes: 0 success, 1 session aborted (``simulate``) or partial
results (``bench``), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .config import EXPERIMENTS, ConfigError, SessionConfig, load_experiment_config, load_session_config
from .experiments import (DEFAULT_GRIDS, WALL_CLOCK_COLUMNS, default_config, read_csv,
                          run_experiment)
from .runner import run_session
from .transport import TRANSPORTS

ATTACKS = {a["name"]: a["overrides"] for a in DEFAULT_GRIDS["attack_matrix"]["attacks"]}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualqkd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one session and print its metrics as JSON")
    s.add_argument("--config", help="session YAML or JSON file (defaults built in)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--transport", choices=sorted(TRANSPORTS), default="inproc")

    b = sub.add_parser("bench", help="run an experiment grid and write CSV plus manifest")
    b.add_argument("--experiment", choices=EXPERIMENTS)
    b.add_argument("--config", help="experiment YAML or JSON file")
    b.add_argument("--out", help="CSV path (manifest goes next to it)")
    b.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the configured list")
    b.add_argument("--workers", type=int, default=1)

    a = sub.add_parser("attack", help="run repeated sessions against one adversary strategy")
    a.add_argument("--strategy", choices=sorted(ATTACKS), required=True)
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--config", help="base session YAML or JSON file")
    a.add_argument("--seed-start", type=int, default=0)

    r = sub.add_parser("report", help="summarise a bench CSV and emit gnuplot data")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--plot-data", help="write whitespace-separated data for gnuplot here")
    return p


def cmd_simulate(args) -> int:
    cfg = load_session_config(args.config) if args.config else SessionConfig().validate()
    m = run_session(cfg, args.seed, args.transport)
    print(json.dumps(m.as_row(), indent=2))
    return 0 if m.outcome == "Established" else 1


def cmd_bench(args) -> int:
    if args.config:
        cfg = load_experiment_config(args.config)
        if args.experiment and args.experiment != cfg.experiment:
            raise ConfigError(f"--experiment {args.experiment} conflicts with config {cfg.experiment}")
    elif args.experiment:
        cfg = default_config(args.experiment)
    else:
        raise ConfigError("bench needs --experiment or --config")
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
        cfg.validate()
    out = args.out or cfg.output or f"{cfg.experiment}.csv"
    result = run_experiment(cfg, out, workers=args.workers)
    print(f"wrote {out} ({len(result.rows)} rows)")
    if result.partial:
        print(f"PartialResults: {len(result.partial_cells)} cell(s) had no successful session",
              file=sys.stderr)
        return 1
    return 0


def cmd_attack(args) -> int:
    base = load_session_config(args.config) if args.config else SessionConfig()
    cfg = base.with_overrides(**ATTACKS[args.strategy])
    reasons: dict = {}
    established = 0
    for seed in range(args.seed_start, args.seed_start + args.trials):
        m = run_session(cfg, seed)
        if m.outcome == "Established":
            established += 1
        else:
            reasons[m.abort_reason] = reasons.get(m.abort_reason, 0) + 1
    print(json.dumps({"strategy": args.strategy, "trials": args.trials, "established": established,
                      "abort_rate": (args.trials - established) / args.trials if args.trials else None,
                      "abort_reasons": dict(sorted(reasons.items()))}, indent=2))
    return 0


def _table(columns: list, rows: list) -> str:
    cells = [[_short(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _short(v: str) -> str:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return v or "-"
    if f.is_integer() and "." not in v and "e" not in v:
        return v
    return f"{f:.4g}"


def gnuplot_data(columns: list, rows: list) -> str:
    """Whitespace-separated table with a commented header; missing values become NaN."""
    out = ["# " + " ".join(columns)]
    for r in rows:
        out.append(" ".join((r.get(c) or "NaN").replace(" ", "_") for c in columns))
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    columns, rows = read_csv(args.inp)
    man_path = Path(args.inp + ".manifest.json")
    if man_path.exists():
        man = json.loads(man_path.read_text(encoding="utf-8"))
        print(f"experiment {man['experiment']}  digest {man['config_digest']}  "
              f"seeds {len(man['seeds'])}  version {man['software_version']}")
        if man.get("partial_results"):
            print(f"PartialResults: {man['partial_cells']}")
    print(_table(columns, rows))
    timing = [c for c in columns if c in WALL_CLOCK_COLUMNS]
    if timing:
        print(f"(wall-clock columns: {', '.join(timing)})")
    if args.plot_data:
        Path(args.plot_data).write_text(gnuplot_data(columns, rows), encoding="utf-8")
    return 0


COMMANDS = {"simulate": cmd_simulate, "bench": cmd_bench, "attack": cmd_attack, "report": cmd_report}


def main(argv: Optional[list] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
