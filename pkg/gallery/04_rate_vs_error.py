"""Secure bits per pulse against channel error for the simulated protocols
and the analytic MDI and TF reference curves."""

from dualqkd.session.experiments import default_config, run_experiment

cfg = default_config("fig3_rate_vs_error", seeds=range(10))
cfg.grid["errors"] = [0.0, 0.01, 0.02, 0.03, 0.05, 0.08, 0.10, 0.15]
result = run_experiment(cfg)

protocols = cfg.grid["protocols"]
print(f"{'error':>6}" + "".join(f"{p:>11}" for p in protocols))
rates = {(r["error_rate"], r["protocol"]): r["bits_per_pulse_mean"] or 0.0 for r in result.rows}
for e in cfg.grid["errors"]:
    print(f"{e:>6.2f}" + "".join(f"{rates[(e, p)]:>11.4f}" for p in protocols))
