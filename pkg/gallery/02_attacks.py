"""Replay every adversary strategy over a batch of sessions and tabulate
where each one gets caught."""

from dualqkd.session.config import SessionConfig
from dualqkd.session.experiments import default_config, run_experiment
from dualqkd.session.runner import run_session

cfg = default_config("attack_matrix", seeds=range(20))
result = run_experiment(cfg)

print(f"{'attack':<28}{'abort rate':>11}  reasons")
for row in result.rows:
    print(f"{row['attack']:<28}{row['abort_rate']:>11.2f}  {row['abort_reasons'] or '-'}")

# a partial intercept on the signal phase only slips past the auth layer and
# is caught by the signal QBER gate instead
session = SessionConfig().with_overrides(**{
    "n_signal": 20_000, "adversary.strategy": "intercept_resend",
    "adversary.phases": ["signal"], "adversary.fraction": 0.6})
m = run_session(session, 0)
print(f"\nsignal-phase intercept at 60%: {m.outcome} ({m.abort_reason}), QBER {m.qber_estimate:.3f}")
