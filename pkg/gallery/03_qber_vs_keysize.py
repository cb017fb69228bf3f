"""Authentication QBER spread shrinks as the authentication sequence grows."""

from dualqkd.session.experiments import default_config, run_experiment

cfg = default_config("fig2_qber_vs_keysize", seeds=range(100))
result = run_experiment(cfg)

print(f"{'ratio':>6}{'size':>7}{'mean':>10}{'std':>10}{'accept':>8}")
for row in result.rows:
    print(f"{row['auth_fraction']:>6}{row['key_size']:>7}{row['auth_qber_mean']:>10.4f}"
          f"{row['auth_qber_std']:>10.4f}{row['accept_rate']:>8.2f}")
