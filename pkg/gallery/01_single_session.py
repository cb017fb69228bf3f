"""Run one honest session over a slightly noisy channel and walk through
what each side saw: phase timings, sifting, reconciliation and the final key."""

from dualqkd.session.config import SessionConfig
from dualqkd.session.runner import execute_session

cfg = SessionConfig().with_overrides(n_signal=20_000, **{"channel.flip_prob": 0.005})
run = execute_session(cfg, seed=1)
m = run.metrics

print(f"outcome          {m.outcome}")
print(f"frames on wire   {m.messages}  ({', '.join(dict.fromkeys(run.transcript.kinds()))})")
print("alice phases:")
t0 = run.alice.history[0][1]
for state, t in run.alice.history:
    print(f"  {state.value:<18} +{(t - t0) * 1e3:7.2f} ms")
print(f"auth QBER        A->B {m.auth_qber_a2b}  B->A {m.auth_qber_b2a}")
print(f"sifted / sent    {m.n_sifted} / {m.n_signal}  (ratio {m.sift_ratio:.3f})")
print(f"signal QBER      {m.qber_estimate:.4f}")
print(f"leaked bits      {m.leaked_bits}")
print(f"final key        {m.final_key_len} bits, efficiency {m.efficiency:.3f}, match={m.keys_match}")
print(f"first 64 bits    {''.join(map(str, run.alice.final_key[:64]))}")
