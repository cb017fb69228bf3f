import itertools
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from dualqkd.adversary import (
    Adversary, ModelMismatch, classical_mitm, intercept_resend, pns_split, quantum_impersonate,
)
from dualqkd.channel import (
    Basis, ChannelParams, Ideal, Pulse, PulseTrain, WeakCoherent, measure_train, prepare_train,
)
from dualqkd.kem import ToyKem
from dualqkd.quantum_auth import AuthRatioConfig, authenticate_direction

SS, SID = b"\x33" * 32, b"\x44" * 16


def intercept_error_oracle():
    """Exact matched-basis error rate after intercept-resend with a uniform Eve basis."""
    total = Fraction(0)
    for basis, bit, eve_basis in itertools.product((0, 1), repeat=3):
        w = Fraction(1, 8)
        if eve_basis == basis:
            total += w * 0
        else:
            total += w * Fraction(1, 2)  # Eve resends a random-outcome state in the wrong basis
    return total


def test_intercept_fraction_zero_is_identity():
    rng = np.random.default_rng(0)
    train = prepare_train(rng.integers(0, 2, 500), rng.integers(0, 2, 500), 0, Ideal(), rng)
    out = intercept_resend(train, 0.0, rng)
    assert np.array_equal(out.bit, train.bit) and np.array_equal(out.basis, train.basis)


def test_intercept_full_error_rate():
    assert intercept_error_oracle() == Fraction(1, 4)
    n = 10_000
    rng = np.random.default_rng(1)
    bases, bits = rng.integers(0, 2, n), rng.integers(0, 2, n)
    train = prepare_train(bases, bits, 0, Ideal(), rng)
    log = []
    out = intercept_resend(train, 1.0, rng, log)
    err = (measure_train(out, bases, rng) != bits).mean()
    assert abs(err - 0.25) < 3 * np.sqrt(0.25 * 0.75 / n)
    assert len(log[0]["positions"]) == n


def test_intercept_scalar_pulse():
    out = intercept_resend(Pulse(Basis.Z, 1), 1.0, np.random.default_rng(0))
    assert isinstance(out, Pulse) and out.photons == 1


def test_intercept_on_auth_qubits_abort_rate():
    # oracle: P(Bin(n_auth, 1/4) <= 3% of n_auth)
    n_auth = 256
    assert stats.binom.cdf(int(0.03 * n_auth), n_auth, 0.25) < 0.01
    aborted = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        eve = Adversary("intercept_resend", rng=rng)
        v = authenticate_direction(SS, SS, seed.to_bytes(16, "big"), "A2B", AuthRatioConfig(0.7, 256),
                                   ChannelParams(), eve, rng, rng, rng)
        aborted += not v.accepted
    assert aborted >= 99


def test_pns_split_three_photons():
    log = []
    out = pns_split(Pulse(Basis.X, 1, photons=3), np.random.default_rng(0), log=log)
    assert out.photons == 2 and len(log[0]["captured"]) == 1


def test_pns_blocks_single_photon():
    assert pns_split(Pulse(Basis.Z, 0, photons=1), np.random.default_rng(0), p_block=1.0) is None


def test_pns_passes_vacuum():
    train = PulseTrain([0], [0], [0], [2], [0], WeakCoherent())
    assert pns_split(train, np.random.default_rng(0)).photons[0] == 0


def test_pns_requires_weak_coherent():
    train = PulseTrain([0], [0], [1], [2], [0], Ideal())
    with pytest.raises(ModelMismatch):
        pns_split(train, np.random.default_rng(0))


def test_pns_flags_gain_anomaly():
    flagged = 0
    trials = 40
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        eve = Adversary("pns_split", rng=rng)
        v = authenticate_direction(SS, SS, seed.to_bytes(16, "big"), "A2B", AuthRatioConfig(0.7, 100_000),
                                   ChannelParams(pulse_model=WeakCoherent()), eve, rng, rng, rng)
        flagged += v.decision == "AbortDecoyAnomaly"
    assert flagged >= 0.95 * trials


def test_classical_mitm_tamper_flips_one_bit():
    body = bytes(32)
    out = classical_mitm(body, "tamper_ct", np.random.default_rng(0))
    diff = np.unpackbits(np.frombuffer(out, dtype=np.uint8)).sum()
    assert diff == 1


def test_classical_mitm_impersonate_needs_kem():
    with pytest.raises(ValueError):
        classical_mitm(b"x", "impersonate", np.random.default_rng(0))
    kem = ToyKem()
    kp = kem.keygen(np.random.default_rng(0))
    out = classical_mitm(b"x" * 32, "impersonate", np.random.default_rng(1), kem, kp.public)
    assert len(out) == 32 and out != b"x" * 32


def test_quantum_impersonate_shape():
    t = quantum_impersonate(50, np.random.default_rng(0))
    assert len(t) == 50 and t.photons.tolist() == [1] * 50
    assert len(quantum_impersonate(0, np.random.default_rng(0))) == 0


def test_quantum_impersonate_abort_rate():
    aborted = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        v = authenticate_direction(SS, SS, seed.to_bytes(16, "big"), "A2B", AuthRatioConfig(0.7, 256),
                                   ChannelParams(), Adversary("quantum_impersonate", rng=rng), rng, rng, rng)
        aborted += not v.accepted
    assert aborted >= 99


def test_quantum_impersonate_small_sequence_escape_probability():
    # 4 slots at 70%: 3 auth + 1 decoy, each forged slot wrong w.p. 1/2, and a
    # single error in any slot aborts, so escape = (1/2)^4
    cfg = AuthRatioConfig(0.7, 4)
    assert (cfg.auth_count, cfg.decoy_count) == (3, 1)
    escape = Fraction(1, 2) ** 4
    trials = 4000
    accepted = 0
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        v = authenticate_direction(SS, SS, seed.to_bytes(16, "big"), "A2B", cfg, ChannelParams(),
                                   Adversary("quantum_impersonate", rng=rng), rng, rng, rng)
        accepted += v.accepted
    p = float(escape)
    assert accepted > 0
    assert abs(accepted / trials - p) < 3 * np.sqrt(p * (1 - p) / trials)


def test_passive_never_modifies():
    adv = Adversary("passive", rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    train = prepare_train(rng.integers(0, 2, 100), rng.integers(0, 2, 100), 0, Ideal(), rng)
    out = adv.on_train(train.copy())
    assert np.array_equal(out.bit, train.bit) and np.array_equal(out.basis, train.basis)
    assert adv.on_message("A2B", "KEM_CT", b"abc") == b"abc"
    assert adv.capture_log[-1]["op"] == "wiretap"


def test_active_strategies_log_modifications():
    rng = np.random.default_rng(2)
    train = prepare_train(rng.integers(0, 2, 100), rng.integers(0, 2, 100), 0, Ideal(), rng)
    adv = Adversary("intercept_resend", rng=rng)
    adv.on_train(train, "A2B", "auth")
    assert adv.capture_log and adv.n_e == len(adv.capture_log[0]["positions"])
    adv = Adversary("classical_mitm", rng=rng)
    out = adv.on_message("A2B", "KEM_CT", b"\x00" * 32)
    assert out != b"\x00" * 32 and adv.capture_log[0]["op"] == "mitm_tamper_ct"


def test_strategy_scoping():
    rng = np.random.default_rng(3)
    train = prepare_train(rng.integers(0, 2, 100), rng.integers(0, 2, 100), 0, Ideal(), rng)
    adv = Adversary("intercept_resend", directions=("B2A",), rng=rng)
    out = adv.on_train(train.copy(), "A2B", "auth")
    assert np.array_equal(out.bit, train.bit) and not adv.capture_log


def test_unknown_strategy():
    with pytest.raises(ValueError):
        Adversary("jamming")


def test_abort_rate_nondecreasing_in_fraction():
    fractions = np.linspace(0.0, 0.45, 10)
    cfg = AuthRatioConfig(0.7, 256)
    rates = []
    for f in fractions:
        aborted = 0
        for seed in range(500):
            rng = np.random.default_rng(seed)
            v = authenticate_direction(SS, SS, seed.to_bytes(16, "big"), "A2B", cfg, ChannelParams(),
                                       Adversary("intercept_resend", fraction=f, rng=rng), rng, rng, rng)
            aborted += not v.accepted
        rates.append(aborted / 500)
    # allow one binomial standard error of slack between neighbouring points
    for a, b in zip(rates, rates[1:]):
        assert b >= a - np.sqrt(0.25 / 500)
    assert rates[0] == 0 and rates[-1] > 0.99
