"""Quantum-layer authentication with decoy and authentication qubits.

Sender and receiver expand the same keystream into a *sequence plan*: which
slots hold authentication qubits, which hold decoys, and which basis each
slot uses.  Authentication qubits are fully determined by two key bits
(x, y): the state is |0> when x ^ y == 0 and |-> otherwise, so the receiver
measures in Z or X accordingly and expects outcome x ^ y.  Decoys take
their basis from one key bit and a private random bit from the sender;
those bits are revealed only after the receiver has acknowledged the train.

At a 1:1 ratio every decoy is paired with one authentication qubit that
shares the decoy's key bit, and the pair order follows x ^ y.  Other ratios
keep those pairs and add singletons of the majority role; pairs are spread
evenly over the sequence and each pair's slot inside its block is drawn
from the keystream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .channel import (
    AdversaryHook, ChannelParams, Ideal, IntensityClass, PulseModel, PulseTrain, Role,
    WeakCoherent, measure_train, prepare_train, transmit_train,
)
from .errors import DomainError, LengthMismatch, ProtocolViolation  # noqa: F401
from .handshake import Keystream, derive_keystream

AUTH_QBER_THRESHOLD = Fraction(3, 100)
DECOY_THRESHOLD = Fraction(3, 100)
GAIN_Z_THRESHOLD = 3.0


@dataclass(frozen=True)
class AuthRatioConfig:
    auth_fraction: float = 0.7
    sequence_len: int = 256

    def __post_init__(self):
        if not 0 < self.auth_fraction < 1:
            raise ValueError("auth_fraction must lie strictly between 0 and 1")
        if self.sequence_len < 2 or self.auth_count < 1 or self.decoy_count < 1:
            raise ValueError(
                f"ratio {self.auth_fraction} over {self.sequence_len} slots leaves no "
                "room for both auth and decoy qubits")

    @property
    def auth_count(self) -> int:
        return math.floor(self.auth_fraction * self.sequence_len + 0.5)

    @property
    def decoy_count(self) -> int:
        return self.sequence_len - self.auth_count

    def keystream_bits(self) -> int:
        # 2 bits per auth qubit, 1 per decoy, placement draws on top
        return 4 * self.sequence_len + 1024


@dataclass
class SequencePlan:
    role: np.ndarray
    basis: np.ndarray
    auth_bit: np.ndarray
    key_bits: list

    def __len__(self):
        return len(self.role)


@dataclass
class PrepRecord:
    role: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    key_bits_consumed: list
    read_log: list

    @property
    def decoy_bits(self) -> np.ndarray:
        return self.bit[self.role == Role.DECOY]


@dataclass
class Measurement:
    role: np.ndarray
    basis: np.ndarray
    expected_auth: np.ndarray
    outcome: np.ndarray
    intensity: np.ndarray
    pulse_model: PulseModel = Ideal()

    @property
    def detected(self) -> np.ndarray:
        return self.outcome >= 0


@dataclass
class AuthVerdict:
    decoy_mismatch_rate: float
    auth_qber: float
    decision: str
    auth_errors: int = 0
    auth_measured: int = 0
    decoy_errors: int = 0
    decoy_measured: int = 0
    gain_z: Optional[float] = None

    @property
    def accepted(self) -> bool:
        return self.decision == "Accept"


def _uniform_index(ks: Keystream, size: int) -> int:
    if size <= 1:
        return 0
    k = (size - 1).bit_length()
    while True:
        v = ks.take_int(k)
        if v < size:
            return v


def plan_sequence(ks: Keystream, cfg: AuthRatioConfig) -> SequencePlan:
    """Expand the keystream into slot roles and bases; identical on both sides."""
    n_auth, n_decoy = cfg.auth_count, cfg.decoy_count
    pairs = min(n_auth, n_decoy)
    singles = abs(n_auth - n_decoy)
    single_role = Role.AUTH if n_auth > n_decoy else Role.DECOY
    units = pairs + singles

    role, basis, auth_bit, key_bits = [], [], [], []
    auth_single = single_role == Role.AUTH

    for block in range(pairs):
        size = (block + 1) * units // pairs - block * units // pairs
        pair_at = _uniform_index(ks, size)
        for u in range(size):
            if u == pair_at:
                (x, y), idx = ks.take_list(2)
                s = x ^ y
                decoy = (Role.DECOY, y, 0, (idx[1],))
                auth = (Role.AUTH, s, s, tuple(idx))
                slots = (decoy, auth) if s == 0 else (auth, decoy)
            elif auth_single:
                (x, y), idx = ks.take_list(2)
                s = x ^ y
                slots = ((Role.AUTH, s, s, tuple(idx)),)
            else:
                (b,), idx = ks.take_list(1)
                slots = ((Role.DECOY, b, 0, tuple(idx)),)
            for r, b, a, i in slots:
                role.append(r)
                basis.append(b)
                auth_bit.append(a)
                key_bits.append(i)

    return SequencePlan(
        np.array(role, dtype=np.uint8), np.array(basis, dtype=np.uint8),
        np.array(auth_bit, dtype=np.uint8), key_bits,
    )


def _intensity(role: np.ndarray, pulse_model: PulseModel) -> np.ndarray:
    if isinstance(pulse_model, WeakCoherent):
        return np.where(role == Role.DECOY, IntensityClass.DECOY, IntensityClass.SIGNAL).astype(np.uint8)
    return np.full(len(role), IntensityClass.SIGNAL, dtype=np.uint8)


def prepare_enlarged_sequence(ks: Keystream, cfg: AuthRatioConfig, rng: np.random.Generator,
                              pulse_model: PulseModel = Ideal()) -> tuple[PulseTrain, PrepRecord]:
    start = len(ks.read_log)
    plan = plan_sequence(ks, cfg)
    decoy_bits = (rng.random(len(plan)) < 0.5).astype(np.uint8)
    bit = np.where(plan.role == Role.AUTH, plan.auth_bit, decoy_bits).astype(np.uint8)
    train = prepare_train(plan.basis, bit, _intensity(plan.role, pulse_model), pulse_model, rng,
                          role=plan.role)
    record = PrepRecord(plan.role, plan.basis, bit, plan.key_bits, ks.read_log[start:])
    return train, record


def measure_enlarged_sequence(received: PulseTrain, ks: Keystream, cfg: AuthRatioConfig,
                              rng: np.random.Generator) -> Measurement:
    if len(received) != cfg.sequence_len:
        raise LengthMismatch(f"expected {cfg.sequence_len} slots, received {len(received)}")
    plan = plan_sequence(ks, cfg)
    outcome = measure_train(received, plan.basis, rng)
    return Measurement(plan.role, plan.basis, plan.auth_bit, outcome,
                       _intensity(plan.role, received.pulse_model), received.pulse_model)


def gain_consistency_z(m: Measurement) -> Optional[float]:
    """z-score of the decoy-intensity gain against the gain predicted from
    the signal-intensity class.  ``None`` for single-photon sources."""
    model = m.pulse_model
    if not isinstance(model, WeakCoherent):
        return None
    sig = m.intensity == IntensityClass.SIGNAL
    dec = ~sig
    n_s, n_d = int(sig.sum()), int(dec.sum())
    if n_s == 0 or n_d == 0:
        return None
    q_s = m.detected[sig].mean()
    q_d = m.detected[dec].mean()
    r = model.nu / model.mu
    if q_s >= 1.0:
        return None
    predicted = 1.0 - (1.0 - q_s) ** r
    slope = r * (1.0 - q_s) ** (r - 1.0)
    var = predicted * (1 - predicted) / n_d + slope ** 2 * q_s * (1 - q_s) / n_s
    if var <= 0:
        return None
    return float((q_d - predicted) / math.sqrt(var))


def _exceeds(errors: int, total: int, threshold) -> bool:
    return Fraction(errors, total) > Fraction(threshold)


def verify(decoy_bits, m: Measurement, cfg: Optional[AuthRatioConfig] = None,
           qber_threshold=AUTH_QBER_THRESHOLD, decoy_threshold=DECOY_THRESHOLD,
           gain_z_threshold: float = GAIN_Z_THRESHOLD) -> AuthVerdict:
    """Judge one direction from the revealed decoy bits and the receiver's outcomes.

    Decoy checks run first (mismatches, then intensity gains); the auth
    QBER is only consulted when the decoys look clean.  Erased slots are
    excluded from both denominators.
    """
    decoy_bits = np.asarray(decoy_bits, dtype=np.int8)
    is_decoy = m.role == Role.DECOY
    if len(decoy_bits) != int(is_decoy.sum()):
        raise LengthMismatch("decoy disclosure does not match the decoy count")
    det = m.detected
    d_mask = det[is_decoy]
    d_err = int((m.outcome[is_decoy][d_mask] != decoy_bits[d_mask]).sum())
    d_n = int(d_mask.sum())

    is_auth = m.role == Role.AUTH
    a_mask = det[is_auth]
    a_err = int((m.outcome[is_auth][a_mask] != m.expected_auth[is_auth][a_mask]).sum())
    a_n = int(a_mask.sum())

    decoy_rate = d_err / d_n if d_n else 0.0
    auth_qber = a_err / a_n if a_n else 1.0
    z = gain_consistency_z(m)

    if d_n and _exceeds(d_err, d_n, decoy_threshold):
        decision = "AbortDecoyAnomaly"
    elif z is not None and abs(z) > gain_z_threshold:
        decision = "AbortDecoyAnomaly"
    elif a_n == 0 or _exceeds(a_err, a_n, qber_threshold):
        decision = "AbortAuthQber"
    else:
        decision = "Accept"
    return AuthVerdict(decoy_rate, auth_qber, decision, a_err, a_n, d_err, d_n, z)


def detection_probability(n_a: int, n_d: int, n_e: int) -> float:
    """Chance that at least one of ``n_e`` independently intercepted slots is a decoy."""
    if n_a < 0 or n_d < 0 or n_e < 0:
        raise DomainError("counts must be non-negative")
    if n_a + n_d == 0:
        raise DomainError("sequence has no qubits")
    return 1.0 - (1.0 - n_d / (n_a + n_d)) ** n_e


def effective_detection_probability(n_a: int, n_d: int, n_e: int,
                                    per_decoy_error: float = 0.25) -> float:
    """Like :func:`detection_probability` but an intercepted decoy only
    reveals the attack with probability ``per_decoy_error`` (1/4 for
    intercept-resend with a random basis)."""
    if n_a + n_d == 0:
        raise DomainError("sequence has no qubits")
    p = n_d / (n_a + n_d) * per_decoy_error
    return 1.0 - (1.0 - p) ** n_e


def authenticate_direction(ss_sender: bytes, ss_receiver: bytes, session_id: bytes, direction: str,
                           cfg: AuthRatioConfig, params: ChannelParams,
                           eve: Optional[AdversaryHook], rng_sender: np.random.Generator,
                           rng_receiver: np.random.Generator,
                           rng_channel: np.random.Generator) -> AuthVerdict:
    label = f"qauth-{direction}"
    ks_tx = derive_keystream(ss_sender, session_id, label, cfg.keystream_bits())
    ks_rx = derive_keystream(ss_receiver, session_id, label, cfg.keystream_bits())
    train, record = prepare_enlarged_sequence(ks_tx, cfg, rng_sender, params.pulse_model)
    received = transmit_train(train, params, eve, rng_channel, direction=direction, phase="auth")
    try:
        m = measure_enlarged_sequence(received, ks_rx, cfg, rng_receiver)
    except LengthMismatch:
        return AuthVerdict(0.0, 1.0, "AbortLengthMismatch")
    return verify(record.decoy_bits, m, cfg)


@dataclass
class MutualAuthResult:
    status: str
    verdicts: dict = field(default_factory=dict)
    aborted_direction: Optional[str] = None

    @property
    def authenticated(self) -> bool:
        return self.status == "Authenticated"


def mutual_authenticate(ss_a: bytes, ss_b: bytes, session_id: bytes, cfg: AuthRatioConfig,
                        params: ChannelParams = ChannelParams(), eve: Optional[AdversaryHook] = None,
                        rng: Optional[np.random.Generator] = None) -> MutualAuthResult:
    """A->B then B->A authentication; stops at the first rejected direction."""
    rng = rng if rng is not None else np.random.default_rng()
    r_a, r_b, r_ch = rng.spawn(3)
    result = MutualAuthResult("Authenticated")
    for direction, tx, rx, r_tx, r_rx in (("A2B", ss_a, ss_b, r_a, r_b), ("B2A", ss_b, ss_a, r_b, r_a)):
        verdict = authenticate_direction(tx, rx, session_id, direction, cfg, params, eve, r_tx, r_rx, r_ch)
        result.verdicts[direction] = verdict
        if not verdict.accepted:
            result.status = "Aborted"
            result.aborted_direction = direction
            break
    return result
