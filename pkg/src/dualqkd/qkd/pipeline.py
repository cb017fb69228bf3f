"""Both ends of the key-establishment phase run in one process.

This is the reference pipeline used by tests and quick studies.  The
message-driven endpoints in :mod:`dualqkd.session` reuse the same
building blocks and must agree with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..channel import AdversaryHook, ChannelParams, transmit_train
from ..errors import KeyExhausted
from . import sarg04
from .amplification import DEFAULT_SECURITY_MARGIN, privacy_amplify
from .cascade import VERIFY_TAG_BITS, ReconcileFailed, reconcile
from .rates import efficiency
from .sifting import (
    DEFAULT_SACRIFICE_FRACTION, DEFAULT_SIGNAL_QBER_THRESHOLD, SiftStats, estimate_qber,
    measure_signals, prepare_signals, qber_gate, sacrifice_positions, sift_mask, split_sacrifice,
)

PROTOCOLS = ("bb84", "sarg04")


@dataclass
class QkdSettings:
    sacrifice_fraction: float = DEFAULT_SACRIFICE_FRACTION
    qber_threshold: float = DEFAULT_SIGNAL_QBER_THRESHOLD
    security_margin: int = DEFAULT_SECURITY_MARGIN


@dataclass
class QkdOutcome:
    protocol: str
    status: str
    reason: Optional[str]
    stats: SiftStats
    key_len: int = 0
    leaked_bits: int = 0
    corrections: int = 0
    final_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    final_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    @property
    def established(self) -> bool:
        return self.status == "Established"

    @property
    def efficiency(self) -> Optional[float]:
        if not self.established or self.key_len == 0:
            return None
        return efficiency(len(self.final_a), self.key_len)


def sifted_keys(protocol: str, n_signal: int, params: ChannelParams, rng: np.random.Generator,
                eve: Optional[AdversaryHook] = None):
    """Signal exchange plus sifting.  Returns (alice_key, bob_key, n_received)."""
    r_a, r_b, r_ch = rng.spawn(3)
    a_bases, a_bits, train = prepare_signals(n_signal, params, r_a)
    received = transmit_train(train, params, eve, r_ch, direction="A2B", phase="signal")
    b_bases, outcome = measure_signals(received, r_b)
    detected = outcome >= 0
    if protocol == "bb84":
        keep = sift_mask(a_bases, b_bases, detected)
        return a_bits[keep], outcome[keep].astype(np.uint8), int(detected.sum())
    if protocol == "sarg04":
        z_bit, x_bit = sarg04.announce_pairs(a_bases, a_bits, r_a)
        keep, bob_bits = sarg04.conclusive(z_bit, x_bit, b_bases, outcome)
        return sarg04.alice_key_bits(a_bases)[keep], bob_bits[keep], int(detected.sum())
    raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


def run_qkd(protocol: str, n_signal: int, params: ChannelParams, rng: np.random.Generator,
            eve: Optional[AdversaryHook] = None, settings: QkdSettings = QkdSettings()) -> QkdOutcome:
    shared = np.random.default_rng(rng.integers(2**63))
    s_sacrifice, s_cascade, s_pa = (int(x) for x in shared.integers(2**63, size=3))
    ka, kb, n_received = sifted_keys(protocol, n_signal, params, rng, eve)
    pos = sacrifice_positions(len(ka), settings.sacrifice_fraction, s_sacrifice)
    sa, ka = split_sacrifice(ka, pos)
    sb, kb = split_sacrifice(kb, pos)
    q, errs = estimate_qber(sa, sb)
    stats = SiftStats(n_signal, n_received, len(ka) + len(pos), q, len(pos), errs)
    if qber_gate(stats, settings.qber_threshold) != "Continue":
        return QkdOutcome(protocol, "Aborted", "SignalQber", stats, len(ka))
    try:
        rec = reconcile(ka, kb, q, seed=s_cascade, sample_size=len(pos))
    except ReconcileFailed:
        return QkdOutcome(protocol, "Aborted", "ReconcileFailed", stats, len(ka))
    leaked = rec.leaked_bits + VERIFY_TAG_BITS
    try:
        fa = privacy_amplify(ka, q, leaked, settings.security_margin, s_pa)
        fb = privacy_amplify(rec.key, q, leaked, settings.security_margin, s_pa)
    except KeyExhausted:
        return QkdOutcome(protocol, "Aborted", "KeyExhausted", stats, len(ka), leaked, rec.corrections)
    return QkdOutcome(protocol, "Established", None, stats, len(ka), leaked, rec.corrections, fa, fb)
