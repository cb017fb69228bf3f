"""BB84 signal exchange, basis sifting and sacrificed-subset QBER estimation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..channel import AdversaryHook, ChannelParams, PulseTrain, Role, measure_train, prepare_train, transmit_train

DEFAULT_SACRIFICE_FRACTION = 0.1
DEFAULT_SIGNAL_QBER_THRESHOLD = 0.11


@dataclass
class RawKeyMaterial:
    alice_bits: np.ndarray
    alice_bases: np.ndarray
    bob_bits: np.ndarray
    bob_bases: np.ndarray
    loss_flags: np.ndarray

    def __post_init__(self):
        n = len(self.alice_bits)
        if any(len(a) != n for a in (self.alice_bases, self.bob_bits, self.bob_bases, self.loss_flags)):
            raise ValueError("raw key arrays must have equal lengths")

    def __len__(self):
        return len(self.alice_bits)


@dataclass
class SiftStats:
    n_sent: int
    n_received: int
    n_sifted: int
    qber_estimate: float
    sacrificed_count: int
    sacrificed_errors: int = 0

    @property
    def sift_ratio(self) -> float:
        return self.n_sifted / self.n_received if self.n_received else 0.0


@dataclass
class SiftedKeys:
    """Sifted keys with the sacrificed positions already removed."""

    alice: np.ndarray
    bob: np.ndarray


def random_bb84(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bases = (rng.random(n) < 0.5).astype(np.uint8)
    bits = (rng.random(n) < 0.5).astype(np.uint8)
    return bases, bits


def prepare_signals(n: int, params: ChannelParams, rng: np.random.Generator):
    bases, bits = random_bb84(n, rng)
    train = prepare_train(bases, bits, 0, params.pulse_model, rng, role=Role.SIGNAL)
    return bases, bits, train


def measure_signals(received: PulseTrain, rng: np.random.Generator):
    bases = (rng.random(len(received)) < 0.5).astype(np.uint8)
    return bases, measure_train(received, bases, rng)


def sift_mask(alice_bases, bob_bases, detected) -> np.ndarray:
    return (np.asarray(alice_bases) == np.asarray(bob_bases)) & np.asarray(detected, dtype=bool)


def sacrifice_positions(n_sifted: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices into the sifted key, chosen from a seed both sides share."""
    k = int(round(fraction * n_sifted))
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.random.default_rng(seed).choice(n_sifted, size=k, replace=False)
    return np.sort(chosen)


def estimate_qber(alice_values, bob_values) -> tuple[float, int]:
    a = np.asarray(alice_values)
    b = np.asarray(bob_values)
    if len(a) == 0:
        return 0.0, 0
    errors = int((a != b).sum())
    return errors / len(a), errors


def split_sacrifice(key: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keep = np.ones(len(key), dtype=bool)
    keep[positions] = False
    return key[positions], key[keep]


def exchange_and_sift(n_signal: int, params: ChannelParams, rng: np.random.Generator,
                      eve: Optional[AdversaryHook] = None,
                      sacrifice_fraction: float = DEFAULT_SACRIFICE_FRACTION,
                      sacrifice_seed: int = 0) -> tuple[RawKeyMaterial, SiftStats, SiftedKeys]:
    """Both ends of a BB84 run, for use outside the message-driven session."""
    r_a, r_b, r_ch = rng.spawn(3)
    a_bases, a_bits, train = prepare_signals(n_signal, params, r_a)
    received = transmit_train(train, params, eve, r_ch, direction="A2B", phase="signal")
    b_bases, outcome = measure_signals(received, r_b)
    detected = outcome >= 0
    raw = RawKeyMaterial(a_bits, a_bases, np.where(detected, outcome, 0).astype(np.uint8),
                         b_bases, ~detected)
    keep = sift_mask(a_bases, b_bases, detected)
    ka, kb = a_bits[keep], raw.bob_bits[keep]
    pos = sacrifice_positions(len(ka), sacrifice_fraction, sacrifice_seed)
    sa, ka = split_sacrifice(ka, pos)
    sb, kb = split_sacrifice(kb, pos)
    q, errs = estimate_qber(sa, sb)
    stats = SiftStats(n_signal, int(detected.sum()), int(keep.sum()), q, len(pos), errs)
    return raw, stats, SiftedKeys(ka, kb)


def qber_gate(stats: SiftStats, threshold: float = DEFAULT_SIGNAL_QBER_THRESHOLD) -> str:
    return "AbortSignalQber" if stats.qber_estimate > threshold else "Continue"
