"""SARG04 announcement and sifting on BB84 states.

Alice's key bit is her preparation basis (Z -> 0, X -> 1).  Instead of the
basis she announces a pair made of her state and a random non-orthogonal
state from the other basis.  Bob's result is conclusive only when it rules
out one member of the pair: a Z outcome orthogonal to the pair's Z state
leaves the X state (bit 1), an X outcome orthogonal to the pair's X state
leaves the Z state (bit 0).
"""

from __future__ import annotations

import numpy as np


def announce_pairs(alice_bases, alice_bits, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z_bit, x_bit)``: the Z-basis and X-basis state of each announced pair."""
    alice_bases = np.asarray(alice_bases, dtype=np.uint8)
    alice_bits = np.asarray(alice_bits, dtype=np.uint8)
    partner = (rng.random(len(alice_bases)) < 0.5).astype(np.uint8)
    z_bit = np.where(alice_bases == 0, alice_bits, partner).astype(np.uint8)
    x_bit = np.where(alice_bases == 1, alice_bits, partner).astype(np.uint8)
    return z_bit, x_bit


def alice_key_bits(alice_bases) -> np.ndarray:
    return np.asarray(alice_bases, dtype=np.uint8).copy()


def conclusive(z_bit, x_bit, bob_bases, outcomes) -> tuple[np.ndarray, np.ndarray]:
    """Bob's conclusive mask and the key bit he infers at every position."""
    z_bit, x_bit = np.asarray(z_bit), np.asarray(x_bit)
    bob_bases, outcomes = np.asarray(bob_bases), np.asarray(outcomes)
    detected = outcomes >= 0
    ruled_out_z = (bob_bases == 0) & (outcomes != z_bit)
    ruled_out_x = (bob_bases == 1) & (outcomes != x_bit)
    mask = detected & (ruled_out_z | ruled_out_x)
    bits = np.where(ruled_out_z, 1, 0).astype(np.uint8)
    return mask, bits


def sarg04_qber(flip_prob: float) -> float:
    """Conclusive-event error rate under a basis-preserving bit flip."""
    return 2 * flip_prob / (1 + 2 * flip_prob)


def sarg04_session(n_signal: int, channel, rng: np.random.Generator, eve=None, settings=None):
    """SARG04 signal exchange through privacy amplification, both ends in-process."""
    from .pipeline import QkdSettings, run_qkd

    return run_qkd("sarg04", n_signal, channel, rng, eve, settings or QkdSettings())
