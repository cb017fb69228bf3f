"""Privacy amplification by Toeplitz hashing."""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.signal import fftconvolve

from ..errors import DomainError, KeyExhausted

DEFAULT_SECURITY_MARGIN = 32


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"binary entropy is defined on [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def final_key_length(n: int, qber_estimate: float, leaked_bits: int,
                     security_margin: int = DEFAULT_SECURITY_MARGIN) -> int:
    m = n - leaked_bits - math.ceil(n * binary_entropy(qber_estimate)) - security_margin
    return max(m, 0)


def seed_bits(seed, n_bits: int) -> np.ndarray:
    """Expand an int/bytes seed into ``n_bits`` pseudorandom bits."""
    if isinstance(seed, (int, np.integer)):
        seed = int(seed).to_bytes(16, "big", signed=False)
    raw = hashlib.shake_256(b"dualqkd/toeplitz" + bytes(seed)).digest((n_bits + 7) // 8)
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:n_bits]


def toeplitz_hash(key, diagonals) -> np.ndarray:
    """Multiply ``key`` (length n) by the m x n Toeplitz matrix
    T[i, j] = diagonals[i - j + n - 1] over GF(2)."""
    key = np.asarray(key, dtype=np.uint8)
    diagonals = np.asarray(diagonals, dtype=np.uint8)
    n = len(key)
    m = len(diagonals) - n + 1
    if m <= 0:
        return np.zeros(0, dtype=np.uint8)
    full = fftconvolve(diagonals.astype(np.float64), key.astype(np.float64))[n - 1:n - 1 + m]
    counts = np.rint(full)
    if np.max(np.abs(full - counts), initial=0.0) > 0.25:
        raise ArithmeticError("FFT rounding error too large for an exact GF(2) product")
    return (counts.astype(np.int64) & 1).astype(np.uint8)


def privacy_amplify(key, qber_estimate: float, leaked_bits: int,
                    security_margin: int = DEFAULT_SECURITY_MARGIN, seed=0) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint8)
    n = len(key)
    m = final_key_length(n, qber_estimate, leaked_bits, security_margin)
    if m <= 0:
        raise KeyExhausted(
            f"no secret key left: n={n}, leaked={leaked_bits}, qber={qber_estimate:.4f}")
    return toeplitz_hash(key, seed_bits(seed, n + m - 1))
