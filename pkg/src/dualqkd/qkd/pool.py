"""Key pool for finalized QKD keys and payload encryption from it."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import KeyExhausted

RESERVE_BITS = 256
AEAD_KEY_BITS = 256
_MAGIC = b"DQ1"
_MODES = {"aead": 0, "otp": 1}
_HEADER = struct.Struct(">3sBQQ")  # magic, mode, draw offset, payload length
_NONCE = bytes(12)  # every AEAD key is drawn once, so a fixed nonce is safe


@dataclass
class KeyPool:
    """Append-only store of secret bits.

    The first ``reserve_bits`` of each added key go to the reserved slice
    (authentication of later rounds); the rest are handed out by
    :meth:`draw`, strictly in order and never twice.
    """

    reserve_bits: int = RESERVE_BITS
    secure_bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    reserved_auth_slice: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    draw_cursor: int = 0
    audit_log: list = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def add_key(self, bits) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        r = min(self.reserve_bits, len(bits))
        with self._lock:
            self.reserved_auth_slice = bits[:r].copy()
            self.secure_bits = np.concatenate([self.secure_bits, bits[r:]])

    @property
    def available(self) -> int:
        return len(self.secure_bits) - self.draw_cursor

    def draw(self, n_bits: int, purpose: str = "payload") -> tuple[int, np.ndarray]:
        """Return ``(offset, bits)`` for the next ``n_bits`` unused bits."""
        with self._lock:
            if n_bits > self.available:
                raise KeyExhausted(f"pool has {self.available} bits, {n_bits} requested")
            start = self.draw_cursor
            self.draw_cursor += n_bits
            self.audit_log.append((start, start + n_bits, purpose))
            return start, self.secure_bits[start:start + n_bits].copy()

    def draw_at(self, offset: int, n_bits: int, purpose: str = "payload") -> np.ndarray:
        """Receiver side: take the bits the sender drew, which must be next in line."""
        if offset != self.draw_cursor:
            raise KeyExhausted(
                f"pool out of sync: sender drew at {offset}, next unused bit is {self.draw_cursor}")
        return self.draw(n_bits, purpose)[1]


def _to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(bits).tobytes()


def encrypt_payload(pool: KeyPool, payload: bytes, mode: str = "aead") -> bytes:
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {sorted(_MODES)}")
    n_bits = AEAD_KEY_BITS if mode == "aead" else 8 * len(payload)
    offset, bits = pool.draw(n_bits, purpose=mode)
    header = _HEADER.pack(_MAGIC, _MODES[mode], offset, len(payload))
    if mode == "aead":
        return header + AESGCM(_to_bytes(bits)).encrypt(_NONCE, payload, header)
    pad = np.frombuffer(_to_bytes(bits), dtype=np.uint8)
    return header + (np.frombuffer(payload, dtype=np.uint8) ^ pad).tobytes()


def decrypt_payload(pool: KeyPool, sealed: bytes) -> bytes:
    magic, mode_id, offset, length = _HEADER.unpack_from(sealed)
    if magic != _MAGIC:
        raise ValueError("not a sealed payload")
    header, body = sealed[:_HEADER.size], sealed[_HEADER.size:]
    if mode_id == _MODES["aead"]:
        bits = pool.draw_at(offset, AEAD_KEY_BITS, purpose="aead")
        return AESGCM(_to_bytes(bits)).decrypt(_NONCE, body, header)
    bits = pool.draw_at(offset, 8 * length, purpose="otp")
    pad = np.frombuffer(_to_bytes(bits), dtype=np.uint8)
    return (np.frombuffer(body, dtype=np.uint8) ^ pad).tobytes()
