"""Classical-channel authentication with a KEM, key confirmation, and the
keystreams that drive quantum-layer authentication.

Both parties encapsulate to the other's provisioned public key, so each
side proves possession of its own secret key.  The two KEM secrets and the
handshake transcript are hashed into one session secret; MAC tags with
direction labels confirm that both sides hold it without revealing it.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kem import KemProvider, KeyPair, fingerprint

RESERVE_MIN_BITS = 256
NONCE_BYTES = 16
TAG_BYTES = 32


class AbortClassicalAuth(Exception):
    """Key confirmation failed or a peer presented an unexpected key."""


class KeystreamExhausted(Exception):
    pass


class InsufficientReserve(ValueError):
    pass


@dataclass
class Keystream:
    """Bits expanded from a shared secret plus a read cursor.

    ``take`` hands out bits strictly in order and records which indices
    were consumed, so callers can prove they never read out of order.
    """

    bits: np.ndarray
    cursor: int = 0
    read_log: list = field(default_factory=list)
    _list: Optional[list] = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.bits)

    @property
    def remaining(self) -> int:
        return len(self.bits) - self.cursor

    def take(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k > self.remaining:
            raise KeystreamExhausted(f"need {k} keystream bits, {self.remaining} left")
        idx = np.arange(self.cursor, self.cursor + k)
        self.cursor += k
        self.read_log.extend(idx.tolist())
        return self.bits[idx], idx

    def take_list(self, k: int) -> tuple[list, range]:
        """Like :meth:`take` but with plain Python values, for tight loops."""
        if k > len(self.bits) - self.cursor:
            raise KeystreamExhausted(f"need {k} keystream bits, {self.remaining} left")
        if self._list is None:
            self._list = self.bits.tolist()
        idx = range(self.cursor, self.cursor + k)
        self.cursor += k
        self.read_log.extend(idx)
        return self._list[idx.start:idx.stop], idx

    def take_int(self, k: int) -> int:
        bits, _ = self.take_list(k)
        out = 0
        for b in bits:
            out = (out << 1) | b
        return out

    def take_seed(self) -> int:
        """64 bits as an integer, for seeding shared pseudorandom choices."""
        return self.take_int(64)


def _lp(*parts: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def _expand(label: bytes, secret: bytes, session_id: bytes, direction: str, n_bits: int) -> np.ndarray:
    xof = hashlib.shake_256(_lp(label, secret, session_id, direction.encode()))
    raw = np.frombuffer(xof.digest((n_bits + 7) // 8), dtype=np.uint8)
    return np.unpackbits(raw)[:n_bits]


def derive_keystream(ss: bytes, session_id: bytes, direction: str, n_bits: int) -> Keystream:
    if n_bits < 2:
        raise ValueError("a keystream needs at least 2 bits")
    return Keystream(_expand(b"dualqkd/keystream", ss, session_id, direction, n_bits))


def next_round_keystream(reserved_bits, session_id: bytes, n_bits: int, direction: str = "A2B") -> Keystream:
    """Keystream for later rounds, keyed by bits reserved from an earlier QKD key."""
    reserved_bits = np.asarray(reserved_bits, dtype=np.uint8)
    if len(reserved_bits) < RESERVE_MIN_BITS:
        raise InsufficientReserve(
            f"reserve holds {len(reserved_bits)} bits, need {RESERVE_MIN_BITS}")
    secret = np.packbits(reserved_bits).tobytes()
    return Keystream(_expand(b"dualqkd/next-round", secret, session_id, direction, n_bits))


def reserve_secret(reserved_bits, session_id: bytes) -> bytes:
    """Session secret for a round authenticated from reserved QKD bits."""
    ks = next_round_keystream(reserved_bits, session_id, 256, direction="session-secret")
    return np.packbits(ks.bits).tobytes()


def subkey(ss: bytes, session_id: bytes, label: str, n_bytes: int = 32) -> bytes:
    return np.packbits(_expand(b"dualqkd/subkey", ss, session_id, label, 8 * n_bytes)).tobytes()


def transcript_hash(*messages: bytes) -> bytes:
    return hashlib.sha256(_lp(b"dualqkd/transcript", *messages)).digest()


def confirm_key(ss: bytes, th: bytes) -> tuple[bytes, bytes]:
    """Initiator and responder confirmation tags over the transcript hash."""
    kc = hmac.new(ss, b"dualqkd/confirm", hashlib.sha256).digest()
    tag_a = hmac.new(kc, b"A2B" + th, hashlib.sha256).digest()
    tag_b = hmac.new(kc, b"B2A" + th, hashlib.sha256).digest()
    return tag_a, tag_b


def check_tag(expected: bytes, received: bytes):
    if not hmac.compare_digest(expected, received):
        raise AbortClassicalAuth("confirmation tag mismatch")


def combine_secrets(ss_to_b: bytes, ss_to_a: bytes, th: bytes) -> bytes:
    return hashlib.sha3_256(_lp(b"dualqkd/session-secret", ss_to_b, ss_to_a, th)).digest()


def session_id_from(nonce_a: bytes, nonce_b: bytes) -> bytes:
    return hashlib.sha256(_lp(b"dualqkd/sid", nonce_a, nonce_b)).digest()[:16]


def hello_body(public_key: bytes, nonce: bytes) -> bytes:
    return fingerprint(public_key) + nonce


def check_hello(body: bytes, expected_peer_pk: bytes) -> bytes:
    """Return the peer nonce, aborting if the fingerprint is not the provisioned key."""
    fp, nonce = body[:32], body[32:]
    if len(nonce) != NONCE_BYTES or not hmac.compare_digest(fp, fingerprint(expected_peer_pk)):
        raise AbortClassicalAuth("peer public-key fingerprint does not match provisioned key")
    return nonce


Relay = Callable[[str, str, bytes], bytes]


def _passthrough(direction: str, kind: str, body: bytes) -> bytes:
    return body


@dataclass
class HandshakeResult:
    ss_a: bytes
    ss_b: bytes
    session_id: bytes
    messages: list


def handshake(initiator: KeyPair, responder: KeyPair, kem: KemProvider,
              rng_a: np.random.Generator, rng_b: Optional[np.random.Generator] = None,
              relay: Optional[Relay] = None) -> HandshakeResult:
    """Run both sides of the classical handshake in-process.

    ``relay(direction, kind, body)`` sits on the wire and may rewrite any
    message; it defaults to a faithful pass-through.  Raises
    :class:`AbortClassicalAuth` when confirmation fails.
    """
    relay = relay or _passthrough
    rng_b = rng_b if rng_b is not None else rng_a
    log = []

    def send(direction, kind, body):
        out = relay(direction, kind, body)
        log.append((direction, kind, out))
        return out

    nonce_a = rng_a.bytes(NONCE_BYTES)
    hello_a_sent = hello_body(initiator.public, nonce_a)
    hello_a = send("A2B", "HELLO", hello_a_sent)
    nonce_b = rng_b.bytes(NONCE_BYTES)
    hello_b_sent = hello_body(responder.public, nonce_b)
    hello_b = send("B2A", "HELLO", hello_b_sent)

    # Bob checks Alice's fingerprint, Alice checks Bob's
    nonce_a_at_b = check_hello(hello_a, initiator.public)
    nonce_b_at_a = check_hello(hello_b, responder.public)

    ct1, k1_a = kem.encapsulate(responder.public, rng_a)
    ct1_at_b = send("A2B", "KEM_CT", ct1)
    k1_b = kem.decapsulate(ct1_at_b, responder.secret)

    ct2, k2_b = kem.encapsulate(initiator.public, rng_b)
    ct2_at_a = send("B2A", "KEM_CT", ct2)
    k2_a = kem.decapsulate(ct2_at_a, initiator.secret)

    th_a = transcript_hash(hello_a_sent, hello_b, ct1, ct2_at_a)
    th_b = transcript_hash(hello_a, hello_b_sent, ct1_at_b, ct2)
    ss_a = combine_secrets(k1_a, k2_a, th_a)
    ss_b = combine_secrets(k1_b, k2_b, th_b)
    tag_a, _ = confirm_key(ss_a, th_a)
    exp_a, tag_b = confirm_key(ss_b, th_b)

    tag_a_at_b = send("A2B", "CONFIRM", tag_a)
    check_tag(exp_a, tag_a_at_b)
    tag_b_at_a = send("B2A", "CONFIRM", tag_b)
    check_tag(confirm_key(ss_a, th_a)[1], tag_b_at_a)

    sid = session_id_from(nonce_a, nonce_b_at_a)
    if sid != session_id_from(nonce_a_at_b, nonce_b):
        raise AbortClassicalAuth("nonce mismatch")
    return HandshakeResult(ss_a, ss_b, sid, log)
