"""Wire format.

Every frame is ``[4-byte big-endian length][1-byte type][body]`` where the
length counts the type byte plus the body and may not exceed
:data:`MAX_FRAME`.

Type tags
=========

====  ==============  ==================================================
0x01  HELLO           public-key fingerprint (32) + nonce (16)
0x02  KEM_CT          KEM ciphertext
0x03  CONFIRM         key-confirmation tag, or the baseline stub signature
0x10  QAUTH_READY     direction + sequence length
0x11  QAUTH_ACK       number of slots received
0x12  QAUTH_REVEAL    the sender's private decoy bits
0x13  QAUTH_VERDICT   accept / abort reason
0x20  PULSE           phase + pulse train (quantum channel, fixed size per pulse)
0x30  BASES           basis / detection / sifting announcements
0x31  SACRIFICE       values at the jointly chosen sample positions
0x32  CASCADE_PARITY  parity queries or answers
0x33  PA_SEED         Toeplitz seed
0x34  KEY_HASH        verification digest of the reconciled key
0x3F  ABORT           abort reason
====  ==============  ==================================================

Classical frames sent after key confirmation carry
``[8-byte sequence number][payload][16-byte HMAC-SHA256 tag]``.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct

import numpy as np

from ..channel import PulseTrain, Role

MAX_FRAME = 2 ** 20
MAC_BYTES = 16
_LEN = struct.Struct(">I")
_SEQ = struct.Struct(">Q")


class MsgType(enum.IntEnum):
    HELLO = 0x01
    KEM_CT = 0x02
    CONFIRM = 0x03
    QAUTH_READY = 0x10
    QAUTH_ACK = 0x11
    QAUTH_REVEAL = 0x12
    QAUTH_VERDICT = 0x13
    PULSE = 0x20
    BASES = 0x30
    SACRIFICE = 0x31
    CASCADE_PARITY = 0x32
    PA_SEED = 0x33
    KEY_HASH = 0x34
    ABORT = 0x3F


UNMACED = {MsgType.HELLO, MsgType.KEM_CT, MsgType.CONFIRM, MsgType.PULSE}


class FrameError(Exception):
    """Malformed or oversized frame; a transport fault, not a protocol abort."""


class MacError(Exception):
    pass


def encode_frame(kind: MsgType, body: bytes) -> bytes:
    length = 1 + len(body)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME}-byte limit")
    return _LEN.pack(length) + bytes([int(kind)]) + body


def decode_frame(frame: bytes) -> tuple[MsgType, bytes]:
    if len(frame) < 5:
        raise FrameError("truncated frame")
    (length,) = _LEN.unpack_from(frame)
    if length > MAX_FRAME:
        raise FrameError(f"length prefix {length} exceeds the {MAX_FRAME}-byte limit")
    if length != len(frame) - 4:
        raise FrameError("length prefix does not match frame size")
    try:
        kind = MsgType(frame[4])
    except ValueError:
        raise FrameError(f"unknown type tag 0x{frame[4]:02x}") from None
    return kind, bytes(frame[5:])


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= 4:
            (length,) = _LEN.unpack_from(self._buf)
            if length > MAX_FRAME or length == 0:
                raise FrameError(f"length prefix {length} rejected")
            if len(self._buf) < 4 + length:
                break
            frames.append(bytes(self._buf[:4 + length]))
            del self._buf[:4 + length]
        return frames


def mac_tag(key: bytes, seq: int, kind: MsgType, payload: bytes) -> bytes:
    msg = _SEQ.pack(seq) + bytes([int(kind)]) + payload
    return hmac.new(key, msg, hashlib.sha256).digest()[:MAC_BYTES]


def seal(key: bytes, seq: int, kind: MsgType, payload: bytes) -> bytes:
    return _SEQ.pack(seq) + payload + mac_tag(key, seq, kind, payload)


def unseal(key: bytes, expected_seq: int, kind: MsgType, body: bytes) -> bytes:
    if len(body) < _SEQ.size + MAC_BYTES:
        raise MacError("frame too short to carry a MAC")
    (seq,) = _SEQ.unpack_from(body)
    payload, tag = body[_SEQ.size:-MAC_BYTES], body[-MAC_BYTES:]
    if not hmac.compare_digest(tag, mac_tag(key, seq, kind, payload)):
        raise MacError("MAC check failed")
    if seq != expected_seq:
        raise MacError(f"sequence number {seq}, expected {expected_seq}")
    return payload


# -- pulse trains -----------------------------------------------------------
# Each pulse is 2 bytes: [basis << 1 | bit][photon count, capped at 255].
# Role and intensity class are never written, so every pulse costs the
# same regardless of what it is used for.

PHASES = {"auth": 0, "signal": 1}
_PULSE_HDR = struct.Struct(">BI")


def encode_pulses(train: PulseTrain, phase: str) -> bytes:
    state = (train.basis.astype(np.uint8) << 1) | train.bit.astype(np.uint8)
    photons = np.minimum(train.photons, 255).astype(np.uint8)
    body = np.empty(2 * len(train), dtype=np.uint8)
    body[0::2] = state
    body[1::2] = photons
    return _PULSE_HDR.pack(PHASES[phase], len(train)) + body.tobytes()


def decode_pulses(body: bytes, pulse_model) -> tuple[str, PulseTrain]:
    if len(body) < _PULSE_HDR.size:
        raise FrameError("truncated pulse frame")
    phase_id, n = _PULSE_HDR.unpack_from(body)
    raw = np.frombuffer(body, dtype=np.uint8, offset=_PULSE_HDR.size)
    if len(raw) != 2 * n:
        raise FrameError("pulse count does not match frame size")
    phase = {v: k for k, v in PHASES.items()}.get(phase_id)
    if phase is None:
        raise FrameError(f"unknown pulse phase {phase_id}")
    state, photons = raw[0::2], raw[1::2]
    train = PulseTrain(state >> 1, state & 1, photons.astype(np.int64),
                       np.full(n, Role.SIGNAL, dtype=np.uint8), np.zeros(n, dtype=np.uint8),
                       pulse_model)
    return phase, train


# -- small helpers for packed payloads ----------------------------------------

def pack_bits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack(">I", len(bits)) + np.packbits(bits).tobytes()


def unpack_bits(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from(">I", data, offset)
    nbytes = (n + 7) // 8
    start = offset + 4
    if len(data) < start + nbytes:
        raise FrameError("truncated bit vector")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=start))[:n]
    return bits.astype(np.uint8), start + nbytes
