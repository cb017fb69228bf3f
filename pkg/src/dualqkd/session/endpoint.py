"""Protocol endpoints as sans-IO state machines.

An :class:`Endpoint` never touches a socket.  ``start()`` and
``receive(frame)`` return the frames to send next; a transport moves them.
Messages that the current state does not expect raise
:class:`ProtocolViolation` and leave the endpoint untouched.  Protocol
failures (bad tags, failed checks) are not exceptions: the endpoint moves
to ``Aborted`` with a reason and, where useful, emits an ABORT frame.
"""

from __future__ import annotations

import enum
import hashlib
import struct
import time
from typing import Callable, Optional

import numpy as np

from .. import handshake as hs
from ..errors import KeyExhausted, LengthMismatch, ProtocolViolation
from ..kem import KemProvider, KeyPair
from ..qkd import sarg04
from ..qkd.amplification import privacy_amplify
from ..qkd.cascade import VERIFY_TAG_BITS, CascadeLayout, answer_queries, cascade_rounds, key_digest
from ..qkd.pool import KeyPool
from ..qkd.sifting import (
    SiftStats, estimate_qber, measure_signals, prepare_signals, qber_gate, sacrifice_positions,
    sift_mask, split_sacrifice,
)
from ..quantum_auth import AuthVerdict, measure_enlarged_sequence, prepare_enlarged_sequence, verify
from . import wire
from .config import SessionConfig
from .wire import MsgType


class State(enum.Enum):
    IDLE = "Idle"
    CLASSICAL_AUTH = "ClassicalAuth"
    QAUTH_A2B = "QuantumAuthAtoB"
    QAUTH_B2A = "QuantumAuthBtoA"
    SIGNAL_EXCHANGE = "SignalExchange"
    SIFTING = "Sifting"
    QBER_GATE = "QberGate"
    RECONCILE = "Reconcile"
    AMPLIFY = "Amplify"
    ESTABLISHED = "Established"
    ABORTED = "Aborted"


ABORT_REASONS = ("ClassicalAuth", "DecoyAnomaly", "AuthQber", "LengthMismatch", "SignalQber",
                 "ReconcileFailed", "KeyExhausted")

_CHAIN = [State.IDLE, State.CLASSICAL_AUTH, State.QAUTH_A2B, State.QAUTH_B2A,
          State.SIGNAL_EXCHANGE, State.SIFTING, State.QBER_GATE, State.RECONCILE,
          State.AMPLIFY, State.ESTABLISHED]
EDGES = frozenset(zip(_CHAIN, _CHAIN[1:])) | frozenset((s, State.ABORTED) for s in _CHAIN[:-1])
# the baseline has no quantum-layer authentication
BASELINE_EDGES = (EDGES - {(State.CLASSICAL_AUTH, State.QAUTH_A2B)}) | {
    (State.CLASSICAL_AUTH, State.SIGNAL_EXCHANGE)}
TERMINAL = (State.ESTABLISHED, State.ABORTED)

_VERDICT_CODES = {"Accept": 0, "AbortDecoyAnomaly": 1, "AbortAuthQber": 2, "AbortLengthMismatch": 3}
_VERDICT_NAMES = {v: k for k, v in _VERDICT_CODES.items()}
_DIRECTIONS = {"A2B": 0, "B2A": 1}

# BASES sub-types
_B_BOB_BB84, _B_KEEP, _B_DETECTED, _B_PAIRS, _B_CONCLUSIVE = range(5)
_Q_QUERY, _Q_ANSWER = 0, 1
_QUERY = struct.Struct(">BII")


def _reason(decision: str) -> str:
    return decision[len("Abort"):] if decision.startswith("Abort") else decision


def stub_signature(public_key: bytes, transcript: bytes) -> bytes:
    """Baseline signature stand-in.  Anyone holding the public key can
    compute it; it only models message flow and verification latency."""
    return hashlib.sha256(b"stub-sig" + public_key + transcript).digest()


class Endpoint:
    """One party.  ``role`` is ``"A"`` (initiator, Alice) or ``"B"``."""

    def __init__(self, role: str, config: SessionConfig, keys: KeyPair, peer_public: bytes,
                 kem: KemProvider, rng: np.random.Generator, pool: Optional[KeyPool] = None,
                 reserve=None, clock: Callable[[], float] = time.perf_counter):
        if role not in ("A", "B"):
            raise ValueError("role must be 'A' or 'B'")
        self.role = role
        self.cfg = config
        self.keys = keys
        self.peer_public = peer_public
        self.kem = kem
        self.rng = rng
        self.pool = pool if pool is not None else KeyPool()
        self.reserve = None if reserve is None else np.asarray(reserve, dtype=np.uint8)
        if self.reserve is not None and len(self.reserve) < hs.RESERVE_MIN_BITS:
            raise hs.InsufficientReserve(
                f"reserve holds {len(self.reserve)} bits, need {hs.RESERVE_MIN_BITS}")
        self.clock = clock
        self.baseline = config.protocol != "proposed"
        self.edges = BASELINE_EDGES if self.baseline else EDGES
        self.params = config.channel.params()
        self.ratio = config.auth.ratio()

        self.state = State.IDLE
        self.abort_reason: Optional[str] = None
        self.history = [(State.IDLE, clock())]
        self.expected = {MsgType.HELLO} if role == "B" else set()
        self.kem_calls = 0

        self.session_id = b""
        self.ss = b""
        self._mac_tx = self._mac_rx = None
        self._seq_tx = self._seq_rx = 0
        self._hs: dict = {}
        self.verdicts: dict = {}
        self._qa: dict = {}
        self._sig: dict = {}
        self.stats: Optional[SiftStats] = None
        self.key_len = 0
        self.leaked_bits = 0
        self.corrections = 0
        self.final_key: Optional[np.ndarray] = None

    # -- bookkeeping ---------------------------------------------------------
    @property
    def peer(self) -> str:
        return "B" if self.role == "A" else "A"

    @property
    def done(self) -> bool:
        return self.state in TERMINAL

    def _goto(self, new: State):
        if (self.state, new) not in self.edges:
            raise AssertionError(f"illegal transition {self.state.value} -> {new.value}")
        self.state = new
        self.history.append((new, self.clock()))

    def _frame(self, kind: MsgType, payload: bytes) -> bytes:
        if self._mac_tx is not None and kind not in wire.UNMACED:
            payload = wire.seal(self._mac_tx, self._seq_tx, kind, payload)
            self._seq_tx += 1
        return wire.encode_frame(kind, payload)

    def _abort(self, reason: str, notify: bool = True) -> list:
        assert reason in ABORT_REASONS, reason
        self.abort_reason = reason
        self._goto(State.ABORTED)
        self.expected = set()
        if not notify:
            return []
        return [self._frame(MsgType.ABORT, reason.encode())]

    def phase_times(self) -> dict:
        return {s.value: t for s, t in self.history}

    # -- entry points --------------------------------------------------------
    def start(self) -> list:
        if self.role != "A" or self.state != State.IDLE:
            raise ProtocolViolation("only an idle initiator can start a session")
        self._goto(State.CLASSICAL_AUTH)
        nonce = self.rng.bytes(hs.NONCE_BYTES)
        hello = hs.hello_body(self.keys.public, nonce)
        self._hs.update(nonce_a=nonce, hello_a=hello)
        self.expected = {MsgType.HELLO}
        return [self._frame(MsgType.HELLO, hello)]

    def receive(self, frame: bytes) -> list:
        kind, body = wire.decode_frame(frame)
        if self.done:
            raise ProtocolViolation(f"{kind.name} after the session ended ({self.state.value})")
        if kind != MsgType.ABORT and kind not in self.expected:
            raise ProtocolViolation(f"{kind.name} not allowed in {self.state.value}")
        if kind == MsgType.ABORT and self.state == State.IDLE:
            raise ProtocolViolation("ABORT before any session exists")
        if self._mac_rx is not None and kind not in wire.UNMACED:
            try:
                body = wire.unseal(self._mac_rx, self._seq_rx, kind, body)
            except wire.MacError:
                return self._abort("ClassicalAuth")
            self._seq_rx += 1
        if kind == MsgType.ABORT:
            reason = body.decode(errors="replace")
            return self._abort(reason if reason in ABORT_REASONS else "ClassicalAuth", notify=False)
        return getattr(self, f"_on_{kind.name.lower()}")(body)

    # -- classical authentication -------------------------------------------
    def _on_hello(self, body):
        try:
            peer_nonce = hs.check_hello(body, self.peer_public)
        except hs.AbortClassicalAuth:
            if self.state == State.IDLE:
                self._goto(State.CLASSICAL_AUTH)
            return self._abort("ClassicalAuth")
        out = []
        if self.role == "B":
            self._goto(State.CLASSICAL_AUTH)
            nonce = self.rng.bytes(hs.NONCE_BYTES)
            hello = hs.hello_body(self.keys.public, nonce)
            self._hs.update(nonce_a=peer_nonce, hello_a=body, nonce_b=nonce, hello_b=hello)
            self.session_id = hs.session_id_from(peer_nonce, nonce)
            out.append(self._frame(MsgType.HELLO, hello))
            self.expected = {MsgType.CONFIRM} if (self.baseline or self.reserve is not None) \
                else {MsgType.KEM_CT}
            return out
        self._hs.update(nonce_b=peer_nonce, hello_b=body)
        self.session_id = hs.session_id_from(self._hs["nonce_a"], peer_nonce)
        if self.baseline or self.reserve is not None:
            self._derive_without_kem()
            self.expected = {MsgType.CONFIRM}
            return [self._frame(MsgType.CONFIRM, self._my_tag())]
        ct, k = self.kem.encapsulate(self.peer_public, self.rng)
        self.kem_calls += 1
        self._hs.update(ct_a=ct, k_a=k)
        self.expected = {MsgType.KEM_CT}
        return [self._frame(MsgType.KEM_CT, ct)]

    def _derive_without_kem(self):
        th = hs.transcript_hash(self._hs["hello_a"], self._hs["hello_b"])
        self._hs["th"] = th
        if self.baseline:
            # the stub channel has no real secret; MAC keys only model overhead
            self.ss = hashlib.sha256(b"baseline-stub" + th).digest()
        else:
            self.ss = hs.combine_secrets(hs.reserve_secret(self.reserve, self.session_id), b"", th)

    def _my_tag(self) -> bytes:
        if self.baseline:
            return stub_signature(self.keys.public, self._hs["th"])
        tag_a, tag_b = hs.confirm_key(self.ss, self._hs["th"])
        return tag_a if self.role == "A" else tag_b

    def _peer_tag_ok(self, tag: bytes) -> bool:
        if self.baseline:
            if self.cfg.stub_verify_latency > 0:
                time.sleep(self.cfg.stub_verify_latency)
            expected = stub_signature(self.peer_public, self._hs["th"])
        else:
            tag_a, tag_b = hs.confirm_key(self.ss, self._hs["th"])
            expected = tag_b if self.role == "A" else tag_a
        try:
            hs.check_tag(expected, tag)
        except hs.AbortClassicalAuth:
            return False
        return True

    def _on_kem_ct(self, ct):
        if self.role == "B":
            k1 = self.kem.decapsulate(ct, self.keys.secret)
            ct2, k2 = self.kem.encapsulate(self.peer_public, self.rng)
            self.kem_calls += 2
            th = hs.transcript_hash(self._hs["hello_a"], self._hs["hello_b"], ct, ct2)
            self._hs["th"] = th
            self.ss = hs.combine_secrets(k1, k2, th)
            self.expected = {MsgType.CONFIRM}
            return [self._frame(MsgType.KEM_CT, ct2)]
        k2 = self.kem.decapsulate(ct, self.keys.secret)
        self.kem_calls += 1
        th = hs.transcript_hash(self._hs["hello_a"], self._hs["hello_b"], self._hs["ct_a"], ct)
        self._hs["th"] = th
        self.ss = hs.combine_secrets(self._hs["k_a"], k2, th)
        self.expected = {MsgType.CONFIRM}
        return [self._frame(MsgType.CONFIRM, self._my_tag())]

    def _on_confirm(self, tag):
        if self.role == "B" and "th" not in self._hs:
            self._derive_without_kem()
        if not self._peer_tag_ok(tag):
            return self._abort("ClassicalAuth")
        out = []
        if self.role == "B":
            out.append(self._frame(MsgType.CONFIRM, self._my_tag()))
        sid = self.session_id
        mine, theirs = (("A2B", "B2A") if self.role == "A" else ("B2A", "A2B"))
        self._mac_tx = hs.subkey(self.ss, sid, f"mac-{mine}")
        self._mac_rx = hs.subkey(self.ss, sid, f"mac-{theirs}")
        seeds = hs.derive_keystream(self.ss, sid, "qkd-seeds", 128)
        self._sig["seed_sacrifice"] = seeds.take_seed()
        self._sig["seed_cascade"] = seeds.take_seed()
        if self.baseline:
            self._goto(State.SIGNAL_EXCHANGE)
            return out + self._enter_signal_exchange()
        self._goto(State.QAUTH_A2B)
        if self.role == "A":
            return out + self._send_auth_train("A2B")
        self.expected = {MsgType.QAUTH_READY}
        return out

    # -- quantum-layer authentication ---------------------------------------
    def _keystream(self, direction: str):
        return hs.derive_keystream(self.ss, self.session_id, f"qauth-{direction}",
                                   self.ratio.keystream_bits())

    def _send_auth_train(self, direction: str) -> list:
        train, record = prepare_enlarged_sequence(self._keystream(direction), self.ratio, self.rng,
                                                  self.params.pulse_model)
        self._qa = {"direction": direction, "record": record}
        self.expected = {MsgType.QAUTH_ACK}
        ready = struct.pack(">BI", _DIRECTIONS[direction], self.ratio.sequence_len)
        return [self._frame(MsgType.QAUTH_READY, ready),
                self._frame(MsgType.PULSE, wire.encode_pulses(train, "auth"))]

    def _incoming_direction(self) -> str:
        return "A2B" if self.state == State.QAUTH_A2B else "B2A"

    def _on_qauth_ready(self, body):
        direction, length = struct.unpack(">BI", body)
        if direction != _DIRECTIONS[self._incoming_direction()]:
            raise ProtocolViolation("QAUTH_READY for the wrong direction")
        self._qa = {"direction": self._incoming_direction(), "announced": length}
        self.expected = {MsgType.PULSE}
        return []

    def _on_pulse(self, body):
        phase, train = wire.decode_pulses(body, self.params.pulse_model)
        if self.state == State.SIGNAL_EXCHANGE:
            if phase != "signal":
                raise ProtocolViolation("authentication pulses during signal exchange")
            return self._on_signal_pulses(train)
        if phase != "auth":
            raise ProtocolViolation("signal pulses before authentication finished")
        try:
            m = measure_enlarged_sequence(train, self._keystream(self._qa["direction"]), self.ratio,
                                          self.rng)
        except LengthMismatch:
            self.verdicts[self._qa["direction"]] = AuthVerdict(0.0, 1.0, "AbortLengthMismatch")
            return self._abort("LengthMismatch")
        self._qa["measurement"] = m
        self.expected = {MsgType.QAUTH_REVEAL}
        return [self._frame(MsgType.QAUTH_ACK, struct.pack(">I", len(train)))]

    def _on_qauth_ack(self, body):
        (count,) = struct.unpack(">I", body)
        if count != self.ratio.sequence_len:
            return self._abort("LengthMismatch")
        self.expected = {MsgType.QAUTH_VERDICT}
        return [self._frame(MsgType.QAUTH_REVEAL, wire.pack_bits(self._qa["record"].decoy_bits))]

    def _on_qauth_reveal(self, body):
        decoy_bits, _ = wire.unpack_bits(body)
        try:
            verdict = verify(decoy_bits, self._qa["measurement"], self.ratio,
                             **self.cfg.auth.thresholds())
        except LengthMismatch:
            verdict = AuthVerdict(0.0, 1.0, "AbortLengthMismatch")
        direction = self._qa["direction"]
        self.verdicts[direction] = verdict
        out = [self._frame(MsgType.QAUTH_VERDICT, bytes([_VERDICT_CODES[verdict.decision]]))]
        if not verdict.accepted:
            return out + self._abort(_reason(verdict.decision), notify=False)
        if direction == "A2B":
            self._goto(State.QAUTH_B2A)
            return out + self._send_auth_train("B2A")
        self._goto(State.SIGNAL_EXCHANGE)
        return out + self._enter_signal_exchange()

    def _on_qauth_verdict(self, body):
        decision = _VERDICT_NAMES.get(body[0] if body else -1, "AbortAuthQber")
        if decision != "Accept":
            return self._abort(_reason(decision), notify=False)
        if self._qa["direction"] == "A2B":
            self._goto(State.QAUTH_B2A)
            self.expected = {MsgType.QAUTH_READY}
            return []
        self._goto(State.SIGNAL_EXCHANGE)
        return self._enter_signal_exchange()

    # -- signal exchange and sifting ----------------------------------------
    def _enter_signal_exchange(self) -> list:
        if self.role == "B":
            self.expected = {MsgType.PULSE}
            return []
        bases, bits, train = prepare_signals(self.cfg.n_signal, self.params, self.rng)
        self._sig.update(bases=bases, bits=bits)
        self.expected = {MsgType.BASES}
        return [self._frame(MsgType.PULSE, wire.encode_pulses(train, "signal"))]

    def _on_signal_pulses(self, train):
        bases, outcome = measure_signals(train, self.rng)
        detected = outcome >= 0
        self._sig.update(bases=bases, outcome=outcome, detected=detected, n_sent=len(train))
        self._goto(State.SIFTING)
        self.expected = {MsgType.BASES}
        if self.baseline:
            payload = bytes([_B_DETECTED]) + wire.pack_bits(detected)
        else:
            payload = bytes([_B_BOB_BB84]) + wire.pack_bits(detected) + wire.pack_bits(bases)
        return [self._frame(MsgType.BASES, payload)]

    def _on_bases(self, body):
        sub, rest = body[0], body[1:]
        handlers = {
            ("A", _B_BOB_BB84): self._alice_sift_bb84,
            ("B", _B_KEEP): self._bob_sift_bb84,
            ("A", _B_DETECTED): self._alice_announce_pairs,
            ("B", _B_PAIRS): self._bob_conclusive,
            ("A", _B_CONCLUSIVE): self._alice_sift_sarg04,
        }
        handler = handlers.get((self.role, sub))
        if handler is None or (sub in (_B_BOB_BB84, _B_KEEP)) == self.baseline:
            raise ProtocolViolation(f"unexpected BASES sub-type {sub}")
        return handler(rest)

    def _check_len(self, vec) -> bool:
        return len(vec) == self.cfg.n_signal

    def _alice_sift_bb84(self, rest):
        detected, off = wire.unpack_bits(rest)
        bob_bases, _ = wire.unpack_bits(rest, off)
        self._goto(State.SIFTING)
        if not (self._check_len(detected) and self._check_len(bob_bases)):
            return self._abort("LengthMismatch")
        keep = sift_mask(self._sig["bases"], bob_bases, detected.astype(bool))
        self._sig["n_received"] = int(detected.sum())
        out = [self._frame(MsgType.BASES, bytes([_B_KEEP]) + wire.pack_bits(keep))]
        return out + self._alice_sacrifice(self._sig["bits"][keep])

    def _bob_sift_bb84(self, rest):
        keep, _ = wire.unpack_bits(rest)
        if len(keep) != len(self._sig["outcome"]):
            return self._abort("LengthMismatch")
        keep = keep.astype(bool)
        self._sig["n_received"] = int(self._sig["detected"].sum())
        self._sig["key"] = self._sig["outcome"][keep].astype(np.uint8)
        self.expected = {MsgType.SACRIFICE}
        return []

    def _alice_announce_pairs(self, rest):
        detected, _ = wire.unpack_bits(rest)
        self._goto(State.SIFTING)
        if not self._check_len(detected):
            return self._abort("LengthMismatch")
        detected = detected.astype(bool)
        self._sig["detected"] = detected
        self._sig["n_received"] = int(detected.sum())
        z_bit, x_bit = sarg04.announce_pairs(self._sig["bases"][detected], self._sig["bits"][detected],
                                             self.rng)
        self.expected = {MsgType.BASES}
        payload = bytes([_B_PAIRS]) + wire.pack_bits(z_bit) + wire.pack_bits(x_bit)
        return [self._frame(MsgType.BASES, payload)]

    def _bob_conclusive(self, rest):
        z_bit, off = wire.unpack_bits(rest)
        x_bit, _ = wire.unpack_bits(rest, off)
        det = self._sig["detected"]
        if len(z_bit) != int(det.sum()) or len(x_bit) != len(z_bit):
            return self._abort("LengthMismatch")
        mask, bits = sarg04.conclusive(z_bit, x_bit, self._sig["bases"][det], self._sig["outcome"][det])
        self._sig["n_received"] = int(det.sum())
        self._sig["key"] = bits[mask]
        self.expected = {MsgType.SACRIFICE}
        return [self._frame(MsgType.BASES, bytes([_B_CONCLUSIVE]) + wire.pack_bits(mask))]

    def _alice_sift_sarg04(self, rest):
        mask, _ = wire.unpack_bits(rest)
        det = self._sig["detected"]
        if len(mask) != int(det.sum()):
            return self._abort("LengthMismatch")
        key = sarg04.alice_key_bits(self._sig["bases"][det])[mask.astype(bool)]
        return self._alice_sacrifice(key)

    # -- QBER gate -----------------------------------------------------------
    def _take_sample(self, key):
        pos = sacrifice_positions(len(key), self.cfg.qkd.sacrifice_fraction, self._sig["seed_sacrifice"])
        sample, rest = split_sacrifice(key, pos)
        self._sig.update(sample=sample, key=rest, n_sifted=len(key), sacrificed=len(pos))
        return sample

    def _alice_sacrifice(self, key) -> list:
        sample = self._take_sample(key)
        self._goto(State.QBER_GATE)
        self.expected = {MsgType.SACRIFICE}
        return [self._frame(MsgType.SACRIFICE, wire.pack_bits(sample))]

    def _gate(self, peer_sample) -> bool:
        mine = self._sig["sample"]
        if len(peer_sample) != len(mine):
            return False
        q, errs = estimate_qber(mine, peer_sample)
        self._sig["q"] = q
        n_sent = self.cfg.n_signal
        self.stats = SiftStats(n_sent, self._sig["n_received"], self._sig["n_sifted"], q,
                               self._sig["sacrificed"], errs)
        self.key_len = len(self._sig["key"])
        return qber_gate(self.stats, self.cfg.qkd.qber_threshold) == "Continue"

    def _on_sacrifice(self, body):
        peer_sample, _ = wire.unpack_bits(body)
        if self.role == "B":
            sample = self._take_sample(self._sig["key"])
            self._goto(State.QBER_GATE)
            if len(peer_sample) != len(sample):
                return self._abort("LengthMismatch")
            if not self._gate(peer_sample):
                return self._abort("SignalQber")
            out = [self._frame(MsgType.SACRIFICE, wire.pack_bits(sample))]
            self._goto(State.RECONCILE)
            return out + self._bob_cascade_start()
        if len(peer_sample) != len(self._sig["sample"]):
            return self._abort("LengthMismatch")
        if not self._gate(peer_sample):
            return self._abort("SignalQber")
        self._goto(State.RECONCILE)
        self._sig["layout"] = self._layout()
        self.expected = {MsgType.CASCADE_PARITY, MsgType.KEY_HASH}
        return []

    # -- reconciliation ------------------------------------------------------
    def _layout(self) -> CascadeLayout:
        return CascadeLayout(len(self._sig["key"]), self._sig["q"], self._sig["seed_cascade"],
                             sample_size=self._sig["sacrificed"])

    def _bob_cascade_start(self):
        layout = self._layout()
        self._sig["cascade"] = cascade_rounds(layout, self._sig["key"])
        return self._bob_cascade_step(None)

    def _bob_cascade_step(self, answers):
        gen = self._sig["cascade"]
        try:
            queries = next(gen) if answers is None else gen.send(answers)
        except StopIteration as stop:
            result = stop.value
            self._sig["key"] = result.key
            self.corrections = result.corrections
            self.leaked_bits = result.leaked_bits + VERIFY_TAG_BITS
            self.expected = {MsgType.PA_SEED}
            digest = key_digest(result.key, self.session_id)
            return [self._frame(MsgType.KEY_HASH, digest)]
        self._sig["pending"] = queries
        self.expected = {MsgType.CASCADE_PARITY}
        payload = bytes([_Q_QUERY]) + struct.pack(">I", len(queries)) + b"".join(
            _QUERY.pack(*q) for q in queries)
        return [self._frame(MsgType.CASCADE_PARITY, payload)]

    def _on_cascade_parity(self, body):
        kind, (count,) = body[0], struct.unpack_from(">I", body, 1)
        if self.role == "A":
            if kind != _Q_QUERY or len(body) != 5 + count * _QUERY.size:
                raise ProtocolViolation("malformed parity query")
            layout = self._sig["layout"]
            queries = [_QUERY.unpack_from(body, 5 + i * _QUERY.size) for i in range(count)]
            for p, s, e in queries:
                if not (p < layout.passes and 0 <= s < e <= layout.n):
                    raise ProtocolViolation("parity query out of range")
            answers = answer_queries(layout, self._sig["key"], queries)
            self.leaked_bits += len(answers)
            payload = bytes([_Q_ANSWER]) + wire.pack_bits(answers)
            return [self._frame(MsgType.CASCADE_PARITY, payload)]
        if kind != _Q_ANSWER:
            raise ProtocolViolation("malformed parity answer")
        answers, _ = wire.unpack_bits(body, 1)
        if len(answers) != len(self._sig["pending"]):
            return self._abort("ReconcileFailed")
        return self._bob_cascade_step([int(a) for a in answers])

    def _on_key_hash(self, digest):
        if digest != key_digest(self._sig["key"], self.session_id):
            return self._abort("ReconcileFailed")
        self.leaked_bits += VERIFY_TAG_BITS
        seed = self.rng.bytes(16)
        self._goto(State.AMPLIFY)
        try:
            final = privacy_amplify(self._sig["key"], self._sig["q"], self.leaked_bits,
                                    self.cfg.qkd.security_margin, seed)
        except KeyExhausted:
            return self._abort("KeyExhausted")
        out = [self._frame(MsgType.PA_SEED, seed)]
        self._finish(final)
        return out

    def _on_pa_seed(self, seed):
        self._goto(State.AMPLIFY)
        try:
            final = privacy_amplify(self._sig["key"], self._sig["q"], self.leaked_bits,
                                    self.cfg.qkd.security_margin, seed)
        except KeyExhausted:
            return self._abort("KeyExhausted", notify=False)
        self._finish(final)
        return []

    def _finish(self, final):
        self.final_key = final
        self.pool.add_key(final)
        self._goto(State.ESTABLISHED)
        self.expected = set()
