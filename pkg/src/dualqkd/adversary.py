"""Attacker strategies that plug into the quantum channel and the classical relay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import Ideal, Pulse, PulseTrain, Role, WeakCoherent, prepare_train
from .kem import KemProvider

STRATEGIES = ("passive", "intercept_resend", "pns_split", "classical_mitm", "quantum_impersonate")


class ModelMismatch(Exception):
    """Photon-number splitting needs a multi-photon source."""


def _as_train(x):
    if isinstance(x, Pulse):
        return PulseTrain.from_pulses([x]), True
    return x.copy(), False


def _unwrap(train: PulseTrain, scalar: bool):
    if not scalar:
        return train
    return train[0] if train.photons[0] > 0 else None


def intercept_resend(pulses, fraction: float, rng: np.random.Generator, log: Optional[list] = None):
    """Measure a random subset in random bases and resend what was seen."""
    train, scalar = _as_train(pulses)
    n = len(train)
    hit = (rng.random(n) < fraction) & train.present
    eve_basis = (rng.random(n) < 0.5).astype(np.uint8)
    coin = (rng.random(n) < 0.5).astype(np.uint8)
    seen = np.where(eve_basis == train.basis, train.bit, coin)
    train.basis = np.where(hit, eve_basis, train.basis).astype(np.uint8)
    train.bit = np.where(hit, seen, train.bit).astype(np.uint8)
    train.photons = np.where(hit, 1, train.photons)
    if log is not None and hit.any():
        log.append({"op": "intercept_resend", "positions": np.flatnonzero(hit).tolist()})
    return _unwrap(train, scalar)


def pns_split(pulses, rng: np.random.Generator, p_block: float = 1.0, log: Optional[list] = None,
              pulse_model=None):
    """Keep one photon of every multi-photon pulse; block single photons.

    A lone :class:`Pulse` carries no source model, so it is treated as
    weak-coherent unless ``pulse_model`` says otherwise.
    """
    train, scalar = _as_train(pulses)
    if pulse_model is None:
        pulse_model = WeakCoherent() if scalar else train.pulse_model
    if not isinstance(pulse_model, WeakCoherent):
        raise ModelMismatch("photon-number splitting requires the weak-coherent pulse model")
    multi = train.photons >= 2
    single = train.photons == 1
    blocked = single & (rng.random(len(train)) < p_block)
    captured = [(int(i), int(train.basis[i]), int(train.bit[i])) for i in np.flatnonzero(multi)]
    train.photons = np.where(multi, train.photons - 1, train.photons)
    train.photons = np.where(blocked, 0, train.photons)
    if log is not None and (multi.any() or blocked.any()):
        log.append({"op": "pns_split", "captured": captured,
                    "blocked": np.flatnonzero(blocked).tolist()})
    return _unwrap(train, scalar)


def quantum_impersonate(expected_len: int, rng: np.random.Generator, pulse_model=None) -> PulseTrain:
    """Fresh uniformly random BB84 pulses standing in for a legitimate train."""
    basis = (rng.random(expected_len) < 0.5).astype(np.uint8)
    bit = (rng.random(expected_len) < 0.5).astype(np.uint8)
    model = pulse_model if pulse_model is not None else Ideal()
    return prepare_train(basis, bit, 0, model, rng, role=Role.SIGNAL)


def classical_mitm(body: bytes, mode: str, rng: np.random.Generator,
                   kem: Optional[KemProvider] = None, victim_public_key: Optional[bytes] = None) -> bytes:
    """Rewrite a KEM ciphertext: flip one random bit, or substitute our own."""
    if mode == "tamper_ct":
        if not body:
            return body
        pos = int(rng.integers(0, 8 * len(body)))
        out = bytearray(body)
        out[pos // 8] ^= 0x80 >> (pos % 8)
        return bytes(out)
    if mode == "impersonate":
        if kem is None or victim_public_key is None:
            raise ValueError("impersonation needs the KEM provider and the victim's public key")
        ct, _ = kem.encapsulate(victim_public_key, rng)
        return ct
    raise ValueError(f"unknown MitM mode {mode!r}")


@dataclass
class Adversary:
    """One attacker instance per session, attached to both channels.

    ``directions`` and ``phases`` restrict where quantum strategies act
    (e.g. only the B->A authentication train).  Every modification is
    appended to ``capture_log``.
    """

    strategy: str = "passive"
    fraction: float = 1.0
    mode: str = "tamper_ct"
    p_block: float = 1.0
    directions: tuple = ("A2B", "B2A")
    phases: tuple = ("auth", "signal")
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    kem: Optional[KemProvider] = None
    public_keys: dict = field(default_factory=dict)
    capture_log: list = field(default_factory=list)
    n_e: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        self.directions = tuple(self.directions)
        self.phases = tuple(self.phases)

    def _targets(self, direction, phase) -> bool:
        return direction in self.directions and phase in self.phases

    def on_train(self, train: PulseTrain, direction: str = "A2B", phase: str = "signal") -> PulseTrain:
        if not self._targets(direction, phase):
            return train
        if self.strategy == "intercept_resend":
            before = len(self.capture_log)
            out = intercept_resend(train, self.fraction, self.rng, self.capture_log)
            if len(self.capture_log) > before:
                self.capture_log[-1].update(direction=direction, phase=phase)
                self.n_e += len(self.capture_log[-1]["positions"])
            return out
        if self.strategy == "pns_split":
            out = pns_split(train, self.rng, self.p_block, self.capture_log)
            if self.capture_log and "direction" not in self.capture_log[-1]:
                self.capture_log[-1].update(direction=direction, phase=phase)
            return out
        if self.strategy == "quantum_impersonate" and phase == "auth":
            forged = quantum_impersonate(len(train), self.rng, train.pulse_model)
            self.capture_log.append({"op": "quantum_impersonate", "direction": direction,
                                     "replaced": len(train)})
            return forged
        return train

    def on_message(self, direction: str, kind: str, body: bytes) -> bytes:
        if self.strategy == "passive":
            self.capture_log.append({"op": "wiretap", "direction": direction, "kind": kind,
                                     "body": bytes(body)})
            return body
        if self.strategy == "classical_mitm" and kind == "KEM_CT" and direction in self.directions:
            victim = "B" if direction == "A2B" else "A"
            out = classical_mitm(body, self.mode, self.rng, self.kem, self.public_keys.get(victim))
            self.capture_log.append({"op": f"mitm_{self.mode}", "direction": direction,
                                     "kind": kind})
            return out
        return body
