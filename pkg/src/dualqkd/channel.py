"""Stochastic prepare/transmit/measure model for BB84-state qubits.

BB84 states measured in the Z or X basis admit an exact classical sampling
description: a matched-basis measurement returns the prepared bit and a
mismatched one returns a fair coin.  Pulses are therefore plain records
(basis, bit, photon count) rather than amplitude vectors.

Two layouts are provided.  :class:`Pulse` is a single immutable record and
is what the scalar API (:func:`prepare`, :func:`transmit`, :func:`measure`)
works on.  :class:`PulseTrain` holds a whole sequence as parallel numpy
arrays; the train functions are the real implementation and the scalar
functions delegate to them with a train of length one, so both paths share
the same random-draw order.

Channel composition order is fixed: adversary hook, then per-photon loss,
then a bit flip inside the prepared basis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Protocol, Union

import numpy as np


class Basis(enum.IntEnum):
    Z = 0  # |0>, |1>
    X = 1  # |+>, |->


class Role(enum.IntEnum):
    DECOY = 0
    AUTH = 1
    SIGNAL = 2


class IntensityClass(enum.IntEnum):
    SIGNAL = 0
    DECOY = 1


@dataclass(frozen=True)
class Ideal:
    """Perfect single-photon source."""

    name: str = field(default="ideal", init=False)


@dataclass(frozen=True)
class WeakCoherent:
    """Attenuated laser: Poisson photon numbers with mean ``mu`` (signal
    class) or ``nu`` (decoy-intensity class)."""

    mu: float = 0.5
    nu: float = 0.1
    name: str = field(default="weak_coherent", init=False)

    def __post_init__(self):
        if not 0 < self.nu < self.mu:
            raise ValueError(f"need 0 < nu < mu, got mu={self.mu}, nu={self.nu}")

    def mean(self, intensity_class) -> float:
        return self.nu if int(intensity_class) == IntensityClass.DECOY else self.mu


PulseModel = Union[Ideal, WeakCoherent]


@dataclass(frozen=True)
class ChannelParams:
    flip_prob: float = 0.0
    loss_prob: float = 0.0
    pulse_model: PulseModel = Ideal()

    def __post_init__(self):
        for name in ("flip_prob", "loss_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class Pulse:
    basis: Basis
    bit: int
    photons: int = 1
    role: Role = Role.SIGNAL
    intensity_class: IntensityClass = IntensityClass.SIGNAL

    def __post_init__(self):
        if self.bit not in (0, 1):
            raise ValueError(f"bit must be 0 or 1, got {self.bit}")
        if self.photons < 0:
            raise ValueError("photon count cannot be negative")

    @property
    def state(self) -> str:
        return ("|0>", "|1>", "|+>", "|->")[2 * int(self.basis) + self.bit]


@dataclass
class PulseTrain:
    """A pulse sequence as parallel arrays.

    ``photons == 0`` marks a vacuum/lost slot; such slots stay in the train
    so positions line up with the sender's record.  ``role`` is harness
    metadata and is never put on the wire.
    """

    basis: np.ndarray
    bit: np.ndarray
    photons: np.ndarray
    role: np.ndarray
    intensity: np.ndarray
    pulse_model: PulseModel = Ideal()

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.uint8)
        self.bit = np.asarray(self.bit, dtype=np.uint8)
        self.photons = np.asarray(self.photons, dtype=np.int64)
        self.role = np.asarray(self.role, dtype=np.uint8)
        self.intensity = np.asarray(self.intensity, dtype=np.uint8)
        n = len(self.basis)
        if not all(len(a) == n for a in (self.bit, self.photons, self.role, self.intensity)):
            raise ValueError("PulseTrain arrays must have equal length")

    def __len__(self):
        return len(self.basis)

    def __getitem__(self, i) -> Pulse:
        return Pulse(
            Basis(int(self.basis[i])),
            int(self.bit[i]),
            int(self.photons[i]),
            Role(int(self.role[i])),
            IntensityClass(int(self.intensity[i])),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def present(self) -> np.ndarray:
        return self.photons > 0

    def copy(self) -> "PulseTrain":
        return PulseTrain(
            self.basis.copy(), self.bit.copy(), self.photons.copy(),
            self.role.copy(), self.intensity.copy(), self.pulse_model,
        )

    @classmethod
    def from_pulses(cls, pulses, pulse_model: PulseModel = Ideal()) -> "PulseTrain":
        pulses = list(pulses)
        return cls(
            [p.basis for p in pulses], [p.bit for p in pulses],
            [p.photons for p in pulses], [p.role for p in pulses],
            [p.intensity_class for p in pulses], pulse_model,
        )

    @classmethod
    def empty(cls, pulse_model: PulseModel = Ideal()) -> "PulseTrain":
        z = np.zeros(0, dtype=np.uint8)
        return cls(z, z, z, z, z, pulse_model)


class AdversaryHook(Protocol):
    def on_train(self, train: PulseTrain, direction: str = "A2B", phase: str = "signal") -> PulseTrain:
        ...


def prepare_train(basis, bit, intensity, pulse_model: PulseModel, rng: np.random.Generator,
                  role=None) -> PulseTrain:
    """Prepare a train of pulses; photon numbers come from the pulse model."""
    basis = np.asarray(basis, dtype=np.uint8)
    bit = np.asarray(bit, dtype=np.uint8)
    n = len(basis)
    intensity = np.broadcast_to(np.asarray(intensity, dtype=np.uint8), (n,)).copy()
    if role is None:
        role = np.full(n, Role.SIGNAL, dtype=np.uint8)
    role = np.broadcast_to(np.asarray(role, dtype=np.uint8), (n,)).copy()
    if isinstance(pulse_model, WeakCoherent):
        means = np.where(intensity == IntensityClass.DECOY, pulse_model.nu, pulse_model.mu)
        photons = rng.poisson(means)
    else:
        photons = np.ones(n, dtype=np.int64)
    return PulseTrain(basis, bit, photons, role, intensity, pulse_model)


def transmit_train(train: PulseTrain, params: ChannelParams, eve: Optional[AdversaryHook],
                   rng: np.random.Generator, direction: str = "A2B",
                   phase: str = "signal") -> PulseTrain:
    """Send a train through the channel and return what arrives."""
    out = train.copy()
    if eve is not None:
        out = eve.on_train(out, direction=direction, phase=phase)
    n = len(out)
    if params.loss_prob > 0:
        out.photons = rng.binomial(out.photons, 1.0 - params.loss_prob)
    if params.flip_prob > 0:
        flips = rng.random(n) < params.flip_prob
        out.bit = out.bit ^ flips.astype(np.uint8)
    return out


def measure_train(train: PulseTrain, bases, rng: np.random.Generator) -> np.ndarray:
    """Measure each slot in ``bases``; returns int8 outcomes, -1 for erasures."""
    bases = np.asarray(bases, dtype=np.uint8)
    if len(bases) != len(train):
        raise ValueError("one measurement basis per pulse is required")
    coin = (rng.random(len(train)) < 0.5).astype(np.int8)
    out = np.where(bases == train.basis, train.bit.astype(np.int8), coin)
    return np.where(train.present, out, -1).astype(np.int8)


def prepare(basis, bit: int, intensity_class=IntensityClass.SIGNAL,
            pulse_model: PulseModel = Ideal(), rng: Optional[np.random.Generator] = None,
            role: Role = Role.SIGNAL) -> Pulse:
    if rng is None:
        rng = np.random.default_rng()
    return prepare_train([int(basis)], [bit], [int(intensity_class)], pulse_model, rng,
                         role=[int(role)])[0]


def transmit(pulse: Pulse, params: ChannelParams, eve: Optional[AdversaryHook] = None,
             rng: Optional[np.random.Generator] = None) -> Optional[Pulse]:
    """Single-pulse channel use; ``None`` when every photon was lost."""
    if rng is None:
        rng = np.random.default_rng()
    train = PulseTrain.from_pulses([pulse], params.pulse_model)
    out = transmit_train(train, params, eve, rng)
    return out[0] if out.photons[0] > 0 else None


def measure(pulse: Pulse, basis, rng: Optional[np.random.Generator] = None) -> int:
    if pulse is None or pulse.photons <= 0:
        raise ValueError("cannot measure a lost pulse")
    if rng is None:
        rng = np.random.default_rng()
    train = PulseTrain.from_pulses([pulse])
    return int(measure_train(train, [int(basis)], rng)[0])
