"""Declarative session and experiment configuration (YAML or JSON).

Schema, version 1::

    schema_version: 1
    protocol: proposed            # proposed | sarg04
    kem: toy                      # toy | ml-kem-768
    n_signal: 2000
    channel: {flip_prob: 0.0, loss_prob: 0.0, pulse_model: ideal, mu: 0.5, nu: 0.1}
    auth: {auth_fraction: 0.7, sequence_len: 256,
           qber_threshold: 0.03, decoy_threshold: 0.03, gain_z_threshold: 3.0}
    qkd: {sacrifice_fraction: 0.1, qber_threshold: 0.11, security_margin: 32}
    stub_verify_latency: 0.0      # seconds, baseline signature stub only
    adversary: {strategy: passive, fraction: 1.0, mode: tamper_ct, p_block: 1.0,
                directions: [A2B, B2A], phases: [auth, signal]}

An experiment file adds ``experiment``, ``seeds``, ``output`` and a
``grid`` mapping whose keys depend on the experiment (see
:mod:`dualqkd.session.experiments`).  Any session field can appear at top
level of an experiment file and becomes the base session config.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import yaml

from ..adversary import STRATEGIES
from ..channel import ChannelParams, Ideal, WeakCoherent
from ..kem import PROVIDERS
from ..qkd.pipeline import QkdSettings
from ..quantum_auth import AuthRatioConfig

SCHEMA_VERSION = 1
PROTOCOLS = ("proposed", "sarg04")
EXPERIMENTS = ("fig2_qber_vs_keysize", "fig3_rate_vs_error", "table2_runtime",
               "table4_efficiency", "attack_matrix")


class ConfigError(ValueError):
    pass


@dataclass
class ChannelConfig:
    flip_prob: float = 0.0
    loss_prob: float = 0.0
    pulse_model: str = "ideal"
    mu: float = 0.5
    nu: float = 0.1

    def params(self) -> ChannelParams:
        if self.pulse_model == "ideal":
            model = Ideal()
        elif self.pulse_model == "weak_coherent":
            model = WeakCoherent(self.mu, self.nu)
        else:
            raise ConfigError(f"unknown pulse model {self.pulse_model!r}")
        return ChannelParams(self.flip_prob, self.loss_prob, model)


@dataclass
class AuthConfig:
    auth_fraction: float = 0.7
    sequence_len: int = 256
    qber_threshold: float = 0.03
    decoy_threshold: float = 0.03
    gain_z_threshold: float = 3.0

    def ratio(self) -> AuthRatioConfig:
        return AuthRatioConfig(self.auth_fraction, self.sequence_len)

    def thresholds(self) -> dict:
        # exact rationals so "> 3%" is not at the mercy of float rounding
        return dict(qber_threshold=Fraction(str(self.qber_threshold)),
                    decoy_threshold=Fraction(str(self.decoy_threshold)),
                    gain_z_threshold=self.gain_z_threshold)


@dataclass
class AdversaryConfig:
    strategy: Optional[str] = None
    fraction: float = 1.0
    mode: str = "tamper_ct"
    p_block: float = 1.0
    directions: list = field(default_factory=lambda: ["A2B", "B2A"])
    phases: list = field(default_factory=lambda: ["auth", "signal"])


@dataclass
class SessionConfig:
    protocol: str = "proposed"
    kem: str = "toy"
    n_signal: int = 2000
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    auth: AuthConfig = field(default_factory=AuthConfig)
    qkd: QkdSettings = field(default_factory=QkdSettings)
    stub_verify_latency: float = 0.0
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "SessionConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if self.kem not in PROVIDERS:
            raise ConfigError(f"kem must be one of {sorted(PROVIDERS)}")
        if self.n_signal < 0:
            raise ConfigError("n_signal cannot be negative")
        if self.adversary.strategy is not None and self.adversary.strategy not in STRATEGIES:
            raise ConfigError(f"adversary strategy must be one of {STRATEGIES}")
        try:
            self.channel.params()
            self.auth.ratio()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown session keys: {sorted(unknown)}")
        nested = {"channel": ChannelConfig, "auth": AuthConfig, "qkd": QkdSettings,
                  "adversary": AdversaryConfig}
        for key, typ in nested.items():
            if key in data:
                sub = data[key] or {}
                names = {f.name for f in dataclasses.fields(typ)}
                bad = set(sub) - names
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                data[key] = typ(**sub)
        return cls(**data).validate()

    def with_overrides(self, **changes) -> "SessionConfig":
        """Copy with dotted-path overrides, e.g. ``{"channel.flip_prob": 0.01}``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return SessionConfig.from_dict(d)


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list
    session: SessionConfig = field(default_factory=SessionConfig)
    grid: dict = field(default_factory=dict)
    output: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        return self

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "experiment": self.experiment,
                "seeds": list(self.seeds), "grid": copy.deepcopy(self.grid),
                "output": self.output, "session": self.session.to_dict()}

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output")
        return config_digest(d)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        top = {k: data.pop(k) for k in ("experiment", "seeds", "grid", "output", "schema_version")
               if k in data}
        if "experiment" not in top:
            raise ConfigError("missing 'experiment'")
        session = data.pop("session", {})
        session = {**session, **data}
        if "schema_version" in top:
            session.setdefault("schema_version", top["schema_version"])
        return cls(session=SessionConfig.from_dict(session),
                   seeds=list(top.get("seeds") or []), grid=top.get("grid") or {},
                   output=top.get("output"), experiment=top["experiment"],
                   schema_version=top.get("schema_version", SCHEMA_VERSION)).validate()


def config_digest(d: dict) -> str:
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_document(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        return json.loads(text)
    return yaml.safe_load(text) or {}


def load_session_config(path) -> SessionConfig:
    d = load_document(path)
    for k in ("experiment", "seeds", "grid", "output"):
        d.pop(k, None)
    return SessionConfig.from_dict(d.pop("session", {}) | d)


def load_experiment_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_document(path))
