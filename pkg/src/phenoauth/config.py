"""Scenario configuration loaded from TOML.

Every key is optional; unknown keys are rejected so typos fail loudly.
All randomness in a scenario flows from ``seed``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import BadConfig
from .protocol import ProtocolParams
from .puf_sim import EnvParams, PufConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_PUF_KEYS = {f.name for f in fields(PufConfig)} - {"nominal", "texture_grid"}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    devices: int = 3
    reference_devices: int = 2
    reference_challenges: int = 8
    puf: PufConfig = field(default_factory=PufConfig)
    l: int = 256
    r: int = 100
    t_e: float = 0.01
    enroll_challenges: int = 16
    reads_per_point: int = 2
    stable_votes: int = 7
    sessions: int = 100
    mu_trials: int = 1000
    ind_trials: int = 2000
    transport: str = "memory"
    out: str = "runs/latest"

    @property
    def t_stable(self) -> float:
        return 1.0 - self.t_e

    def protocol_params(self) -> ProtocolParams:
        return ProtocolParams(puf=self.puf, l=self.l, r=self.r, t_e=self.t_e,
                              enroll_challenges=self.enroll_challenges,
                              reads_per_point=self.reads_per_point, stable_votes=self.stable_votes)

    def validate(self) -> None:
        if self.devices < 1:
            raise BadConfig("devices must be >= 1")
        if self.transport not in ("memory", "socket"):
            raise BadConfig(f"unknown transport {self.transport!r}")
        if not 0 <= self.seed < 2**64:
            raise BadConfig("seed must be an unsigned 64-bit integer")
        if min(self.sessions, self.mu_trials, self.ind_trials) < 0:
            raise BadConfig("trial counts must be non-negative")
        try:
            self.protocol_params().validate()
        except ValueError as exc:
            raise BadConfig(str(exc)) from None

    def seed_for(self, *path: int) -> int:
        """Independent 64-bit seed for one purpose, derived from the root seed."""
        ss = np.random.SeedSequence([self.seed, *path])
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def rng(self, *path: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *path])


def from_dict(data: dict) -> ScenarioConfig:
    data = dict(data)
    known = {f.name for f in fields(ScenarioConfig)} - {"puf"}
    puf_data = data.pop("puf", {})
    unknown = set(data) - known
    if unknown:
        raise BadConfig(f"unknown config keys: {sorted(unknown)}")
    if not isinstance(puf_data, dict):
        raise BadConfig("[puf] must be a table")
    puf_data = dict(puf_data)
    nominal = puf_data.pop("nominal", None)
    bad = set(puf_data) - _PUF_KEYS
    if bad:
        raise BadConfig(f"unknown [puf] keys: {sorted(bad)}")
    for key in ("temperatures", "voltages"):
        if key in puf_data:
            puf_data[key] = tuple(float(x) for x in puf_data[key])
    puf = replace(PufConfig(), **puf_data)
    if nominal is not None:
        puf = replace(puf, nominal=EnvParams(float(nominal[0]), float(nominal[1])))
    cfg = ScenarioConfig(**data, puf=puf)
    cfg.validate()
    return cfg


def load(path: str | Path | None, **overrides) -> ScenarioConfig:
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise BadConfig(f"{path}: {exc}") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(data)
