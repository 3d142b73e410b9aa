"""Statistical DRAM PUF simulator.

The device is a linear array of cells tiled into *mats* of ``region_len`` cells
(``height`` rows of ``8 * width`` cells), so that one mat read in row-major
order is exactly one phenotype image.  Each cell has a failure probability
under reduced-latency reads:

* a fixed fraction of super-stable cells sits at ``super_error`` or
  ``1 - super_error`` regardless of environment;
* every other cell draws its bias from a ``Beta(a, a)`` body, shifted in logit
  space by a per-device signature texture and by per-cell temperature and
  voltage sensitivities, then squeezed into ``[body_low, body_high]``.

The signature texture is a smooth random field over mat coordinates, shared by
all mats of a device; it is what makes any region of the device classifiable.
Reads return the failure map (readout XOR written pattern), so the write
pattern does not change the noisy response.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .crypto import digest
from .errors import BadConfig, InsufficientStableCells, OutOfRange


@dataclass(frozen=True, order=True)
class EnvParams:
    temperature: float  # degrees C
    voltage: float  # volts

    def tag(self) -> str:
        return f"{self.temperature:g}C-{self.voltage:.2f}V"


@dataclass(frozen=True)
class PufConfig:
    cell_count: int = 1 << 20
    width: int = 64
    height: int = 64
    f_super: float = 0.0267
    super_error: float = 1e-6
    beta_a: float = 0.15
    body_low: float = 0.05
    body_high: float = 0.95
    texture_strength: float = 2.5
    texture_grid: tuple[int, int] = (16, 16)
    texture_smoothing: float = 0.7
    cell_sensitivity: float = 0.4
    temperature_drift: float = 0.25
    voltage_drift: float = -0.25
    temperatures: tuple[float, ...] = (20.0, 40.0, 60.0)
    voltages: tuple[float, ...] = (1.35, 1.5)
    nominal: EnvParams = EnvParams(40.0, 1.5)
    temperature_unit: float = 20.0
    voltage_unit: float = 0.15

    @property
    def row_width(self) -> int:
        return 8 * self.width

    @property
    def region_len(self) -> int:
        return 8 * self.width * self.height

    @property
    def n_regions(self) -> int:
        return self.cell_count // self.region_len

    def env_grid(self) -> list[EnvParams]:
        return [EnvParams(t, v) for t in self.temperatures for v in self.voltages]

    def validate(self) -> None:
        if self.cell_count <= 0:
            raise BadConfig("device needs at least one cell")
        if not 0.0 < self.f_super <= 1.0:
            raise BadConfig(f"f_super must lie in (0, 1], got {self.f_super}")
        if self.width <= 0 or self.height <= 0:
            raise BadConfig("image dimensions must be positive")
        if self.cell_count % self.region_len:
            raise BadConfig("cell_count must be a whole number of regions")
        if not 0.0 <= self.super_error <= 0.01:
            raise BadConfig("super-stable cells must have error rate <= 0.01")
        if not 0.0 < self.body_low < self.body_high < 1.0:
            raise BadConfig("body bounds must satisfy 0 < low < high < 1")
        gh, gw = self.texture_grid
        if self.height % gh or self.row_width % gw:
            raise BadConfig("texture grid must tile the region")
        if not self.temperatures or not self.voltages:
            raise BadConfig("environment grid is empty")


@dataclass(frozen=True)
class Challenge:
    region_start: int
    region_len: int
    pattern: int
    session_index: int

    _FMT = struct.Struct("<QIBQ")

    def to_bytes(self) -> bytes:
        return self._FMT.pack(self.region_start, self.region_len, self.pattern, self.session_index)

    @classmethod
    def from_bytes(cls, data: bytes) -> Challenge:
        return cls(*cls._FMT.unpack(data))


@dataclass
class StableChallenge:
    cell_indices: np.ndarray
    expected_polarity: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.cell_indices)


def _smooth_periodic(field_: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return field_
    ky = np.fft.fftfreq(field_.shape[0])[:, None]
    kx = np.fft.fftfreq(field_.shape[1])[None, :]
    kernel = np.exp(-2.0 * (math.pi * sigma) ** 2 * (kx**2 + ky**2))
    return np.real(np.fft.ifft2(np.fft.fft2(field_) * kernel))


@dataclass(eq=False)
class DpufDevice:
    """One simulated DRAM PUF; immutable apart from its internal caches."""

    device_seed: int
    config: PufConfig = field(default_factory=PufConfig)
    bias_override: np.ndarray | None = None
    cache_size: int = 128

    def __post_init__(self) -> None:
        self.config.validate()
        if self.bias_override is not None:
            self.bias_override = np.asarray(self.bias_override, dtype=np.float64)
            if self.bias_override.shape != (self.config.cell_count,):
                raise BadConfig("bias_override must give one probability per cell")
        self._base: OrderedDict[int, tuple] = OrderedDict()
        self._bias: OrderedDict[tuple[int, EnvParams], np.ndarray] = OrderedDict()
        self._texture = self._make_texture()

    def _make_texture(self) -> np.ndarray:
        cfg = self.config
        gh, gw = cfg.texture_grid
        rng = np.random.default_rng([self.device_seed, 0])
        coarse = _smooth_periodic(rng.standard_normal((gh, gw)), cfg.texture_smoothing)
        coarse = (coarse - coarse.mean()) / (coarse.std() or 1.0)
        full = np.repeat(np.repeat(coarse, cfg.height // gh, axis=0), cfg.row_width // gw, axis=1)
        return (cfg.texture_strength * full.ravel()).astype(np.float32)

    def _mat_base(self, mat: int):
        hit = self._base.get(mat)
        if hit is not None:
            self._base.move_to_end(mat)
            return hit
        cfg = self.config
        n = cfg.region_len
        rng = np.random.default_rng([self.device_seed, 1, mat])
        b = np.clip(rng.beta(cfg.beta_a, cfg.beta_a, n), 1e-12, 1 - 1e-12)
        body = np.log(b / (1.0 - b)).astype(np.float32)
        sens_t = rng.normal(0.0, cfg.cell_sensitivity, n).astype(np.float32)
        sens_v = rng.normal(0.0, cfg.cell_sensitivity, n).astype(np.float32)
        k = math.ceil(cfg.f_super * n)
        super_idx = np.sort(rng.choice(n, size=k, replace=False))
        super_pol = rng.integers(0, 2, size=k).astype(np.uint8)
        hit = (body, sens_t, sens_v, super_idx, super_pol)
        self._base[mat] = hit
        if len(self._base) > self.cache_size:
            self._base.popitem(last=False)
        return hit

    def mat_bias(self, mat: int, env: EnvParams) -> np.ndarray:
        """Failure probability of every cell of ``mat`` under ``env``."""
        key = (mat, env)
        hit = self._bias.get(key)
        if hit is not None:
            self._bias.move_to_end(key)
            return hit
        cfg = self.config
        if self.bias_override is not None:
            p = self.bias_override[mat * cfg.region_len:(mat + 1) * cfg.region_len]
        else:
            body, sens_t, sens_v, super_idx, super_pol = self._mat_base(mat)
            dt = (env.temperature - cfg.nominal.temperature) / cfg.temperature_unit
            dv = (env.voltage - cfg.nominal.voltage) / cfg.voltage_unit
            z = body + self._texture + sens_t * np.float32(dt) + sens_v * np.float32(dv)
            z += np.float32(cfg.temperature_drift * dt + cfg.voltage_drift * dv)
            p = cfg.body_low + (cfg.body_high - cfg.body_low) / (1.0 + np.exp(-z.astype(np.float64)))
            p[super_idx] = np.where(super_pol == 1, 1.0 - cfg.super_error, cfg.super_error)
        self._bias[key] = p
        if len(self._bias) > self.cache_size:
            self._bias.popitem(last=False)
        return p

    def bias(self, cells: np.ndarray, env: EnvParams) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        self._check_cells(cells)
        n = self.config.region_len
        mats = cells // n
        out = np.empty(cells.shape, dtype=np.float64)
        for mat in np.unique(mats):
            sel = mats == mat
            out[sel] = self.mat_bias(int(mat), env)[cells[sel] - mat * n]
        return out

    def _check_cells(self, cells: np.ndarray) -> None:
        if cells.size and (cells.min() < 0 or cells.max() >= self.config.cell_count):
            raise OutOfRange("cell index outside device")

    def region_cells(self, challenge: Challenge) -> np.ndarray:
        start, length = challenge.region_start, challenge.region_len
        if start < 0 or length <= 0 or start + length > self.config.cell_count:
            raise OutOfRange(f"region [{start}, {start + length}) exceeds {self.config.cell_count} cells")
        return np.arange(start, start + length, dtype=np.int64)

    def region_bias(self, challenge: Challenge, env: EnvParams) -> np.ndarray:
        n = self.config.region_len
        start = challenge.region_start
        if challenge.region_len == n and start % n == 0 and start + n <= self.config.cell_count:
            return self.mat_bias(start // n, env)
        return self.bias(self.region_cells(challenge), env)

    def read(self, challenge: Challenge, env: EnvParams, rng: np.random.Generator) -> np.ndarray:
        """One noisy readout of the challenge region, as a 0/1 uint8 array."""
        p = self.region_bias(challenge, env)
        return (rng.random(p.shape[0]) < p).astype(np.uint8)

    def read_counts(self, cells: np.ndarray, env: EnvParams, r: int,
                    rng: np.random.Generator) -> np.ndarray:
        """Hamming weight of ``r`` independent reads of each cell.

        Reads are independent Bernoulli draws, so the sum is drawn directly
        from the binomial distribution.
        """
        return rng.binomial(r, self.bias(cells, env))

    def reliability(self, cells: np.ndarray, env: EnvParams) -> np.ndarray:
        p = self.bias(cells, env)
        return np.maximum(p, 1.0 - p)

    def min_reliability(self, cells: np.ndarray, env_grid) -> np.ndarray:
        return np.min([self.reliability(cells, env) for env in env_grid], axis=0)

    def nominal_majority(self, challenge: Challenge) -> np.ndarray:
        return (self.region_bias(challenge, self.config.nominal) > 0.5).astype(np.uint8)


def new_device(device_seed: int, config: PufConfig | None = None) -> DpufDevice:
    return DpufDevice(int(device_seed), config or PufConfig())


def read_stable(device: DpufDevice, sc: StableChallenge, env: EnvParams,
                rng: np.random.Generator, votes: int = 1) -> np.ndarray:
    """Read the stable cells; with ``votes > 1`` each bit is the majority of that many reads."""
    if votes < 1 or votes % 2 == 0:
        raise ValueError("votes must be a positive odd number")
    cells = np.asarray(sc.cell_indices, dtype=np.int64)
    p = device.bias(cells, env)
    ones = (rng.random((votes, cells.shape[0])) < p).sum(axis=0)
    return (ones > votes // 2).astype(np.uint8)


def random_challenge(config: PufConfig, rng: np.random.Generator) -> Challenge:
    return Challenge(
        region_start=int(rng.integers(config.n_regions)) * config.region_len,
        region_len=config.region_len,
        pattern=int(rng.integers(256)),
        session_index=int(rng.integers(0, 2**64, dtype=np.uint64)),
    )


def derive_next_challenge(c: Challenge, mk, geometry: PufConfig) -> Challenge:
    """Hash-chain the challenge: digest = SHA-256(C_i bytes || mk).

    pattern = digest[0]; region index = u64le(digest[1:9]) mod n_regions, scaled
    by region_len so regions stay aligned to the device's mats.
    """
    d = digest(c.to_bytes() + bytes(mk))
    offset = int.from_bytes(d[1:9], "little")
    return Challenge(
        region_start=(offset % geometry.n_regions) * geometry.region_len,
        region_len=geometry.region_len,
        pattern=d[0],
        session_index=(c.session_index + 1) % 2**64,
    )


def stable_challenge_for(challenge: Challenge, stable_map: np.ndarray, l: int) -> StableChallenge:
    """Select the ``l`` stable cells that key-generation uses for ``challenge``.

    Scanning starts at an anchor inside the challenge region offset by the
    write pattern, and wraps around the device's stable-cell map.
    """
    stable_map = np.asarray(stable_map, dtype=np.int64)
    if len(stable_map) < l:
        raise InsufficientStableCells(f"stable map holds {len(stable_map)} cells, need {l}")
    anchor = challenge.region_start + challenge.pattern * (challenge.region_len // 256)
    pos = int(np.searchsorted(stable_map, anchor))
    return StableChallenge(stable_map[(pos + np.arange(l)) % len(stable_map)])
