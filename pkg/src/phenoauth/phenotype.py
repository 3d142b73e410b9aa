"""Phenotype images, labelled phenotype datasets and stable-cell extraction."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientStableCells, LengthMismatch
from .puf_sim import Challenge, DpufDevice, EnvParams, StableChallenge


def imgen(r: np.ndarray, w: int, h: int) -> np.ndarray:
    """Pack a response into an ``h x w`` grayscale image, MSB first.

    Pixel ``(row, col)`` is the byte built from bits ``[8k, 8k + 8)`` with
    ``k = row * w + col``.
    """
    bits = np.asarray(r, dtype=np.uint8)
    if bits.ndim != 1 or bits.shape[0] != 8 * w * h:
        raise LengthMismatch(f"response of {bits.size} bits cannot fill a {w}x{h} image")
    return np.packbits(bits).reshape(h, w)


def unpack(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`imgen`."""
    return np.unpackbits(np.asarray(image, dtype=np.uint8).ravel())


@dataclass(frozen=True, eq=False)
class DatasetItem:
    image: np.ndarray
    label: str
    env: EnvParams
    challenge: Challenge
    challenge_id: int
    k: int = 0

    def key(self) -> tuple:
        return (self.label, self.challenge.to_bytes(), self.env, self.k, self.image.tobytes())


@dataclass
class LabeledDataset:
    items: list[DatasetItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[DatasetItem]:
        return iter(self.items)

    def __add__(self, other: LabeledDataset) -> LabeledDataset:
        return LabeledDataset(self.items + other.items)

    @property
    def labels(self) -> list[str]:
        return sorted({it.label for it in self.items})

    def by_label(self, label: str) -> list[DatasetItem]:
        return [it for it in self.items if it.label == label]

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])


def generate_dataset(devices: Mapping[str, DpufDevice] | Sequence[tuple[str, DpufDevice]],
                     challenges: Sequence[Challenge], env_grid: Sequence[EnvParams],
                     reads_per_point: int, rng: np.random.Generator) -> LabeledDataset:
    """Read every (env, device, challenge) point ``reads_per_point`` times.

    Each device reads from its own child stream of ``rng``, so the output does
    not depend on the order devices are visited in.
    """
    pairs = list(devices.items()) if isinstance(devices, Mapping) else list(devices)
    if not pairs or not challenges or not env_grid:
        raise ValueError("devices, challenges and env_grid must all be nonempty")
    if reads_per_point < 1:
        raise ValueError("reads_per_point must be >= 1")
    streams = rng.spawn(len(pairs))
    items = []
    for env in env_grid:
        for (label, device), stream in zip(pairs, streams):
            w, h = device.config.width, device.config.height
            for cid, ch in enumerate(challenges):
                for k in range(reads_per_point):
                    r = device.read(ch, env, stream)
                    items.append(DatasetItem(imgen(r, w, h), label, env, ch, cid, k))
    return LabeledDataset(items)


def _scan_regions(device: DpufDevice, challenges: Sequence[Challenge]) -> Iterator[np.ndarray]:
    """Challenge regions in order, then the rest of the device, region by region."""
    cfg = device.config
    seen = np.zeros(cfg.cell_count, dtype=bool)
    for ch in challenges:
        cells = device.region_cells(ch)
        cells = cells[~seen[cells]]
        seen[cells] = True
        if cells.size:
            yield cells
    n = cfg.region_len
    start = (challenges[-1].region_start + challenges[-1].region_len) if challenges else 0
    for i in range(cfg.n_regions + 1):
        lo = (start + i * n) % cfg.cell_count
        cells = np.arange(lo, min(lo + n, cfg.cell_count), dtype=np.int64)
        cells = cells[~seen[cells]]
        seen[cells] = True
        if cells.size:
            yield cells
    rest = np.flatnonzero(~seen)
    if rest.size:
        yield rest


def _stable_mask(device: DpufDevice, cells: np.ndarray, env_grid: Iterable[EnvParams],
                 r: int, t_stable: float, rng: np.random.Generator):
    keep = np.ones(cells.shape[0], dtype=bool)
    polarity = None
    for env in env_grid:
        ratio = device.read_counts(cells, env, r, rng) / r
        ones = ratio >= t_stable
        zeros = ratio <= 1.0 - t_stable
        pol = ones.astype(np.uint8)
        if polarity is None:
            polarity = pol
        keep &= (ones | zeros) & (pol == polarity)
    return keep, polarity


def reliability_analysis(device: DpufDevice, challenges: Sequence[Challenge],
                         env_grid: Sequence[EnvParams], r: int, t_e: float, l: int | None,
                         rng: np.random.Generator) -> StableChallenge:
    """Find ``l`` cells whose Hamming-weight ratio clears ``1 - t_e`` at every env point.

    Cells are scanned in ascending order from each challenge's region start;
    if the challenge regions run out before ``l`` cells are found, the scan
    continues over the following regions of the device.  ``l=None`` returns
    every stable cell on the device.
    """
    t_stable = 1.0 - t_e
    if r < 100:
        raise ValueError(f"need at least 100 repeat reads, got {r}")
    if not 0.5 < t_stable <= 1.0:
        raise ValueError(f"stability threshold {t_stable} outside (0.5, 1]")
    if not env_grid:
        raise ValueError("env_grid is empty")
    found_idx, found_pol, count = [], [], 0
    for cells in _scan_regions(device, challenges):
        keep, pol = _stable_mask(device, cells, env_grid, r, t_stable, rng)
        found_idx.append(cells[keep])
        found_pol.append(pol[keep])
        count += int(keep.sum())
        if l is not None and count >= l:
            break
    idx = np.concatenate(found_idx) if found_idx else np.empty(0, dtype=np.int64)
    pol = np.concatenate(found_pol) if found_pol else np.empty(0, dtype=np.uint8)
    if l is None:
        order = np.argsort(idx, kind="stable")
        return StableChallenge(idx[order], pol[order])
    if count < l:
        raise InsufficientStableCells(f"only {count} stable cells at threshold {t_stable}, need {l}")
    return StableChallenge(idx[:l], pol[:l])


def stable_cell_map(device: DpufDevice, env_grid: Sequence[EnvParams], r: int, t_e: float,
                    rng: np.random.Generator) -> StableChallenge:
    """Every stable cell of the device, sorted by index."""
    return reliability_analysis(device, [], env_grid, r, t_e, None, rng)


def _pgm(image: np.ndarray) -> bytes:
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def _read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w).copy()


def export_dataset(dataset: LabeledDataset, directory: str | Path) -> Path:
    """Write one PGM per item plus ``index.json``; returns the index path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for it in dataset:
        name = f"{it.label}_{it.env.tag()}_{it.challenge_id}_{it.k}.pgm"
        (directory / name).write_bytes(_pgm(it.image))
        index.append({
            "file": name,
            "label": it.label,
            "env": {"temperature": it.env.temperature, "voltage": it.env.voltage},
            "challenge": it.challenge.to_bytes().hex(),
            "challenge_id": it.challenge_id,
            "k": it.k,
        })
    path = directory / "index.json"
    path.write_text(json.dumps({"version": 1, "items": index}, indent=1))
    return path


def load_dataset(directory: str | Path) -> LabeledDataset:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    items = []
    for rec in index["items"]:
        items.append(DatasetItem(
            image=_read_pgm((directory / rec["file"]).read_bytes()),
            label=rec["label"],
            env=EnvParams(rec["env"]["temperature"], rec["env"]["voltage"]),
            challenge=Challenge.from_bytes(bytes.fromhex(rec["challenge"])),
            challenge_id=rec["challenge_id"],
            k=rec["k"],
        ))
    return LabeledDataset(items)
