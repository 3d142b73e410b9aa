"""Phenotype authenticator: pooled nearest-centroid classifier with a confidence gate.

The model mean-pools each image to ``d x d`` and keeps one centroid per
enrolled label.  Confidence is the softmax weight of the winning label over
negative centroid distances, with temperature ``tau`` equal to the median
pairwise centroid distance.  The acceptance threshold is tuned on a hold-out
split so that no impostor image reaches it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DecodeError, DegenerateLabels, InsufficientData, ShapeMismatch
from .phenotype import DatasetItem, LabeledDataset, unpack

MAGIC = b"DPAN"
FORMAT_VERSION = 1


@dataclass
class DpanModel:
    labels: tuple[str, ...]
    centroids: np.ndarray  # (n_labels, d, d) float32
    d: int = 16
    tau: float = field(default=0.0)
    image_shape: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.shape != (len(self.labels), self.d, self.d):
            raise ShapeMismatch("centroid array does not match labels and d")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")
        if not self.tau:
            self.tau = _median_pairwise(self.centroids.reshape(len(self.labels), -1))


@dataclass(frozen=True)
class ConfidenceThreshold:
    value: float

    def __float__(self) -> float:
        return self.value


@dataclass
class Characterization:
    rdpuf: np.ndarray
    udpuf: np.ndarray


@dataclass
class TrainingReport:
    holdout_accuracy: float
    holdout_accept_rate: float
    tuning_genuine_min: float
    tuning_impostor_max: float
    n_train: int
    n_tune: int
    n_test: int


class Trained(NamedTuple):
    model: DpanModel
    threshold: ConfidenceThreshold
    characterization: dict[str, Characterization]
    report: TrainingReport


def _median_pairwise(flat: np.ndarray) -> float:
    n = flat.shape[0]
    if n < 2:
        return 1.0
    dists = [float(np.linalg.norm(flat[i] - flat[j])) for i in range(n) for j in range(i + 1, n)]
    return float(np.median(dists))


def pool(image: np.ndarray, d: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if h % d or w % d:
        raise ShapeMismatch(f"{h}x{w} image cannot be pooled to {d}x{d}")
    return img.reshape(d, h // d, d, w // d).mean(axis=(1, 3))


def _scores(model: DpanModel, image: np.ndarray) -> tuple[int, float, np.ndarray]:
    img = np.asarray(image)
    if img.ndim != 2 or (model.image_shape is not None and img.shape != tuple(model.image_shape)):
        raise ShapeMismatch(f"image shape {img.shape} does not match model {model.image_shape}")
    feat = pool(img, model.d)
    dists = np.sqrt(((model.centroids - feat) ** 2).sum(axis=(1, 2), dtype=np.float64))
    best = int(np.argmin(dists))
    logits = -(dists - dists[best]) / model.tau
    weights = np.exp(logits)
    return best, float(weights[best] / weights.sum()), dists


def classify(model: DpanModel, image: np.ndarray) -> tuple[str, float]:
    best, s, _ = _scores(model, image)
    return model.labels[best], s


def accept(model: DpanModel, threshold: ConfidenceThreshold | float, image: np.ndarray,
           expected_label: str) -> bool:
    """True iff the image classifies as ``expected_label`` with S >= threshold."""
    label, s = classify(model, image)
    return label == expected_label and s >= float(threshold)


def _split(items: list[DatasetItem], ratio: tuple[float, float, float]):
    """Deterministic train/tune/test split, by challenge when there are enough of them."""
    items = sorted(items, key=lambda it: (it.challenge.to_bytes(), it.env, it.k, it.image.tobytes()))
    groups: dict[bytes, list[DatasetItem]] = {}
    for it in items:
        groups.setdefault(it.challenge.to_bytes(), []).append(it)
    units = list(groups.values()) if len(groups) >= 3 else [[it] for it in items]
    n = len(units)
    n_tune = max(1, round(ratio[1] * n))
    n_test = max(1, round(ratio[2] * n))
    n_train = max(1, n - n_tune - n_test)
    parts = (units[:n_train], units[n_train:n_train + n_tune], units[n_train + n_tune:])
    return tuple([it for unit in part for it in unit] for part in parts)


def _characterize(items: list[DatasetItem]) -> Characterization:
    groups: dict[bytes, list[DatasetItem]] = {}
    for it in items:
        groups.setdefault(it.challenge.to_bytes(), []).append(it)
    stable, unstable = [], []
    for group in groups.values():
        bits = np.stack([unpack(it.image) for it in group])
        start = group[0].challenge.region_start
        cells = start + np.arange(bits.shape[1], dtype=np.int64)
        const = np.all(bits == bits[0], axis=0)
        stable.append(cells[const])
        unstable.append(cells[~const])
    return Characterization(np.unique(np.concatenate(stable)), np.unique(np.concatenate(unstable)))


def _noise_images(shape: tuple[int, int], count: int) -> list[np.ndarray]:
    rng = np.random.default_rng(0x5EED)
    return [rng.integers(0, 256, size=shape, dtype=np.uint8) for _ in range(count)]


def train(dataset: LabeledDataset, split_ratio: tuple[float, float, float] = (0.5, 0.25, 0.25),
          impostors: list[np.ndarray] | None = None, d: int = 16,
          noise_images: int = 200) -> Trained:
    """Fit centroids on the train split and tune the threshold on the tune split.

    False positives during tuning are impostor images (``impostors`` plus a
    fixed set of uniform-noise images) and enrolled images that classify as
    the wrong label.  The threshold is placed midway between the highest
    false-positive score and the lowest correctly-labelled genuine score when
    the two are separated, else just above the highest false-positive score.
    """
    unique: dict[tuple, DatasetItem] = {}
    for it in dataset:
        unique.setdefault(it.key(), it)
    items = list(unique.values())
    labels = sorted({it.label for it in items})
    if len(labels) < 2:
        raise InsufficientData("need at least two labels")
    per_label = {lab: [it for it in items if it.label == lab] for lab in labels}
    short = [lab for lab, its in per_label.items() if len(its) < 4]
    if short:
        raise InsufficientData(f"labels with fewer than 4 items: {short}")
    shapes = {it.image.shape for it in items}
    if len(shapes) != 1:
        raise ShapeMismatch(f"mixed image shapes {shapes}")
    shape = shapes.pop()

    splits = {lab: _split(its, split_ratio) for lab, its in per_label.items()}
    centroids = np.stack([
        np.mean([pool(it.image, d) for it in splits[lab][0]], axis=0) for lab in labels
    ])
    flat = centroids.reshape(len(labels), -1).astype(np.float64)
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            if np.linalg.norm(flat[i] - flat[j]) <= 1e-6 * (1.0 + np.linalg.norm(flat[i])):
                raise DegenerateLabels(f"labels {labels[i]!r} and {labels[j]!r} share a centroid")
    model = DpanModel(tuple(labels), centroids, d=d, image_shape=shape)

    genuine, false_pos = [], []
    for lab in labels:
        for it in splits[lab][1]:
            pred, s = classify(model, it.image)
            (genuine if pred == lab else false_pos).append(s)
    for img in list(impostors or []) + _noise_images(shape, noise_images):
        false_pos.append(classify(model, img)[1])
    fp_max = max(false_pos)
    gen_min = min(genuine) if genuine else 1.0
    if gen_min > fp_max:
        t_hat = 0.5 * (fp_max + gen_min)
    else:
        t_hat = float(np.nextafter(fp_max, 2.0))
    threshold = ConfidenceThreshold(min(t_hat, 1.0))

    test = [it for lab in labels for it in splits[lab][2]]
    correct = accepted = 0
    for it in test:
        pred, s = classify(model, it.image)
        correct += pred == it.label
        accepted += pred == it.label and s >= threshold.value
    n_test = max(len(test), 1)
    report = TrainingReport(
        holdout_accuracy=correct / n_test,
        holdout_accept_rate=accepted / n_test,
        tuning_genuine_min=gen_min,
        tuning_impostor_max=fp_max,
        n_train=sum(len(s[0]) for s in splits.values()),
        n_tune=sum(len(s[1]) for s in splits.values()),
        n_test=len(test),
    )
    chars = {lab: _characterize(per_label[lab]) for lab in labels}
    return Trained(model, threshold, chars, report)


def model_to_bytes(model: DpanModel, threshold: ConfidenceThreshold | float) -> bytes:
    """Binary layout: magic, u16 version, u16 label count, u16 d, per label a
    u16-length-prefixed id and d*d float32 LE, then the threshold as float64 LE."""
    out = bytearray(MAGIC)
    out += struct.pack("<HHH", FORMAT_VERSION, len(model.labels), model.d)
    for lab, cen in zip(model.labels, model.centroids):
        raw = lab.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += np.asarray(cen, dtype="<f4").tobytes()
    out += struct.pack("<d", float(threshold))
    return bytes(out)


def save_model(model: DpanModel, threshold: ConfidenceThreshold | float, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model, threshold))


def load_model(path: str | Path, image_shape: tuple[int, int] | None = None):
    return model_from_bytes(Path(path).read_bytes(), image_shape)


def model_from_bytes(data: bytes, image_shape: tuple[int, int] | None = None):
    if data[:4] != MAGIC:
        raise DecodeError("not a DPAN model file")
    try:
        version, n_labels, d = struct.unpack_from("<HHH", data, 4)
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported model format version {version}")
        pos = 10
        labels, cents = [], []
        for _ in range(n_labels):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            labels.append(data[pos:pos + n].decode())
            pos += n
            cents.append(np.frombuffer(data, dtype="<f4", count=d * d, offset=pos).reshape(d, d))
            pos += 4 * d * d
        (t_hat,) = struct.unpack_from("<d", data, pos)
        if pos + 8 != len(data):
            raise DecodeError("trailing bytes in model file")
    except struct.error as exc:
        raise DecodeError(str(exc)) from None
    if not math.isfinite(t_hat):
        raise DecodeError("non-finite threshold")
    model = DpanModel(tuple(labels), np.stack(cents), d=d, image_shape=image_shape)
    return model, ConfidenceThreshold(t_hat)
