"""Synthetic variable-channel image dataset, storage format, and batching.

The task: 8 classes encoded by 3 bits across 6 channels of 32x32 images.
Channels 0 and 1 both encode bit 0 (a redundant pair), channel 2 encodes
bit 1, channel 3 encodes bit 2, channels 4 and 5 are pure noise. A bit is a
Gaussian blob (sigma 3 px, peak 1.0) centered at (8, 8) for 0 or (24, 24)
for 1, plus i.i.d. pixel noise on every channel. One redundant pair plus
two unique-information channels is exactly the structure the diversity
mechanisms are supposed to exploit, and the two noise channels give the
leave-out sweeps something harmless to drop.

On-disk layout (bit-exact round trip):
  manifest.json  version, channels, classes, height, width, count, seed,
                 noise_sigma, dtype ("f32le"), split
  samples.bin    little-endian float32, N x m x H x W, full-vocabulary planes
  labels.bin     little-endian uint32, length N
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError, IntegrityError, ParameterError
from .rng import stream

__all__ = [
    "ChannelVocabulary",
    "MCImage",
    "Dataset",
    "Batch",
    "SYNTH_CHANNELS",
    "SYNTH_CLASSES",
    "BIT_CHANNELS",
    "DEFAULT_PARTIAL_SUBSET",
    "gen_synth_dataset",
    "write_dataset",
    "load_dataset",
    "make_batches",
    "matched_filter_accuracy",
]

FORMAT_VERSION = 1

SYNTH_CHANNELS = ["bit0_a", "bit0_b", "bit1", "bit2", "noise_a", "noise_b"]
SYNTH_CLASSES = [f"class_{i}" for i in range(8)]

# channel index -> which label bit it encodes (noise channels absent)
BIT_CHANNELS: dict[int, int] = {0: 0, 1: 0, 2: 1, 3: 2}

# one of the redundant pair plus both unique-information channels
DEFAULT_PARTIAL_SUBSET = (0, 2, 3)

_BLOB_SIGMA = 3.0
_CENTER_BIT0 = (8, 8)
_CENTER_BIT1 = (24, 24)


@dataclass(frozen=True)
class ChannelVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ContractError(f"channel names must be unique, got {self.names}")

    @property
    def m(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class MCImage:
    channel_indices: tuple[int, ...]
    planes: np.ndarray  # (len(channel_indices), H, W) float32
    label: int

    def __post_init__(self):
        if len(self.channel_indices) != self.planes.shape[0]:
            raise ContractError(
                f"{len(self.channel_indices)} channel indices but {self.planes.shape[0]} planes"
            )
        if any(b <= a for a, b in zip(self.channel_indices, self.channel_indices[1:])):
            raise ContractError(f"channel indices must be strictly increasing: {self.channel_indices}")


@dataclass
class Dataset:
    vocabulary: ChannelVocabulary
    height: int
    width: int
    class_names: tuple[str, ...]
    planes: np.ndarray  # (N, m, H, W) float32, full vocabulary
    labels: np.ndarray  # (N,) uint32
    split: str = "train"
    seed: int = 0
    noise_sigma: float = 0.0

    def __len__(self) -> int:
        return self.planes.shape[0]

    def __getitem__(self, i: int) -> MCImage:
        return MCImage(
            channel_indices=tuple(range(self.vocabulary.m)),
            planes=self.planes[i],
            label=int(self.labels[i]),
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.vocabulary == other.vocabulary
            and (self.height, self.width) == (other.height, other.width)
            and self.class_names == other.class_names
            and self.split == other.split
            and self.seed == other.seed
            and self.noise_sigma == other.noise_sigma
            and np.array_equal(self.planes, other.planes)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class Batch:
    planes: np.ndarray  # (N, |S|, H, W) float64
    labels: np.ndarray  # (N,)
    subset: tuple[int, ...]

    def __post_init__(self):
        if len(self.subset) != self.planes.shape[1]:
            raise ContractError(f"subset {self.subset} does not match planes {self.planes.shape}")


def _blob(h: int, w: int, center: tuple[int, int]) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return np.exp(-d2 / (2.0 * _BLOB_SIGMA**2))


def gen_synth_dataset(
    n_samples: int, seed: int, noise_sigma: float, split: str = "train"
) -> Dataset:
    """Deterministic synthetic dataset; same (n, seed, sigma) -> same bits."""
    if n_samples <= 0:
        raise ParameterError(f"n_samples must be positive, got {n_samples}")
    m, h, w = len(SYNTH_CHANNELS), 32, 32
    labels = stream(seed, "labels").integers(0, 8, size=n_samples).astype(np.uint32)
    blob0 = _blob(h, w, _CENTER_BIT0)
    blob1 = _blob(h, w, _CENTER_BIT1)
    planes = np.zeros((n_samples, m, h, w), dtype=np.float64)
    for ch, bit in BIT_CHANNELS.items():
        bitvals = (labels >> bit) & 1
        planes[:, ch] = np.where(bitvals[:, None, None] == 0, blob0, blob1)
    if noise_sigma > 0:
        noise = stream(seed, "pixel-noise").normal(0.0, noise_sigma, size=planes.shape)
        planes += noise
    return Dataset(
        vocabulary=ChannelVocabulary(tuple(SYNTH_CHANNELS)),
        height=h,
        width=w,
        class_names=tuple(SYNTH_CLASSES),
        planes=planes.astype(np.float32),
        labels=labels,
        split=split,
        seed=seed,
        noise_sigma=noise_sigma,
    )


def write_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "channels": list(ds.vocabulary.names),
        "classes": list(ds.class_names),
        "height": ds.height,
        "width": ds.width,
        "count": len(ds),
        "seed": ds.seed,
        "noise_sigma": ds.noise_sigma,
        "dtype": "f32le",
        "split": ds.split,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    ds.planes.astype("<f4").tofile(out / "samples.bin")
    ds.labels.astype("<u4").tofile(out / "labels.bin")


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    mpath = src / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest {mpath}: {e}") from e
    for key in ("version", "channels", "classes", "height", "width", "count", "dtype"):
        if key not in manifest:
            raise FormatError(f"manifest {mpath} missing key '{key}'")
    if manifest["dtype"] != "f32le":
        raise FormatError(f"unsupported dtype {manifest['dtype']!r} in {mpath}")
    n = int(manifest["count"])
    m = len(manifest["channels"])
    h, w = int(manifest["height"]), int(manifest["width"])
    spath, lpath = src / "samples.bin", src / "labels.bin"
    for p in (spath, lpath):
        if not p.is_file():
            raise FormatError(f"missing data file: {p}")
    expected_samples = n * m * h * w * 4
    if spath.stat().st_size != expected_samples:
        raise IntegrityError(
            f"{spath} is {spath.stat().st_size} bytes, manifest implies {expected_samples}"
        )
    if lpath.stat().st_size != n * 4:
        raise IntegrityError(f"{lpath} is {lpath.stat().st_size} bytes, manifest implies {n * 4}")
    planes = np.fromfile(spath, dtype="<f4").reshape(n, m, h, w)
    labels = np.fromfile(lpath, dtype="<u4")
    return Dataset(
        vocabulary=ChannelVocabulary(tuple(manifest["channels"])),
        height=h,
        width=w,
        class_names=tuple(manifest["classes"]),
        planes=planes,
        labels=labels,
        split=manifest.get("split", "train"),
        seed=int(manifest.get("seed", 0)),
        noise_sigma=float(manifest.get("noise_sigma", 0.0)),
    )


def expected_samples_bytes(manifest: dict) -> int:
    """Size samples.bin must have for a given manifest."""
    return (
        int(manifest["count"])
        * len(manifest["channels"])
        * int(manifest["height"])
        * int(manifest["width"])
        * 4
    )


def make_batches(
    ds: Dataset,
    batch_size: int,
    epoch_seed: int,
    subset_provider: Callable[[], Sequence[int]],
) -> Iterator[Batch]:
    """Shuffled batches, each restricted to one sampled channel subset.

    The sample order is a deterministic function of epoch_seed; the final
    partial batch is kept. subset_provider is called once per batch.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = stream(epoch_seed, "batch-order").permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        subset = tuple(sorted(int(c) for c in subset_provider()))
        if len(subset) == 0:
            raise ContractError("subset_provider returned an empty channel subset")
        if len(set(subset)) != len(subset) or subset[-1] >= ds.vocabulary.m:
            raise ContractError(f"invalid channel subset {subset} for m={ds.vocabulary.m}")
        planes = ds.planes[np.ix_(idx, np.asarray(subset))].astype(np.float64)
        yield Batch(planes=planes, labels=ds.labels[idx].astype(np.int64), subset=subset)


def matched_filter_accuracy(ds: Dataset, channels: Sequence[int] | None = None) -> float:
    """Accuracy of the hand-coded blob-location decoder.

    For every label bit, correlates each available channel that encodes the
    bit against the two blob templates and sums the per-channel score
    differences; a bit with no available evidence channel is guessed as 0.
    This is the dataset's oracle bound; learned models are compared to it.
    """
    chans = tuple(range(ds.vocabulary.m)) if channels is None else tuple(channels)
    h, w = ds.height, ds.width
    diff = (_blob(h, w, _CENTER_BIT1) - _blob(h, w, _CENTER_BIT0)).reshape(-1)
    planes = ds.planes.astype(np.float64)
    n = len(ds)
    pred = np.zeros(n, dtype=np.int64)
    for bit in range(3):
        evidence = [c for c in chans if BIT_CHANNELS.get(c) == bit]
        if not evidence:
            continue  # guess bit = 0
        score = np.zeros(n)
        for c in evidence:
            score += planes[:, c].reshape(n, -1) @ diff
        pred |= (score > 0).astype(np.int64) << bit
    return float(np.mean(pred == ds.labels.astype(np.int64)))
