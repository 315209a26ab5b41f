"""Datasets: CIFAR-10 binary ingestion, a synthetic ordinal fusion-stage
generator, a labeled-folder loader, deterministic splits, and augmentation.

All loaders produce an immutable :class:`DatasetSplit` of uint8 NCHW images
with disjoint train/val/test partitions, per-channel normalization
statistics computed on the training partition, and provenance (source,
seed, file hashes) sufficient to reproduce the split.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .seeding import numpy_generator

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORD_BYTES = 3073          # 1 label byte + 32*32*3 pixel bytes
CIFAR10_RECORDS_PER_FILE = 10_000
CIFAR10_FILE_BYTES = CIFAR10_RECORD_BYTES * CIFAR10_RECORDS_PER_FILE
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")


@dataclass
class DatasetSplit:
    """Disjoint train/val/test partitions of labeled uint8 NCHW images."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: tuple[str, ...]
    normalization: tuple[tuple[float, ...], tuple[float, ...]]
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split part {name!r}")
        return (getattr(self, f"{name}_images"), getattr(self, f"{name}_labels"))

    def class_counts(self, part: str = "train") -> list[int]:
        _, labels = self.part(part)
        return np.bincount(labels, minlength=self.num_classes).tolist()

    def manifest(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "image_shape": list(self.image_shape),
            "sizes": {p: int(len(self.part(p)[1]))
                      for p in ("train", "val", "test")},
            "class_counts": {p: self.class_counts(p)
                             for p in ("train", "val", "test")},
            "normalization": {"mean": list(self.normalization[0]),
                              "std": list(self.normalization[1])},
            "provenance": self.provenance,
        }


def _channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    # Integer moment accumulation; avoids a float64 copy of the whole set.
    pixels = images.shape[0] * images.shape[2] * images.shape[3]
    totals = np.einsum("nchw->c", images, dtype=np.int64)
    squares = np.einsum("nchw,nchw->c", images, images, dtype=np.int64)
    mean = totals / pixels / 255.0
    var = squares / pixels / 255.0**2 - mean**2
    std = np.maximum(np.sqrt(np.maximum(var, 0.0)), 1e-6)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def stratified_split(labels: np.ndarray, fractions: tuple[float, float],
                     seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class shuffled (train, val, test) index split; val/test sizes are
    per-class rounded so class proportions are preserved within one sample."""
    val_frac, test_frac = fractions
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise ConfigError(f"invalid split fractions {fractions}")
    rng = numpy_generator(seed)
    train_idx, val_idx, test_idx = [], [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_frac * len(idx)))
        n_test = int(round(test_frac * len(idx)))
        val_idx.append(idx[:n_val])
        test_idx.append(idx[n_val: n_val + n_test])
        train_idx.append(idx[n_val + n_test:])
    return (np.sort(np.concatenate(train_idx)),
            np.sort(np.concatenate(val_idx)),
            np.sort(np.concatenate(test_idx)))


def _assemble_split(images, labels, train_idx, val_idx, test_idx, class_names,
                    provenance) -> DatasetSplit:
    split = DatasetSplit(
        train_images=images[train_idx], train_labels=labels[train_idx],
        val_images=images[val_idx], val_labels=labels[val_idx],
        test_images=images[test_idx], test_labels=labels[test_idx],
        class_names=tuple(class_names),
        normalization=_channel_stats(images[train_idx]),
        provenance=provenance,
    )
    return split


def load_cifar10(root, *, val_fraction: float = 0.1, seed: int = 0,
                 expected_checksums: dict[str, str] | None = None) -> DatasetSplit:
    """Load the CIFAR-10 binary-version files from ``root``.

    Each file holds 10,000 records of 3,073 bytes: one label byte followed
    by the red, green, and blue 32x32 planes in row-major order. File sizes
    are always validated; per-file SHA-256 digests are recorded in the
    provenance and checked against ``expected_checksums`` when supplied.
    A validation split is carved from the 50,000 training images,
    stratified per class with the given seed.
    """
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    filenames = (*CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILE)
    blobs, digests = {}, {}
    for fname in filenames:
        path = root / fname
        if not path.is_file():
            raise DataError(
                f"missing CIFAR-10 file {path} (expected {CIFAR10_FILE_BYTES:,} "
                f"bytes of 10,000 x 3,073-byte records)"
            )
        raw = path.read_bytes()
        if len(raw) != CIFAR10_FILE_BYTES:
            raise DataError(
                f"corrupt CIFAR-10 file {path}: expected {CIFAR10_FILE_BYTES:,} "
                f"bytes, found {len(raw):,} "
                f"({CIFAR10_FILE_BYTES - len(raw):+,} byte deficit)"
            )
        digests[fname] = hashlib.sha256(raw).hexdigest()
        if expected_checksums and fname in expected_checksums:
            if digests[fname] != expected_checksums[fname].lower():
                raise DataError(
                    f"checksum mismatch for {path}: expected "
                    f"{expected_checksums[fname]}, computed {digests[fname]}"
                )
        blobs[fname] = raw

    def parse(fname):
        records = np.frombuffer(blobs[fname], dtype=np.uint8)
        records = records.reshape(CIFAR10_RECORDS_PER_FILE, CIFAR10_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise DataError(f"corrupt CIFAR-10 file {fname}: label byte > 9")
        images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
        return images, labels

    train_parts = [parse(f) for f in CIFAR10_TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = parse(CIFAR10_TEST_FILE)

    train_idx, val_idx, _ = stratified_split(train_labels, (val_fraction, 0.0),
                                             seed)
    return DatasetSplit(
        train_images=train_images[train_idx],
        train_labels=train_labels[train_idx],
        val_images=train_images[val_idx],
        val_labels=train_labels[val_idx],
        test_images=test_images,
        test_labels=test_labels,
        class_names=CIFAR10_CLASSES,
        normalization=_channel_stats(train_images[train_idx]),
        provenance={"source": "cifar10", "root": str(root), "seed": seed,
                    "val_fraction": val_fraction, "file_sha256": digests},
    )


@dataclass(frozen=True)
class SynthFusionConfig:
    """Synthetic stand-in for an ordinal bone-fusion staging task.

    Images show two bright bone-like lobes separated by a dark (radiolucent)
    gap whose width and continuity shrink monotonically with the stage:
    stage 1 is fully open, the last stage fully fused. Class counts default
    to the 723-scan staging distribution (159, 92, 92, 125, 255).
    """

    num_classes: int = 5
    class_counts: tuple[int, ...] = (159, 92, 92, 125, 255)
    image_size: int = 96
    gap_fraction_per_stage: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25, 0.0)
    noise_level: float = 0.04
    pose_jitter_deg: float = 6.0
    pose_jitter_px: int = 3
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.class_counts) != self.num_classes:
            raise ConfigError("class_counts length must equal num_classes")
        if len(self.gap_fraction_per_stage) != self.num_classes:
            raise ConfigError("need one gap fraction per stage")
        if any(c < 1 for c in self.class_counts):
            raise ConfigError(f"class counts must be positive: {self.class_counts}")
        gaps = self.gap_fraction_per_stage
        if any(b >= a for a, b in zip(gaps, gaps[1:])):
            raise ConfigError(
                f"gap fractions must be strictly decreasing, got {gaps}")
        if any(g < 0 or g > 1 for g in gaps):
            raise ConfigError(f"gap fractions must lie in [0, 1], got {gaps}")
        if self.image_size < 16:
            raise ConfigError(f"image size {self.image_size} too small to render")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes,
                "class_counts": list(self.class_counts),
                "image_size": self.image_size,
                "gap_fraction_per_stage": list(self.gap_fraction_per_stage),
                "noise_level": self.noise_level,
                "pose_jitter_deg": self.pose_jitter_deg,
                "pose_jitter_px": self.pose_jitter_px,
                "val_fraction": self.val_fraction,
                "test_fraction": self.test_fraction,
                "seed": self.seed}


def _render_fusion_image(size: int, gap_fraction: float, cfg: SynthFusionConfig,
                         rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0

    # Convex bone body with a mildly irregular outline.
    ax = size * rng.uniform(0.36, 0.42)
    ay = size * rng.uniform(0.26, 0.32)
    wobble = 1.0 + 0.05 * np.sin(2 * np.pi * xx / size * rng.uniform(1.0, 2.0)
                                 + rng.uniform(0, 2 * np.pi))
    body = ((xx - cx) / ax) ** 2 + ((yy - cy) / (ay * wobble)) ** 2 <= 1.0

    # Radiolucent gap: a dark band around a gently curved interface. Width
    # scales with the stage's gap fraction; bridging columns fuse across it
    # as the fraction drops.
    g_max = 0.055 * size
    interface = cy + 0.03 * size * np.sin(
        2 * np.pi * xx / size * rng.uniform(0.8, 1.6)
        + rng.uniform(0, 2 * np.pi))
    half_width = np.maximum(g_max * gap_fraction, 0.0)
    gap_band = np.abs(yy - interface) <= half_width
    bridge_phase = rng.uniform(0, 2 * np.pi)
    bridge_freq = rng.uniform(2.0, 4.0)
    bridge_profile = 0.5 + 0.5 * np.sin(
        2 * np.pi * xx[0] / size * bridge_freq + bridge_phase)
    fused_cols = bridge_profile < (1.0 - gap_fraction)
    gap = gap_band & body & ~fused_cols[None, :]

    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0)
    img = np.full((size, size), 0.08)
    img[body] = 0.72 + 0.10 * texture[body]
    img[gap] = 0.10 + 0.02 * texture[gap]
    img = ndimage.gaussian_filter(img, 0.7)

    if cfg.pose_jitter_deg > 0:
        img = ndimage.rotate(img, rng.uniform(-cfg.pose_jitter_deg,
                                              cfg.pose_jitter_deg),
                             reshape=False, order=1, mode="nearest")
    if cfg.pose_jitter_px > 0:
        dy, dx = rng.integers(-cfg.pose_jitter_px, cfg.pose_jitter_px + 1, 2)
        img = ndimage.shift(img, (dy, dx), order=1, mode="nearest")
    if cfg.noise_level > 0:
        img = img + cfg.noise_level * rng.standard_normal((size, size))
    return (np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synth_fusion(cfg: SynthFusionConfig) -> DatasetSplit:
    """Render the synthetic fusion-stage dataset; byte-identical per config."""
    rng = numpy_generator(cfg.seed)
    total = sum(cfg.class_counts)
    images = np.empty((total, 1, cfg.image_size, cfg.image_size), dtype=np.uint8)
    labels = np.empty(total, dtype=np.int64)
    i = 0
    for stage0, count in enumerate(cfg.class_counts):
        gf = cfg.gap_fraction_per_stage[stage0]
        for _ in range(count):
            images[i, 0] = _render_fusion_image(cfg.image_size, gf, cfg, rng)
            labels[i] = stage0
            i += 1
    train_idx, val_idx, test_idx = stratified_split(
        labels, (cfg.val_fraction, cfg.test_fraction),
        seed=cfg.seed ^ 0x5EED)
    names = tuple(f"stage-{s}" for s in range(1, cfg.num_classes + 1))
    return _assemble_split(images, labels, train_idx, val_idx, test_idx, names,
                           {"source": "synth-fusion", "config": cfg.to_dict()})


_RASTER_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def load_image_folder(root, *, image_size: int, grayscale: bool = False,
                      val_fraction: float = 0.1, test_fraction: float = 0.2,
                      seed: int = 0) -> DatasetSplit:
    """Load a labeled-folder dataset: one subdirectory per class containing
    common raster images, resized to ``image_size`` squares."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} contains no class subdirectories")
    mode = "L" if grayscale else "RGB"
    channels = 1 if grayscale else 3
    images, labels = [], []
    for cls_idx, cls_dir in enumerate(class_dirs):
        files = sorted(p for p in cls_dir.iterdir()
                       if p.suffix.lower() in _RASTER_SUFFIXES)
        if not files:
            raise DataError(f"class directory {cls_dir} holds no raster images")
        for path in files:
            with Image.open(path) as im:
                im = im.convert(mode).resize((image_size, image_size),
                                             Image.BILINEAR)
                arr = np.asarray(im, dtype=np.uint8)
            if grayscale:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(cls_idx)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    train_idx, val_idx, test_idx = stratified_split(
        labels, (val_fraction, test_fraction), seed)
    return _assemble_split(
        images, labels, train_idx, val_idx, test_idx,
        tuple(d.name for d in class_dirs),
        {"source": "image-folder", "root": str(root), "seed": seed,
         "channels": channels, "image_size": image_size})


@dataclass(frozen=True)
class AugmentPolicy:
    """Train-time augmentation; the default is the identity policy."""

    hflip_prob: float = 0.0
    crop_padding: int = 0
    brightness: float = 0.0
    contrast: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (self.hflip_prob == 0 and self.crop_padding == 0
                and self.brightness == 0 and self.contrast == 0)

    def to_dict(self) -> dict:
        return {"hflip_prob": self.hflip_prob, "crop_padding": self.crop_padding,
                "brightness": self.brightness, "contrast": self.contrast}


def augment(images: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator) -> np.ndarray:
    """Apply ``policy`` to a uint8 NCHW batch, drawing randomness only from
    ``rng``. The identity policy returns the input unchanged."""
    if policy.is_identity:
        return images
    n = images.shape[0]
    out = images
    if policy.crop_padding > 0:
        p = policy.crop_padding
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        h, w = images.shape[2:]
        out = np.stack([padded[i, :, oy: oy + h, ox: ox + w]
                        for i, (oy, ox) in enumerate(offsets)])
    if policy.hflip_prob > 0:
        flips = rng.random(n) < policy.hflip_prob
        out = out.copy() if out is images else out
        out[flips] = out[flips, :, :, ::-1]
    if policy.brightness > 0 or policy.contrast > 0:
        scaled = out.astype(np.float32)
        if policy.brightness > 0:
            factors = 1.0 + rng.uniform(-policy.brightness, policy.brightness,
                                        size=(n, 1, 1, 1)).astype(np.float32)
            scaled = scaled * factors
        if policy.contrast > 0:
            factors = 1.0 + rng.uniform(-policy.contrast, policy.contrast,
                                        size=(n, 1, 1, 1)).astype(np.float32)
            means = scaled.mean(axis=(2, 3), keepdims=True)
            scaled = (scaled - means) * factors + means
        out = np.clip(scaled, 0.0, 255.0).astype(np.uint8)
    return out


def batch_preparer(normalization, target_channels: int):
    """Return a function mapping a uint8 NCHW batch to a normalized float32
    torch tensor, replicating single-channel data to ``target_channels``
    when the consuming stem expects more."""
    import torch

    mean = np.asarray(normalization[0], dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(normalization[1], dtype=np.float32).reshape(1, -1, 1, 1)

    def prepare(batch: np.ndarray) -> "torch.Tensor":
        x = batch.astype(np.float32) / 255.0
        x = (x - mean) / std
        if x.shape[1] != target_channels:
            if x.shape[1] == 1:
                x = np.repeat(x, target_channels, axis=1)
            else:
                raise DataError(
                    f"batch has {x.shape[1]} channels but the network "
                    f"expects {target_channels}"
                )
        return torch.from_numpy(np.ascontiguousarray(x))

    return prepare


def subsample_train(split: DatasetSplit, n: int, seed: int) -> DatasetSplit:
    """Stratified subsample of the training partition (val/test untouched)."""
    if n >= len(split.train_labels):
        return split
    labels = split.train_labels
    rng = numpy_generator(seed)
    per_class = np.bincount(labels, minlength=split.num_classes)
    quota = np.maximum((per_class * (n / len(labels))).round().astype(int), 1)
    keep = []
    for cls in range(split.num_classes):
        idx = np.nonzero(labels == cls)[0]
        keep.append(idx[rng.permutation(len(idx))[: quota[cls]]])
    keep = np.sort(np.concatenate(keep))
    prov = dict(split.provenance)
    prov["train_subsample"] = {"n": int(len(keep)), "seed": seed}
    return DatasetSplit(
        train_images=split.train_images[keep],
        train_labels=split.train_labels[keep],
        val_images=split.val_images, val_labels=split.val_labels,
        test_images=split.test_images, test_labels=split.test_labels,
        class_names=split.class_names,
        normalization=_channel_stats(split.train_images[keep]),
        provenance=prov,
    )
