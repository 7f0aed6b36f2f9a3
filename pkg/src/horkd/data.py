"""Desk-scale datasets and recognition metrics.

The synthetic source renders one parametric template per class: an oriented
soft bar through the image center at a class-specific angle plus a small
class-keyed side blob.  Per-example jitter moves, rotates and rescales the
template before Gaussian pixel noise.  Neighboring angles stay separable at
full resolution but blur together after box downsampling, which is exactly
the regime the distillation experiments need.

IDX binary i/o follows the classic big-endian layout (magic 0x803 for
ubyte image cubes, 0x801 for label vectors).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .models import ImageBatch
from .tensor import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class DatasetSpec:
    source: str = "synthetic_shapes"
    num_classes: int = 10
    per_class: int = 100
    image_size: tuple[int, int] = (16, 16)
    noise_sigma: float = 0.22
    seed: int = 0
    train_fraction: float = 0.8
    # required iff source == "idx_files"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.source not in ("synthetic_shapes", "idx_files"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), "
                             f"got {self.train_fraction}")
        if self.source == "idx_files":
            missing = [name for name in ("train_images", "train_labels",
                                         "test_images", "test_labels")
                       if getattr(self, name) is None]
            if missing:
                raise ValueError(f"idx_files source needs paths: {missing}")


# bar geometry in units of the image half-extent
_BAR_HALF_WIDTH = 0.07
_BAR_HALF_LEN = 0.78
_BLOB_AMPLITUDE = 0.55
_BLOB_RADIUS = 0.12
_BLOB_DIST = 0.55
_CENTER_JITTER = 0.10
_ANGLE_JITTER = 0.12  # radians; class spacing is pi/num_classes
_SCALE_JITTER = 0.12


def render_example(height: int, width: int, angle: float, cx: float, cy: float,
                   scale: float, blob_side: float) -> np.ndarray:
    """Render one noiseless template instance; deterministic in its arguments."""
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = gx - cx, gy - cy
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    axial = (dx * cos_a + dy * sin_a) / scale
    perp = (-dx * sin_a + dy * cos_a) / scale
    bar = np.exp(-(perp / _BAR_HALF_WIDTH) ** 2 - (axial / _BAR_HALF_LEN) ** 8)
    bx = cx + blob_side * _BLOB_DIST * scale * -sin_a
    by = cy + blob_side * _BLOB_DIST * scale * cos_a
    blob = _BLOB_AMPLITUDE * np.exp(-(((gx - bx) ** 2 + (gy - by) ** 2)
                                      / (_BLOB_RADIUS * scale) ** 2))
    return np.clip(bar + blob, 0.0, 1.0)[:, :, None]


def generate_synthetic(spec: DatasetSpec) -> tuple[ImageBatch, ImageBatch]:
    """Seeded class-balanced train/test split of rendered template instances."""
    height, width = spec.image_size
    if height * width < spec.num_classes:
        raise ValueError(f"{height}x{width} image cannot carry "
                         f"{spec.num_classes} classes")
    rng = np.random.default_rng(spec.seed)
    images = np.empty((spec.num_classes * spec.per_class, height, width, 1))
    labels = np.empty(spec.num_classes * spec.per_class, dtype=np.int64)
    idx = 0
    for c in range(spec.num_classes):
        base_angle = np.pi * c / spec.num_classes
        blob_side = 1.0 if c % 2 == 0 else -1.0
        for _ in range(spec.per_class):
            angle = base_angle + rng.uniform(-_ANGLE_JITTER, _ANGLE_JITTER)
            cx = rng.uniform(-_CENTER_JITTER, _CENTER_JITTER)
            cy = rng.uniform(-_CENTER_JITTER, _CENTER_JITTER)
            scale = 1.0 + rng.uniform(-_SCALE_JITTER, _SCALE_JITTER)
            img = render_example(height, width, angle, cx, cy, scale, blob_side)
            if spec.noise_sigma > 0:
                img = np.clip(img + rng.normal(0.0, spec.noise_sigma, size=img.shape),
                              0.0, 1.0)
            images[idx] = img
            labels[idx] = c
            idx += 1

    n_train_per_class = int(round(spec.train_fraction * spec.per_class))
    train_idx, test_idx = [], []
    for c in range(spec.num_classes):
        members = np.flatnonzero(labels == c)
        perm = rng.permutation(members)
        train_idx.extend(perm[:n_train_per_class])
        test_idx.extend(perm[n_train_per_class:])
    train_idx = np.array(sorted(train_idx))
    test_idx = np.array(sorted(test_idx))
    return (ImageBatch(images[train_idx], labels[train_idx]),
            ImageBatch(images[test_idx], labels[test_idx]))


def load_dataset(spec: DatasetSpec) -> tuple[ImageBatch, ImageBatch]:
    if spec.source == "synthetic_shapes":
        return generate_synthetic(spec)
    train = load_idx(spec.train_images, spec.train_labels)
    test = load_idx(spec.test_images, spec.test_labels)
    return train, test


def save_idx(batch: ImageBatch, images_path, labels_path) -> None:
    """Dump a batch as IDX ubyte files (values quantized to 8 bits)."""
    m, h, w, c = batch.images.shape
    if c != 1:
        raise ValueError(f"IDX image files are single-channel, got {c} channels")
    pixels = np.round(batch.images[..., 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, m, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, m))
        fh.write(batch.labels.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path) -> ImageBatch:
    with open(images_path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise ValueError(f"truncated IDX image file {images_path}")
        magic, m, h, w = struct.unpack(">iiii", head)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"bad IDX image magic 0x{magic:08x}, "
                             f"expected 0x{IMAGE_MAGIC:08x}")
        raw = fh.read()
    if len(raw) != m * h * w:
        raise ValueError(f"IDX image file holds {len(raw)} pixels, "
                         f"header promises {m * h * w}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(m, h, w, 1) / 255.0

    with open(labels_path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise ValueError(f"truncated IDX label file {labels_path}")
        magic, n = struct.unpack(">ii", head)
        if magic != LABEL_MAGIC:
            raise ValueError(f"bad IDX label magic 0x{magic:08x}, "
                             f"expected 0x{LABEL_MAGIC:08x}")
        raw_labels = fh.read()
    if len(raw_labels) != n:
        raise ValueError(f"IDX label file holds {len(raw_labels)} labels, "
                         f"header promises {n}")
    if n != m:
        raise ValueError(f"count mismatch: {m} images vs {n} labels")
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return ImageBatch(images, labels)


def topk_error(logits, labels, k: int) -> float:
    """Fraction of rows whose label is absent from the k best logits.

    Ties rank the lower class index first, so the metric is deterministic.
    """
    scores = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m, num_classes = scores.shape
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must lie in [1, {num_classes}], got {k}")
    misses = 0
    for i in range(m):
        order = np.argsort(-scores[i], kind="stable")
        if labels[i] not in order[:k]:
            misses += 1
    return misses / m


@dataclass
class VerificationPairSet:
    """Balanced same-class / different-class index pairs."""

    pairs: list[tuple[int, int, bool]]

    def __post_init__(self):
        positives = sum(1 for _, _, same in self.pairs if same)
        if positives * 2 != len(self.pairs):
            raise ValueError(f"unbalanced pair set: {positives} positives of "
                             f"{len(self.pairs)}")

    def __len__(self) -> int:
        return len(self.pairs)


def make_verification_pairs(labels, pairs_per_side: int, seed: int) -> VerificationPairSet:
    """Sample an equal number of positive and negative index pairs."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = labels.size
    positives: list[tuple[int, int, bool]] = []
    negatives: list[tuple[int, int, bool]] = []
    guard = 0
    while (len(positives) < pairs_per_side or len(negatives) < pairs_per_side):
        guard += 1
        if guard > 200 * pairs_per_side:
            raise ValueError("could not sample balanced pairs from these labels")
        a, b = int(rng.integers(0, n)), int(rng.integers(0, n))
        if a == b:
            continue
        if labels[a] == labels[b] and len(positives) < pairs_per_side:
            positives.append((a, b, True))
        elif labels[a] != labels[b] and len(negatives) < pairs_per_side:
            negatives.append((a, b, False))
    return VerificationPairSet(positives + negatives)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def verify_pairs(embeddings, pairs: VerificationPairSet, threshold: float) -> float:
    """Same-class iff cosine similarity exceeds the threshold; returns accuracy."""
    feats = embeddings.values if isinstance(embeddings, Tensor) else \
        np.asarray(embeddings, dtype=np.float64)
    correct = 0
    for a, b, same in pairs.pairs:
        predicted = _cosine(feats[a], feats[b]) > threshold
        correct += predicted == same
    return correct / len(pairs)


def verify_pairs_sweep(embeddings, pairs: VerificationPairSet) -> tuple[float, float]:
    """Best accuracy over 101 thresholds in [-1, 1] and the threshold achieving it."""
    best_acc, best_thr = -1.0, -1.0
    for thr in np.linspace(-1.0, 1.0, 101):
        acc = verify_pairs(embeddings, pairs, float(thr))
        if acc > best_acc:
            best_acc, best_thr = acc, float(thr)
    return best_acc, best_thr
