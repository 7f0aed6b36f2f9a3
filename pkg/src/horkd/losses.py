"""Hybrid-order relational distillation losses.

Four losses compare a frozen teacher embedding batch against a student
batch: pointwise L1 (order 1), normalized pairwise-distance discrepancy
(order 2), triplet angle discrepancy under a Huber penalty (order 3), and
distance-to-class-center discrepancy (center-based).  The teacher side is
always constant; gradients flow only into the student tensor, including
through the student's own pairwise-distance normalizer.

A batch of m examples yields m*(m-1)/2 distinct pairs and C(m,3) distinct
triplets; triplets beyond ``max_triplets`` are a seeded uniform sample, and
the same tuple index set always addresses both streams.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-12


class BatchTooSmallError(ValueError):
    """The mini-batch has fewer examples than an enabled loss needs."""


@dataclass
class FeatureBatch:
    """m embeddings with aligned integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be a nonempty 2-D matrix, "
                             f"got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.features.shape[0]} rows but labels shape "
                             f"{self.labels.shape}")


@dataclass
class ClassCenters:
    """Per-class mean teacher embeddings; count 0 marks an absent class."""

    centers: np.ndarray
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)


@dataclass
class PairwiseStats:
    """Full L2 distance matrix and the mean over distinct pairs."""

    distances: np.ndarray
    mu: float

    def potentials(self) -> np.ndarray:
        return self.distances / max(self.mu, EPS)


@dataclass
class LossWeights:
    """Tuning factors for the weighted total plus per-order switches."""

    alpha: float = 0.02
    beta: float = 0.01
    gamma: float = 1.0
    include_order1: bool = False
    huber_delta: float = 1.0
    max_triplets: int = 4960

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.max_triplets < 1:
            raise ValueError(f"max_triplets must be positive, got {self.max_triplets}")


def _teacher_values(batch) -> np.ndarray:
    if isinstance(batch, FeatureBatch):
        return batch.features
    if isinstance(batch, Tensor):
        return batch.values
    return np.asarray(batch, dtype=np.float64)


def _student_tensor(batch) -> Tensor:
    if isinstance(batch, Tensor):
        return batch
    if isinstance(batch, FeatureBatch):
        return Tensor(batch.features)
    return Tensor(np.asarray(batch, dtype=np.float64))


def _aligned(f_values: np.ndarray, g: Tensor, op: str) -> None:
    if f_values.shape != g.shape:
        raise ValueError(f"{op}: misaligned batches, teacher {f_values.shape} "
                         f"vs student {g.shape}")


def pairwise_stats(batch) -> PairwiseStats:
    """Distance matrix and mean pair distance of one stream."""
    feats = _teacher_values(batch)
    m = feats.shape[0]
    if m < 2:
        raise BatchTooSmallError(f"pairwise stats need at least 2 examples, got {m}")
    i_idx, j_idx = np.triu_indices(m, k=1)
    diffs = feats[i_idx] - feats[j_idx]
    dists = np.sqrt(np.sum(diffs * diffs, axis=1))
    full = np.zeros((m, m), dtype=np.float64)
    full[i_idx, j_idx] = dists
    full[j_idx, i_idx] = dists
    return PairwiseStats(distances=full, mu=float(np.mean(dists)))


def angle_potential(f_i, f_j, f_k) -> float:
    """Cosine of the angle at vertex f_j, guarded and clamped to [-1, 1]."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    f_k = np.asarray(f_k, dtype=np.float64)
    e1 = f_i - f_j
    e2 = f_k - f_j
    n1 = max(float(np.linalg.norm(e1)), EPS)
    n2 = max(float(np.linalg.norm(e2)), EPS)
    return float(np.clip(np.dot(e1, e2) / (n1 * n2), -1.0, 1.0))


def order1_loss(F, G) -> Tensor:
    """Mean per-example L1 distance between teacher and student embeddings."""
    f = _teacher_values(F)
    g = _student_tensor(G)
    _aligned(f, g, "order1_loss")
    m = f.shape[0]
    return T.scale(T.tensor_sum(T.absolute(T.sub(g, Tensor(f)))), 1.0 / m)


def _student_rows(g: Tensor) -> list[Tensor]:
    return [T.row(g, i) for i in range(g.shape[0])]


def _student_pair_potentials(g: Tensor, idx_pairs) -> list[Tensor]:
    rows = _student_rows(g)
    dists = [T.l2norm(T.sub(rows[i], rows[j])) for i, j in idx_pairs]
    mu = T.scale(T.add_n(dists), 1.0 / len(dists))
    denom = T.clamp(mu, EPS, np.inf)
    return [T.div(d, denom) for d in dists]


def order2_loss(F, G) -> Tensor:
    """Mean squared difference of normalized pair distances.

    Each stream is normalized by its own mean pair distance, so the loss is
    invariant to uniform rescaling of either stream alone.
    """
    f = _teacher_values(F)
    g = _student_tensor(G)
    _aligned(f, g, "order2_loss")
    m = f.shape[0]
    if m < 2:
        raise BatchTooSmallError(f"order2_loss needs at least 2 examples, got {m}")
    pairs = list(itertools.combinations(range(m), 2))

    i_idx, j_idx = np.triu_indices(m, k=1)
    diffs = f[i_idx] - f[j_idx]
    f_dists = np.sqrt(np.sum(diffs * diffs, axis=1))
    f_psi = f_dists / max(float(np.mean(f_dists)), EPS)

    g_psi = _student_pair_potentials(g, pairs)
    terms = []
    for p, psi in enumerate(g_psi):
        delta = T.sub(psi, Tensor(f_psi[p]))
        terms.append(T.mul(delta, delta))
    return T.scale(T.add_n(terms), 1.0 / len(terms))


def _triplet_count(m: int) -> int:
    return m * (m - 1) * (m - 2) // 6


def _unrank_triplet(rank: int, m: int) -> tuple[int, int, int]:
    # lexicographic rank -> (i, j, k) with i < j < k
    i = 0
    block = (m - 1 - i) * (m - 2 - i) // 2
    while rank >= block:
        rank -= block
        i += 1
        block = (m - 1 - i) * (m - 2 - i) // 2
    j = i + 1
    while rank >= m - 1 - j:
        rank -= m - 1 - j
        j += 1
    return i, j, j + 1 + rank


def select_triplets(m: int, max_triplets: int, seed: int) -> list[tuple[int, int, int]]:
    """All C(m,3) index triplets, or a seeded uniform sample of max_triplets."""
    total = _triplet_count(m)
    if total <= max_triplets:
        return list(itertools.combinations(range(m), 3))
    rng = np.random.default_rng(seed)
    ranks: set[int] = set()
    while len(ranks) < max_triplets:
        ranks.add(int(rng.integers(0, total)))
    return [_unrank_triplet(r, m) for r in sorted(ranks)]


def _teacher_angle_potentials(f: np.ndarray, triplets) -> np.ndarray:
    idx = np.asarray(triplets, dtype=np.int64)
    e1 = f[idx[:, 0]] - f[idx[:, 1]]
    e2 = f[idx[:, 2]] - f[idx[:, 1]]
    n1 = np.maximum(np.sqrt(np.sum(e1 * e1, axis=1)), EPS)
    n2 = np.maximum(np.sqrt(np.sum(e2 * e2, axis=1)), EPS)
    return np.clip(np.sum(e1 * e2, axis=1) / (n1 * n2), -1.0, 1.0)


def order3_loss(F, G, delta: float = 1.0, max_triplets: int = 4960,
                seed: int = 0) -> Tensor:
    """Mean Huber penalty on triplet angle differences.

    The same triplet index set addresses both streams; beyond
    ``max_triplets`` a seeded uniform sample of distinct triplets is used.
    """
    f = _teacher_values(F)
    g = _student_tensor(G)
    _aligned(f, g, "order3_loss")
    m = f.shape[0]
    if m < 3:
        raise BatchTooSmallError(f"order3_loss needs at least 3 examples, got {m}")
    triplets = select_triplets(m, max_triplets, seed)
    f_psi = _teacher_angle_potentials(f, triplets)

    rows = _student_rows(g)
    terms = []
    for t, (i, j, k) in enumerate(triplets):
        e1 = T.sub(rows[i], rows[j])
        e2 = T.sub(rows[k], rows[j])
        n1 = T.clamp(T.l2norm(e1), EPS, np.inf)
        n2 = T.clamp(T.l2norm(e2), EPS, np.inf)
        cos = T.clamp(T.div(T.dot(e1, e2), T.mul(n1, n2)), -1.0, 1.0)
        terms.append(T.huber(T.sub(cos, Tensor(f_psi[t])), delta))
    return T.scale(T.add_n(terms), 1.0 / len(terms))


def compute_class_centers(F_all: FeatureBatch, num_classes: int) -> ClassCenters:
    """Arithmetic mean teacher embedding per class over the full training set."""
    feats, labels = F_all.features, F_all.labels
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")
    if labels.size and labels.min() < 0:
        raise ValueError("negative class label")
    d = feats.shape[1]
    centers = np.zeros((num_classes, d), dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        mask = labels == c
        counts[c] = int(np.sum(mask))
        if counts[c] > 0:
            centers[c] = feats[mask].mean(axis=0)
    return ClassCenters(centers=centers, counts=counts)


def center_loss(F, G, U: ClassCenters) -> Tensor:
    """Mean squared difference of distances to the teacher's class centers.

    The same teacher-derived centers serve both streams (the literal reading
    of the center-based relation); classes with no contributing examples are
    skipped.
    """
    f = _teacher_values(F)
    g = _student_tensor(G)
    _aligned(f, g, "center_loss")
    if U.centers.shape[1] != f.shape[1]:
        raise ValueError(f"center_loss: embedding dim {f.shape[1]} does not match "
                         f"centers dim {U.centers.shape[1]}")
    active = U.active
    if active.size == 0:
        raise ValueError("center_loss: no class has any contributing examples")
    m = f.shape[0]

    f_to_centers = np.sqrt(np.sum(
        (f[:, None, :] - U.centers[None, active, :]) ** 2, axis=2))

    rows = _student_rows(g)
    terms = []
    for i in range(m):
        for a, c in enumerate(active):
            dist = T.l2norm(T.sub(rows[i], Tensor(U.centers[c])))
            delta = T.sub(dist, Tensor(f_to_centers[i, a]))
            terms.append(T.mul(delta, delta))
    return T.scale(T.add_n(terms), 1.0 / (m * active.size))


@dataclass
class LossBreakdown:
    """Unweighted per-order values of one total-loss evaluation."""

    l1: float = 0.0
    l2: float = 0.0
    l3: float = 0.0
    lc: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"l1": self.l1, "l2": self.l2, "l3": self.l3,
                "lc": self.lc, "total": self.total}


def total_distill_loss(F, G, U: ClassCenters | None, w: LossWeights,
                       seed: int = 0) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the enabled relational losses plus its term breakdown.

    Disabled terms (weight 0, order-1 switch off) are neither computed nor
    validated against the batch size.
    """
    f = _teacher_values(F)
    g = _student_tensor(G)
    _aligned(f, g, "total_distill_loss")
    m = f.shape[0]
    if w.alpha > 0 and m < 2:
        raise BatchTooSmallError(f"pairwise term enabled but batch has {m} example(s)")
    if w.beta > 0 and m < 3:
        raise BatchTooSmallError(f"triplet term enabled but batch has {m} example(s)")
    if w.gamma > 0 and U is None:
        raise ValueError("center term enabled but no class centers were given")

    breakdown = LossBreakdown()
    weighted = []
    if w.include_order1:
        l1 = order1_loss(f, g)
        breakdown.l1 = l1.item()
        weighted.append(T.scale(l1, 1.0))
    if w.alpha > 0:
        l2 = order2_loss(f, g)
        breakdown.l2 = l2.item()
        weighted.append(T.scale(l2, w.alpha))
    if w.beta > 0:
        l3 = order3_loss(f, g, delta=w.huber_delta, max_triplets=w.max_triplets,
                         seed=seed)
        breakdown.l3 = l3.item()
        weighted.append(T.scale(l3, w.beta))
    if w.gamma > 0:
        lc = center_loss(f, g, U)
        breakdown.lc = lc.item()
        weighted.append(T.scale(lc, w.gamma))

    total = T.add_n(weighted) if weighted else Tensor(0.0)
    breakdown.total = total.item()
    return total, breakdown
