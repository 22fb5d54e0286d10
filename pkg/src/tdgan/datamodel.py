"""Ground-truth conditionals, per-center label marginals, and the central label store."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, StateError

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class Component:
    weight: float
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class CondGaussianMixture:
    """p(x | y) as a per-label mixture of diagonal Gaussians.

    ``components`` maps a label id to its mixture; labels of the vocabulary
    that have no entry are unknown to the distribution.
    """

    dim: int
    vocab_size: int
    components: Mapping[int, tuple[Component, ...]]

    def __post_init__(self):
        if self.dim < 1 or self.vocab_size < 1:
            raise ConfigError("dim and vocab_size must be positive")
        for y, comps in self.components.items():
            if not 0 <= y < self.vocab_size:
                raise ConfigError(f"label {y} outside vocabulary of size {self.vocab_size}")
            if not comps:
                raise ConfigError(f"label {y}: no mixture components")
            weights = np.array([c.weight for c in comps], dtype=float)
            if (weights < 0).any():
                raise ConfigError(f"label {y}: weights must be nonnegative")
            if abs(weights.sum() - 1.0) > WEIGHT_TOL:
                raise ConfigError(f"label {y}: weights must sum to 1 (got {weights.sum():.12g})")
            for c in comps:
                if c.mean.shape != (self.dim,) or c.var.shape != (self.dim,):
                    raise ConfigError(f"label {y}: mean/var must have length {self.dim}")
                if not (c.var > 0).all():
                    raise ConfigError(f"label {y}: variances must be positive")

    @classmethod
    def build(cls, dim: int, vocab_size: int, spec: Mapping[int, Sequence[tuple]]) -> "CondGaussianMixture":
        """Convenience constructor from ``{label: [(weight, mean, var), ...]}``."""
        comps = {
            int(y): tuple(
                Component(float(w), np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(var, float)))
                for w, mu, var in entries
            )
            for y, entries in spec.items()
        }
        return cls(dim, vocab_size, comps)

    @property
    def labels(self) -> frozenset[int]:
        return frozenset(self.components)

    def _comps(self, y) -> tuple[Component, ...]:
        try:
            return self.components[int(y)]
        except KeyError:
            raise DomainError(f"label {y} is not defined by the ground truth") from None


def sample_conditional(truth: CondGaussianMixture, y: int, rng: np.random.Generator) -> np.ndarray:
    """One draw x ~ p(x | y), shape ``(dim,)``."""
    return sample_conditional_batch(truth, [y], rng)[:, 0]


def sample_conditional_batch(truth: CondGaussianMixture, labels, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample per label; returns shape ``(dim, len(labels))``.

    Randomness is consumed in a fixed pattern (one uniform and ``dim`` normals
    per sample) regardless of the labels, so streams stay aligned.
    """
    labels = np.asarray(labels, dtype=np.int64)
    m = labels.size
    pick = rng.random(m)
    z = rng.standard_normal((truth.dim, m))
    out = np.empty((truth.dim, m))
    for y in np.unique(labels):
        comps = truth._comps(y)
        idx = np.flatnonzero(labels == y)
        cum = np.cumsum([c.weight for c in comps])
        k = np.minimum(np.searchsorted(cum, pick[idx], side="right"), len(comps) - 1)
        means = np.stack([c.mean for c in comps], axis=1)
        sds = np.sqrt(np.stack([c.var for c in comps], axis=1))
        out[:, idx] = means[:, k] + sds[:, k] * z[:, idx]
    return out


def pdf_conditional(truth: CondGaussianMixture, x, y: int):
    """Mixture density p(x | y).

    ``x`` may be a single point of shape ``(dim,)`` (scalar result) or a batch
    of shape ``(dim, k)`` (result of shape ``(k,)``). For ``dim == 1`` a flat
    array of points is also accepted.
    """
    comps = truth._comps(y)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and truth.dim > 1)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(truth.dim, -1) if truth.dim > 1 else x.reshape(1, -1)
    dens = np.zeros(x.shape[1])
    for c in comps:
        diff = x - c.mean[:, None]
        quad = (diff * diff / c.var[:, None]).sum(axis=0)
        norm = np.prod(2.0 * np.pi * c.var) ** -0.5
        dens += c.weight * norm * np.exp(-0.5 * quad)
    return float(dens[0]) if single else dens


def mixture_weights(sizes: Sequence[int]) -> list[float]:
    """Data-proportional weights n_k / sum(n)."""
    if len(sizes) == 0:
        raise ConfigError("mixture_weights needs at least one center")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"center sizes must be positive, got {list(sizes)}")
    total = sum(sizes)
    return [s / total for s in sizes]


@dataclass(frozen=True)
class CenterDataset:
    """A private dataset hosted by one center.

    Only the label counts are public. Real samples are produced on demand by
    :meth:`_draw_real`, which is reserved for the owning discriminator node.
    """

    center_id: str
    label_counts: Mapping[int, int]
    truth: CondGaussianMixture = field(repr=False)

    def __post_init__(self):
        if not self.label_counts or self.n <= 0:
            raise ConfigError(f"center {self.center_id}: dataset must be nonempty")
        for y, c in self.label_counts.items():
            if c < 0:
                raise ConfigError(f"center {self.center_id}: negative count for label {y}")
            if c > 0 and y not in self.truth.components:
                raise ConfigError(f"center {self.center_id}: label {y} has no ground truth")

    @property
    def n(self) -> int:
        return sum(self.label_counts.values())

    def label_distribution(self) -> dict[int, float]:
        n = self.n
        return {y: c / n for y, c in sorted(self.label_counts.items()) if c > 0}

    def sample_labels(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """m iid labels from this center's empirical label marginal."""
        dist = self.label_distribution()
        return rng.choice(np.fromiter(dist, dtype=np.int64), size=m, p=list(dist.values()))

    def _draw_real(self, labels, rng: np.random.Generator) -> np.ndarray:
        return sample_conditional_batch(self.truth, labels, rng)


@dataclass(frozen=True)
class LabelStore:
    """Integer label counts; the normalized counts are the running marginal s_t(y)."""

    counts: Mapping[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def probabilities(self) -> dict[int, float]:
        n = self.total
        if n == 0:
            return {}
        return {y: c / n for y, c in sorted(self.counts.items()) if c > 0}


def merge_alpha(store: LabelStore, new_labels: Mapping[int, int]) -> float:
    """Weight the new marginal receives in the merged mixture: n_new / (N_old + n_new)."""
    n_new = sum(new_labels.values())
    if n_new <= 0:
        raise ConfigError("cannot merge an empty label batch")
    return n_new / (store.total + n_new)


def labelstore_merge(store: LabelStore, new_labels: Mapping[int, int]) -> LabelStore:
    if any(c < 0 for c in new_labels.values()):
        raise ConfigError("label counts must be nonnegative")
    if sum(new_labels.values()) <= 0:
        raise ConfigError("cannot merge an all-zero label batch")
    counts = dict(store.counts)
    for y, c in new_labels.items():
        if c > 0:
            counts[int(y)] = counts.get(int(y), 0) + int(c)
    return LabelStore(dict(sorted(counts.items())))


def labelstore_sample(store: LabelStore, m: int, rng: np.random.Generator) -> np.ndarray:
    probs = store.probabilities()
    if not probs:
        raise StateError("cannot sample from an empty label store")
    return rng.choice(np.fromiter(probs, dtype=np.int64), size=m, p=list(probs.values()))


def support(store: LabelStore) -> frozenset[int]:
    return frozenset(y for y, c in store.counts.items() if c > 0)
