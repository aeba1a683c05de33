"""Episodic task samplers: sine regression and shifted Gaussian blobs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class Task:
    """One episode: a support set and a disjoint query set from a single domain.

    Regression targets are float arrays of shape (n, 1); classification labels
    are int arrays of shape (n,) relabelled 0..n_classes-1 per episode.
    """

    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    domain_tag: str = ""
    n_classes: int = 0

    def __post_init__(self):
        if len(self.x_support) == 0:
            raise ValueError("task support set is empty")
        if len(self.x_support) != len(self.y_support) or len(self.x_query) != len(self.y_query):
            raise ValueError("inputs and targets differ in length")
        if self.is_classification:
            missing = set(np.unique(self.y_query)) - set(np.unique(self.y_support))
            if missing:
                raise ValueError(f"query classes {sorted(missing)} missing from support")

    @property
    def is_classification(self) -> bool:
        return self.n_classes > 0


@dataclass(frozen=True)
class SineDomain:
    amplitude_range: Tuple[float, float]
    phase_range: Tuple[float, float]
    x_range: Tuple[float, float] = (-5.0, 5.0)
    name: str = "sine"

    def __post_init__(self):
        for label, (lo, hi) in (("amplitude", self.amplitude_range), ("phase", self.phase_range), ("x", self.x_range)):
            if not lo <= hi:
                raise ValueError(f"{label} range [{lo}, {hi}] is empty")


SINE_SOURCE = SineDomain((0.1, 3.0), (0.0, 0.75 * np.pi), name="source")
SINE_UNSEEN = SineDomain((3.0, 5.0), (0.75 * np.pi, np.pi), name="unseen")


def sine_targets(x: np.ndarray, amplitude: float, phase: float) -> np.ndarray:
    return amplitude * np.sin(x + phase)


def sample_sine_task(domain: SineDomain, k_support: int, k_query: int, rng: np.random.Generator) -> Task:
    if k_support < 1 or k_query < 1:
        raise ValueError("k_support and k_query must be >= 1")
    amplitude = rng.uniform(*domain.amplitude_range)
    phase = rng.uniform(*domain.phase_range)
    x = rng.uniform(*domain.x_range, size=(k_support + k_query, 1))
    y = sine_targets(x, amplitude, phase)
    return Task(x[:k_support], y[:k_support], x[k_support:], y[k_support:], domain.name)


def sample_sine_wave(domain: SineDomain, rng: np.random.Generator) -> Tuple[float, float]:
    return float(rng.uniform(*domain.amplitude_range)), float(rng.uniform(*domain.phase_range))


@dataclass(frozen=True)
class AffineTransform:
    matrix: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    offset: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if abs(np.linalg.det(np.asarray(self.matrix))) < 1e-12:
            raise ValueError("domain transform must be invertible")

    @classmethod
    def from_parts(cls, rotation_deg: float = 0.0, scale: float = 1.0, offset=(0.0, 0.0)) -> "AffineTransform":
        t = np.deg2rad(rotation_deg)
        m = scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        return cls(tuple(map(tuple, m.tolist())), tuple(float(v) for v in offset))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ np.asarray(self.matrix).T + np.asarray(self.offset)


@dataclass(frozen=True)
class BlobDomain:
    """A pool of 2-D class centres plus an input-space transform.

    The pool is a deterministic function of ``pool_seed`` so two samplers with
    different episode streams still agree on what the classes are.
    """

    n_classes_pool: int = 64
    center_norm_range: Tuple[float, float] = (2.0, 6.0)
    noise_std: float = 1.0
    transform: AffineTransform = field(default_factory=AffineTransform)
    pool_seed: int = 0
    name: str = "blobs"

    def centers(self) -> np.ndarray:
        rng = np.random.default_rng(self.pool_seed)
        angle = rng.uniform(0.0, 2 * np.pi, self.n_classes_pool)
        radius = rng.uniform(*self.center_norm_range, self.n_classes_pool)
        return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


BLOB_SOURCE = BlobDomain(pool_seed=1, name="source")
BLOB_UNSEEN = BlobDomain(
    pool_seed=2,
    transform=AffineTransform.from_parts(rotation_deg=45.0, scale=1.5, offset=(1.0, -1.0)),
    name="unseen",
)


def sample_blob_task(domain: BlobDomain, n_way: int, k_shot: int, k_query: int, rng: np.random.Generator) -> Task:
    if n_way < 2:
        raise ValueError("n_way must be >= 2")
    if n_way > domain.n_classes_pool:
        raise ValueError(f"n_way={n_way} exceeds the class pool of {domain.n_classes_pool}")
    centers = domain.centers()[rng.choice(domain.n_classes_pool, n_way, replace=False)]
    labels_s = np.repeat(np.arange(n_way), k_shot)
    labels_q = np.repeat(np.arange(n_way), k_query)
    xs = centers[labels_s] + domain.noise_std * rng.standard_normal((labels_s.size, 2))
    xq = centers[labels_q] + domain.noise_std * rng.standard_normal((labels_q.size, 2))
    return Task(domain.transform(xs), labels_s, domain.transform(xq), labels_q, domain.name, n_way)



@dataclass(frozen=True)
class SineSampler:
    domain: SineDomain
    k_support: int = 5
    k_query: int = 20

    def __call__(self, rng: np.random.Generator) -> Task:
        return sample_sine_task(self.domain, self.k_support, self.k_query, rng)


@dataclass(frozen=True)
class BlobSampler:
    domain: BlobDomain
    n_way: int = 5
    k_shot: int = 5
    k_query: int = 15

    def __call__(self, rng: np.random.Generator) -> Task:
        return sample_blob_task(self.domain, self.n_way, self.k_shot, self.k_query, rng)
