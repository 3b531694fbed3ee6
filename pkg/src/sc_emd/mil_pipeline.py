"""Multi-instance front end: bags of instances to quantization histograms.

Instances pooled from the training bags are clustered with k-means; the
centroids become histogram bins and each bag is described by the fraction
of its instances nearest to each centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import BadSpec, DimensionMismatch, InputError, TooFewInstances


@dataclass
class Bag:
    instances: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        inst = np.asarray(self.instances, dtype=float)
        if inst.ndim == 1:
            inst = inst[None, :]
        if inst.ndim != 2 or inst.shape[0] == 0 or inst.shape[1] == 0:
            raise InputError("a bag needs at least one instance vector")
        if not np.all(np.isfinite(inst)):
            raise InputError("bag instances must be finite")
        self.instances = inst

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


@dataclass
class PrototypeSet:
    centroids: np.ndarray
    seed: int = 0
    inertia_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[0] == 0:
            raise InputError("need at least one centroid")
        if not np.all(np.isfinite(c)):
            raise InputError("centroids must be finite")
        self.centroids = c

    @property
    def D(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen center
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100):
    """Lloyd's algorithm from a k-means++ start.

    Returns ``(centroids, labels, inertia_trace)``.  An empty cluster is
    re-seeded at the point lying farthest from its own centroid.
    """
    points = np.asarray(points, dtype=float)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, k, rng)
    labels = None
    trace = []
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        new_labels = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        own = d[np.arange(len(points)), labels]
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                centers[j] = points[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(own))
            centers[j] = points[far]
            own[far] = -1.0
    return centers, labels, trace


def fit_prototypes(bags: Sequence[Bag], D: int, seed: int = 0,
                   max_iter: int = 100) -> PrototypeSet:
    """Cluster the pooled instances of ``bags`` into ``D`` prototypes."""
    if not bags:
        raise TooFewInstances("no bags given")
    dims = {b.dim for b in bags}
    if len(dims) != 1:
        raise DimensionMismatch("bags have differing instance lengths")
    pooled = np.vstack([b.instances for b in bags])
    if D < 1 or pooled.shape[0] < D:
        raise TooFewInstances(
            f"{pooled.shape[0]} instances cannot support {D} prototypes")
    centers, _, trace = kmeans(pooled, D, seed, max_iter)
    return PrototypeSet(centers, seed, trace)


def quantize_bag(bag: Bag, protos: PrototypeSet) -> np.ndarray:
    """Fraction of the bag's instances nearest to each prototype."""
    if bag.dim != protos.centroids.shape[1]:
        raise DimensionMismatch(
            f"instances have length {bag.dim}, prototypes "
            f"{protos.centroids.shape[1]}")
    nearest = np.argmin(_sq_dists(bag.instances, protos.centroids), axis=1)
    counts = np.bincount(nearest, minlength=protos.D).astype(float)
    return counts / counts.sum()


def quantize_bags(bags: Sequence[Bag], protos: PrototypeSet) -> np.ndarray:
    return np.array([quantize_bag(b, protos) for b in bags])


def stratified_split(labels, train_fraction: float = 0.5, seed: int = 0):
    """Seeded per-class split; returns sorted ``(train_idx, test_idx)``."""
    labels = np.asarray(labels)
    if not 0.0 < train_fraction < 1.0:
        raise InputError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(train_fraction * idx.size))
        cut = min(max(cut, 1), idx.size - 1) if idx.size > 1 else idx.size
        train.extend(idx[:cut].tolist())
        test.extend(idx[cut:].tolist())
    return np.array(sorted(train), dtype=int), np.array(sorted(test), dtype=int)


# synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a seeded synthetic multi-instance dataset.

    Bin locations lie on a unit-spaced grid.  Basic histogram ``m`` lives on
    its own block of neighbouring bins (``overlap`` mixes in a uniform
    floor).  Each class mixes ``atoms_per_class`` basic histograms; each bag
    perturbs its class weights with a Dirichlet draw of strength
    ``weight_concentration`` (``0`` keeps the class weights exactly) and
    places every instance at its bin location plus Gaussian noise of scale
    ``noise``.
    """

    n_classes: int = 3
    bags_per_class: int = 20
    instances_per_bag: int = 200
    D: int = 12
    M_true: int = 4
    noise: float = 0.05
    seed: int = 0
    dim: int = 2
    atoms_per_class: int = 2
    overlap: float = 0.0
    weight_concentration: float = 50.0

    def validate(self):
        ints = ("n_classes", "bags_per_class", "instances_per_bag", "D",
                "M_true", "dim", "atoms_per_class")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise BadSpec(f"{name} must be >= 1")
        if self.dim < 2:
            raise BadSpec("dim must be >= 2")
        if self.M_true > self.D:
            raise BadSpec("M_true cannot exceed D")
        if self.atoms_per_class > self.M_true:
            raise BadSpec("atoms_per_class cannot exceed M_true")
        if not 0.0 <= self.overlap <= 1.0:
            raise BadSpec("overlap must lie in [0, 1]")
        if self.noise < 0 or self.weight_concentration < 0:
            raise BadSpec("noise and weight_concentration must be >= 0")


class SynthDataset(NamedTuple):
    bags: List[Bag]
    true_dictionary: np.ndarray
    locations: np.ndarray


def grid_locations(D: int, dim: int = 2) -> np.ndarray:
    cols = math.ceil(math.sqrt(D))
    loc = np.zeros((D, dim))
    loc[:, 0] = np.arange(D) % cols
    loc[:, 1] = np.arange(D) // cols
    return loc


def synth_dataset(spec: SynthSpec) -> SynthDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D, M = spec.D, spec.M_true
    locations = grid_locations(D, spec.dim)

    U = np.zeros((D, M))
    for m, block in enumerate(np.array_split(np.arange(D), M)):
        U[block, m] = rng.dirichlet(np.full(block.size, 2.0))
    U = (1.0 - spec.overlap) * U + spec.overlap / D

    class_weights = np.zeros((spec.n_classes, M))
    for c in range(spec.n_classes):
        others = np.setdiff1d(np.arange(M), [c % M])
        extra = rng.choice(others, size=spec.atoms_per_class - 1,
                           replace=False)
        atoms = np.concatenate([[c % M], extra]).astype(int)
        class_weights[c, atoms] = rng.dirichlet(np.ones(atoms.size))

    bags = []
    for c in range(spec.n_classes):
        for _ in range(spec.bags_per_class):
            w = class_weights[c]
            if spec.weight_concentration > 0:
                support = w > 0
                w = np.zeros(M)
                w[support] = rng.dirichlet(
                    class_weights[c, support] * spec.weight_concentration)
            h = U @ w
            h = np.maximum(h, 0.0)
            h /= h.sum()
            bins = rng.choice(D, size=spec.instances_per_bag, p=h)
            inst = locations[bins] + spec.noise * rng.standard_normal(
                (spec.instances_per_bag, spec.dim))
            bags.append(Bag(inst, c))
    return SynthDataset(bags, U, locations)
