"""Box domains, collocation samplers, uniform grids and Gauss-Legendre rules.

Every sampler draws from a PCG64 stream keyed by ``(seed, stream id)`` so a
point role (interior, boundary, initial, ...) never shares random numbers
with another role or with parameter initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import qmc

# stream ids; 0 is reserved for network initialisation
STREAMS = {"interior": 1, "boundary": 2, "initial": 3, "evaluation": 4}


def rng_for(seed: int, role: str | int) -> np.random.Generator:
    stream = STREAMS[role] if isinstance(role, str) else int(role)
    return np.random.default_rng([int(seed), stream])


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned spatial box, optionally extended by a time interval ``(t_lo, t_hi]``.

    Point coordinates are ordered space first, then time.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    time: tuple[float, float] | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper bounds must have the same, non-zero length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"each lower bound must be below its upper bound: {self.lower} vs {self.upper}")
        if self.time is not None:
            t0, t1 = map(float, self.time)
            if t0 >= t1:
                raise ValueError(f"empty time interval {self.time}")
            object.__setattr__(self, "time", (t0, t1))
        if self.names is None:
            default = ("x", "y", "z") if self.space_dim <= 3 else tuple(f"x{i}" for i in range(self.space_dim))
            names = default[: self.space_dim] + (("t",) if self.time else ())
            object.__setattr__(self, "names", names)
        elif len(self.names) != self.dim:
            raise ValueError(f"expected {self.dim} coordinate names, got {len(self.names)}")

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int, **kw) -> "BoxDomain":
        return cls((lo,) * dim, (hi,) * dim, **kw)

    @property
    def space_dim(self) -> int:
        return len(self.lower)

    @property
    def dim(self) -> int:
        return self.space_dim + (1 if self.time else 0)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Full lower/upper arrays including the time coordinate."""
        lo, hi = list(self.lower), list(self.upper)
        if self.time:
            lo.append(self.time[0])
            hi.append(self.time[1])
        return np.array(lo), np.array(hi)

    @property
    def n_faces(self) -> int:
        return 2 * self.space_dim

    def faces(self) -> list[tuple[int, int]]:
        """``(axis, side)`` pairs, side 0 = lower bound, 1 = upper bound."""
        return [(axis, side) for axis in range(self.space_dim) for side in (0, 1)]

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        lo, hi = self.bounds
        return np.all((points >= lo - atol) & (points <= hi + atol), axis=1)


@dataclass
class PointSet:
    role: str
    points: np.ndarray
    seed: int | None
    sampler: str
    names: tuple[str, ...]
    faces: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        np.savetxt(path, self.points, delimiter=",", header=",".join(self.names), comments="", fmt="%.17g")
        return path


def _time_half_open(rng: np.random.Generator, t0: float, t1: float, n: int) -> np.ndarray:
    # (t0, t1]: reflect [0, 1) draws so t0 itself is never produced
    return t1 - (t1 - t0) * rng.random(n)


def uniform_sample(domain: BoxDomain, n: int, seed: int, role: str = "interior") -> PointSet:
    """``n`` i.i.d. uniform points in the domain (time drawn on ``(t_lo, t_hi]``)."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = rng_for(seed, role)
    lo, hi = np.array(domain.lower), np.array(domain.upper)
    pts = lo + (hi - lo) * rng.random((n, domain.space_dim))
    if domain.time:
        pts = np.column_stack([pts, _time_half_open(rng, *domain.time, n)])
    return PointSet(role, pts, seed, "uniform", domain.names)


def lhs_sample(domain: BoxDomain, n: int, seed: int, role: str = "interior") -> PointSet:
    """Latin hypercube design: each axis has exactly one point per ``1/n`` stratum."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = rng_for(seed, role)
    unit = qmc.LatinHypercube(d=domain.dim, seed=rng).random(n)
    lo, hi = domain.bounds
    if domain.time:
        unit[:, -1] = 1.0 - unit[:, -1]  # keep t_lo out of the half-open interval
    return PointSet(role, lo + (hi - lo) * unit, seed, "lhs", domain.names)


def boundary_sample(domain: BoxDomain, per_face: int | Sequence[int], seed: int,
                    role: str = "boundary") -> PointSet:
    """Uniform points on each spatial face; time (if any) uniform on ``(t_lo, t_hi]``.

    ``per_face`` is one count for all faces or one count per face in
    :meth:`BoxDomain.faces` order.
    """
    faces = domain.faces()
    counts = [int(per_face)] * len(faces) if np.isscalar(per_face) else [int(c) for c in per_face]
    if len(counts) != len(faces):
        raise ValueError(f"need {len(faces)} per-face counts, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError("per-face counts must be non-negative")
    rng = rng_for(seed, role)
    lo, hi = np.array(domain.lower), np.array(domain.upper)
    chunks, labels = [], []
    for f, ((axis, side), c) in enumerate(zip(faces, counts)):
        pts = lo + (hi - lo) * rng.random((c, domain.space_dim))
        pts[:, axis] = hi[axis] if side else lo[axis]
        if domain.time:
            pts = np.column_stack([pts, _time_half_open(rng, *domain.time, c)])
        chunks.append(pts)
        labels.append(np.full(c, f))
    pts = np.concatenate(chunks) if chunks else np.empty((0, domain.dim))
    return PointSet(role, pts, seed, "uniform-faces", domain.names, np.concatenate(labels))


def initial_sample(domain: BoxDomain, n: int, seed: int, role: str = "initial") -> PointSet:
    """Uniform points on the closed spatial box at ``t = t_lo``."""
    if domain.time is None:
        raise ValueError("initial points need a time-dependent domain")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = rng_for(seed, role)
    lo, hi = np.array(domain.lower), np.array(domain.upper)
    pts = lo + (hi - lo) * rng.random((n, domain.space_dim))
    pts = np.column_stack([pts, np.full(n, domain.time[0])])
    return PointSet(role, pts, seed, "uniform", domain.names)


def _even_nodes(a: float, b: float, n: int) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    return ((n - 1 - k) * a + k * b) / (n - 1)


def grid_nodes(domain: BoxDomain, nodes_per_dim: Sequence[int], role: str = "evaluation") -> PointSet:
    """Tensor grid of evenly spaced nodes (endpoints included), first axis slowest.

    Node k of n is ``((n-1-k)*lo + k*hi) / (n-1)``: one rounding for integer
    bounds, and mirror-symmetric on symmetric boxes, so nodes that sit on an
    interface such as y = 0.6 land exactly there.
    """
    lo, hi = domain.bounds
    counts = [int(c) for c in nodes_per_dim]
    if len(counts) != domain.dim:
        raise ValueError(f"need {domain.dim} node counts, got {len(counts)}")
    if any(c < 2 for c in counts):
        raise ValueError("each axis needs at least 2 nodes")
    axes = [_even_nodes(a, b, c) for a, b, c in zip(lo, hi, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return PointSet(role, pts, None, "grid", domain.names)


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (count, dim)
    weights: np.ndarray  # (count,)

    def __len__(self) -> int:
        return self.weights.shape[0]

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


def gauss_legendre(domain: BoxDomain, points_per_dim: int = 4) -> QuadratureRule:
    """Tensor-product Gauss-Legendre rule over the (space + time) box.

    Nodes are enumerated with the first axis varying slowest; each weight is
    the product of the one-dimensional weights of its node coordinates.
    """
    x1, w1 = np.polynomial.legendre.leggauss(points_per_dim)
    lo, hi = domain.bounds
    d = lo.size
    half = (hi - lo) / 2.0
    mid = (hi + lo) / 2.0
    count = points_per_dim**d
    strides = points_per_dim ** np.arange(d - 1, -1, -1)
    idx = (np.arange(count)[:, None] // strides) % points_per_dim
    nodes = mid + half * x1[idx]
    weights = np.prod(w1[idx], axis=1) * np.prod(half)
    return QuadratureRule(nodes, weights)
