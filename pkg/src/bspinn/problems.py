"""Benchmark problems: residual operators, boundary/initial data, exact solutions.

A *model* here is any callable mapping an ``(N, D)`` tensor -- or a
:class:`~bspinn.autodiff.Jet` seeded on those points -- to ``(N, out)``.
Networks, hand-written exact solutions and test fixtures all fit, so the
same residual code checks trained networks and closed-form solutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import torch

from . import sampling
from .autodiff import DTYPE, Jet, seed, sin
from .sampling import BoxDomain, PointSet

Model = Callable[[Any], Any]

GAMMA = 1.4
BURGERS_NU = 0.01 / math.pi


def _col(X, k: int):
    return X[:, k:k + 1]


def _as_tensor(X) -> torch.Tensor:
    return torch.as_tensor(X, dtype=DTYPE)


# -- function fit -------------------------------------------------------

def fnfit_target(x, y):
    """Three Gaussian bumps on [-0.9, 0.9] x [-0.6, 0.6], 0.5 elsewhere on [-1, 1]^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bumps = (np.exp(-((x + 0.5) ** 2 / 0.02 + y**2 / 0.02))
             + np.exp(-(x**2 / 0.08 + y**2 / 0.08))
             + np.exp(-((x - 0.5) ** 2 / 0.02 + y**2 / 0.02)))
    inside = (np.abs(x) <= 0.9) & (np.abs(y) <= 0.6)
    out = np.where(inside, bumps, 0.5)
    return out if out.ndim else float(out)


def _fnfit_target_torch(X: torch.Tensor) -> torch.Tensor:
    x, y = X[:, 0:1], X[:, 1:2]
    bumps = (torch.exp(-((x + 0.5) ** 2 / 0.02 + y**2 / 0.02))
             + torch.exp(-(x**2 / 0.08 + y**2 / 0.08))
             + torch.exp(-((x - 0.5) ** 2 / 0.02 + y**2 / 0.02)))
    inside = (x.abs() <= 0.9) & (y.abs() <= 0.6)
    return torch.where(inside, bumps, torch.full_like(bumps, 0.5))


def fnfit_residual(model: Model, X) -> torch.Tensor:
    X = _as_tensor(X)
    return model(X) - _fnfit_target_torch(X)


# -- Burgers ------------------------------------------------------------

def burgers_residual(model: Model, X) -> torch.Tensor:
    """``u_t + u u_x - (0.01/pi) u_xx`` with coordinates ``(x, t)``."""
    J = model(seed(_as_tensor(X), (0, 1)))
    u, ux, ut = J.value, J.d1[0], J.d1[1]
    uxx = J.second()[0]
    return ut + u * ux - BURGERS_NU * uxx


def burgers_boundary(model: Model, X) -> torch.Tensor:
    return model(_as_tensor(X))


def burgers_initial(model: Model, X) -> torch.Tensor:
    X = _as_tensor(X)
    return model(X) + torch.sin(math.pi * X[:, 0:1])


# -- Euler --------------------------------------------------------------

def euler_exact(X):
    """Moving contact: rho = 1.4 left of ``x = 0.5 + 0.1 t``, else 1.0; (u, v, p) = (0.1, 0, 1).

    Accepts a tensor or a jet; the jet version is piecewise constant, so all
    its derivatives vanish (valid off the discontinuity).
    """
    if isinstance(X, Jet):
        vals = euler_exact(X.value)
        return Jet.constant(vals, X.ncoords, X.order)
    X = _as_tensor(X)
    x, t = X[:, 0:1], X[:, 2:3]
    rho = torch.where(x <= 0.5 + 0.1 * t, torch.tensor(1.4, dtype=DTYPE), torch.tensor(1.0, dtype=DTYPE))
    ones = torch.ones_like(rho)
    return torch.cat([rho, 0.1 * ones, 0.0 * ones, ones], dim=1)


def euler_residuals(model: Model, X, counter: dict | None = None) -> torch.Tensor:
    """Four conservation residuals with total energy eliminated through the ideal-gas closure.

    Outputs are ``(rho, u, v, p)`` and ``rho E = p / (gamma - 1) + rho (u^2 + v^2) / 2``.
    Points with ``rho <= 0`` still get residuals; if ``counter`` is given
    their number is added to ``counter["nonpositive_density"]``.
    """
    J = model(seed(_as_tensor(X), (0, 1, 2), order=1))
    rho, u, v, p = J[:, 0:1], J[:, 1:2], J[:, 2:3], J[:, 3:4]
    if counter is not None:
        counter["nonpositive_density"] = counter.get("nonpositive_density", 0) + int((rho.value <= 0).sum())
    X_, Y_, T_ = 0, 1, 2
    mx = rho * u
    my = rho * v
    rho_e = p * (1.0 / (GAMMA - 1.0)) + 0.5 * rho * (u * u + v * v)
    h = rho_e + p
    muv = mx * v
    r_mass = rho.d1[T_] + mx.d1[X_] + my.d1[Y_]
    r_momx = mx.d1[T_] + (mx * u + p).d1[X_] + muv.d1[Y_]
    r_momy = my.d1[T_] + muv.d1[X_] + (my * v + p).d1[Y_]
    r_energy = rho_e.d1[T_] + (u * h).d1[X_] + (v * h).d1[Y_]
    return torch.cat([r_mass, r_momx, r_momy, r_energy], dim=1)


def euler_data_residual(model: Model, X) -> torch.Tensor:
    X = _as_tensor(X)
    return model(X) - euler_exact(X)


# -- Helmholtz ----------------------------------------------------------

def helmholtz_exact(X, kappa: float):
    """Product of ``sin(kappa * x_k)`` over all coordinates (tensor or jet)."""
    out = sin(kappa * _col(X, 0))
    for k in range(1, X.shape[-1]):
        out = out * sin(kappa * _col(X, k))
    return out


def helmholtz_forcing(X: torch.Tensor, kappa: float) -> torch.Tensor:
    """``(dim - 1) kappa^2 prod_k sin(kappa x_k)``: the 2D and 3D benchmark sources."""
    dim = X.shape[-1]
    return (dim - 1) * kappa**2 * helmholtz_exact(X, kappa)


def helmholtz_residual(model: Model, X, kappa: float) -> torch.Tensor:
    """``-Laplace(u) - kappa^2 u - f``."""
    X = _as_tensor(X)
    J = model(seed(X))
    lap = J.second().sum(0)
    return -lap - kappa**2 * J.value - helmholtz_forcing(X, kappa)


def helmholtz2d_residual(model: Model, X, kappa: float = 8 * math.pi) -> torch.Tensor:
    return helmholtz_residual(model, X, kappa)


def helmholtz3d_residual(model: Model, X, kappa: float = 8 * math.pi / 150) -> torch.Tensor:
    return helmholtz_residual(model, X, kappa)


def dirichlet_residual(exact: Callable) -> Callable:
    def residual(model: Model, X) -> torch.Tensor:
        X = _as_tensor(X)
        return model(X) - exact(X)

    return residual


# -- Poisson ------------------------------------------------------------

def poisson_exact(X, c: float):
    """``(mean x)^2 + sin(c * sum x)`` (tensor or jet)."""
    d = X.shape[-1]
    s = _col(X, 0)
    for k in range(1, d):
        s = s + _col(X, k)
    m = s * (1.0 / d)
    return m * m + sin(c * s)


def poisson_forcing(X: torch.Tensor, c: float) -> torch.Tensor:
    d = X.shape[-1]
    s = X.sum(dim=-1, keepdim=True)
    return d * c**2 * torch.sin(c * s) - 2.0 / d


def poisson_nd_residual(model: Model, X, c: float = 0.6 * math.pi) -> torch.Tensor:
    """``-Laplace(u) - f`` summing one pure second derivative per coordinate."""
    X = _as_tensor(X)
    J = model(seed(X))
    return -J.second().sum(0) - poisson_forcing(X, c)


# -- catalogue ----------------------------------------------------------

@dataclass(frozen=True)
class Defaults:
    archs: tuple[str, str]
    activation: str
    interior: int
    boundary: int | tuple[int, ...]  # per face, or one count per face
    initial: int
    lambda_b: float
    lambda_i: float
    epochs: int
    lr0: float
    scheduler: str = "plateau"
    interior_sampler: str = "uniform"
    residual_blocks: int = 0


@dataclass(frozen=True)
class Evaluation:
    """How the relative error is measured for a problem."""

    kind: str  # "grid" | "random" | "quadrature" | "reference"
    nodes: tuple[int, ...] = ()
    interior: int = 0
    boundary: int = 0
    points_per_dim: int = 4
    field: int = 0  # output component compared by default


@dataclass(frozen=True)
class ProblemDef:
    name: str
    domain: BoxDomain
    output_dim: int
    residual: Callable[[Model, Any], torch.Tensor]
    boundary: Callable[[Model, Any], torch.Tensor] | None
    initial: Callable[[Model, Any], torch.Tensor] | None
    exact: Callable[[Any], Any] | None
    defaults: Defaults
    evaluation: Evaluation
    params: dict[str, float] = field(default_factory=dict)
    output_names: tuple[str, ...] = ("u",)

    @property
    def input_dim(self) -> int:
        return self.domain.dim

    @property
    def roles(self) -> tuple[str, ...]:
        roles = ["interior"]
        if self.boundary is not None:
            roles.append("boundary")
        if self.initial is not None:
            roles.append("initial")
        return tuple(roles)

    def exact_numpy(self, points: np.ndarray) -> np.ndarray:
        if self.exact is None:
            raise ValueError(f"problem {self.name!r} has no closed-form solution")
        with torch.no_grad():
            return self.exact(torch.as_tensor(points, dtype=DTYPE)).numpy()

    def sample(self, seed: int, interior: int | None = None, boundary=None, initial: int | None = None,
               interior_sampler: str | None = None) -> dict[str, PointSet]:
        """Training points for every role this problem uses."""
        d = self.defaults
        interior = d.interior if interior is None else interior
        boundary = d.boundary if boundary is None else boundary
        initial = d.initial if initial is None else initial
        how = interior_sampler or d.interior_sampler
        if how == "lhs":
            pts = {"interior": sampling.lhs_sample(self.domain, interior, seed)}
        elif how == "uniform":
            pts = {"interior": sampling.uniform_sample(self.domain, interior, seed)}
        else:
            raise ValueError(f"unknown interior sampler {how!r}")
        if self.boundary is not None:
            pts["boundary"] = sampling.boundary_sample(self.domain, boundary, seed)
        if self.initial is not None:
            pts["initial"] = sampling.initial_sample(self.domain, initial, seed)
        return pts


def split_total(total: int, n_faces: int) -> tuple[int, ...]:
    """Spread ``total`` boundary points over faces as evenly as possible."""
    base, extra = divmod(int(total), n_faces)
    return tuple(base + (1 if f < extra else 0) for f in range(n_faces))


def _fnfit(**_) -> ProblemDef:
    return ProblemDef(
        "fnfit", BoxDomain((-1.0, -1.0), (1.0, 1.0)), 1,
        fnfit_residual, None, None, _fnfit_target_torch,
        # lr unstated for this fit; 2e-2 gave the FNN baseline its lowest error in a sweep
        Defaults(("fnn:4*32", "bsnn:32-4"), "sigmoid", 15_000, 0, 0, 0.0, 0.0, 10_000, 2e-2),
        Evaluation("grid", nodes=(201, 201)),
    )


def _burgers(**_) -> ProblemDef:
    return ProblemDef(
        "burgers1d", BoxDomain((-1.0,), (1.0,), time=(0.0, 1.0)), 1,
        burgers_residual, burgers_boundary, burgers_initial, None,
        Defaults(("fnn:5*256", "bsnn:256-16"), "tanh", 30_000, 100, 200, 1.0, 1.0, 10_000, 5e-3,
                 interior_sampler="lhs"),
        Evaluation("reference", nodes=(256, 100)),
    )


def _euler(**_) -> ProblemDef:
    return ProblemDef(
        "euler2d", BoxDomain((0.0, 0.0), (1.0, 1.0), time=(0.0, 2.0)), 4,
        euler_residuals, euler_data_residual, euler_data_residual, euler_exact,
        Defaults(("fnn:5*256", "bsnn:256-16"), "tanh", 10_000, 100, 400, 1.0, 1.0, 5_000, 1e-3),
        Evaluation("grid", nodes=(100, 100, 100)),
        output_names=("rho", "u", "v", "p"),
    )


def _helmholtz2d(kappa: float = 8 * math.pi, **_) -> ProblemDef:
    kappa = float(kappa)
    exact = lambda X: helmholtz_exact(X, kappa)  # noqa: E731
    return ProblemDef(
        "helmholtz2d", BoxDomain((0.0, 0.0), (1.0, 1.0)), 1,
        lambda m, X: helmholtz_residual(m, X, kappa), dirichlet_residual(exact), None, exact,
        Defaults(("fnn:5*256", "bsnn:256-16"), "sin", 6561, 80, 0, 100.0, 0.0, 80_000, 1e-3),
        Evaluation("grid", nodes=(500, 500)),
        params={"kappa": kappa},
    )


def _helmholtz3d(kappa: float = 8 * math.pi / 150, extent: float = 150.0, **_) -> ProblemDef:
    kappa = float(kappa)
    exact = lambda X: helmholtz_exact(X, kappa)  # noqa: E731
    return ProblemDef(
        "helmholtz3d", BoxDomain.cube(0.0, float(extent), 3), 1,
        lambda m, X: helmholtz_residual(m, X, kappa), dirichlet_residual(exact), None, exact,
        Defaults(("fnn:5*512", "bsnn:512-32"), "sin", 40_000, split_total(4_000, 6), 0, 100.0, 0.0,
                 5_000, 1e-3),
        Evaluation("random", interior=10_000, boundary=10_000),
        params={"kappa": kappa, "extent": float(extent)},
    )


def _poisson(d: int = 10, c: float = 0.6 * math.pi, **_) -> ProblemDef:
    d, c = int(d), float(c)
    exact = lambda X: poisson_exact(X, c)  # noqa: E731
    return ProblemDef(
        "poisson10d", BoxDomain.cube(-1.0, 1.0, d), 1,
        lambda m, X: poisson_nd_residual(m, X, c), dirichlet_residual(exact), None, exact,
        Defaults(("fnn:5*256", "bsnn:256-16"), "sin", 4_000, 200, 0, 1.0, 0.0, 10_000, 1e-3,
                 scheduler="exponential", residual_blocks=2),
        Evaluation("quadrature", points_per_dim=4),
        params={"d": d, "c": c},
    )


PROBLEMS: dict[str, Callable[..., ProblemDef]] = {
    "fnfit": _fnfit,
    "burgers1d": _burgers,
    "euler2d": _euler,
    "helmholtz2d": _helmholtz2d,
    "helmholtz3d": _helmholtz3d,
    "poisson10d": _poisson,
}

PROBLEM_PARAMS: dict[str, frozenset[str]] = {
    "fnfit": frozenset(),
    "burgers1d": frozenset(),
    "euler2d": frozenset(),
    "helmholtz2d": frozenset({"kappa"}),
    "helmholtz3d": frozenset({"kappa", "extent"}),
    "poisson10d": frozenset({"d", "c"}),
}


def get_problem(name: str, **params) -> ProblemDef:
    if name not in PROBLEMS:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    unknown = set(params) - PROBLEM_PARAMS[name]
    if unknown:
        raise ValueError(f"problem {name!r} does not take parameter(s) {sorted(unknown)}")
    return PROBLEMS[name](**params)
