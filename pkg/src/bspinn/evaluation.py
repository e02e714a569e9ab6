"""Relative errors, ensemble summaries, loss bands, transition points, channel fields."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from . import sampling
from .autodiff import DTYPE
from .network import ParamStore, channel_outputs, forward
from .problems import ProblemDef, split_total

BATCH = 65_536


class EvaluationError(ValueError):
    pass


def relative_l2_grid(predicted, reference) -> float:
    """``||pred - ref||_2 / ||ref||_2`` over matching nodes."""
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    r = np.asarray(reference, dtype=np.float64).reshape(-1)
    if p.shape != r.shape:
        raise EvaluationError(f"length mismatch: {p.size} predicted vs {r.size} reference values")
    denom = np.linalg.norm(r)
    if denom == 0.0:
        raise EvaluationError("reference has zero norm")
    return float(np.linalg.norm(p - r) / denom)


class QuadratureError(NamedTuple):
    ratio: float  # int |u - u*|^2 / int |u*|^2, no square root
    root: float  # square root of ratio

    def __str__(self) -> str:
        return f"ratio={self.ratio:.6e} root={self.root:.6e}"


def relative_l2_quadrature(predict: Callable[[np.ndarray], np.ndarray],
                           exact: Callable[[np.ndarray], np.ndarray],
                           rule: sampling.QuadratureRule, batch: int = BATCH) -> QuadratureError:
    """Ratio of squared-norm integrals plus its square root, accumulated in batches."""
    num = den = 0.0
    for lo in range(0, len(rule), batch):
        x = rule.nodes[lo:lo + batch]
        w = rule.weights[lo:lo + batch]
        u = np.asarray(predict(x), dtype=np.float64).reshape(len(x), -1)[:, 0]
        ue = np.asarray(exact(x), dtype=np.float64).reshape(len(x), -1)[:, 0]
        num += float(np.dot(w, (u - ue) ** 2))
        den += float(np.dot(w, ue**2))
    if den == 0.0:
        raise EvaluationError("exact solution integrates to zero")
    return QuadratureError(num / den, float(np.sqrt(num / den)))


def predictor(store: ParamStore, batch: int = BATCH) -> Callable[[np.ndarray], np.ndarray]:
    """Batched no-grad network evaluation returning ``(N, output_dim)`` arrays."""
    params = store.data.detach()

    def predict(points: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for lo in range(0, len(points), batch):
                x = torch.as_tensor(points[lo:lo + batch], dtype=DTYPE)
                out.append(forward(store, x, params).numpy())
        return np.concatenate(out) if out else np.empty((0, store.spec.output_dim))

    return predict


# -- ensemble summaries -----------------------------------------------

@dataclass(frozen=True)
class ErrorReport:
    errors: tuple[float, ...]
    mean: float
    std: float  # population standard deviation (ddof=0)
    best: int

    @classmethod
    def from_errors(cls, errors: Sequence[float]) -> "ErrorReport":
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            raise EvaluationError("no errors to summarise")
        finite = np.where(np.isfinite(e), e, np.inf)
        return cls(tuple(float(v) for v in e), float(np.mean(e)), float(np.std(e)), int(np.argmin(finite)))

    def __str__(self) -> str:
        return f"{self.mean:.3e} ± {self.std:.3e}"


@dataclass(frozen=True)
class LossBand:
    epochs: np.ndarray
    min: np.ndarray
    median: np.ndarray
    max: np.ndarray


def loss_band(histories: Sequence, stride: int = 1) -> LossBand:
    """Per-epoch min / median / max of the total loss across runs.

    Accepts :class:`~bspinn.training.RunRecord` objects or plain loss arrays.
    """
    curves = [np.asarray(getattr(h, "losses", h), dtype=np.float64) for h in histories]
    if not curves:
        raise EvaluationError("need at least one loss history")
    n = curves[0].size
    if any(c.size != n for c in curves):
        raise EvaluationError("loss histories have different lengths")
    stack = np.stack(curves)[:, ::max(int(stride), 1)]
    epochs = np.arange(n)[::max(int(stride), 1)]
    return LossBand(epochs, stack.min(0), np.median(stack, axis=0), stack.max(0))


# -- transition points ---------------------------------------------------

def euler_shock(points: np.ndarray) -> np.ndarray:
    """Signed distance-like level set ``x - (0.5 + 0.1 t)`` for (x, y, t) points."""
    return points[..., 0] - (0.5 + 0.1 * points[..., 2])


def _icbrt(n: int) -> int:
    m = int(round(n ** (1.0 / 3.0)))
    while m**3 > n:
        m -= 1
    while (m + 1) ** 3 <= n:
        m += 1
    return m


def transition_points(points: np.ndarray, lower: Sequence[float], upper: Sequence[float],
                      level_set: Callable[[np.ndarray], np.ndarray] = euler_shock,
                      n: int | None = None) -> tuple[np.ndarray, float]:
    """Points whose cell in an ``m^D`` grid (``m = floor(n^(1/3))``) is cut by ``level_set == 0``.

    A cell counts as cut when the level set takes both signs (or zero) on
    its corners, which is exact for planar interfaces.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts) if n is None else int(n)
    m = _icbrt(n)
    lo, hi = np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64)
    dim = lo.size
    width = (hi - lo) / m
    idx = np.clip(np.floor((pts - lo) / width).astype(np.int64), 0, m - 1)
    corners = np.array(np.meshgrid(*[[0, 1]] * dim, indexing="ij")).reshape(dim, -1).T
    cells, inverse = np.unique(idx, axis=0, return_inverse=True)
    vals = np.stack([level_set(lo + (cells + c) * width) for c in corners], axis=1)
    cut = (vals.min(1) <= 0) & (vals.max(1) >= 0)
    mask = cut[inverse.reshape(-1)]
    return pts[mask], float(mask.sum()) / n


# -- channels -------------------------------------------------------------

@dataclass
class ChannelFields:
    fields: np.ndarray  # (n_channels, N)
    bias: float
    prediction: np.ndarray  # (N,)

    @property
    def n_channels(self) -> int:
        return self.fields.shape[0]

    @property
    def sum_check(self) -> np.ndarray:
        """Sum of channel fields plus bias minus the prediction; ~0 everywhere."""
        return self.fields.sum(0) + self.bias - self.prediction


def channel_fields(store: ParamStore, points: np.ndarray, group_size: int | None = None,
                   component: int = 0, batch: int = BATCH) -> ChannelFields:
    params = store.data.detach()
    chunks, preds = [], []
    bias = 0.0
    with torch.no_grad():
        for lo in range(0, len(points), batch):
            x = torch.as_tensor(points[lo:lo + batch], dtype=DTYPE)
            co = channel_outputs(store, x, group_size, params)
            chunks.append(co.contributions[..., component].numpy())
            preds.append(forward(store, x, params)[:, component].numpy())
            bias = float(co.bias[component])
    return ChannelFields(np.concatenate(chunks, axis=1), bias, np.concatenate(preds))


# -- per-problem error ------------------------------------------------------

def load_reference(path: str | Path, domain: sampling.BoxDomain, nodes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``coords..., value`` CSV and return it ordered like :func:`sampling.grid_nodes`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"reference solution file {path} does not exist")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    grid = sampling.grid_nodes(domain, nodes).points
    if data.shape != (len(grid), domain.dim + 1):
        raise EvaluationError(
            f"{path}: expected {len(grid)} rows x {domain.dim + 1} columns "
            f"({'x'.join(map(str, nodes))} grid), got {data.shape[0]} x {data.shape[1]}"
        )
    order_ref = np.lexsort(data[:, :domain.dim].T[::-1])
    order_grid = np.lexsort(grid.T[::-1])
    if not np.allclose(data[order_ref, :domain.dim], grid[order_grid], atol=1e-8):
        raise EvaluationError(f"{path}: coordinates do not match the {'x'.join(map(str, nodes))} node grid")
    values = np.empty(len(grid))
    values[order_grid] = data[order_ref, domain.dim]
    return grid, values


@dataclass
class EvalResult:
    problem: str
    error: float
    kind: str
    points: np.ndarray | None = None
    predicted: np.ndarray | None = None
    reference: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _random_eval_points(problem: ProblemDef, seed: int, interior: int, boundary: int) -> np.ndarray:
    dom = problem.domain
    parts = []
    if interior:
        parts.append(sampling.uniform_sample(dom, interior, seed, role="evaluation").points)
    if boundary:
        per_face = split_total(boundary, dom.n_faces)
        parts.append(sampling.boundary_sample(dom, per_face, seed, role="evaluation").points)
    return np.concatenate(parts)


def evaluate_problem(problem: ProblemDef, predict: Callable[[np.ndarray], np.ndarray], *,
                     reference: str | Path | None = None, nodes: Sequence[int] | None = None,
                     points_per_dim: int | None = None, eval_interior: int | None = None,
                     eval_boundary: int | None = None, seed: int = 0, all_fields: bool = False,
                     keep_field: bool = True) -> EvalResult:
    """Relative error following each problem's evaluation convention.

    ``predict`` maps an ``(N, D)`` array to ``(N, output_dim)``.  Vector
    problems compare component ``problem.evaluation.field`` unless
    ``all_fields`` is set, in which case every component is reported in
    ``extra`` and the headline error is the all-component norm.
    """
    ev = problem.evaluation
    if ev.kind == "quadrature":
        ppd = points_per_dim or ev.points_per_dim
        rule = sampling.gauss_legendre(problem.domain, ppd)
        q = relative_l2_quadrature(predict, problem.exact_numpy, rule)
        return EvalResult(problem.name, q.ratio, "quadrature",
                          extra={"ratio": q.ratio, "root": q.root, "nodes": len(rule)})
    if ev.kind == "random":
        pts = _random_eval_points(problem, seed, eval_interior if eval_interior is not None else ev.interior,
                                  eval_boundary if eval_boundary is not None else ev.boundary)
        ref = problem.exact_numpy(pts)
    elif ev.kind == "reference":
        if reference is None:
            raise EvaluationError(f"problem {problem.name!r} needs a reference solution file (--reference)")
        pts, vals = load_reference(reference, problem.domain, nodes or ev.nodes)
        ref = vals[:, None]
    else:
        pts = sampling.grid_nodes(problem.domain, nodes or ev.nodes).points
        ref = problem.exact_numpy(pts)
    pred = np.asarray(predict(pts)).reshape(len(pts), -1)
    extra = {"n_points": len(pts)}
    if all_fields and ref.shape[1] > 1:
        for k, name in enumerate(problem.output_names):
            if np.any(ref[:, k]):
                extra[f"error_{name}"] = relative_l2_grid(pred[:, k], ref[:, k])
            else:  # identically zero reference (Euler v): relative error undefined
                extra[f"abs_error_{name}"] = float(np.linalg.norm(pred[:, k]) / np.sqrt(len(pred)))
        err = relative_l2_grid(pred, ref)
        fields = slice(None)
    else:
        k = ev.field
        err = relative_l2_grid(pred[:, k], ref[:, k])
        fields = slice(k, k + 1)
    if not keep_field:
        return EvalResult(problem.name, err, ev.kind, extra=extra)
    return EvalResult(problem.name, err, ev.kind, pts, pred[:, fields], ref[:, fields], extra)


def write_field(path: str | Path, points: np.ndarray, values: np.ndarray, names: Sequence[str],
                value_names: Sequence[str]) -> Path:
    """CSV with one row per node: coordinates followed by values."""
    path = Path(path)
    values = np.asarray(values).reshape(len(points), -1)
    header = ",".join(list(names) + list(value_names))
    np.savetxt(path, np.column_stack([points, values]), delimiter=",", header=header, comments="", fmt="%.10g")
    return path
