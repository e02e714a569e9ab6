"""Loss assembly, Adam, learning-rate schedules and the multi-seed protocol."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from .autodiff import DTYPE, NonFiniteError, grad_params
from .network import NetworkSpec, ParamStore, build_layers, forward, init_params, param_count
from .problems import ProblemDef, get_problem

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "total", "loss_L", "loss_B", "loss_I", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr0: float
    scheduler: str = "plateau"  # plateau | exponential | constant
    patience: int | None = None  # plateau; defaults to epochs // 10
    factor: float | None = None  # 0.5 for plateau, 0.95 for exponential
    every: int = 1000  # exponential decay period in epochs
    threshold: float = 1e-4  # plateau relative improvement threshold
    lambda_b: float = 1.0
    lambda_i: float = 1.0
    seed: int = 0
    interior: int | None = None
    boundary: Any = None  # per-face count(s); None = problem default
    initial: int | None = None
    interior_sampler: str | None = None
    compile: bool = False
    full_batch: bool = True

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.scheduler not in ("plateau", "exponential", "constant"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if not 0 < self.decay < 1:
            raise ValueError("scheduler factor must lie in (0, 1)")
        if not self.full_batch:
            raise ValueError("only full-batch training is supported")

    @property
    def decay(self) -> float:
        if self.factor is not None:
            return self.factor
        return 0.95 if self.scheduler == "exponential" else 0.5

    @classmethod
    def for_problem(cls, problem: ProblemDef, **overrides) -> "TrainConfig":
        d = problem.defaults
        base = dict(epochs=d.epochs, lr0=d.lr0, scheduler=d.scheduler,
                    lambda_b=d.lambda_b, lambda_i=d.lambda_i)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


# -- optimiser ------------------------------------------------------------

@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE))


def adam_step(state: AdamState, params: torch.Tensor, grad: torch.Tensor, lr: float
              ) -> tuple[AdamState, torch.Tensor]:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes disagree")
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteError("non-finite gradient")
    with torch.no_grad():
        state.t += 1
        b1, b2 = state.beta1, state.beta2
        state.m.mul_(b1).add_(grad, alpha=1.0 - b1)
        state.v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
        m_hat = state.m / (1.0 - b1**state.t)
        v_hat = state.v / (1.0 - b2**state.t)
        params.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return state, params


class PlateauScheduler:
    """Halve the rate after ``patience`` epochs without a relative improvement of ``threshold``."""

    def __init__(self, lr0: float, patience: int, factor: float = 0.5, threshold: float = 1e-4):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
        return self.lr


class ExponentialScheduler:
    """``lr0 * factor ** (epoch // every)``."""

    def __init__(self, lr0: float, factor: float = 0.95, every: int = 1000):
        self.lr0, self.factor, self.every = lr0, factor, every
        self.lr = lr0

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.factor ** (epoch // self.every)

    def step(self, epoch: int, loss: float) -> float:
        self.lr = self.lr_at(epoch + 1)
        return self.lr


class ConstantScheduler:
    def __init__(self, lr0: float):
        self.lr = lr0

    def step(self, epoch: int, loss: float) -> float:
        return self.lr


def make_scheduler(config: TrainConfig):
    if config.scheduler == "plateau":
        patience = config.patience if config.patience is not None else max(config.epochs // 10, 1)
        return PlateauScheduler(config.lr0, patience, config.decay, config.threshold)
    if config.scheduler == "exponential":
        return ExponentialScheduler(config.lr0, config.decay, config.every)
    return ConstantScheduler(config.lr0)


def schedule_lr(scheduler, epoch: int, current_loss: float) -> float:
    """Feed one epoch's loss to a scheduler and return the rate for the next epoch."""
    return scheduler.step(epoch, current_loss)


# -- loss ---------------------------------------------------------------

def _mean_square(r: torch.Tensor) -> torch.Tensor:
    return (r * r).mean()


def assemble_loss(problem: ProblemDef, model, points: dict[str, Any], lambda_b: float = 1.0,
                  lambda_i: float = 1.0) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """``loss_L + lambda_B loss_B + lambda_I loss_I`` with mean-of-squares per role."""
    for role in problem.roles:
        if role not in points or len(points[role]) == 0:
            raise ValueError(f"problem {problem.name!r} needs a non-empty {role!r} point set")
    zero = torch.zeros((), dtype=DTYPE)
    parts = {"L": _mean_square(problem.residual(model, points["interior"])), "B": zero, "I": zero}
    if problem.boundary is not None:
        parts["B"] = _mean_square(problem.boundary(model, points["boundary"]))
    if problem.initial is not None:
        parts["I"] = _mean_square(problem.initial(model, points["initial"]))
    total = parts["L"] + lambda_b * parts["B"] + lambda_i * parts["I"]
    return total, parts


class LossFunction:
    """Maps a flat parameter tensor to ``[total, L, B, I]`` on fixed points."""

    def __init__(self, problem: ProblemDef, spec: NetworkSpec, lambda_b: float, lambda_i: float):
        self.problem = problem
        self.template = ParamStore(spec, torch.zeros(param_count(spec), dtype=DTYPE), build_layers(spec))
        self.lambda_b = lambda_b
        self.lambda_i = lambda_i
        self._fn = self._losses

    def _losses(self, params: torch.Tensor, points: dict[str, torch.Tensor]) -> torch.Tensor:
        store = self.template

        def model(x):
            return forward(store, x, params)

        total, parts = assemble_loss(self.problem, model, points, self.lambda_b, self.lambda_i)
        return torch.stack([total, parts["L"], parts["B"], parts["I"]])

    def compile(self) -> "LossFunction":
        self._fn = torch.compile(self._losses, dynamic=False)
        return self

    def __call__(self, params: torch.Tensor, points: dict[str, torch.Tensor]) -> torch.Tensor:
        if self._fn is not self._losses:
            try:
                return self._fn(params, points)
            except Exception as exc:  # compiler backends are optional; eager is always correct
                log.warning("torch.compile failed (%s); falling back to eager", exc)
                self._fn = self._losses
        return self._losses(params, points)


_LOSS_CACHE: dict[tuple, LossFunction] = {}


def loss_function(problem: ProblemDef, spec: NetworkSpec, lambda_b: float, lambda_i: float,
                  compile: bool = False) -> LossFunction:
    if not compile:
        return LossFunction(problem, spec, lambda_b, lambda_i)
    key = (problem.name, tuple(sorted(problem.params.items())), spec, lambda_b, lambda_i)
    if key not in _LOSS_CACHE:
        _LOSS_CACHE[key] = LossFunction(problem, spec, lambda_b, lambda_i).compile()
    return _LOSS_CACHE[key]


def points_as_tensors(points: dict) -> dict[str, torch.Tensor]:
    out = {}
    for role, ps in points.items():
        arr = ps.points if hasattr(ps, "points") else ps
        out[role] = torch.as_tensor(np.asarray(arr), dtype=DTYPE)
    return out


# -- runs ---------------------------------------------------------------

@dataclass
class RunRecord:
    problem: str
    spec: NetworkSpec
    seed: int
    history: np.ndarray  # (epochs, len(HISTORY_COLUMNS))
    best_epoch: int
    best_loss: float
    best_params: ParamStore | None
    duration: float
    error: str | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def losses(self) -> np.ndarray:
        return self.history[:, 1]

    def write_history(self, path: str | Path, stride: int = 1) -> Path:
        path = Path(path)
        rows = self.history[::max(int(stride), 1)]
        fmt = ["%d"] + ["%.17g"] * (len(HISTORY_COLUMNS) - 1)
        np.savetxt(path, rows, delimiter=",", header=",".join(HISTORY_COLUMNS), comments="", fmt=fmt)
        return path


def _count_roles(problem: ProblemDef, config: TrainConfig) -> dict[str, Any]:
    return dict(interior=config.interior, boundary=config.boundary, initial=config.initial,
                interior_sampler=config.interior_sampler)


def train(problem: ProblemDef, spec: NetworkSpec, config: TrainConfig, points: dict | None = None,
          progress: Callable[[dict], None] | None = None, progress_every: int = 0) -> RunRecord:
    """Full-batch Adam for ``config.epochs`` iterations; keeps the minimum-loss parameters.

    The loss recorded at epoch ``e`` belongs to the parameters *before* the
    ``e``-th update, so the best snapshot reproduces its recorded loss.
    """
    if param_count(spec) == 0:
        raise ValueError("network has no trainable parameters")
    if spec.input_dim != problem.input_dim or spec.output_dim != problem.output_dim:
        raise ValueError(
            f"network maps {spec.input_dim}->{spec.output_dim}, problem {problem.name!r} needs "
            f"{problem.input_dim}->{problem.output_dim}"
        )
    start = time.perf_counter()
    if points is None:
        points = problem.sample(config.seed, **_count_roles(problem, config))
    tensors = points_as_tensors(points)
    store = init_params(spec, config.seed)
    params = store.data.clone().requires_grad_(True)
    loss_fn = loss_function(problem, spec, config.lambda_b, config.lambda_i, config.compile)
    adam = AdamState.zeros(params.numel())
    scheduler = make_scheduler(config)
    lr = config.lr0

    history = np.zeros((config.epochs, len(HISTORY_COLUMNS)))
    best_loss, best_epoch, best = math.inf, -1, None
    for epoch in range(config.epochs):
        losses = loss_fn(params, tensors)
        grad = grad_params(losses[0], params)
        values = losses.detach().tolist()
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteError("non-finite loss", epoch)
        history[epoch] = (epoch, *values, lr)
        if values[0] < best_loss:
            best_loss, best_epoch = values[0], epoch
            best = params.detach().clone()
        try:
            adam_step(adam, params, grad, lr)
        except NonFiniteError as exc:
            raise NonFiniteError(str(exc), epoch) from None
        lr = schedule_lr(scheduler, epoch, values[0])
        if progress is not None and progress_every and (epoch % progress_every == 0 or epoch == config.epochs - 1):
            progress({"problem": problem.name, "arch": spec.arch, "seed": config.seed, "epoch": epoch,
                      "loss": values[0], "lr": history[epoch, -1]})

    return RunRecord(problem.name, spec, config.seed, history, best_epoch, best_loss,
                     ParamStore(spec, best, store.layers), time.perf_counter() - start)


def evaluate_loss(problem: ProblemDef, store: ParamStore, points: dict, lambda_b: float,
                  lambda_i: float) -> dict[str, float]:
    """Re-evaluate the training loss of a parameter snapshot."""
    fn = LossFunction(problem, store.spec, lambda_b, lambda_i)
    values = fn(store.data.detach(), points_as_tensors(points)).detach().tolist()
    return dict(zip(("total", "L", "B", "I"), values))


def _train_safe(problem: ProblemDef, spec: NetworkSpec, config: TrainConfig,
                progress=None, progress_every: int = 0) -> RunRecord:
    try:
        return train(problem, spec, config, progress=progress, progress_every=progress_every)
    except (NonFiniteError, RuntimeError, ValueError) as exc:
        log.warning("run %s/%s seed %d failed: %s", problem.name, spec.arch, config.seed, exc)
        return RunRecord(problem.name, spec, config.seed, np.zeros((0, len(HISTORY_COLUMNS))), -1,
                         math.inf, None, 0.0, error=f"{type(exc).__name__}: {exc}")


def _worker(args) -> RunRecord:
    name, params, domain, spec, config = args
    problem = get_problem(name, **params)
    if problem.domain != domain:
        problem = replace(problem, domain=domain)
    return _train_safe(problem, spec, config)


def ensemble_seeds(base_seed: int, n_seeds: int) -> list[int]:
    return [int(base_seed) + k for k in range(n_seeds)]


def run_ensemble(problem: ProblemDef, spec: NetworkSpec, config: TrainConfig, n_seeds: int = 10,
                 workers: int = 1, progress=None, progress_every: int = 0) -> list[RunRecord]:
    """Independent runs; seed ``config.seed + k`` drives both sampling and initialisation."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    configs = [replace(config, seed=s) for s in ensemble_seeds(config.seed, n_seeds)]
    if workers <= 1:
        return [_train_safe(problem, spec, c, progress, progress_every) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        jobs = [(problem.name, problem.params, problem.domain, spec, c) for c in configs]
        return list(pool.map(_worker, jobs))
