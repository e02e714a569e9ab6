"""Input-derivative jets layered over torch's reverse-mode tape.

A :class:`Jet` carries a value together with first and *pure* second
derivatives with respect to a set of seeded input coordinates.  Every
component is an ordinary float64 tensor that stays attached to the autograd
graph, so residuals assembled from jets can be differentiated w.r.t. the
network parameters with :func:`grad_params`.

Shapes: ``value`` has shape ``S``; ``d1`` and ``d2`` have shape ``(K, *S)``
where ``K`` is the number of seeded coordinates.  Mixed partials are never
formed.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import torch

DTYPE = torch.float64

class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where a finite value is required."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class Jet:
    """Value plus per-coordinate first and pure second derivatives.

    ``d2`` may be ``None``: for ``order == 1`` it is never tracked, for
    ``order == 2`` it stands for an all-zero second derivative.
    """

    __slots__ = ("value", "d1", "d2", "order")
    __array_priority__ = 1000

    def __init__(self, value, d1, d2=None, order: int = 2):
        self.value = value
        self.d1 = d1
        self.d2 = None if order == 1 else d2
        self.order = order

    # -- construction -------------------------------------------------
    @classmethod
    def constant(cls, value: torch.Tensor, ncoords: int, order: int = 2) -> "Jet":
        value = torch.as_tensor(value, dtype=DTYPE)
        d1 = torch.zeros((ncoords, *value.shape), dtype=DTYPE)
        return cls(value, d1, None, order)

    @property
    def ncoords(self) -> int:
        return self.d1.shape[0]

    @property
    def shape(self):
        return self.value.shape

    def second(self) -> torch.Tensor:
        if self.order < 2:
            raise ValueError("second derivatives were not tracked (order=1 jet)")
        if self.d2 is None:
            return torch.zeros_like(self.d1)
        return self.d2

    def coord(self, k: int) -> "Jet2":
        """Project onto a single seeded coordinate."""
        if not 0 <= k < self.ncoords:
            raise IndexError(f"coordinate {k} out of range for {self.ncoords} seeded coordinates")
        second = self.second()[k] if self.order == 2 else None
        return Jet2(self.value, self.d1[k], second)

    # -- structural ops -----------------------------------------------
    def __getitem__(self, key) -> "Jet":
        if not isinstance(key, tuple):
            key = (key,)
        dkey = (slice(None),) + key
        d2 = self.d2[dkey] if self.d2 is not None else None
        return Jet(self.value[key], self.d1[dkey], d2, self.order)

    def reshape(self, *shape) -> "Jet":
        k = self.ncoords
        d2 = self.d2.reshape(k, *shape) if self.d2 is not None else None
        return Jet(self.value.reshape(*shape), self.d1.reshape(k, *shape), d2, self.order)

    def linear(self, fn: Callable[[torch.Tensor], torch.Tensor], bias=None) -> "Jet":
        """Push the jet through a linear map ``fn`` followed by ``+ bias``.

        ``fn`` must act on trailing dimensions only so the leading coordinate
        axis of the derivative tensors is preserved.
        """
        value = fn(self.value)
        if bias is not None:
            value = value + bias
        d2 = fn(self.d2) if self.d2 is not None else None
        return Jet(value, fn(self.d1), d2, self.order)

    def __matmul__(self, other: torch.Tensor) -> "Jet":
        return self.linear(lambda t: t @ other)

    def sum(self, dim: int) -> "Jet":
        dim = dim if dim >= 0 else self.value.dim() + dim
        return self.linear(lambda t: t.sum(dim=dim - self.value.dim()))

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            return Jet(self.value + other, self.d1, self.d2, self.order)
        order = min(self.order, other.order)
        return Jet(self.value + other.value, self.d1 + other.d1, _add(self.d2, other.d2), order)

    __radd__ = __add__

    def __neg__(self) -> "Jet":
        return Jet(-self.value, -self.d1, _neg(self.d2), self.order)

    def __sub__(self, other) -> "Jet":
        return self + (-other)

    def __rsub__(self, other) -> "Jet":
        return (-self) + other

    def __mul__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            d2 = self.d2 * other if self.d2 is not None else None
            return Jet(self.value * other, self.d1 * other, d2, self.order)
        order = min(self.order, other.order)
        a, b = self, other
        value = a.value * b.value
        d1 = a.d1 * b.value + a.value * b.d1
        d2 = None
        if order == 2:
            d2 = 2.0 * a.d1 * b.d1
            if a.d2 is not None:
                d2 = d2 + a.d2 * b.value
            if b.d2 is not None:
                d2 = d2 + a.value * b.d2
        return Jet(value, d1, d2, order)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet":
        inv = 1.0 / self.value
        return self._chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __truediv__(self, other) -> "Jet":
        if not isinstance(other, Jet):
            return self * (1.0 / torch.as_tensor(other, dtype=DTYPE))
        return self * other.reciprocal()

    def __rtruediv__(self, other) -> "Jet":
        return self.reciprocal() * other

    def __pow__(self, n: int) -> "Jet":
        if not isinstance(n, int) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        if n == 0:
            return Jet.constant(torch.ones_like(self.value), self.ncoords, self.order)
        if n == 1:
            return self
        v = self.value
        return self._chain(v**n, n * v ** (n - 1), n * (n - 1) * v ** (n - 2))

    # -- elementwise functions ----------------------------------------
    def _chain(self, f0, f1, f2) -> "Jet":
        d1 = f1 * self.d1
        d2 = None
        if self.order == 2:
            d2 = f2 * self.d1 * self.d1
            if self.d2 is not None:
                d2 = d2 + f1 * self.d2
        return Jet(f0, d1, d2, self.order)

    def sin(self) -> "Jet":
        s, c = torch.sin(self.value), torch.cos(self.value)
        return self._chain(s, c, -s)

    def cos(self) -> "Jet":
        s, c = torch.sin(self.value), torch.cos(self.value)
        return self._chain(c, -s, -c)

    def exp(self) -> "Jet":
        e = torch.exp(self.value)
        return self._chain(e, e, e)

    def tanh(self) -> "Jet":
        t = torch.tanh(self.value)
        dt = 1.0 - t * t
        return self._chain(t, dt, -2.0 * t * dt)

    def sigmoid(self) -> "Jet":
        s = torch.sigmoid(self.value)
        ds = s * (1.0 - s)
        return self._chain(s, ds, ds * (1.0 - 2.0 * s))

    def square(self) -> "Jet":
        return self._chain(self.value * self.value, 2.0 * self.value, torch.full_like(self.value, 2.0))

    def __repr__(self) -> str:
        return f"Jet(shape={tuple(self.value.shape)}, ncoords={self.ncoords}, order={self.order})"


class Jet2(NamedTuple):
    """Value, first and pure second derivative along one input coordinate."""

    value: torch.Tensor
    first: torch.Tensor
    second: torch.Tensor | None


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _neg(a):
    return None if a is None else -a


def _dispatch(name: str):
    tfn = getattr(torch, name)

    def fn(x):
        if isinstance(x, Jet):
            return getattr(x, name)()
        return tfn(torch.as_tensor(x, dtype=DTYPE))

    fn.__name__ = name
    fn.__doc__ = f"Elementwise {name} accepting tensors or jets."
    return fn


sin = _dispatch("sin")
cos = _dispatch("cos")
exp = _dispatch("exp")
tanh = _dispatch("tanh")
sigmoid = _dispatch("sigmoid")
square = _dispatch("square")

ACTIVATIONS: dict[str, Callable] = {"tanh": tanh, "sin": sin, "sigmoid": sigmoid}


def seed(points: torch.Tensor, coords: Sequence[int] | None = None, order: int = 2) -> Jet:
    """Turn an ``(N, D)`` point matrix into a jet seeded on ``coords``.

    Seeded coordinate ``x_k`` gets first derivative 1 along its own axis and
    0 along the others; all second derivatives start at zero.
    """
    points = torch.as_tensor(points, dtype=DTYPE)
    if points.dim() != 2:
        raise ValueError(f"expected an (N, D) point matrix, got shape {tuple(points.shape)}")
    n, dim = points.shape
    coords = tuple(range(dim)) if coords is None else tuple(coords)
    for k in coords:
        if not 0 <= k < dim:
            raise IndexError(f"coordinate {k} out of range for input dimension {dim}")
    d1 = torch.zeros((len(coords), n, dim), dtype=DTYPE)
    for i, k in enumerate(coords):
        d1[i, :, k] = 1.0
    return Jet(points, d1, None, order)


def input_jet(fn: Callable[[Jet], Jet], points: torch.Tensor, coord: int) -> Jet2:
    """Evaluate ``fn`` at ``points`` and return ``(u, du/dx_c, d2u/dx_c^2)``."""
    out = fn(seed(points, (coord,)))
    return out.coord(0)


def first_deriv(expr: Jet, coord: int) -> torch.Tensor:
    """First derivative of a jet expression along seeded coordinate ``coord``."""
    if not 0 <= coord < expr.ncoords:
        raise IndexError(f"coordinate {coord} out of range for {expr.ncoords} seeded coordinates")
    return expr.d1[coord]


def check_finite(value: torch.Tensor, what: str = "value", epoch: int | None = None) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteError(f"non-finite {what}", epoch)
    return value


def evaluate(fn: Callable, *args, **bindings):
    """Call ``fn`` with the given bindings and reject non-finite results."""
    try:
        out = fn(*args, **bindings)
    except TypeError as exc:
        raise TypeError(f"unbound or unexpected symbol: {exc}") from exc
    value = out.value if isinstance(out, Jet) else torch.as_tensor(out, dtype=DTYPE)
    check_finite(value, "result")
    return out


def grad_params(loss: torch.Tensor, params: torch.Tensor, retain_graph: bool = False) -> torch.Tensor:
    """Reverse-accumulation gradient of a scalar ``loss`` w.r.t. a flat parameter tensor."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    (g,) = torch.autograd.grad(loss.reshape(()), params, retain_graph=retain_graph, allow_unused=True)
    if g is None:
        g = torch.zeros_like(params)
    return g


__all__ = [
    "DTYPE",
    "Jet",
    "Jet2",
    "NonFiniteError",
    "ACTIVATIONS",
    "seed",
    "input_jet",
    "first_deriv",
    "grad_params",
    "evaluate",
    "check_finite",
    "sin",
    "cos",
    "exp",
    "tanh",
    "sigmoid",
    "square",
]
