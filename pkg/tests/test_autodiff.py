import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bspinn import autodiff as ad
from bspinn.autodiff import DTYPE, Jet, NonFiniteError


def _fd2(f, x, h=1e-4):
    """Central first and second differences of a scalar numpy function."""
    return (f(x + h) - f(x - h)) / (2 * h), (f(x + h) - 2 * f(x) + f(x - h)) / h**2


UNARY = {
    "sin": (ad.sin, np.sin),
    "cos": (ad.cos, np.cos),
    "exp": (ad.exp, np.exp),
    "tanh": (ad.tanh, np.tanh),
    "sigmoid": (ad.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    "square": (ad.square, np.square),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=st.floats(-2.0, 2.0))
@settings(max_examples=25, deadline=None)
def test_unary_jet_matches_finite_differences(name, x):
    jfn, nfn = UNARY[name]
    J = jfn(ad.seed(torch.tensor([[x]], dtype=DTYPE)))
    d1, d2 = _fd2(nfn, x)
    assert J.value.item() == pytest.approx(nfn(x), abs=1e-14)
    assert J.d1[0].item() == pytest.approx(d1, rel=1e-6, abs=1e-7)
    assert J.second()[0].item() == pytest.approx(d2, rel=1e-4, abs=1e-5)


def _composite_np(x, y):
    return np.sin(x * y) / (1.5 + np.cos(x)) + (x - y) ** 3 - np.exp(0.3 * x) * np.tanh(y)


def _composite_jet(X):
    x, y = X[:, 0:1], X[:, 1:2]
    return ad.sin(x * y) / (1.5 + ad.cos(x)) + (x - y) ** 3 - ad.exp(0.3 * x) * ad.tanh(y)


@given(x=st.floats(-1.5, 1.5), y=st.floats(-1.5, 1.5))
@settings(max_examples=40, deadline=None)
def test_composite_pure_second_derivatives(x, y):
    J = _composite_jet(ad.seed(torch.tensor([[x, y]], dtype=DTYPE)))
    fx1, fx2 = _fd2(lambda v: _composite_np(v, y), x)
    fy1, fy2 = _fd2(lambda v: _composite_np(x, v), y)
    np.testing.assert_allclose(J.d1[:, 0, 0].numpy(), [fx1, fy1], rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(J.second()[:, 0, 0].numpy(), [fx2, fy2], rtol=1e-4, atol=1e-4)


def test_jet_agrees_with_reverse_mode_hessian_diagonal():
    gen = torch.Generator().manual_seed(3)
    X = torch.rand(7, 2, generator=gen, dtype=DTYPE) * 2 - 1
    J = _composite_jet(ad.seed(X))
    for i in range(len(X)):
        H = torch.autograd.functional.hessian(lambda p: _composite_jet(p.reshape(1, 2)).sum(), X[i])
        np.testing.assert_allclose(J.second()[:, i, 0].numpy(), torch.diagonal(H).numpy(), rtol=1e-12, atol=1e-12)


def test_seed_subset_and_input_jet():
    X = torch.tensor([[0.3, -0.2, 0.7]], dtype=DTYPE)
    J = ad.seed(X, coords=(2,))
    assert J.ncoords == 1
    assert J.d1[0, 0].tolist() == [0.0, 0.0, 1.0]
    u, du, d2u = ad.input_jet(lambda P: P[:, 2:3] ** 3, X, 2)
    assert du.item() == pytest.approx(3 * 0.7**2)
    assert d2u.item() == pytest.approx(6 * 0.7)
    with pytest.raises(IndexError):
        ad.seed(X, coords=(3,))


def test_first_order_jet_has_no_second_part():
    J = ad.tanh(ad.seed(torch.zeros(2, 1, dtype=DTYPE), order=1))
    assert J.d2 is None
    with pytest.raises(ValueError):
        J.second()
    assert ad.first_deriv(J, 0).flatten().tolist() == [1.0, 1.0]
    with pytest.raises(IndexError):
        ad.first_deriv(J, 1)


def test_linear_map_is_exact():
    W = torch.tensor([[1.0, 2.0], [-3.0, 0.5]], dtype=DTYPE)
    J = ad.seed(torch.tensor([[0.2, 0.4]], dtype=DTYPE))
    out = J.linear(lambda t: t @ W, torch.tensor([1.0, 1.0], dtype=DTYPE))
    np.testing.assert_allclose(out.value.numpy(), [[1 + 0.2 - 1.2, 1 + 0.4 + 0.2]])
    np.testing.assert_allclose(out.d1[:, 0].numpy(), W.numpy())
    assert float(out.second().abs().max()) == 0.0


def test_plain_tensors_pass_through_dispatch():
    t = torch.linspace(-1, 1, 5, dtype=DTYPE)
    assert torch.equal(ad.tanh(t), torch.tanh(t))
    assert torch.equal(ad.square(t), t * t)


def test_grad_params_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    p = torch.randn(5, generator=gen, dtype=DTYPE, requires_grad=True)
    X = torch.randn(4, 5, generator=gen, dtype=DTYPE)

    def loss_of(q):
        return (torch.sin(X @ q) ** 2).mean()

    g = ad.grad_params(loss_of(p), p)
    h = 1e-6
    for i in range(5):
        e = torch.zeros(5, dtype=DTYPE)
        e[i] = h
        fd = (loss_of(p.detach() + e) - loss_of(p.detach() - e)) / (2 * h)
        assert g[i].item() == pytest.approx(fd.item(), rel=1e-6, abs=1e-10)


def test_grad_params_rejects_non_scalar_and_fills_unused():
    p = torch.zeros(3, dtype=DTYPE, requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.grad_params(p * 2, p)
    q = torch.zeros(2, dtype=DTYPE, requires_grad=True)
    assert torch.equal(ad.grad_params((p**2).sum(), q), torch.zeros(2, dtype=DTYPE))


def test_evaluate_rejects_nonfinite_and_unbound():
    with pytest.raises(NonFiniteError):
        ad.evaluate(lambda x: torch.log(x), torch.tensor([-1.0], dtype=DTYPE))
    with pytest.raises(TypeError, match="unbound"):
        ad.evaluate(lambda x, y: x + y, torch.tensor([1.0], dtype=DTYPE))
    out = ad.evaluate(lambda x, y: x * y, x=torch.tensor(2.0, dtype=DTYPE), y=3.0)
    assert float(out) == 6.0


def test_nonfinite_error_reports_epoch():
    err = NonFiniteError("non-finite loss", epoch=12)
    assert err.epoch == 12 and "epoch 12" in str(err)
    with pytest.raises(NonFiniteError):
        ad.check_finite(torch.tensor([math.inf], dtype=DTYPE))


def test_integer_power_and_division():
    J = ad.seed(torch.tensor([[1.3]], dtype=DTYPE))
    for n in (0, 1, 2, 5):
        out = J**n
        assert out.d1[0].item() == pytest.approx(n * 1.3 ** (n - 1) if n else 0.0)
        assert out.second()[0].item() == pytest.approx(n * (n - 1) * 1.3 ** (n - 2) if n > 1 else 0.0)
    inv = 1.0 / J
    assert inv.second()[0].item() == pytest.approx(2 / 1.3**3)
