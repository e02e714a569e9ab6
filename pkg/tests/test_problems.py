import math

import numpy as np
import pytest
import torch

from bspinn import autodiff as ad
from bspinn import problems
from bspinn.autodiff import DTYPE, Jet
from bspinn.problems import get_problem, split_total


def _rand(n, lo, hi, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).uniform(lo, hi, (n, len(lo))))


def test_fnfit_target_values():
    f = problems.fnfit_target
    assert f(0.0, 0.0) == pytest.approx(1 + 2 * math.exp(-12.5))
    assert f(0.95, 0.0) == 0.5 and f(0.0, 0.61) == 0.5
    assert f(0.5, 0.0) == pytest.approx(1 + math.exp(-0.25 / 0.08) + math.exp(-50))
    # jump at the edge of the inner rectangle
    assert f(0.9, 0.0) != pytest.approx(f(0.90001, 0.0), abs=0.3)


def test_fnfit_torch_and_numpy_agree():
    X = _rand(500, (-1, -1), (1, 1))
    p = get_problem("fnfit")
    np.testing.assert_allclose(p.exact_numpy(X.numpy())[:, 0], problems.fnfit_target(X[:, 0], X[:, 1]))


def _laplacian_fd(f, X, h=1e-3):
    out = np.zeros(len(X))
    for k in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[k] = h
        out += (f(X + e) - 2 * f(X) + f(X - e)) / h**2
    return out


def test_helmholtz_2d_exact_solution_residual():
    p = get_problem("helmholtz2d")
    X = _rand(100, (0, 0), (1, 1))
    r = p.residual(p.exact, X)
    assert float(r.abs().max()) < 1e-6
    assert float(p.boundary(p.exact, X).abs().max()) == 0.0


def test_helmholtz_forcing_against_finite_differences():
    kappa = 2.0
    X = np.random.default_rng(1).uniform(0, 1, (50, 2))
    u = lambda P: np.sin(kappa * P[:, 0]) * np.sin(kappa * P[:, 1])  # noqa: E731
    f = (-_laplacian_fd(u, X) - kappa**2 * u(X))
    np.testing.assert_allclose(problems.helmholtz_forcing(torch.from_numpy(X), kappa)[:, 0].numpy(), f, atol=1e-5)


def test_helmholtz_3d_exact_solution_residual():
    p = get_problem("helmholtz3d")
    assert p.params["kappa"] == pytest.approx(8 * math.pi / 150)
    X = _rand(100, (0, 0, 0), (150, 150, 150))
    assert float(p.residual(p.exact, X).abs().max()) < 1e-6


def test_poisson_exact_solution_residual():
    p = get_problem("poisson10d")
    assert p.params == {"d": 10, "c": pytest.approx(0.6 * math.pi)}
    X = _rand(100, (-1,) * 10, (1,) * 10)
    assert float(p.residual(p.exact, X).abs().max()) < 1e-6


def test_poisson_forcing_against_finite_differences():
    c, d = 0.6 * math.pi, 4
    X = np.random.default_rng(2).uniform(-1, 1, (30, d))
    u = lambda P: P.mean(1) ** 2 + np.sin(c * P.sum(1))  # noqa: E731
    f = problems.poisson_forcing(torch.from_numpy(X), c)[:, 0].numpy()
    np.testing.assert_allclose(f, -_laplacian_fd(u, X), atol=1e-4)


def test_euler_constant_states_have_zero_residual():
    p = get_problem("euler2d")
    X = _rand(100, (0, 0, 0), (1, 1, 2))
    counter = {}
    r = problems.euler_residuals(p.exact, X, counter)
    assert r.shape == (100, 4)
    assert float(r.abs().max()) < 1e-6
    assert counter["nonpositive_density"] == 0
    assert float(p.initial(p.exact, X).abs().max()) == 0.0


def test_euler_exact_values_and_shock_position():
    X = torch.tensor([[0.53, 0.3, 0.4], [0.56, 0.3, 0.5], [0.2, 0.9, 2.0]], dtype=DTYPE)
    ex = problems.euler_exact(X)
    assert ex[:, 0].tolist() == [1.4, 1.0, 1.4]
    assert ex[:, 1:].tolist() == [[0.1, 0.0, 1.0]] * 3


def _manufactured(J):
    # u = sin(pi x) exp(-t) on a (x, t) jet
    x, t = J[:, 0:1], J[:, 1:2]
    return ad.sin(math.pi * x) * ad.exp(-1.0 * t)


def test_burgers_residual_on_manufactured_function():
    X = _rand(40, (-1, 0), (1, 1))
    r = problems.burgers_residual(_manufactured, X)[:, 0].numpy()
    x, t = X[:, 0].numpy(), X[:, 1].numpy()
    u = np.sin(np.pi * x) * np.exp(-t)
    expected = -u + u * np.pi * np.cos(np.pi * x) * np.exp(-t) + problems.BURGERS_NU * np.pi**2 * u
    np.testing.assert_allclose(r, expected, atol=1e-12)
    ic = problems.burgers_initial(lambda P: -torch.sin(math.pi * P[:, 0:1]), X)
    assert float(ic.abs().max()) == 0.0


def test_euler_residual_counts_nonpositive_density():
    X = _rand(10, (0, 0, 0), (1, 1, 2))

    def model(J):
        return Jet.constant(torch.tensor([[-1.0, 0.0, 0.0, 1.0]], dtype=DTYPE).expand(10, 4), J.ncoords, J.order)

    counter = {}
    problems.euler_residuals(model, X, counter)
    assert counter["nonpositive_density"] == 10


@pytest.mark.parametrize("name,roles,counts", [
    ("fnfit", ("interior",), {"interior": 15000}),
    ("burgers1d", ("interior", "boundary", "initial"), {"interior": 30000, "boundary": 200, "initial": 200}),
    ("euler2d", ("interior", "boundary", "initial"), {"interior": 10000, "boundary": 400, "initial": 400}),
    ("helmholtz2d", ("interior", "boundary"), {"interior": 6561, "boundary": 320}),
    ("helmholtz3d", ("interior", "boundary"), {"interior": 40000, "boundary": 4000}),
    ("poisson10d", ("interior", "boundary"), {"interior": 4000, "boundary": 4000}),
])
def test_default_point_counts(name, roles, counts):
    p = get_problem(name)
    assert p.roles == roles
    pts = p.sample(seed=0)
    assert {k: len(v) for k, v in pts.items()} == counts
    for ps in pts.values():
        assert p.domain.contains(ps.points).all()


def test_burgers_interior_uses_lhs():
    pts = get_problem("burgers1d").sample(0, interior=100)["interior"]
    assert pts.sampler == "lhs"


def test_split_total():
    assert split_total(4000, 6) == (667, 667, 667, 667, 666, 666)
    assert sum(split_total(17, 4)) == 17


def test_registry_errors():
    with pytest.raises(KeyError):
        get_problem("wave")
    with pytest.raises(ValueError):
        get_problem("fnfit", kappa=1.0)
    assert get_problem("helmholtz2d", kappa=2 * math.pi).params["kappa"] == pytest.approx(2 * math.pi)
    assert get_problem("poisson10d", d=3).domain.dim == 3


def test_no_exact_solution_for_burgers():
    with pytest.raises(ValueError):
        get_problem("burgers1d").exact_numpy(np.zeros((1, 2)))
