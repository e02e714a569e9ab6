import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bspinn.autodiff import DTYPE, NonFiniteError
from bspinn.network import NetworkSpec, forward, init_params
from bspinn.problems import get_problem
from bspinn.training import (
    AdamState,
    ExponentialScheduler,
    LossFunction,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    assemble_loss,
    evaluate_loss,
    make_scheduler,
    points_as_tensors,
    run_ensemble,
    train,
)


def test_adam_matches_torch_optimizer():
    gen = torch.Generator().manual_seed(0)
    target = torch.randn(6, generator=gen, dtype=DTYPE)
    ours = torch.randn(6, generator=gen, dtype=DTYPE)
    ref = ours.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    state = AdamState.zeros(6)
    for _ in range(50):
        g = 2 * (ours - target) * torch.cos(ours)
        adam_step(state, ours, g, 0.01)
        ref.grad = 2 * (ref.detach() - target) * torch.cos(ref.detach())
        opt.step()
    torch.testing.assert_close(ours, ref.detach(), rtol=1e-13, atol=1e-14)
    assert state.t == 50


def test_adam_first_step_is_signed_lr():
    p = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    adam_step(AdamState.zeros(3), p, torch.tensor([3.0, -0.1, 0.0], dtype=DTYPE), 0.1)
    np.testing.assert_allclose(p.numpy(), [0.9, -1.9, 0.5], atol=1e-8)


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.zeros(2), torch.zeros(2, dtype=DTYPE), torch.tensor([1.0, math.nan], dtype=DTYPE), 0.1)


@given(losses=st.lists(st.floats(0.01, 10.0), min_size=5, max_size=80), patience=st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_plateau_matches_torch_scheduler(losses, patience):
    ours = PlateauScheduler(1.0, patience, 0.5, 1e-4)
    p = torch.zeros(1, requires_grad=True)
    opt = torch.optim.SGD([p], lr=1.0)
    ref = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5, patience=patience,
                                                     threshold=1e-4, threshold_mode="rel", eps=0.0)
    for e, loss in enumerate(losses):
        lr = ours.step(e, loss)
        ref.step(loss)
        assert lr == opt.param_groups[0]["lr"]


def test_exponential_schedule():
    s = ExponentialScheduler(1e-3, 0.95, 1000)
    assert s.lr_at(999) == 1e-3
    assert s.lr_at(1000) == pytest.approx(0.95e-3)
    assert s.lr_at(5500) == pytest.approx(1e-3 * 0.95**5)
    assert s.step(999, 0.0) == pytest.approx(0.95e-3)


def test_config_validation_and_defaults():
    p = get_problem("poisson10d")
    cfg = TrainConfig.for_problem(p, epochs=20)
    assert cfg.scheduler == "exponential" and cfg.decay == 0.95 and cfg.lr0 == 1e-3
    plateau = TrainConfig.for_problem(get_problem("burgers1d"))
    assert plateau.lr0 == 5e-3 and plateau.decay == 0.5
    assert make_scheduler(plateau).patience == 1000
    for bad in (dict(epochs=0), dict(lr0=0.0), dict(scheduler="cosine"), dict(factor=1.5), dict(full_batch=False)):
        with pytest.raises(ValueError):
            replace(plateau, **bad)


def _tiny(problem="helmholtz2d", arch="bsnn:8-2", act="sin", **kw):
    p = get_problem(problem, kappa=2 * math.pi) if problem == "helmholtz2d" else get_problem(problem)
    spec = NetworkSpec.from_arch(arch, p.input_dim, p.output_dim, activation=act)
    cfg = TrainConfig.for_problem(p, **{"epochs": 60, "interior": 64, "boundary": 4, "initial": 8, "lr0": 1e-2, **kw})
    return p, spec, cfg


def test_loss_assembly_weights_terms():
    p, spec, cfg = _tiny()
    pts = points_as_tensors(p.sample(0, interior=10, boundary=2))
    fn = LossFunction(p, spec, 100.0, 0.0)
    store = init_params(spec, 0)
    total, L, B, I = fn(store.data, pts).tolist()
    assert I == 0.0
    assert total == pytest.approx(L + 100.0 * B, rel=1e-14)
    model = lambda x: forward(store, x)  # noqa: E731
    L_ref = float((p.residual(model, pts["interior"]) ** 2).mean())
    B_ref = float((p.boundary(model, pts["boundary"]) ** 2).mean())
    assert (L, B) == pytest.approx((L_ref, B_ref), rel=1e-14)
    total2, parts = assemble_loss(p, model, pts, 100.0, 0.0)
    assert float(total2) == pytest.approx(total, rel=1e-14) and set(parts) == {"L", "B", "I"}


def test_train_reduces_loss_and_keeps_best_snapshot():
    p, spec, cfg = _tiny()
    rec = train(p, spec, cfg)
    assert rec.ok and rec.history.shape == (60, 6)
    assert rec.best_loss == rec.losses.min() and rec.losses[rec.best_epoch] == rec.best_loss
    assert rec.best_loss < rec.losses[0]
    pts = p.sample(cfg.seed, interior=64, boundary=4)
    again = evaluate_loss(p, rec.best_params, pts, cfg.lambda_b, cfg.lambda_i)
    assert abs(again["total"] - rec.best_loss) <= 1e-10 * max(1.0, rec.best_loss)


def test_training_is_deterministic():
    p, spec, cfg = _tiny("burgers1d", act="tanh", epochs=15)
    a, b = train(p, spec, cfg), train(p, spec, cfg)
    assert np.array_equal(a.history, b.history)
    assert torch.equal(a.best_params.data, b.best_params.data)
    c = train(p, spec, replace(cfg, seed=1))
    assert not np.array_equal(a.history, c.history)


def test_every_problem_trains_a_few_epochs():
    for name in ("fnfit", "burgers1d", "euler2d", "helmholtz3d", "poisson10d"):
        p = get_problem(name)
        spec = NetworkSpec.from_arch("bsnn:4-2", p.input_dim, p.output_dim, residual_blocks=p.defaults.residual_blocks)
        cfg = TrainConfig.for_problem(p, epochs=3, interior=16, boundary=2, initial=4)
        rec = train(p, spec, cfg)
        assert rec.ok and np.isfinite(rec.history).all()


def test_dimension_mismatch_rejected():
    p, _, cfg = _tiny()
    with pytest.raises(ValueError, match="needs 2->1"):
        train(p, NetworkSpec.from_arch("fnn:1*4", 3, 1), cfg)


def test_divergence_raises_with_epoch_and_ensemble_records_it():
    p, spec, cfg = _tiny(epochs=10)

    def exploding(model, X):
        r = p.residual(model, X)
        return r * torch.exp(torch.tensor(800.0, dtype=DTYPE))

    bad = replace(p, residual=exploding)
    with pytest.raises(NonFiniteError) as info:
        train(bad, spec, cfg)
    assert info.value.epoch == 0
    recs = run_ensemble(bad, spec, cfg, n_seeds=2)
    assert [r.seed for r in recs] == [0, 1]
    assert all(not r.ok and "NonFiniteError" in r.error for r in recs)


def test_ensemble_seeds_and_worker_pool_agree():
    p, spec, cfg = _tiny(epochs=8)
    serial = run_ensemble(p, spec, replace(cfg, seed=5), n_seeds=2)
    pooled = run_ensemble(p, spec, replace(cfg, seed=5), n_seeds=2, workers=2)
    assert [r.seed for r in serial] == [5, 6]
    for a, b in zip(serial, pooled):
        assert np.array_equal(a.history, b.history)


def test_history_csv(tmp_path):
    p, spec, cfg = _tiny(epochs=10)
    rec = train(p, spec, cfg)
    path = rec.write_history(tmp_path / "h.csv", stride=3)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,total,loss_L,loss_B,loss_I,lr"
    assert [int(r.split(",")[0]) for r in lines[1:]] == [0, 3, 6, 9]
    assert float(lines[1].split(",")[1]) == rec.losses[0]


def test_compiled_loss_matches_eager():
    p, spec, cfg = _tiny(epochs=5)
    eager = train(p, spec, cfg)
    compiled = train(p, spec, replace(cfg, compile=True))
    np.testing.assert_allclose(compiled.history, eager.history, rtol=1e-10, atol=0)
