import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from canonflow import autodiff as ad
from canonflow.fields import CanonicalModel, HashGridConfig
from canonflow.losses import (LossWeights, loss_back, loss_canon, loss_hard, loss_norm, loss_norm_weighted, loss_rec,
                              loss_rigid, loss_time, max_pool_rays, norm_residual, random_unit_vectors,
                              smoothness_weights)
from criteria import GRAD_LOSSES, gradient_error, norm_equivalence, orthogonality


def test_loss_rec_examples():
    a = torch.rand(4, 3)
    assert float(loss_rec(a, a)) == 0.0
    assert float(loss_rec(torch.ones(1, 3), torch.zeros(1, 3))) == 3.0
    assert float(loss_rec(torch.tensor([[1.0, 1, 1], [0, 0, 0]]), torch.zeros(2, 3))) == 1.5
    with pytest.raises(ValueError):
        loss_rec(torch.ones(2, 3), torch.ones(3, 3))


def test_loss_back_examples(f64):
    assert abs(float(loss_back(torch.tensor([0.5]))) - 2 * math.log(0.5)) < 1e-12
    assert abs(float(loss_back(torch.tensor([1e-6]))) - (math.log(1e-6) + math.log1p(-1e-6))) < 1e-9
    assert abs(float(loss_back(torch.tensor([0.0]))) - (-13.8155)) < 1e-4
    s = torch.linspace(1e-6, 1 - 1e-6, 1001)
    vals = torch.stack([loss_back(v.reshape(1)) for v in s])
    assert int(vals.argmax()) == 500


def test_loss_hard_examples(f64):
    assert abs(float(loss_hard(torch.tensor([[0.0]]))) + math.log(1 + math.exp(-1))) < 1e-12
    assert abs(float(loss_hard(torch.tensor([[0.0]]))) - (-0.31326)) < 1e-5
    assert abs(float(loss_hard(torch.tensor([[0.5]]))) - (-(math.log(2) - 0.5))) < 1e-12
    assert float(loss_hard(torch.tensor([[0.0]]))) < float(loss_hard(torch.tensor([[0.5]])))
    assert abs(float(loss_hard(torch.tensor([[1.0]]))) - float(loss_hard(torch.tensor([[0.0]])))) < 1e-12


def test_loss_canon_composition(f64):
    pred, gt = torch.rand(3, 3), torch.rand(3, 3)
    w = torch.rand(3, 8) / 8
    zero = LossWeights(back=0.0, hard=0.0)
    assert float(loss_canon(pred, gt, w, zero)["total"]) == float(loss_rec(pred, gt))
    lw = LossWeights()
    assert abs(lw.back * -13.8 + lw.hard * -0.31 - (-0.3238)) < 1e-12
    out = loss_canon(pred, gt, w, lw)
    expect = out["rec"] + lw.back * out["back"] + lw.hard * out["hard"]
    assert float(out["total"]) == float(expect)


def test_loss_rigid_examples(f64):
    assert float(loss_rigid(torch.eye(3)[None])) == 0.0
    c, s = math.cos(0.4), math.sin(0.4)
    R = torch.tensor([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    assert float(loss_rigid(R[None])) < 1e-15
    assert float(loss_rigid(torch.diag(torch.tensor([1.0, -1.0, 1.0]))[None])) == 0.0
    assert abs(float(loss_rigid(torch.diag(torch.tensor([2.0, 1.0, 1.0]))[None])) - 1 / 3) < 1e-15


def _linear(M):
    w = torch.ones((), requires_grad=True)
    return lambda y: w * (y @ M.T)


def test_loss_norm_examples(f64):
    x = torch.rand(50, 3)
    g = torch.Generator().manual_seed(0)

    def norm(M):
        return float(loss_norm(_linear(M), x, g).detach())
    assert norm(torch.eye(3)) < 1e-15
    assert abs(norm(2 * torch.eye(3)) - 1.0) < 1e-12
    assert norm(torch.diag(torch.tensor([-1.0, 1.0, 1.0]))) < 1e-15


@given(seed=st.integers(0, 2**31 - 1))
def test_random_unit_vectors(seed):
    e = random_unit_vectors(100, torch.Generator().manual_seed(seed))
    assert float((e.norm(dim=-1) - 1).abs().max()) < 1e-6


def test_pool_radius():
    assert LossWeights().pool_radius(3072) == 15
    assert LossWeights(f=2.25 / 64).pool_radius(64) == 2


def test_smoothness_weight_examples():
    lw = LossWeights(f=0.1)
    sigma = torch.full((2, 20), 3.0)
    deltas = torch.full((2, 20), 0.1)
    far = torch.full((2, 20, 3), 1.0)
    base = 1 - math.exp(-0.3)
    w = smoothness_weights(sigma, deltas, far, lw)
    assert torch.allclose(w, torch.full_like(w, base))
    on = torch.zeros(1, 1, 3)
    on[..., 0] = lw.s_t
    one = smoothness_weights(torch.tensor([[1e9]]), torch.tensor([[1.0]]), on, lw)
    assert abs(float(one) - 1 / (1 + math.exp(-2))) < 1e-6
    zero = smoothness_weights(torch.tensor([[1e9]]), torch.tensor([[1.0]]), torch.zeros(1, 1, 3), lw)
    assert abs(float(zero) - 1 / (1 + math.exp(2))) < 1e-6
    assert abs(1 / (1 + math.exp(-2)) - 0.8808) < 1e-4


def test_smoothness_pool_and_u_division():
    lw = LossWeights(f=0.1, u=10.0)  # k = 2 at S=20
    sigma = torch.zeros(1, 20)
    sigma[0, 10] = 100.0
    deltas = torch.full((1, 20), 0.1)
    w = smoothness_weights(sigma, deltas, torch.ones(1, 20, 3), lw)
    peak = 1 - math.exp(-10.0)
    gate = 1 / (1 + math.exp(-(4 * math.sqrt(3) / lw.s_t - 2)))
    expect = torch.zeros(1, 20)
    expect[0, 8:13] = peak / 10
    expect[0, 10] = peak
    assert torch.allclose(w, expect * gate)


def test_smoothness_transmittance_mode():
    lw = LossWeights(base_weight="transmittance", f=0.0)
    sigma = torch.tensor([[0.0, 2.0]])
    w = smoothness_weights(sigma, torch.ones(1, 2), torch.ones(1, 2, 3), lw)
    assert torch.allclose(w, torch.tensor([[1.0, math.exp(-2.0)]]), atol=1e-6)
    with pytest.raises(ValueError):
        LossWeights(base_weight="density")


@settings(deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(0, 5))
def test_smoothness_weights_bounds_and_pooling(seed, k):
    g = torch.Generator().manual_seed(seed)
    sigma = torch.rand(4, 24, generator=g) * 30 * (torch.rand(4, 24, generator=g) < 0.3)
    deltas = torch.full((4, 24), 0.05)
    lw = LossWeights(f=k / 24 + 1e-9)
    base = 1 - torch.exp(-sigma * deltas)
    pooled = max_pool_rays(base, k)
    assert bool((pooled >= base).all())
    w = smoothness_weights(sigma, deltas, torch.rand(4, 24, 3, generator=g), lw)
    assert bool((w >= 0).all()) and bool((w <= base.max() + 1e-7).all())


def test_loss_norm_weighted_examples(f64):
    g = torch.Generator().manual_seed(1)
    x = torch.rand(4 * 6, 3, generator=g)
    e = random_unit_vectors(24, g)
    stretch = _linear(torch.diag(torch.tensor([1.5, 0.7, 1.0])))
    _, res_id = norm_residual(_linear(torch.eye(3)), x, e)
    res_id = res_id.detach()
    assert float(loss_norm_weighted(res_id.reshape(4, 6), torch.rand(4, 6))) < 1e-15
    _, res = norm_residual(stretch, x, e)
    res = res.detach()
    assert float(loss_norm_weighted(res.reshape(4, 6), torch.zeros(4, 6))) == 0.0
    uniform = loss_norm_weighted(res.reshape(4, 6), torch.ones(4, 6))
    assert abs(float(uniform) - float(loss_norm(stretch, x, e=e).detach())) < 1e-15


def test_loss_time_examples():
    lw = LossWeights()
    rec = torch.tensor(0.1)
    assert float(loss_time(rec, None, None, lw)) == float(rec)
    assert float(loss_time(rec, torch.tensor(0.0), torch.tensor(0.0), lw)) == float(rec)
    assert abs(float(loss_time(torch.tensor(0.1, dtype=torch.float64), torch.tensor(1e-4, dtype=torch.float64),
                               None, lw)) - 0.2) < 1e-12
    assert abs(float(loss_time(torch.tensor(0.0, dtype=torch.float64), None, torch.tensor(1e-3, dtype=torch.float64),
                               lw)) - 0.03) < 1e-12


@pytest.mark.parametrize("name", GRAD_LOSSES)
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(name, seed):
    assert gradient_error(name, seed) < 1e-6


def test_norm_loss_single_sweep_matches_explicit_jacobian():
    err, one, three = norm_equivalence(1000)
    assert err < 1e-5
    assert (one, three) == (1, 3)


def test_orthogonality_characterization():
    r = orthogonality(100)
    assert r["ortho_rigid"] < 1e-6 and r["ortho_norm"] < 1e-6
    assert r["pert_rigid"] > 1e-3 and r["pert_norm"] > 1e-3


def test_regularizer_sends_no_gradient_into_canonical():
    torch.manual_seed(0)
    canon = CanonicalModel(HashGridConfig(levels=2, base_resolution=4, per_level_scale=2.0, table_size=2**10))
    g = torch.Generator().manual_seed(0)
    R, S = 3, 8
    x = torch.rand(R * S, 3, generator=g)
    w_lin = torch.ones((), requires_grad=True)
    warp = lambda y: y + w_lin * 0.1 * torch.sin(y)  # noqa: E731
    out, res = norm_residual(warp, x, random_unit_vectors(R * S, g))
    sigma, _ = canon(out)
    weights = smoothness_weights(sigma.reshape(R, S), torch.full((R, S), 0.1), (out - x).reshape(R, S, 3),
                                 LossWeights(f=0.25))
    reg = loss_norm_weighted(res.reshape(R, S), weights)
    grads = ad.gradient(reg, dict(canon.named_parameters()))
    assert all(v is None or not bool(v.any()) for v in grads.values())
    assert ad.gradient(reg, {"w": w_lin})["w"] is not None
