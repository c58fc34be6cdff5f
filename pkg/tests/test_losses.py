import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dewrinkle.evaluate import compute_fid, compute_lpips, IdentityFeatures
from dewrinkle.losses import (
    LossWeights,
    NonFiniteLossError,
    adversarial_losses,
    dice_loss,
    disc_feature_matching,
    discriminator_loss,
    ffl,
    ffl_weight,
    generator_adv_loss,
    hrfpl,
    r1_penalty,
    total_loss,
    wrinkle_loss,
)
from dewrinkle.segnet import NestedUNet, freeze, iou
from helpers import (
    LinearDiscriminator,
    StubDiscriminator,
    analytic_gradient,
    brute_force_dft2,
    central_difference,
    relative_error,
)

D = torch.float64


def t(values):
    return torch.tensor(values, dtype=D)


def identity_phi(x):
    return [x]


# ---- dice ----------------------------------------------------------------------


def test_dice_half_overlap():
    assert float(dice_loss(t([1, 1, 0, 0]), t([1, 0, 1, 0]))) == pytest.approx(0.5, abs=1e-6)


def test_dice_perfect_and_disjoint():
    m = t([[1, 0], [1, 1]])
    assert float(dice_loss(m, m)) == pytest.approx(0.0, abs=1e-6)
    assert float(dice_loss(t([1, 1, 0, 0]), t([0, 0, 1, 1]))) == pytest.approx(1.0, abs=1e-6)


def test_dice_matches_direct_formula():
    rng = np.random.default_rng(0)
    m = (rng.random((3, 1, 5, 5)) > 0.5).astype(float)
    p = rng.random((3, 1, 5, 5))
    expected = np.mean([
        1 - (2 * (a * b).sum() + 1e-6) / ((a**2).sum() + (b**2).sum() + 1e-6) for a, b in zip(m, p)
    ])
    assert float(dice_loss(t(m), t(p))) == pytest.approx(expected, abs=1e-12)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(t([1, 0]), t([1, 0, 0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(0, 1)), arrays(np.float64, (6,), elements=st.floats(0, 1)))
def test_dice_bounded_and_symmetric(a, b):
    v = float(dice_loss(t(a), t(b)))
    assert -1e-9 <= v <= 1 + 1e-9
    assert v == pytest.approx(float(dice_loss(t(b), t(a))), abs=1e-12)


# ---- iou -----------------------------------------------------------------------


def test_iou_examples():
    assert iou(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == pytest.approx(1 / 3, abs=1e-12)
    m = np.array([[0, 1], [1, 1]])
    assert iou(m, m) == 1.0
    assert iou(np.zeros(4), np.zeros(4)) == 1.0
    assert iou(m, np.zeros_like(m)) == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (4, 4), elements=st.integers(0, 1)), arrays(np.uint8, (4, 4), elements=st.integers(0, 1)))
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    inter, union = np.logical_and(a, b).sum(), np.logical_or(a, b).sum()
    assert v == (1.0 if union == 0 else inter / union)


# ---- ffl -----------------------------------------------------------------------


def test_ffl_hand_dft():
    x = t([[[[1.0, 0.0]]]])
    x_hat = torch.zeros_like(x)
    assert float(ffl(x, x_hat)) == pytest.approx(1.0, abs=1e-12)


def test_ffl_zero_when_equal():
    x = torch.rand(1, 3, 4, 4, dtype=D)
    assert float(ffl(x, x.clone())) == 0.0


def test_ffl_matches_brute_force_dft():
    rng = np.random.default_rng(1)
    x, y = rng.random((2, 2, 4, 3)), rng.random((2, 2, 4, 3))
    terms = []
    for n in range(2):
        for c in range(2):
            diff = brute_force_dft2(x[n, c]) - brute_force_dft2(y[n, c])
            terms.append(np.mean(np.abs(diff) * np.abs(diff) ** 2))
    assert float(ffl(t(x), t(y))) == pytest.approx(np.mean(terms), rel=1e-10)


def test_ffl_weight_is_detached():
    x = torch.rand(1, 1, 4, 4, dtype=D)
    x_hat = torch.rand(1, 1, 4, 4, dtype=D, requires_grad=True)
    assert not ffl_weight(x, x_hat).requires_grad


# ---- fid -----------------------------------------------------------------------


def test_fid_one_dimensional_closed_form():
    a = np.array([-1.0, 1.0, -1.0, 1.0])
    assert compute_fid(a, a + 1.0) == pytest.approx(1.0, abs=1e-6)


def test_fid_identical_sets_zero():
    feats = np.random.default_rng(2).normal(size=(20, 4))
    assert compute_fid(feats, feats) == pytest.approx(0.0, abs=1e-6)


def test_fid_matches_scipy_sqrtm():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(40, 5))
    b = rng.normal(loc=0.3, scale=1.5, size=(50, 5)) @ rng.normal(size=(5, 5))
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(ca @ cb).real
    expected = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * covmean)
    assert compute_fid(a, b) == pytest.approx(expected, abs=1e-3)


def test_fid_rejects_bad_input():
    with pytest.raises(ValueError):
        compute_fid(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_fid(np.array([[np.nan]] * 3), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        compute_fid(np.zeros((1, 2)), np.zeros((3, 2)))


# ---- total loss ----------------------------------------------------------------

ZERO = dict(lambda_adv=0, lambda_hrfpl=0, lambda_discpl=0, lambda_r1=0, lambda_ffl=0, lambda_s=0)


def test_total_loss_zero_weights_and_linearity():
    terms = {k: 2.0 for k in ("adv", "hrfpl", "discpl", "r1", "ffl", "s")}
    assert total_loss(terms, LossWeights(**ZERO)) == 0.0
    assert total_loss(terms, LossWeights(**{**ZERO, "lambda_ffl": 3})) == pytest.approx(6.0)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (6,), elements=st.floats(-100, 100)),
    arrays(np.float64, (6,), elements=st.floats(0, 100)),
)
def test_total_loss_weighted_sum(values, weights):
    names = ("adv", "hrfpl", "discpl", "r1", "ffl", "s")
    w = LossWeights(*weights)
    expected = sum(float(v) * float(lam) for v, lam in zip(values, weights))
    got = total_loss({k: torch.tensor(v, dtype=D) for k, v in zip(names, values)}, w)
    assert float(got) == pytest.approx(expected, abs=1e-6, rel=1e-9)


def test_total_loss_non_finite():
    with pytest.raises(NonFiniteLossError) as info:
        total_loss({"ffl": float("nan"), "s": 1.0}, LossWeights())
    assert info.value.term == "ffl"
    assert "s" in info.value.breakdown


def test_total_loss_unknown_term():
    with pytest.raises(KeyError):
        total_loss({"tv": 1.0}, LossWeights())


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_s=-1)


# ---- hrfpl ---------------------------------------------------------------------


def test_hrfpl_identity_extractor_is_mse():
    x, x_hat = torch.rand(2, 3, 8, 8, dtype=D), torch.rand(2, 3, 8, 8, dtype=D)
    m = torch.zeros(2, 1, 8, 8, dtype=D)
    assert float(hrfpl(x, x_hat, m, identity_phi)) == pytest.approx(float(((x - x_hat) ** 2).mean()), abs=1e-12)


def test_hrfpl_limits():
    x, x_hat = torch.rand(1, 3, 8, 8, dtype=D), torch.rand(1, 3, 8, 8, dtype=D)
    assert float(hrfpl(x, x.clone(), torch.zeros(1, 1, 8, 8, dtype=D), identity_phi)) == 0.0
    assert float(hrfpl(x, x_hat, torch.ones(1, 1, 8, 8, dtype=D), identity_phi)) == 0.0


def test_hrfpl_excludes_masked_pixels():
    x = torch.zeros(1, 1, 4, 4, dtype=D)
    x_hat = torch.zeros_like(x)
    x_hat[..., 0, 0] = 5.0
    m = torch.zeros(1, 1, 4, 4, dtype=D)
    m[..., 0, 0] = 1
    assert float(hrfpl(x, x_hat, m, identity_phi)) == 0.0


# ---- adversarial ---------------------------------------------------------------


def test_generator_loss_at_half():
    assert float(generator_adv_loss(torch.zeros(2, 1, 3, 3, dtype=D))) == pytest.approx(math.log(2), abs=1e-12)


def test_discriminator_loss_perfect_limit():
    big = 30.0
    m = torch.zeros(1, 1, 4, 4, dtype=D)
    m[..., :2, :] = 1
    fake = torch.where(m.bool(), -big, big)
    loss = discriminator_loss(torch.full((1, 1, 4, 4), big, dtype=D), fake, m)
    assert float(loss) < 1e-8


def test_discriminator_loss_without_holes():
    real, fake = torch.randn(2, 1, 3, 3, dtype=D), torch.randn(2, 1, 3, 3, dtype=D)
    m = torch.zeros(2, 1, 3, 3, dtype=D)
    expected = -torch.log(torch.sigmoid(real)).mean() - torch.log(torch.sigmoid(fake)).mean()
    assert float(discriminator_loss(real, fake, m)) == pytest.approx(float(expected), abs=1e-12)


def test_discriminator_loss_resizes_mask_to_score_grid():
    m = torch.zeros(1, 1, 8, 8, dtype=D)
    m[..., :4, :] = 1
    loss = discriminator_loss(torch.zeros(1, 1, 2, 2, dtype=D), torch.zeros(1, 1, 2, 2, dtype=D), m)
    assert float(loss) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_adversarial_losses_pair():
    d = StubDiscriminator()
    x, x_hat = torch.rand(1, 3, 8, 8, dtype=D), torch.rand(1, 3, 8, 8, dtype=D)
    l_d, l_g = adversarial_losses(d, x, x_hat, torch.zeros(1, 1, 8, 8, dtype=D))
    assert torch.isfinite(l_d) and torch.isfinite(l_g)


# ---- r1 ------------------------------------------------------------------------


def test_r1_linear_discriminator_counts_pixels():
    x = torch.rand(3, 1, 5, 7, dtype=D)
    assert float(r1_penalty(LinearDiscriminator(), x)) == pytest.approx(35.0, abs=1e-12)


def test_r1_constant_discriminator_zero():
    def const(x):
        return torch.zeros(x.shape[0], 1, 2, 2, dtype=x.dtype), []

    assert float(r1_penalty(const, torch.rand(2, 3, 8, 8, dtype=D))) == 0.0


def test_r1_matches_finite_difference_gradient():
    d = StubDiscriminator()
    x = torch.rand(1, 3, 8, 8, dtype=D)
    g = central_difference(lambda z: d(z)[0].sum(), x)
    assert float(r1_penalty(d, x).detach()) == pytest.approx(float(g.pow(2).sum()), rel=1e-3)


# ---- feature matching ----------------------------------------------------------


def test_disc_feature_matching_linear_layer():
    x, x_hat = torch.rand(2, 3, 8, 8, dtype=D), torch.rand(2, 3, 8, 8, dtype=D)
    got = disc_feature_matching(LinearDiscriminator(), x, x_hat)
    assert float(got) == pytest.approx(float(((x - x_hat) ** 2).mean()), abs=1e-12)
    assert float(disc_feature_matching(StubDiscriminator(), x, x.clone()).detach()) == 0.0


# ---- wrinkle loss --------------------------------------------------------------


class _ConstSeg(torch.nn.Module):
    def __init__(self, logit: float):
        super().__init__()
        self.logit = logit
        self.eval()

    def forward(self, x):
        return torch.full((x.shape[0], 1, *x.shape[-2:]), self.logit, dtype=x.dtype)


def test_wrinkle_loss_bounds():
    x = torch.rand(1, 3, 8, 8, dtype=D)
    assert float(wrinkle_loss(_ConstSeg(-1e4), x)) == pytest.approx(0.0, abs=1e-12)
    assert float(wrinkle_loss(_ConstSeg(1e4), x)) == pytest.approx(1.0, abs=1e-12)


def test_wrinkle_loss_requires_frozen_model():
    seg = NestedUNet(base_channels=4, encoder_depth=3).double()
    with pytest.raises(RuntimeError):
        wrinkle_loss(seg, torch.rand(1, 3, 8, 8, dtype=D))


# ---- gradients vs finite differences -------------------------------------------


def _check_gradient(fn, x, tol=1e-3):
    err = relative_error(analytic_gradient(fn, x), central_difference(fn, x))
    assert err < tol, err


def test_grad_dice():
    m = (torch.rand(1, 1, 8, 8, dtype=D) > 0.5).to(D)
    _check_gradient(lambda p: dice_loss(m, p), torch.rand(1, 1, 8, 8, dtype=D))


def test_grad_hrfpl_identity_extractor():
    x = torch.rand(1, 3, 8, 8, dtype=D)
    m = (torch.rand(1, 1, 8, 8, dtype=D) > 0.7).to(D)
    _check_gradient(lambda z: hrfpl(x, z, m, identity_phi), torch.rand(1, 3, 8, 8, dtype=D))


def test_grad_ffl_with_frozen_weight():
    x, x0 = torch.rand(1, 3, 8, 8, dtype=D), torch.rand(1, 3, 8, 8, dtype=D)
    w = ffl_weight(x, x0)
    _check_gradient(lambda z: ffl(x, z, weight=w), x0)


def test_grad_disc_feature_matching():
    d = StubDiscriminator(seed=1)
    x = torch.rand(1, 3, 8, 8, dtype=D)
    _check_gradient(lambda z: disc_feature_matching(d, x, z), torch.rand(1, 3, 8, 8, dtype=D))


def test_grad_generator_adv_loss():
    d = StubDiscriminator(seed=2)
    _check_gradient(lambda z: generator_adv_loss(d(z)[0]), torch.rand(1, 3, 8, 8, dtype=D))


def test_grad_wrinkle_loss():
    torch.manual_seed(0)
    seg = freeze(NestedUNet(base_channels=4, encoder_depth=3).double())
    _check_gradient(lambda z: wrinkle_loss(seg, z), torch.rand(1, 3, 8, 8, dtype=D))


def test_wrinkle_loss_leaves_seg_gradients_empty():
    seg = freeze(NestedUNet(base_channels=4, encoder_depth=3).double())
    x = torch.rand(1, 3, 8, 8, dtype=D, requires_grad=True)
    wrinkle_loss(seg, x).backward()
    assert x.grad is not None
    assert all(p.grad is None for p in seg.parameters())


# ---- lpips ---------------------------------------------------------------------


def test_lpips_identity_extractor_oracle():
    rng = np.random.default_rng(4)
    x, y = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    nx = x / (np.linalg.norm(x, axis=2, keepdims=True) + 1e-10)
    ny = y / (np.linalg.norm(y, axis=2, keepdims=True) + 1e-10)
    expected = np.mean(np.sum((nx - ny) ** 2, axis=2))
    assert compute_lpips(x, y, IdentityFeatures()) == pytest.approx(expected, abs=1e-12)
    assert compute_lpips(x, x, IdentityFeatures()) == 0.0
