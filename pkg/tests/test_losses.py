import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sketchstyle.arch import ConfigError, GeneratorOutput
from sketchstyle.losses import (LossWeights, acgan_loss, dcgan_loss, gan_loss, generator_gan_loss,
                                generator_objective, grayscale, l1_composite)


def logit(p):
    return math.log(p / (1 - p))


def test_grayscale_examples():
    assert grayscale(torch.ones(3, 1, 1)).item() == pytest.approx(1.0)
    assert grayscale(torch.tensor([1.0, 0.0, 0.0]).view(3, 1, 1)).item() == pytest.approx(0.299)
    gray = torch.rand(1, 1, 5, 5).double().expand(1, 3, 5, 5)
    torch.testing.assert_close(grayscale(gray), gray[:, :1], rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="3 channels"):
        grayscale(torch.rand(1, 4, 2, 2))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_grayscale_linear(a, seed):
    g = torch.Generator().manual_seed(seed)
    y1, y2 = torch.rand(3, 4, 4, generator=g, dtype=torch.float64), torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    torch.testing.assert_close(grayscale(a * y1 + (1 - a) * y2), a * grayscale(y1) + (1 - a) * grayscale(y2),
                               rtol=0, atol=1e-12)


def test_l1_perfect_prediction_is_zero():
    y = torch.rand(2, 3, 4, 4)
    out = GeneratorOutput(y.clone(), grayscale(y), y.clone())
    assert l1_composite(out, y, LossWeights()).total.item() == 0.0


def test_l1_single_pixel_hand_value():
    y = torch.full((1, 3, 1, 1), 0.5, dtype=torch.float64)
    out = GeneratorOutput(y.clone(), torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64),
                          torch.full((1, 3, 1, 1), 0.7, dtype=torch.float64))
    assert l1_composite(out, y, LossWeights(0.3, 0.9)).total.item() == pytest.approx(0.18, abs=1e-12)


def test_l1_zero_weights_is_plain_mae():
    y, f = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    out = GeneratorOutput(f, torch.rand(2, 1, 4, 4), torch.rand(2, 3, 4, 4))
    assert l1_composite(out, y, LossWeights(0, 0)).total.item() == pytest.approx((f - y).abs().mean().item())


def test_l1_gray_flag_off_equals_plain_formula():
    y = torch.rand(1, 3, 4, 4)
    g1 = torch.rand(1, 3, 4, 4)
    out = GeneratorOutput(torch.rand(1, 3, 4, 4), g1, torch.rand(1, 3, 4, 4))
    w = LossWeights(0.3, 0.9)
    t = l1_composite(out, y, w, grayscale_guide1=False)
    expected = (out.final - y).abs().mean() + 0.3 * (g1 - y).abs().mean() + 0.9 * (out.guide2 - y).abs().mean()
    assert t.total.item() == expected.item()


def test_l1_missing_guides_contribute_zero():
    y = torch.rand(1, 3, 2, 2)
    t = l1_composite(GeneratorOutput(torch.rand(1, 3, 2, 2), None, None), y, LossWeights())
    assert t.guide1.item() == 0 and t.guide2.item() == 0 and t.total.item() == t.final.item()


def test_l1_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        l1_composite(GeneratorOutput(torch.rand(1, 3, 2, 2), None, None), torch.rand(1, 3, 4, 4), LossWeights())


def _px(t):
    """(1, C, H, W) -> list of per-pixel tuples."""
    return [tuple(float(v) for v in t[0, :, i, j]) for i in range(t.shape[2]) for j in range(t.shape[3])]


@pytest.mark.parametrize("fixture", range(25))
def test_l1_matches_scalar_oracle(fixture):
    g = torch.Generator().manual_seed(100 + fixture)
    gray = fixture % 2 == 0
    h, w = 1 + fixture % 3, 1 + fixture % 4
    y = torch.rand(1, 3, h, w, generator=g, dtype=torch.float64)
    f = torch.rand(1, 3, h, w, generator=g, dtype=torch.float64)
    g1 = torch.rand(1, 1 if gray else 3, h, w, generator=g, dtype=torch.float64)
    g2 = torch.rand(1, 3, h, w, generator=g, dtype=torch.float64)
    alpha, beta = float(torch.rand(1, generator=g)), float(torch.rand(1, generator=g))
    got = l1_composite(GeneratorOutput(f, g1, g2), y, LossWeights(alpha, beta), grayscale_guide1=gray)
    g1_ref = [float(v) for v in g1.flatten()] if gray else _px(g1)
    ref = oracles.l1_composite(_px(f), g1_ref, _px(g2), _px(y), alpha, beta, gray)
    for a, b in zip((got.final, got.guide1, got.guide2, got.total), ref):
        assert float(a) == pytest.approx(b, rel=1e-6, abs=1e-12)


# -- adversarial terms ------------------------------------------------------

def test_acgan_two_coordinate_fixture():
    # oracle values from tests/oracles.py
    real = torch.tensor([[logit(0.6), logit(0.4)]], dtype=torch.float64)
    fake = torch.tensor([[logit(0.1), logit(0.2)]], dtype=torch.float64)
    t = acgan_loss(real, fake, torch.zeros(1, 2, dtype=torch.float64))
    assert t.d_loss.item() == pytest.approx(0.2169322913149312, rel=1e-9)
    assert t.g_loss.item() == pytest.approx(1.9560115027140728, rel=1e-9)


def test_acgan_real_term_max_when_scores_match_target():
    v = torch.randn(3, 5, dtype=torch.float64)
    fake = torch.full((3, 5), -50.0, dtype=torch.float64)
    assert acgan_loss(v.clone(), fake, v).d_loss.item() == pytest.approx(0.0, abs=1e-12)


def test_acgan_fake_term_zero_when_fake_scores_vanish():
    real = torch.randn(2, 4, dtype=torch.float64)
    v = torch.randn(2, 4, dtype=torch.float64)
    lo = acgan_loss(real, torch.full((2, 4), -60.0, dtype=torch.float64), v)
    hi = acgan_loss(real, torch.full((2, 4), 0.0, dtype=torch.float64), v)
    real_only = -torch.log(torch.clamp(torch.sigmoid(real) + 1 - torch.sigmoid(v), 1e-7, 1)).mean()
    assert lo.d_loss.item() == pytest.approx(real_only.item(), abs=1e-12)
    assert hi.d_loss.item() > lo.d_loss.item()


def test_acgan_shape_mismatch():
    with pytest.raises(ValueError, match="style target"):
        acgan_loss(torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 3))


@pytest.mark.parametrize("fixture", range(25))
def test_acgan_matches_scalar_oracle(fixture):
    rnd = random.Random(fixture)
    n, f = rnd.randint(1, 3), rnd.randint(1, 6)
    real = [[rnd.gauss(0, 3) for _ in range(f)] for _ in range(n)]
    fake = [[rnd.gauss(0, 3) for _ in range(f)] for _ in range(n)]
    raw_v = [[rnd.gauss(0, 1) for _ in range(f)] for _ in range(n)]
    v = [oracles.zscore(r) for r in raw_v]
    t = acgan_loss(torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64),
                   torch.tensor(v, dtype=torch.float64))
    d_ref, g_ref = oracles.acgan(real, fake, v)
    assert t.d_loss.item() == pytest.approx(d_ref, rel=1e-6, abs=1e-12)
    assert t.g_loss.item() == pytest.approx(g_ref, rel=1e-6, abs=1e-12)


def test_dcgan_equilibrium_and_optimum():
    t = dcgan_loss(torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert t.d_loss.item() == pytest.approx(2 * math.log(2), rel=1e-12)
    best = dcgan_loss(torch.tensor([60.0], dtype=torch.float64), torch.tensor([-60.0], dtype=torch.float64))
    assert best.d_loss.item() == pytest.approx(0.0, abs=1e-12)
    # clamping keeps the worst case finite
    worst = dcgan_loss(torch.tensor([-60.0]), torch.tensor([60.0]))
    assert worst.d_loss.item() == pytest.approx(-2 * math.log(1e-7), rel=1e-4)


@pytest.mark.parametrize("fixture", range(25))
def test_dcgan_matches_scalar_oracle(fixture):
    rnd = random.Random(1000 + fixture)
    n = rnd.randint(1, 5)
    real = [rnd.gauss(0, 4) for _ in range(n)]
    fake = [rnd.gauss(0, 4) for _ in range(n)]
    t = dcgan_loss(torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64))
    d_ref, g_ref = oracles.dcgan(real, fake)
    assert t.d_loss.item() == pytest.approx(d_ref, rel=1e-6, abs=1e-12)
    assert t.g_loss.item() == pytest.approx(g_ref, rel=1e-6, abs=1e-12)
    assert generator_gan_loss(torch.tensor(fake, dtype=torch.float64)).item() == pytest.approx(g_ref, rel=1e-6)


def test_gan_loss_dispatch():
    r, f = torch.randn(2, 3), torch.randn(2, 3)
    v = torch.randn(2, 3)
    assert torch.equal(gan_loss("acgan", r, f, v).d_loss, acgan_loss(r, f, v).d_loss)
    assert torch.equal(gan_loss("dcgan", r[:, 0], f[:, 0]).d_loss, dcgan_loss(r[:, 0], f[:, 0]).d_loss)
    with pytest.raises(ValueError, match="unknown loss mode"):
        gan_loss("wgan", r, f)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.lists(st.floats(-20, 20), min_size=1, max_size=8))
def test_gan_losses_nonnegative(real, fake):
    k = min(len(real), len(fake))
    r, f = torch.tensor(real[:k], dtype=torch.float64), torch.tensor(fake[:k], dtype=torch.float64)
    assert dcgan_loss(r, f).d_loss.item() >= 0
    a = acgan_loss(r[None], f[None], torch.zeros(1, k, dtype=torch.float64))
    assert a.d_loss.item() >= 0 and a.g_loss.item() >= 0


# -- objective --------------------------------------------------------------

def test_objective_hand_value():
    assert generator_objective(0.18, 0.7, LossWeights(lam=100)) == pytest.approx(18.7)
    assert generator_objective(0.18, 0.7, LossWeights(lam=0)) == 0.7


@pytest.mark.parametrize("fixture", range(20))
def test_objective_matches_oracle(fixture):
    rnd = random.Random(2000 + fixture)
    l1, g, lam = rnd.random(), rnd.random() * 5, rnd.random() * 200
    got = generator_objective(torch.tensor(l1, dtype=torch.float64), torch.tensor(g, dtype=torch.float64),
                              LossWeights(lam=lam))
    assert got.item() == pytest.approx(g + lam * l1, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 500))
def test_objective_monotone_in_l1(l1, extra, g, lam):
    w = LossWeights(lam=lam)
    assert generator_objective(l1 + extra, g, w) >= generator_objective(l1, g, w)


def test_weights_validation():
    assert LossWeights().alpha == 0.3 and LossWeights().beta == 0.9 and LossWeights().lam == 100
    with pytest.raises(ConfigError, match="alpha"):
        LossWeights(alpha=-0.1).validate()
