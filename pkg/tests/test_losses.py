import math

import numpy as np
import pytest
import torch

from iogvqa.bias_ensemble import EPSILON
from iogvqa.config import TrainingConfig
from iogvqa.errors import ShapeError, ValidationError
from iogvqa.losses import (
    LossBundle,
    LossWeights,
    class_weights,
    distill_loss,
    kl_divergence,
    total_loss,
    weighted_cross_entropy,
)


def f64(values):
    return torch.tensor(values, dtype=torch.float64)


def reference_wce(y, p, w):
    total = 0.0
    for row_y, row_p in zip(y, p):
        for k, (yk, pk) in enumerate(zip(row_y, row_p)):
            total -= w[k] * (yk * math.log(pk) + (1 - yk) * math.log(1 - pk))
    return total


#######################################
# WEIGHTED CROSS-ENTROPY


def test_wce_perfect_prediction():
    loss = weighted_cross_entropy(f64([1.0]), f64([1 - EPSILON]), f64([1.0]))
    assert float(loss) == pytest.approx(0, abs=1e-6)


def test_wce_arithmetic():
    loss = weighted_cross_entropy(f64([1.0, 0.0]), f64([0.5, 0.5]), f64([2.0, 1.0]))
    assert float(loss) == pytest.approx(3 * math.log(2), abs=1e-12)


def test_wce_unit_weights():
    generator = torch.Generator().manual_seed(0)
    y = (torch.rand(4, 5, generator=generator) > 0.5).double()
    p = torch.rand(4, 5, dtype=torch.float64, generator=generator) * 0.9 + 0.05
    loss = weighted_cross_entropy(y, p)
    assert float(loss) == pytest.approx(reference_wce(y.tolist(), p.tolist(), [1.0] * 5))
    mean = weighted_cross_entropy(y, p, reduction='mean')
    assert float(mean) == pytest.approx(float(loss) / 4)


def test_wce_monotone_in_weight():
    y, p = f64([[1.0, 0.0, 1.0]]), f64([[0.6, 0.3, 0.9]])
    low = weighted_cross_entropy(y, p, f64([1.0, 1.0, 1.0]))
    high = weighted_cross_entropy(y, p, f64([1.0, 1.5, 1.0]))
    assert float(high) > float(low)


def test_wce_errors():
    with pytest.raises(ShapeError):
        weighted_cross_entropy(f64([1.0, 0.0]), f64([0.5]))
    with pytest.raises(ShapeError):
        weighted_cross_entropy(f64([1.0, 0.0]), f64([0.5, 0.5]), f64([1.0]))
    with pytest.raises(ValidationError):
        weighted_cross_entropy(f64([1.0, 0.0]), f64([0.5, 0.5]), f64([1.0, -1.0]))


def test_class_weights():
    weights = class_weights([0.5, 0.25, 0.25, 0.0], clip=(0.1, 10.0), dtype=torch.float64)
    # inverse frequencies 2, 4, 4 normalized to mean 1
    assert weights.tolist() == pytest.approx([0.6, 1.2, 1.2, 10.0])


def test_class_weights_clip():
    weights = class_weights([0.999, 0.001], clip=(0.1, 10.0))
    assert float(weights.min()) >= 0.1 and float(weights.max()) <= 10.0


#######################################
# DISTILLATION


def test_kl_self():
    p = torch.softmax(torch.randn(10, 6, dtype=torch.float64), dim=-1)
    assert torch.allclose(kl_divergence(p, p), torch.zeros(10, dtype=torch.float64))


@pytest.mark.parametrize(
    "p,q,expected",
    [
        ([1.0, 0.0], [0.5, 0.5], math.log(2)),
        ([0.7, 0.3], [0.4, 0.6], 0.7 * math.log(1.75) + 0.3 * math.log(0.5)),
    ],
)
def test_kl_closed_form(p, q, expected):
    assert float(kl_divergence(f64(p), f64(q))) == pytest.approx(expected, abs=1e-12)


def test_kl_non_negative_and_asymmetric():
    generator = torch.Generator().manual_seed(0)
    p = torch.softmax(torch.randn(10_000, 5, dtype=torch.float64, generator=generator), dim=-1)
    q = torch.softmax(torch.randn(10_000, 5, dtype=torch.float64, generator=generator), dim=-1)
    assert (kl_divergence(p, q) >= -1e-12).all()
    assert not math.isclose(float(kl_divergence(p[0], q[0])), float(kl_divergence(q[0], p[0])))


def test_kl_requires_distributions():
    with pytest.raises(ValidationError):
        kl_divergence(f64([0.5, 0.6]), f64([0.5, 0.5]))
    with pytest.raises(ShapeError):
        kl_divergence(f64([1.0]), f64([0.5, 0.5]))


def test_distill_equal_distributions():
    p = torch.softmax(torch.randn(3, 4, dtype=torch.float64), dim=-1)
    assert float(distill_loss(p, p, p, LossWeights())) == pytest.approx(0, abs=1e-12)


def test_distill_single_teacher():
    p_v, p_q, p_s = f64([[0.7, 0.3]]), f64([[0.1, 0.9]]), f64([[0.4, 0.6]])
    weights = LossWeights(distill_weight_v=0.8, distill_weight_q=0.0)
    expected = 0.8 * float(kl_divergence(p_v, p_s))
    assert float(distill_loss(p_v, p_q, p_s, weights)) == pytest.approx(expected, abs=1e-12)


def test_distill_weighted_sum(monkeypatch):
    values = iter([f64([0.2]), f64([0.4])])
    monkeypatch.setattr('iogvqa.losses.kl_divergence', lambda p, q: next(values))
    loss = distill_loss(None, None, None, LossWeights(distill_weight_v=0.5, distill_weight_q=0.5))
    assert float(loss) == pytest.approx(0.3, abs=1e-12)


#######################################
# TOTAL


@pytest.mark.parametrize(
    "components,alphas,expected",
    [
        ((1.0, 2.0, 1.0), (0.5, 0.3), 2.3),
        ((1.5, 2.0, 1.0), (0.0, 0.0), 1.5),
        ((0.0, 0.0, 0.0), (0.5, 0.3), 0.0),
    ],
)
def test_total_loss(components, alphas, expected):
    assert total_loss(*components, *alphas) == pytest.approx(expected, abs=1e-12)


def test_loss_bundle_identity():
    weights = LossWeights(alpha1=0.5, alpha2=0.3, lambda1=0.25, lambda2=0.75)
    bundle = LossBundle.compose(
        weights, wce=1.3, distill=0.7, l_d=1.1, l_g=0.9, l_qv=0.2, l_vq=0.4
    )
    gan = 1.1 + 0.9 + 0.25 * 0.2 + 0.75 * 0.4
    assert bundle.gan == gan
    assert bundle.total == gan + 0.5 * 1.3 + 0.3 * 0.7
    assert set(bundle.to_row()) == {'wce', 'distill', 'l_d', 'l_g', 'l_qv', 'l_vq', 'total'}


def test_loss_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(alpha1=-1)
    with pytest.raises(ValidationError):
        LossWeights(lambda1=math.nan)
    with pytest.raises(ValidationError):
        LossWeights(class_weights=f64([1.0, -0.5]))


def test_loss_weights_from_config():
    config = TrainingConfig(alpha1=0.1, alpha2=0.2, lambda1=0.3, lambda2=0.4)
    weights = LossWeights.from_config(config)
    assert (weights.alpha1, weights.alpha2, weights.lambda1, weights.lambda2) == (
        0.1,
        0.2,
        0.3,
        0.4,
    )


def test_loss_bundle_identity_random():
    rng = np.random.default_rng(0)
    for values in rng.uniform(0, 5, size=(1000, 10)):
        wce, distill, l_d, l_g, l_qv, l_vq, a1, a2, lam1, lam2 = (float(v) for v in values)
        weights = LossWeights(alpha1=a1, alpha2=a2, lambda1=lam1, lambda2=lam2)
        bundle = LossBundle.compose(
            weights, wce=wce, distill=distill, l_d=l_d, l_g=l_g, l_qv=l_qv, l_vq=l_vq
        )
        gan = l_d + l_g + lam1 * l_qv + lam2 * l_vq
        assert bundle.gan == gan
        assert bundle.total == gan + a1 * wce + a2 * distill
