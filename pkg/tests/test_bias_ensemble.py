import math

import pytest
import torch

from iogvqa import bias_ensemble as be
from iogvqa.errors import ShapeError, ValidationError


def test_probabilities_zero_logits():
    assert be.probabilities(torch.zeros(4)).tolist() == [0.5] * 4


def test_probabilities_closed_form():
    p = be.probabilities(torch.tensor([math.log(3), 0.0], dtype=torch.float64))
    assert p.tolist() == pytest.approx([0.75, 0.5], abs=1e-12)


def test_probabilities_range():
    p = be.probabilities(torch.tensor([-1e4, 1e4, 50.0, -50.0], dtype=torch.float64))
    assert (p > 0).all() and (p < 1).all()
    assert float(p.min()) == be.EPSILON


def test_probabilities_gradcheck():
    logits = torch.randn(5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(be.probabilities, (logits,))


def test_distribution_uniform():
    p = be.distribution(torch.full((2, 4), 3.0, dtype=torch.float64))
    torch.testing.assert_close(p, torch.full((2, 4), 0.25, dtype=torch.float64))


@pytest.mark.parametrize("beta,expected", [(1.0, 'd'), (0.0, 'b')])
def test_fuse_endpoints(beta, expected):
    p_d = torch.tensor([0.9, 0.1, 0.3])
    p_b = torch.tensor([0.2, 0.6, 0.7])
    fused = be.fuse(p_d, p_b, beta)
    assert torch.equal(fused, p_d if expected == 'd' else p_b)
    assert fused is not p_d and fused is not p_b


def test_fuse_arithmetic():
    fused = be.fuse(
        torch.tensor([0.9, 0.1], dtype=torch.float64),
        torch.tensor([0.2, 0.6], dtype=torch.float64),
        0.7,
    )
    assert fused.tolist() == pytest.approx([0.69, 0.25], abs=1e-12)


def test_fuse_is_affine():
    torch.manual_seed(0)
    p_d = torch.rand(5, dtype=torch.float64)
    p_b = torch.rand(5, dtype=torch.float64)
    h = 1e-3
    for beta in (0.1, 0.3, 0.5, 0.8):
        step = be.fuse(p_d, p_b, beta + h) - be.fuse(p_d, p_b, beta)
        torch.testing.assert_close(step / h, p_d - p_b, rtol=0, atol=1e-9)
        previous = be.fuse(p_d, p_b, beta) - be.fuse(p_d, p_b, beta - h)
        torch.testing.assert_close(step, previous, rtol=0, atol=1e-12)


@pytest.mark.parametrize("beta", [-0.1, 1.5])
def test_fuse_invalid_beta(beta):
    with pytest.raises(ValidationError):
        be.fuse(torch.zeros(2), torch.zeros(2), beta)


def test_fuse_shape():
    with pytest.raises(ShapeError):
        be.fuse(torch.zeros(2), torch.zeros(3), 0.5)


@pytest.mark.parametrize(
    "scores,expected",
    [
        ([0.2, 0.9, 0.1], 1),
        ([0.5, 0.5], 0),
        ([0.1, 0.7, 0.7], 1),
    ],
)
def test_predict(scores, expected):
    assert int(be.predict(torch.tensor(scores))) == expected


def test_predict_monotone_invariance():
    p = torch.rand(3, 7)
    for transform in (torch.log, torch.exp, lambda x: 3 * x + 1):
        assert torch.equal(be.predict(transform(p)), be.predict(p))


def test_predict_empty():
    with pytest.raises(ValidationError):
        be.predict(torch.zeros(2, 0))


def test_predict_independent_of_beta():
    p = torch.rand(4, 6)
    answers = {tuple(be.predict(be.fuse(p, p, beta)).tolist()) for beta in (0, 0.3, 0.7, 1)}
    assert len(answers) == 1


def test_prediction_bundle():
    bundle = be.PredictionBundle.from_heads(
        torch.tensor([[0.9, 0.1]]), torch.tensor([[0.2, 0.6]]), 0.7
    )
    assert bundle.answer_index.tolist() == [0]
    assert bundle.beta == 0.7


def test_joint_head_shapes():
    torch.manual_seed(0)
    head = be.JointHead(4, 3)
    logits = head(torch.randn(2, 4), torch.randn(2, 4))
    assert logits.shape == (2, 3)
    with pytest.raises(ShapeError):
        head(torch.randn(2, 4), torch.randn(3, 4))


@pytest.mark.parametrize("seed", range(20))
def test_joint_head_gradcheck(seed):
    torch.manual_seed(seed)
    head = be.JointHead(4, 3).double()
    qv = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    fv = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(head, (qv, fv))


@pytest.mark.parametrize("seed", range(20))
def test_modality_head_gradcheck(seed):
    torch.manual_seed(seed)
    head = be.ModalityHead(4, 3).double()
    feature = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(head, (feature,))


def test_heads_depend_on_inputs():
    torch.manual_seed(0)
    head = be.JointHead(8, 5)
    qv = torch.randn(16, 8) * 0.01
    fv = torch.randn(16, 8) * 0.01
    logits = head(qv, fv)
    assert float(logits.std(dim=0).mean()) > 0.05


def test_teacher_forward_is_pure():
    torch.manual_seed(0)
    head = be.ModalityHead(4, 3).eval()
    feature = torch.randn(2, 4)
    a = be.teacher_v_forward(feature, head)
    b = be.teacher_v_forward(feature, head)
    assert torch.equal(a, b)
    torch.testing.assert_close(a.sum(-1), torch.ones(2))
    torch.testing.assert_close(be.teacher_q_forward(feature, head), a)
