import dataclasses
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, ValidationError, check_shape

__doc__ = """Prediction heads and fusion inference

The bias and destination heads score every answer independently with a
sigmoid; at inference they are mixed with weight beta on the destination.
The two teachers see a single modality each.
"""

EPSILON = 1e-7
Head = Literal['fused', 'bias', 'destination', 'teacher_q', 'teacher_v']
HEADS: tuple[Head, ...] = ('fused', 'bias', 'destination', 'teacher_q', 'teacher_v')


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    """Sigmoid kept inside [EPSILON, 1 - EPSILON] for the logarithms of the losses"""
    return torch.sigmoid(logits).clamp(EPSILON, 1 - EPSILON)


def distribution(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)


def _relu_layer(in_dim: int, out_dim: int) -> nn.Linear:
    """Linear layer followed by a ReLU in the heads: He initialization, zero bias"""
    layer = nn.Linear(in_dim, out_dim)
    nn.init.kaiming_normal_(layer.weight, nonlinearity='relu')
    nn.init.zeros_(layer.bias)
    return layer


class JointHead(nn.Module):
    """relu(W norm(q)) * relu(W norm(v)) -> relu(linear) -> answer logits

    Both features are layer-normalized so that the product of the two
    projections keeps a usable scale whatever the encoders output.
    """

    def __init__(self, hidden: int, num_answers: int) -> None:
        super().__init__()
        self.hidden = hidden
        self.q_norm = nn.LayerNorm(hidden)
        self.v_norm = nn.LayerNorm(hidden)
        self.q_proj = _relu_layer(hidden, hidden)
        self.v_proj = _relu_layer(hidden, hidden)
        self.combine = _relu_layer(hidden, hidden)
        self.output = nn.Linear(hidden, num_answers)

    def forward(self, qv: torch.Tensor, fv: torch.Tensor) -> torch.Tensor:
        check_shape('qv', qv.shape, (None, self.hidden))
        check_shape('fv', fv.shape, (qv.shape[0], self.hidden))
        joint = F.relu(self.q_proj(self.q_norm(qv))) * F.relu(self.v_proj(self.v_norm(fv)))
        return self.output(F.relu(self.combine(joint)))


class ModalityHead(nn.Module):
    """Answer logits from one modality"""

    def __init__(self, hidden: int, num_answers: int) -> None:
        super().__init__()
        self.hidden = hidden
        self.norm = nn.LayerNorm(hidden)
        self.combine = _relu_layer(hidden, hidden)
        self.output = nn.Linear(hidden, num_answers)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        check_shape('feature', feature.shape, (None, self.hidden))
        return self.output(F.relu(self.combine(self.norm(feature))))


def bias_forward(qv: torch.Tensor, fv: torch.Tensor, head: JointHead) -> torch.Tensor:
    return probabilities(head(qv, fv))


def destination_forward(qv: torch.Tensor, fv: torch.Tensor, head: JointHead) -> torch.Tensor:
    return probabilities(head(qv, fv))


def teacher_v_forward(fv: torch.Tensor, head: ModalityHead) -> torch.Tensor:
    return distribution(head(fv))


def teacher_q_forward(qv: torch.Tensor, head: ModalityHead) -> torch.Tensor:
    return distribution(head(qv))


def fuse(p_d: torch.Tensor, p_b: torch.Tensor, beta: float) -> torch.Tensor:
    """p = beta * p_d + (1 - beta) * p_b"""
    if not 0 <= beta <= 1:
        raise ValidationError(f"beta must be in [0, 1], got {beta}", field='beta')
    if p_d.shape != p_b.shape:
        raise ShapeError(f"p_d {tuple(p_d.shape)} != p_b {tuple(p_b.shape)}")
    if beta == 1:
        return p_d.clone()
    if beta == 0:
        return p_b.clone()
    return beta * p_d + (1 - beta) * p_b


def predict(p_fused: torch.Tensor) -> torch.Tensor:
    """Index of the largest value along the last axis; ties go to the lowest index"""
    if p_fused.shape[-1] == 0:
        raise ValidationError("empty prediction vector", field='p_fused')
    # torch.argmax returns the first maximal index
    return torch.argmax(p_fused, dim=-1)


@dataclasses.dataclass(frozen=True)
class PredictionBundle:
    p_b: torch.Tensor
    p_d: torch.Tensor
    p_fused: torch.Tensor
    answer_index: torch.Tensor
    beta: float

    @classmethod
    def from_heads(cls, p_d: torch.Tensor, p_b: torch.Tensor, beta: float) -> "PredictionBundle":
        p_fused = fuse(p_d, p_b, beta)
        return cls(p_b=p_b, p_d=p_d, p_fused=p_fused, answer_index=predict(p_fused), beta=beta)
