import dataclasses
from typing import Literal, Optional

import numpy as np
import torch

from .config import TrainingConfig
from .errors import ShapeError, ValidationError
from .gan_debias import gan_total_loss

__doc__ = """Training objectives

- weighted cross-entropy over per-answer sigmoid outputs
- KL divergence and the two-teacher distillation loss
- the total objective L = L_GAN + alpha1 L_WCE + alpha2 L_distill
"""

KL_CLAMP = 1e-9
NORMALIZATION_TOLERANCE = 1e-6


@dataclasses.dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.5
    alpha2: float = 0.3
    distill_weight_v: float = 0.5
    distill_weight_q: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    class_weights: Optional[torch.Tensor] = None

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if value is None:
                continue
            if isinstance(value, torch.Tensor):
                ok = bool(torch.isfinite(value).all() and (value >= 0).all())
            else:
                ok = bool(np.isfinite(value) and value >= 0)
            if not ok:
                raise ValidationError("weights must be finite and non-negative", field=field.name)

    @classmethod
    def from_config(
        cls, config: TrainingConfig, class_weights: Optional[torch.Tensor] = None
    ) -> "LossWeights":
        return cls(
            alpha1=config.alpha1,
            alpha2=config.alpha2,
            distill_weight_v=config.distill_weight_v,
            distill_weight_q=config.distill_weight_q,
            lambda1=config.lambda1,
            lambda2=config.lambda2,
            class_weights=class_weights,
        )


def class_weights(
    frequencies, clip: tuple[float, float] = (0.1, 10.0), dtype=torch.float32
) -> torch.Tensor:
    """Inverse answer frequency, normalized to mean 1 and clipped

    Answers that never occur get the upper bound.
    """
    freq = np.asarray(frequencies, dtype=np.float64)
    weights = np.full_like(freq, np.inf)
    seen = freq > 0
    weights[seen] = 1 / freq[seen]
    if seen.any():
        weights[seen] /= weights[seen].mean()
    return torch.from_numpy(np.clip(weights, *clip)).to(dtype)


def weighted_cross_entropy(
    y_true: torch.Tensor,
    y_pred: torch.Tensor,
    w: Optional[torch.Tensor] = None,
    reduction: Literal['sum', 'mean'] = 'sum',
) -> torch.Tensor:
    """-sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]

    The weights are per answer and broadcast over the batch; 'mean' divides
    the sum by the number of samples.
    """
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"y_true {tuple(y_true.shape)} != y_pred {tuple(y_pred.shape)}")
    if w is None:
        w = torch.ones(y_pred.shape[-1], dtype=y_pred.dtype)
    if w.shape[-1] != y_pred.shape[-1]:
        raise ShapeError(f"expecting {y_pred.shape[-1]} weights, got {w.shape[-1]}", field='w')
    if bool((w < 0).any()):
        raise ValidationError("negative weight", field='w')
    terms = w * (y_true * torch.log(y_pred) + (1 - y_true) * torch.log1p(-y_pred))
    loss = -terms.sum()
    if reduction == 'mean' and y_pred.dim() > 1:
        loss = loss / y_pred.shape[0]
    return loss


def _check_distribution(name: str, p: torch.Tensor) -> None:
    total = p.sum(dim=-1)
    if bool(((total - 1).abs() > NORMALIZATION_TOLERANCE).any()) or bool((p < 0).any()):
        raise ValidationError("not a probability distribution", field=name)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """sum_i p_i log(p_i / q_i) along the last axis, with 0 log 0 = 0"""
    if p.shape != q.shape:
        raise ShapeError(f"p {tuple(p.shape)} != q {tuple(q.shape)}")
    _check_distribution('p', p)
    _check_distribution('q', q)
    q = q.clamp(min=KL_CLAMP)
    return (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-1)


def distill_loss(
    p_t_v: torch.Tensor, p_t_q: torch.Tensor, p_s: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    """w_v KL(p_t_v | p_s) + w_q KL(p_t_q | p_s), averaged over the batch"""
    return (
        weights.distill_weight_v * kl_divergence(p_t_v, p_s).mean()
        + weights.distill_weight_q * kl_divergence(p_t_q, p_s).mean()
    )


def total_loss(l_gan, l_wce, l_distill, alpha1: float, alpha2: float):
    return l_gan + alpha1 * l_wce + alpha2 * l_distill


@dataclasses.dataclass(frozen=True)
class LossBundle:
    """Loss values of one training step

    `gan` and `total` are computed from the stored values, so that
    `total == total_loss(gan, wce, distill, alpha1, alpha2)` holds exactly.
    """

    wce: float
    distill: float
    l_d: float
    l_g: float
    l_qv: float
    l_vq: float
    gan: float
    total: float

    @classmethod
    def compose(
        cls,
        weights: LossWeights,
        *,
        wce: float,
        distill: float = 0.0,
        l_d: float = 0.0,
        l_g: float = 0.0,
        l_qv: float = 0.0,
        l_vq: float = 0.0,
    ) -> "LossBundle":
        values = dict(
            wce=float(wce),
            distill=float(distill),
            l_d=float(l_d),
            l_g=float(l_g),
            l_qv=float(l_qv),
            l_vq=float(l_vq),
        )
        gan = gan_total_loss(
            values['l_d'],
            values['l_g'],
            values['l_qv'],
            values['l_vq'],
            weights.lambda1,
            weights.lambda2,
        )
        total = total_loss(gan, values['wce'], values['distill'], weights.alpha1, weights.alpha2)
        return cls(**values, gan=gan, total=total)

    def to_row(self) -> dict[str, float]:
        return {
            name: getattr(self, name)
            for name in ('wce', 'distill', 'l_d', 'l_g', 'l_qv', 'l_vq', 'total')
        }
