import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, check_shape
from .question_encoder import masked_softmax

__doc__ = """Object interaction self-attention

Region features attend to each other, are re-weighted by a similarity that
also sees the global image feature, and are then pooled into one visual
feature per image.
"""


def _no_mask(objects: torch.Tensor) -> torch.Tensor:
    return torch.zeros(objects.shape[:-1], dtype=torch.bool, device=objects.device)


class ObjectInteraction(nn.Module):
    """F_R = softmax(O W_q (O W_k)^T / sqrt(d)) O W_v"""

    def __init__(self, dim: int, attention_d: int) -> None:
        super().__init__()
        self.attention_d = attention_d
        self.W_q = nn.Linear(dim, attention_d, bias=False)
        self.W_k = nn.Linear(dim, attention_d, bias=False)
        self.W_v = nn.Linear(dim, dim, bias=False)

    def forward(
        self, objects: torch.Tensor, object_mask: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if object_mask is None:
            object_mask = _no_mask(objects)
        check_shape('object_mask', object_mask.shape, objects.shape[:-1])
        scores = self.W_q(objects) @ self.W_k(objects).transpose(-2, -1)
        weights = masked_softmax(scores / math.sqrt(self.attention_d), object_mask.unsqueeze(-2))
        weights = weights.masked_fill(object_mask.unsqueeze(-1), 0)
        return weights @ self.W_v(objects), weights


def fuse_global(
    related: torch.Tensor,
    global_feature: torch.Tensor,
    attention_d: int,
    object_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Attend over the related objects with a similarity of [F_R ; F_G] pairs

    :param related: [batch, objects, dim]
    :param global_feature: [batch, dim]
    """
    if global_feature.shape[-1] != related.shape[-1]:
        raise ShapeError(
            f"global dimension {global_feature.shape[-1]} != object dimension"
            f" {related.shape[-1]}",
            field='global_feature',
        )
    if object_mask is None:
        object_mask = _no_mask(related)
    joined = torch.cat([related, global_feature.unsqueeze(-2).expand_as(related)], dim=-1)
    similarity = joined @ joined.transpose(-2, -1) / math.sqrt(attention_d)
    weights = masked_softmax(similarity, object_mask.unsqueeze(-2))
    weights = weights.masked_fill(object_mask.unsqueeze(-1), 0)
    return weights @ related


class ObjectProjection(nn.Module):
    """1-D convolution over the object axis, mean-pool, ELU(Linear)"""

    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size=1)
        self.linear = nn.Linear(dim, hidden)

    def forward(
        self, objects: torch.Tensor, object_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        if object_mask is None:
            object_mask = _no_mask(objects)
        features = self.conv(objects.transpose(-2, -1)).transpose(-2, -1)
        keep = (~object_mask).unsqueeze(-1).to(features.dtype)
        pooled = (features * keep).sum(dim=-2) / keep.sum(dim=-2).clamp(min=1)
        return F.elu(self.linear(pooled))


class VisualEncoder(nn.Module):
    """Object features [batch, objects, D] and global features [batch, D] -> F_V [batch, hidden]

    Features are first reduced to `object_dim` with an ELU-activated layer.
    Without OISA the reduced objects go straight to the projection.
    """

    def __init__(
        self,
        feature_dim: int,
        *,
        object_dim: int = 64,
        attention_d: int = 64,
        hidden: int = 1024,
        enable_oisa: bool = True,
    ) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.enable_oisa = enable_oisa
        self.attention_d = attention_d
        self.reduce = nn.Linear(feature_dim, object_dim)
        self.interaction = ObjectInteraction(object_dim, attention_d)
        self.projection = ObjectProjection(object_dim, hidden)

    def forward(
        self,
        objects: torch.Tensor,
        global_feature: torch.Tensor,
        object_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        check_shape('objects', objects.shape, (None, None, self.feature_dim))
        check_shape('global_features', global_feature.shape, (objects.shape[0], self.feature_dim))
        reduced = F.elu(self.reduce(objects))
        if self.enable_oisa:
            related, _ = self.interaction(reduced, object_mask)
            reduced = fuse_global(
                related, F.elu(self.reduce(global_feature)), self.attention_d, object_mask
            )
        return self.projection(reduced, object_mask)
