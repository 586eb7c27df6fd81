import dataclasses
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .bias_ensemble import EPSILON
from .errors import check_shape

__doc__ = """Adversarial removal of bias from features

A generator perturbs the real visual feature V_1 into a disturbance feature
V_2, conditioned on the question feature mapped into the visual space.
A discriminator separates real from generated features, and two feature
transformers map between the question and the visual spaces.
"""


@dataclasses.dataclass(frozen=True)
class FeatureTriple:
    v1: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    v1_prime: torch.Tensor
    v3_prime: torch.Tensor


class FeatureTransformer(nn.Module):
    """Affine map between feature spaces"""

    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.linear = nn.Linear(in_dim, out_dim)

    def reset_identity(self) -> None:
        """Set the map to the identity (square case) with zero bias"""
        with torch.no_grad():
            self.linear.weight.copy_(
                torch.eye(*self.linear.weight.shape, dtype=self.linear.weight.dtype)
            )
            self.linear.bias.zero_()

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        check_shape('feature', feature.shape, (None, self.in_dim))
        return self.linear(feature)


class DisturbanceGenerator(nn.Module):
    """V_2 = V_1 + g([noise ; V_3'])"""

    def __init__(self, noise_dim: int, dim: int, hidden: Optional[int] = None) -> None:
        super().__init__()
        hidden = hidden or dim
        self.noise_dim = noise_dim
        self.dim = dim
        self.noise_projection = nn.Linear(noise_dim + dim, hidden)
        self.output = nn.Linear(hidden, dim)

    def forward(
        self, noise: torch.Tensor, v3_prime: torch.Tensor, v1: torch.Tensor
    ) -> torch.Tensor:
        check_shape('noise', noise.shape, (None, self.noise_dim))
        check_shape('v3_prime', v3_prime.shape, (noise.shape[0], self.dim))
        check_shape('v1', v1.shape, (noise.shape[0], self.dim))
        delta = self.output(F.elu(self.noise_projection(torch.cat([noise, v3_prime], dim=-1))))
        return v1 + delta


class Discriminator(nn.Module):
    def __init__(self, dim: int, hidden: Optional[int] = None) -> None:
        super().__init__()
        hidden = hidden or dim
        self.dim = dim
        self.layer = nn.Linear(dim, hidden)
        self.output = nn.Linear(hidden, 1)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        """Probability that each feature is real, clamped to [EPSILON, 1 - EPSILON]"""
        check_shape('feature', feature.shape, (None, self.dim))
        logit = self.output(F.leaky_relu(self.layer(feature), 0.2)).squeeze(-1)
        return torch.sigmoid(logit).clamp(EPSILON, 1 - EPSILON)


class GanDebias(nn.Module):
    """Generator, discriminator and the two feature transformers

    Question and visual features share the `hidden` dimension.
    """

    def __init__(self, hidden: int, noise_dim: int) -> None:
        super().__init__()
        self.noise_dim = noise_dim
        self.t_qv = FeatureTransformer(hidden, hidden)
        self.t_vq = FeatureTransformer(hidden, hidden)
        self.generator = DisturbanceGenerator(noise_dim, hidden)
        self.discriminator = Discriminator(hidden)

    def transform_q_to_v(self, v3: torch.Tensor) -> torch.Tensor:
        return self.t_qv(v3)

    def transform_v_to_q(self, v1: torch.Tensor) -> torch.Tensor:
        return self.t_vq(v1)

    def generate(
        self, noise: torch.Tensor, v3_prime: torch.Tensor, v1: torch.Tensor
    ) -> torch.Tensor:
        return self.generator(noise, v3_prime, v1)

    def discriminate(self, feature: torch.Tensor) -> torch.Tensor:
        return self.discriminator(feature)

    def features(self, v1: torch.Tensor, v3: torch.Tensor, noise: torch.Tensor) -> FeatureTriple:
        v3_prime = self.transform_q_to_v(v3)
        return FeatureTriple(
            v1=v1,
            v2=self.generate(noise, v3_prime, v1),
            v3=v3,
            v1_prime=self.transform_v_to_q(v1),
            v3_prime=v3_prime,
        )

    def transformer_losses(
        self, v1: torch.Tensor, v3: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return transformer_losses(v1, v3, self.t_qv, self.t_vq)

    def generator_parameters(self) -> list[nn.Parameter]:
        """Parameters updated by the generator step (generator and transformers)"""
        return [
            *self.generator.parameters(),
            *self.t_qv.parameters(),
            *self.t_vq.parameters(),
        ]


def generator_loss(d_of_v2: torch.Tensor) -> torch.Tensor:
    """L_G = -mean(log D(V_2))"""
    return -torch.log(d_of_v2).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """L_D = -mean(log D(V_1)) - mean(log(1 - D(V_2)))"""
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def squared_error(target: torch.Tensor, prediction: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared euclidean distance"""
    return (target - prediction).pow(2).sum(dim=-1).mean()


def transformer_losses(
    v1: torch.Tensor, v3: torch.Tensor, t_qv: nn.Module, t_vq: nn.Module
) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean |v1 - T_qv(v3)|^2, mean |v3 - T_vq(v1)|^2)"""
    return squared_error(v1, t_qv(v3)), squared_error(v3, t_vq(v1))


def gan_total_loss(l_d, l_g, l_qv, l_vq, lambda1: float, lambda2: float):
    """L_GAN = L_D + L_G + lambda1 l_qv + lambda2 l_vq (tensors or floats)"""
    return l_d + l_g + lambda1 * l_qv + lambda2 * l_vq
