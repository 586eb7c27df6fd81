import logging
from collections.abc import Iterator
from typing import Optional

import numpy as np
import pydantic
import torch
from torch import nn

from .batching import Batch, batches
from .bias_ensemble import (
    HEADS,
    Head,
    JointHead,
    ModalityHead,
    PredictionBundle,
    probabilities,
)
from .config import TrainingConfig
from .data_synth import Dataset
from .errors import ValidationError
from .gan_debias import GanDebias
from .oisa import VisualEncoder
from .question_encoder import QuestionEncoder

__doc__ = """The complete network: encoders, heads, GAN and teachers"""

log = logging.getLogger(__name__)


class ModelShape(pydantic.BaseModel):
    """Dataset dimensions needed to rebuild a model"""

    model_config = pydantic.ConfigDict(frozen=True)

    word_vocab_size: int
    char_vocab_size: int
    feature_dim: int
    num_answers: int

    @classmethod
    def of(cls, dataset: Dataset) -> "ModelShape":
        return cls(
            word_vocab_size=len(dataset.word_vocab),
            char_vocab_size=len(dataset.char_vocab),
            feature_dim=dataset.feature_dim,
            num_answers=len(dataset.answer_vocab),
        )


def torch_dtype(config: TrainingConfig) -> torch.dtype:
    return getattr(torch, config.dtype)


class TeacherModel(nn.Module):
    """Single-modality predictor with its own encoder"""

    def __init__(self, modality: str, encoder: nn.Module, hidden: int, num_answers: int) -> None:
        super().__init__()
        if modality not in ('question', 'visual'):
            raise ValidationError(f"unknown modality {modality}", field='modality')
        self.modality = modality
        self.encoder = encoder
        self.head = ModalityHead(hidden, num_answers)

    def encode(self, batch: Batch) -> torch.Tensor:
        if self.modality == 'question':
            return self.encoder(batch.word_ids, batch.char_ids, batch.pad_mask)
        return self.encoder(batch.objects, batch.global_features, batch.object_mask)

    def forward(self, batch: Batch) -> torch.Tensor:
        """Answer logits"""
        return self.head(self.encode(batch))

    def freeze(self) -> None:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)


class IogVqaModel(nn.Module):
    def __init__(
        self,
        config: TrainingConfig,
        shape: ModelShape,
        word_vectors: Optional[torch.Tensor] = None,
    ) -> None:
        super().__init__()
        self.config = config
        self.shape = shape
        self.question_encoder = self._question_encoder(word_vectors)
        self.visual_encoder = self._visual_encoder()
        self.bias_head = JointHead(config.hidden, shape.num_answers)
        self.destination_head = JointHead(config.hidden, shape.num_answers)
        self.gan = GanDebias(config.hidden, config.noise_dim)
        self.teacher_q = TeacherModel(
            'question', self._question_encoder(word_vectors), config.hidden, shape.num_answers
        )
        self.teacher_v = TeacherModel(
            'visual', self._visual_encoder(), config.hidden, shape.num_answers
        )

    def _question_encoder(self, word_vectors) -> QuestionEncoder:
        c = self.config
        return QuestionEncoder(
            self.shape.word_vocab_size,
            self.shape.char_vocab_size,
            d_w=c.d_w,
            d_a=c.d_a,
            hidden=c.hidden,
            char_kernel=c.char_kernel,
            word_vectors=word_vectors,
        )

    def _visual_encoder(self) -> VisualEncoder:
        c = self.config
        return VisualEncoder(
            self.shape.feature_dim,
            object_dim=c.object_dim,
            attention_d=c.attention_d,
            hidden=c.hidden,
            enable_oisa=c.enable_oisa,
        )

    def student_parameters(self) -> Iterator[nn.Parameter]:
        """Parameters updated by the weighted cross-entropy and distillation losses"""
        for module in (
            self.question_encoder,
            self.visual_encoder,
            self.bias_head,
            self.destination_head,
        ):
            yield from module.parameters()

    def encode(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """(Q^v, F_V) of a batch"""
        qv = self.question_encoder(batch.word_ids, batch.char_ids, batch.pad_mask)
        fv = self.visual_encoder(batch.objects, batch.global_features, batch.object_mask)
        return qv, fv

    def predict(self, batch: Batch, beta: Optional[float] = None) -> PredictionBundle:
        """Fused prediction; the bias head sees the clean visual feature at inference"""
        if beta is None:
            beta = self.config.beta
        qv, fv = self.encode(batch)
        p_d = probabilities(self.destination_head(qv, fv))
        p_b = probabilities(self.bias_head(qv, fv))
        return PredictionBundle.from_heads(p_d, p_b, beta)

    def head_scores(self, batch: Batch, head: Head = 'fused', beta: Optional[float] = None):
        """Per-answer scores of one head"""
        if head == 'fused':
            return self.predict(batch, beta).p_fused
        if head == 'bias':
            return self.predict(batch, 0.0).p_fused
        if head == 'destination':
            return self.predict(batch, 1.0).p_fused
        if head == 'teacher_q':
            return probabilities(self.teacher_q(batch))
        if head == 'teacher_v':
            return probabilities(self.teacher_v(batch))
        raise ValidationError(f"unknown head {head}, expecting one of {HEADS}", field='head')


def build_model(
    config: TrainingConfig, shape: ModelShape, word_vectors: Optional[torch.Tensor] = None
) -> IogVqaModel:
    """Create a model whose initialization depends only on config.seed"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = IogVqaModel(config, shape, word_vectors)
    return model.to(torch_dtype(config))


def predict_dataset(
    model: IogVqaModel,
    dataset: Dataset,
    *,
    head: Head = 'fused',
    beta: Optional[float] = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Predicted answer index of every instance, in dataset order"""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    predictions = []
    with torch.no_grad():
        for batch in batches(dataset, batch_size, dtype=dtype):
            scores = model.head_scores(batch, head, beta)
            predictions.append(scores.argmax(dim=-1).numpy())
    model.train(was_training)
    if not predictions:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(predictions)


def accuracy(model: IogVqaModel, dataset: Dataset, **kwargs) -> float:
    """Mean soft accuracy of the predictions over a dataset"""
    if not len(dataset):
        return 0.0
    predicted = predict_dataset(model, dataset, **kwargs)
    return float(
        np.mean([inst.answer_scores[k] for inst, k in zip(dataset.instances, predicted)])
    )
