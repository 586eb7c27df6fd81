import hashlib
import math
from pathlib import Path
from typing import Literal, Optional

import pydantic
from pydantic import BaseModel, Field

__doc__ = """Typed configuration sections

The sections are registered in the global configuration under the prefixes
`synth`, `train` and `run` and read back with `iogvqa.get(TrainingConfig)`.
"""

QUESTION_TYPES = ('yesno', 'number', 'other')

DESK_SCALE = {'batch_size': 64, 'hidden': 128, 'noise_dim': 256}
PAPER_SCALE = {'batch_size': 512, 'hidden': 1024, 'noise_dim': 2048}


def fingerprint(model: BaseModel) -> str:
    """Short content hash of a configuration model"""
    data = model.model_dump_json(exclude_none=False).encode()
    return hashlib.sha256(data).hexdigest()[:16]


class SyntheticSpec(BaseModel):
    """Parameters of a synthetic corpus with a train/test answer-prior shift"""

    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    num_train: int = Field(2000, ge=0, description="Number of train instances")
    num_test: int = Field(1000, ge=0, description="Number of test instances")
    answer_vocab_size: int = Field(16, ge=4, description="Answers: yes, no, counts, attributes")
    word_vocab_size: int = Field(64, gt=0, description="Word vocabulary size (with pad/unk)")
    char_vocab_size: int = Field(
        28, ge=3, le=38, description="Character vocabulary size (with pad/unk)"
    )
    max_question_len: int = Field(8, ge=5, description="Maximum tokens per question")
    max_word_len: int = Field(8, ge=1, description="Characters kept per token")
    object_feature_dim: int = Field(32, gt=0, description="Dimension of object features")
    max_objects: int = Field(8, ge=2, description="Upper bound on objects per scene")
    num_concepts: int = Field(8, ge=2, description="Object categories")
    num_attributes: int = Field(2, ge=1, description="Attribute families (color, shape...)")
    noise_std: float = Field(0.3, ge=0, description="Std of per-object feature noise")
    prior_shift: float = Field(
        0.5, ge=0, le=1, description="Train/test total-variation distance per question type"
    )
    type_mix: tuple[float, float, float] = Field(
        (0.4, 0.2, 0.4), description="Fractions of yesno, number and other questions"
    )
    soft_scores: bool = Field(False, description="Simulate 10 annotators per question")
    seed: int = Field(7, ge=0, description="Generator seed")

    @pydantic.field_validator('type_mix')
    @classmethod
    def _check_type_mix(cls, value):
        if any(v < 0 for v in value) or abs(sum(value) - 1) > 1e-9:
            raise ValueError("type_mix must be non-negative and sum to 1")
        return value

    @property
    def num_numbers(self) -> int:
        """Count answers "1".."k" reserved for number questions"""
        return max(1, (self.answer_vocab_size - 2) // 3)

    @property
    def num_other_answers(self) -> int:
        return self.answer_vocab_size - 2 - self.num_numbers

    @property
    def min_word_vocab_size(self) -> int:
        from .data_synth import TEMPLATE_WORDS, SPECIAL_TOKENS

        return (
            len(SPECIAL_TOKENS) + len(TEMPLATE_WORDS) + self.num_concepts + self.num_attributes
        )

    @pydantic.model_validator(mode='after')
    def _check_consistency(self):
        if self.num_numbers >= self.max_objects:
            raise ValueError(
                f"max_objects must exceed the largest count answer ({self.num_numbers})"
            )
        if self.num_other_answers < self.num_attributes:
            raise ValueError("answer_vocab_size too small for one value per attribute family")
        if self.word_vocab_size < self.min_word_vocab_size:
            raise ValueError(f"word_vocab_size must be at least {self.min_word_vocab_size}")
        if self.prior_shift > 0:
            sizes = {'yesno': 2, 'number': self.num_numbers, 'other': self.num_other_answers}
            for qtype, mix in zip(QUESTION_TYPES, self.type_mix):
                if mix > 0 and sizes[qtype] < 2:
                    raise ValueError(
                        f"prior_shift needs two answers for {qtype} questions,"
                        " increase answer_vocab_size"
                    )
        return self


class TrainingConfig(BaseModel):
    """Hyperparameters of the training protocol"""

    model_config = pydantic.ConfigDict(frozen=True, extra='forbid')

    learning_rate: float = Field(0.001, gt=0, description="Adam learning rate")
    adam_betas: tuple[float, float] = Field((0.9, 0.999), description="Adam moment decay")
    epochs: int = Field(30, ge=0, description="Maximum number of epochs")
    batch_size: int = Field(DESK_SCALE['batch_size'], gt=0, description="Batch size")
    hidden: int = Field(DESK_SCALE['hidden'], gt=0, description="Hidden units")
    d_a: int = Field(100, gt=0, description="Character embedding dimension")
    d_w: int = Field(300, gt=0, description="Word embedding dimension")
    char_kernel: int = Field(3, gt=0, description="Character convolution width")
    object_dim: int = Field(64, gt=0, description="Reduced object feature dimension")
    attention_d: int = Field(64, gt=0, description="Object attention key dimension")
    noise_dim: int = Field(DESK_SCALE['noise_dim'], gt=0, description="Generator noise size")
    beta: float = Field(0.7, ge=0, le=1, description="Destination weight at inference")
    alpha1: float = Field(0.5, ge=0, description="Weight of the weighted cross-entropy")
    alpha2: float = Field(0.3, ge=0, description="Weight of the distillation loss")
    lambda1: float = Field(0.5, ge=0, description="Weight of the q->v transformer loss")
    lambda2: float = Field(0.5, ge=0, description="Weight of the v->q transformer loss")
    distill_weight_v: float = Field(0.5, ge=0, description="Weight of the visual teacher")
    distill_weight_q: float = Field(0.5, ge=0, description="Weight of the question teacher")
    class_weight_range: tuple[float, float] = Field(
        (0.1, 10.0), description="Clip range of inverse-frequency class weights"
    )
    clip_norm: float = Field(5.0, gt=0, description="Global gradient norm clip (inf: none)")
    early_stop_patience: int = Field(5, ge=0, description="Epochs without improvement")
    teacher_epochs: int = Field(10, ge=0, description="Teacher pretraining epochs")
    val_fraction: float = Field(0.1, ge=0, lt=1, description="Train fraction held out")
    enable_gan: bool = Field(True, description="Train the adversarial branch")
    enable_distill: bool = Field(True, description="Distill from the teachers")
    enable_oisa: bool = Field(True, description="Use object interaction self-attention")
    dtype: Literal['float32', 'float64'] = Field('float32', description="Parameter precision")
    word_vectors: Optional[Path] = Field(None, description="Pretrained word vectors (text)")
    log_every: int = Field(50, gt=0, description="Log every n steps")
    seed: int = Field(0, ge=0, description="Seed of initialization, data order and noise")

    @pydantic.field_validator('clip_norm')
    @classmethod
    def _check_clip(cls, value):
        if math.isnan(value):
            raise ValueError("clip_norm must be a number")
        return value

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)


class RunOptions(BaseModel):
    """Paths and selections of a command line invocation"""

    model_config = pydantic.ConfigDict(extra='forbid')

    out: Optional[Path] = Field(None, description="Output directory (or file for plot)")
    data: Optional[Path] = Field(None, description="Dataset directory (with train/ and test/)")
    split: Literal['train', 'val', 'test'] = Field('test', description="Evaluated split")
    ckpt: Optional[Path] = Field(None, description="Checkpoint file")
    head: Literal['fused', 'bias', 'destination', 'teacher_q', 'teacher_v'] = Field(
        'fused', description="Evaluated prediction head"
    )
    seed: Optional[int] = Field(None, ge=0, description="Seed for synth and train")
    seeds: int = Field(1, ge=1, description="Number of seeds for ablations")
    param: Optional[str] = Field(None, description="Swept parameter")
    values: list[float] = Field([], description="Swept values")
    param_y: Optional[str] = Field(None, description="Second grid parameter")
    values_y: list[float] = Field([], description="Second grid values")
    csv: Optional[Path] = Field(None, description="Input CSV for plot")
    image: Optional[Path] = Field(None, description="Plot output image")
