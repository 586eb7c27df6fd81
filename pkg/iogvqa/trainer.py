import contextlib
import copy
import dataclasses
import logging
import math
from collections.abc import Iterable
from pathlib import Path
from typing import Optional, Union

import pandas as pd
import torch
from torch import nn

from .batching import Batch, batches
from .bias_ensemble import distribution, probabilities
from .checkpoint import Checkpoint, load, save
from .config import TrainingConfig
from .data_synth import Dataset, class_frequencies
from .errors import TrainingAborted, ValidationError
from .gan_debias import discriminator_loss, generator_loss
from .logging_util import StepContextRecord
from .losses import LossBundle, LossWeights, class_weights, distill_loss, weighted_cross_entropy
from .model import IogVqaModel, ModelShape, TeacherModel, accuracy, build_model, torch_dtype
from .question_encoder import load_word_vectors

__doc__ = """Training protocol

1. pretrain the question and visual teachers, then freeze them
2. for every batch: discriminator step, generator and transformer step,
   then the student step on alpha1 WCE + alpha2 distillation
3. keep the best epoch by validation accuracy, stop after `patience`
   epochs without improvement

Initialization, data order and noise have their own random streams, all
derived from config.seed.
"""

log = logging.getLogger(__name__)

METRICS_COLUMNS = ('step', 'wce', 'distill', 'l_d', 'l_g', 'l_qv', 'l_vq', 'total')
_DATA_STREAM = 1
_NOISE_STREAM = 2
_TEACHER_STREAM = 3

__all__ = [
    'Checkpoint',
    'MetricsLog',
    'TrainState',
    'clip_gradients',
    'deterministic_algorithms',
    'init_state',
    'load',
    'resume_state',
    'save',
    'train',
    'train_step',
    'train_teachers',
]


def _generator(seed: int, stream: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed * 1000 + stream)
    return g


def _check_finite(value: torch.Tensor, component: str) -> None:
    if not bool(torch.isfinite(value).all()):
        raise TrainingAborted(f"non-finite loss {float(value)}", component=component)


def clip_gradients(parameters: Iterable[nn.Parameter], clip_norm: float) -> float:
    """Scale gradients to a global norm of at most clip_norm; return the norm before clipping"""
    parameters = [p for p in parameters if p.grad is not None]
    if not parameters:
        return 0.0
    return float(nn.utils.clip_grad_norm_(parameters, clip_norm))


def _optimizer(parameters: Iterable[nn.Parameter], config: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(list(parameters), lr=config.learning_rate, betas=config.adam_betas)


def _update(optimizer: torch.optim.Optimizer, loss: torch.Tensor, clip_norm: float) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for group in optimizer.param_groups for p in group['params']]
    norm = clip_gradients(params, clip_norm)
    optimizer.step()
    return norm


@dataclasses.dataclass
class TrainState:
    """Mutable training state: model, optimizers and random streams"""

    config: TrainingConfig
    model: IogVqaModel
    optimizers: dict[str, torch.optim.Optimizer]
    weights: LossWeights
    data_generator: torch.Generator
    noise_generator: torch.Generator
    step: int = 0
    epoch: int = 0

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.config)


def init_state(
    config: TrainingConfig,
    train_data: Dataset,
    *,
    word_vectors: Optional[torch.Tensor] = None,
) -> TrainState:
    if word_vectors is None and config.word_vectors is not None:
        word_vectors = load_word_vectors(
            config.word_vectors, train_data.word_vocab, config.d_w, seed=config.seed
        )
    model = build_model(config, ModelShape.of(train_data), word_vectors)
    model.train()
    optimizers = {
        'student': _optimizer(model.student_parameters(), config),
        'discriminator': _optimizer(model.gan.discriminator.parameters(), config),
        'generator': _optimizer(model.gan.generator_parameters(), config),
    }
    weights = LossWeights.from_config(
        config,
        class_weights(
            class_frequencies(train_data), config.class_weight_range, torch_dtype(config)
        ),
    )
    return TrainState(
        config=config,
        model=model,
        optimizers=optimizers,
        weights=weights,
        data_generator=_generator(config.seed, _DATA_STREAM),
        noise_generator=_generator(config.seed, _NOISE_STREAM),
    )


def resume_state(checkpoint: Checkpoint, train_data: Dataset) -> TrainState:
    """Training state with the parameters and optimizer moments of a checkpoint"""
    state = init_state(checkpoint.config, train_data)
    state.model.load_state_dict(checkpoint.tensors)
    state.model.train()
    checkpoint.restore_optimizers(state.optimizers)
    state.epoch = checkpoint.epoch
    return state


#######################################
# TEACHERS


def _teacher_step(
    teacher: TeacherModel,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    weights: LossWeights,
    config: TrainingConfig,
    component: str,
) -> float:
    p = probabilities(teacher(batch))
    loss = weighted_cross_entropy(batch.answer_scores, p, weights.class_weights, 'mean')
    _check_finite(loss, component)
    _update(optimizer, loss, config.clip_norm)
    return float(loss)


def train_teachers(
    train_data: Dataset,
    config: TrainingConfig,
    *,
    state: Optional[TrainState] = None,
    steps: Optional[int] = None,
) -> tuple[TeacherModel, TeacherModel]:
    """Train the visual and question teachers with WCE, then freeze them

    Runs `config.teacher_epochs` epochs, or exactly `steps` updates when given.
    """
    if not len(train_data):
        raise ValidationError("empty training data", field='train_data')
    if state is None:
        state = init_state(config, train_data)
    model = state.model
    teachers = {'teacher_v': model.teacher_v, 'teacher_q': model.teacher_q}
    optimizers = {name: _optimizer(t.parameters(), config) for name, t in teachers.items()}
    generator = _generator(config.seed, _TEACHER_STREAM)
    for t in teachers.values():
        t.train()
    done = 0
    epochs = config.teacher_epochs if steps is None else math.inf
    epoch = 0
    while epoch < epochs and (steps is None or done < steps):
        epoch += 1
        losses = {name: 0.0 for name in teachers}
        count = 0
        for batch in batches(
            train_data, config.batch_size, shuffle=True, generator=generator, dtype=state.dtype
        ):
            for name, teacher in teachers.items():
                losses[name] += _teacher_step(
                    teacher, optimizers[name], batch, state.weights, config, name
                )
            done += 1
            count += 1
            if steps is not None and done >= steps:
                break
        log.info(
            'Teachers epoch %d: %s',
            epoch,
            ', '.join(f"{k} loss {v / max(count, 1):.4f}" for k, v in losses.items()),
        )
    for t in teachers.values():
        t.freeze()
    return model.teacher_v, model.teacher_q


#######################################
# STEP


def train_step(batch: Batch, state: TrainState) -> tuple[TrainState, LossBundle]:
    """One update of the discriminator, the generator and the student (in that order)"""
    config = state.config
    model = state.model
    weights = state.weights
    qv, fv = model.encode(batch)
    values: dict[str, float] = {}
    visual_for_bias = fv

    if config.enable_gan:
        gan = model.gan
        v1, v3 = fv.detach(), qv.detach()
        noise = torch.randn(
            len(batch), config.noise_dim, generator=state.noise_generator, dtype=state.dtype
        )
        with torch.no_grad():
            v2 = gan.generate(noise, gan.transform_q_to_v(v3), v1)
        l_d = discriminator_loss(gan.discriminate(v1), gan.discriminate(v2))
        _check_finite(l_d, 'discriminator')
        _update(state.optimizers['discriminator'], l_d, config.clip_norm)

        v2 = gan.generate(noise, gan.transform_q_to_v(v3), v1)
        l_g = generator_loss(gan.discriminate(v2))
        l_qv, l_vq = gan.transformer_losses(v1, v3)
        g_loss = l_g + config.lambda1 * l_qv + config.lambda2 * l_vq
        _check_finite(g_loss, 'generator')
        _update(state.optimizers['generator'], g_loss, config.clip_norm)

        # gradients reach both encoders; the generator ones are reset by its next update
        visual_for_bias = gan.generate(noise, gan.transform_q_to_v(qv), fv)
        values.update(
            l_d=float(l_d.detach()),
            l_g=float(l_g.detach()),
            l_qv=float(l_qv.detach()),
            l_vq=float(l_vq.detach()),
        )

    destination_logits = model.destination_head(qv, fv)
    p_d = probabilities(destination_logits)
    p_b = probabilities(model.bias_head(qv, visual_for_bias))
    w = weights.class_weights
    wce = weighted_cross_entropy(batch.answer_scores, p_d, w, 'mean') + weighted_cross_entropy(
        batch.answer_scores, p_b, w, 'mean'
    )
    _check_finite(wce, 'wce')
    loss = config.alpha1 * wce
    if config.enable_distill:
        with torch.no_grad():
            p_t_v = distribution(model.teacher_v(batch))
            p_t_q = distribution(model.teacher_q(batch))
        distill = distill_loss(p_t_v, p_t_q, distribution(destination_logits), weights)
        _check_finite(distill, 'distill')
        loss = loss + config.alpha2 * distill
        values['distill'] = float(distill.detach())
    _update(state.optimizers['student'], loss, config.clip_norm)

    for name, p in model.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise TrainingAborted("non-finite parameter after update", component=name)
    state.step += 1
    return state, LossBundle.compose(weights, wce=float(wce.detach()), **values)


#######################################
# TRAINING LOOP


class MetricsLog:
    """Loss values per step, written as CSV"""

    def __init__(self) -> None:
        self.rows: list[dict[str, float]] = []

    def append(self, step: int, bundle: LossBundle) -> None:
        self.rows.append({'step': step, **bundle.to_row()})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(METRICS_COLUMNS))

    def write(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.10g')


@contextlib.contextmanager
def deterministic_algorithms():
    """Enable deterministic torch kernels (warning only) and restore the previous mode"""
    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)


def _snapshot(state: TrainState, data_fingerprint: str, best_score: float, history) -> Checkpoint:
    return Checkpoint.capture(
        state.model,
        data_fingerprint=data_fingerprint,
        optimizers=state.optimizers,
        epoch=state.epoch,
        best_score=best_score,
        history=copy.deepcopy(history),
    )


def train(
    train_data: Dataset,
    val_data: Optional[Dataset],
    config: TrainingConfig,
    *,
    metrics: Optional[MetricsLog] = None,
    state: Optional[TrainState] = None,
) -> Checkpoint:
    """Train the full model and return the checkpoint of the best validation epoch

    Without validation data, the training accuracy selects the epoch.
    """
    if not len(train_data):
        raise ValidationError("empty training data", field='train_data')
    if val_data is None or not len(val_data):
        log.warning('No validation data, using training accuracy for early stopping')
        val_data = train_data
    if state is None:
        state = init_state(config, train_data)
    if metrics is None:
        metrics = MetricsLog()
    with deterministic_algorithms():
        return _train_epochs(train_data, val_data, config, metrics, state)


def _train_epochs(
    train_data: Dataset,
    val_data: Dataset,
    config: TrainingConfig,
    metrics: MetricsLog,
    state: TrainState,
) -> Checkpoint:
    if config.enable_distill:
        train_teachers(train_data, config, state=state)

    def score() -> float:
        return accuracy(state.model, val_data, batch_size=config.batch_size)

    best_score = score()
    history: list[dict[str, float]] = []
    best = _snapshot(state, train_data.spec_fingerprint, best_score, history)
    without_improvement = 0
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        state.model.train()
        totals = {'wce': 0.0, 'total': 0.0}
        count = 0
        for batch in batches(
            train_data,
            config.batch_size,
            shuffle=True,
            generator=state.data_generator,
            dtype=state.dtype,
        ):
            with StepContextRecord.position(epoch, state.step + 1):
                state, bundle = train_step(batch, state)
                metrics.append(state.step, bundle)
                if state.step % config.log_every == 0:
                    log.debug('wce %.4f total %.4f', bundle.wce, bundle.total)
            totals['wce'] += bundle.wce
            totals['total'] += bundle.total
            count += 1
        val_score = score()
        history.append(
            {
                'epoch': epoch,
                'wce': totals['wce'] / count,
                'total': totals['total'] / count,
                'val_accuracy': val_score,
            }
        )
        with StepContextRecord.position(epoch):
            log.info(
                'train wce %.4f total %.4f, val accuracy %.4f',
                history[-1]['wce'],
                history[-1]['total'],
                val_score,
            )
        first_epoch = len(history) == 1
        if val_score > best_score or (first_epoch and val_score >= best_score):
            best_score = val_score
            best = _snapshot(state, train_data.spec_fingerprint, best_score, history)
            without_improvement = 0
        else:
            without_improvement += 1
            if without_improvement >= config.early_stop_patience:
                log.info('Early stop at epoch %d (best epoch %d)', epoch, best.epoch)
                break
    best.history = copy.deepcopy(history)
    log.info('Best epoch %d with validation accuracy %.4f', best.epoch, best.best_score)
    return best
