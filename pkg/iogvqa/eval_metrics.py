import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
import pydantic
from pydantic import BaseModel

from .bias_ensemble import Head
from .checkpoint import Checkpoint
from .config import QUESTION_TYPES, TrainingConfig
from .data_synth import Dataset
from .errors import (
    EmptySliceError,
    IncompatibleCheckpointError,
    SchemaError,
    TrainingAborted,
    ValidationError,
)
from .model import IogVqaModel, ModelShape, predict_dataset
from .trainer import init_state, train, train_teachers

__doc__ = """Accuracy, reports and experiment harnesses

- vqa_accuracy / evaluate: soft VQA accuracy with a per question type breakdown
- run_ablation: the four loss combinations (WCE, +GAN, +distillation, all)
- run_module_ablation: single teachers and OISA/GAN variants
- run_sweep / run_grid: one or two hyperparameters
- plot: render any of the CSV files written by the harnesses
"""

log = logging.getLogger(__name__)

SCORE_COLUMNS = ['overall', *QUESTION_TYPES]
CSV_SCHEMAS = {
    'ablation': ['gan', 'distill', *SCORE_COLUMNS, 'seed'],
    'sweep': ['param', 'value', *SCORE_COLUMNS, 'seed'],
    'grid': ['param_x', 'value_x', 'param_y', 'value_y', *SCORE_COLUMNS, 'seed'],
    'modules': ['variant', *SCORE_COLUMNS, 'seed'],
}
ABLATION_FLAGS = [(False, False), (True, False), (False, True), (True, True)]
SWEEP_PARAMETERS = {
    'beta': float,
    'alpha1': float,
    'alpha2': float,
    'lambda1': float,
    'lambda2': float,
    'learning_rate': float,
    'd_w': int,
    'd_a': int,
    'noise_dim': int,
    'hidden': int,
    'attention_d': int,
}
MODULE_VARIANTS = ('question_only', 'visual_only', 'full', 'oisa_only', 'gan_only')


def vqa_accuracy(predicted_index: int, answer_scores: Sequence[float]) -> float:
    """Score of the predicted answer, min(annotators / 3, 1) in soft mode"""
    scores = np.asarray(answer_scores)
    if not 0 <= predicted_index < len(scores):
        raise ValidationError(
            f"index {predicted_index} outside [0, {len(scores)})", field='predicted_index'
        )
    return float(scores[predicted_index])


#######################################
# REPORTS


class EvalReport(BaseModel):
    """Accuracy over a split; question types without instances are absent"""

    model_config = pydantic.ConfigDict(frozen=True)

    overall: float
    per_type: dict[str, float]
    count_per_type: dict[str, int]
    config_fingerprint: str
    seed: int
    beta: float
    head: str = 'fused'

    @pydantic.model_validator(mode='after')
    def _check_overall(self):
        total = sum(self.count_per_type.values())
        if total:
            weighted = (
                sum(self.per_type[t] * n for t, n in self.count_per_type.items()) / total
            )
            if abs(weighted - self.overall) > 1e-9:
                raise ValueError("overall is not the weighted mean of per_type")
        return self

    def scores(self) -> dict[str, float]:
        return {
            'overall': self.overall,
            **{t: self.per_type.get(t, float('nan')) for t in QUESTION_TYPES},
        }

    def pretty(self) -> str:
        lines = [f"{self.head} (beta {self.beta:g}, seed {self.seed})"]
        lines.append(f"  {'All':<8} {100 * self.overall:6.2f}")
        for qtype in QUESTION_TYPES:
            if qtype in self.per_type:
                lines.append(
                    f"  {qtype:<8} {100 * self.per_type[qtype]:6.2f}"
                    f"  (n={self.count_per_type[qtype]})"
                )
        return '\n'.join(lines)


def report_from_predictions(
    predicted: Sequence[int],
    dataset: Dataset,
    *,
    config_fingerprint: str,
    seed: int,
    beta: float,
    head: str = 'fused',
) -> EvalReport:
    if not len(dataset):
        raise EmptySliceError("no instances to evaluate", field='dataset')
    if len(predicted) != len(dataset):
        raise ValidationError(
            f"{len(predicted)} predictions for {len(dataset)} instances", field='predicted'
        )
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for inst, k in zip(dataset.instances, predicted):
        qtype = inst.question_type.value
        sums[qtype] = sums.get(qtype, 0.0) + vqa_accuracy(int(k), inst.answer_scores)
        counts[qtype] = counts.get(qtype, 0) + 1
    ordered = [t for t in QUESTION_TYPES if t in counts]
    return EvalReport(
        overall=sum(sums.values()) / len(dataset),
        per_type={t: sums[t] / counts[t] for t in ordered},
        count_per_type={t: counts[t] for t in ordered},
        config_fingerprint=config_fingerprint,
        seed=seed,
        beta=beta,
        head=head,
    )


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    beta: Optional[float] = None,
    *,
    head: Head = 'fused',
    model: Optional[IogVqaModel] = None,
) -> EvalReport:
    """Evaluate a checkpoint on a split

    :param beta: Weight of the destination head (default: from the training configuration)
    :param head: Prediction to score, the fused one or a single head
    :param model: Already restored model of the checkpoint
    """
    if checkpoint.data_fingerprint != dataset.spec_fingerprint:
        raise IncompatibleCheckpointError(
            f"checkpoint trained on data {checkpoint.data_fingerprint},"
            f" dataset is {dataset.spec_fingerprint}"
        )
    if ModelShape.of(dataset) != checkpoint.shape:
        raise IncompatibleCheckpointError("dataset vocabularies do not match the checkpoint")
    config = checkpoint.config
    beta = config.beta if beta is None else beta
    if model is None:
        model = checkpoint.restore_model()
    if not len(dataset):
        raise EmptySliceError("no instances to evaluate", field='dataset')
    predicted = predict_dataset(model, dataset, head=head, beta=beta, batch_size=config.batch_size)
    return report_from_predictions(
        predicted,
        dataset,
        config_fingerprint=config.fingerprint,
        seed=config.seed,
        beta=beta,
        head=head,
    )


#######################################
# HARNESSES


def seed_list(base_seed: int, count: int) -> list[int]:
    if count < 1:
        raise ValidationError("at least one seed is needed", field='seeds')
    return [base_seed + i for i in range(count)]


def with_changes(config: TrainingConfig, **changes: Any) -> TrainingConfig:
    """Validated copy of a configuration"""
    return TrainingConfig.model_validate({**config.model_dump(), **changes})


def _score_rows(reports: Sequence[EvalReport], key: dict[str, Any]) -> list[dict[str, Any]]:
    """One row per seed, then a median row when there are several seeds"""
    rows = [{**key, **r.scores(), 'seed': r.seed} for r in reports]
    if len(reports) > 1:
        medians = pd.DataFrame([r.scores() for r in reports]).median(skipna=True)
        rows.append({**key, **{c: float(medians[c]) for c in SCORE_COLUMNS}, 'seed': 'median'})
    return rows


class AblationRow(BaseModel):
    gan: bool
    distill: bool
    reports: list[EvalReport] = []
    error: Optional[str] = None

    @property
    def label(self) -> str:
        return 'WCE' + ('+GAN' if self.gan else '') + ('+Distill' if self.distill else '')

    def median(self) -> float:
        return float(np.median([r.overall for r in self.reports])) if self.reports else np.nan


class AblationGrid(BaseModel):
    rows: list[AblationRow]

    @property
    def complete(self) -> bool:
        return all(r.error is None for r in self.rows) and len(self.rows) == len(ABLATION_FLAGS)

    @property
    def failed(self) -> list[AblationRow]:
        return [r for r in self.rows if r.error is not None]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for row in self.rows:
            rows += _score_rows(row.reports, {'gan': row.gan, 'distill': row.distill})
        return pd.DataFrame(rows, columns=CSV_SCHEMAS['ablation'])


def run_ablation(
    train_data: Dataset,
    val_data: Optional[Dataset],
    test_data: Dataset,
    base_config: TrainingConfig,
    *,
    seeds: int = 1,
) -> AblationGrid:
    """Train and evaluate the four loss combinations with the same seeds

    A training abort marks its row as failed and the grid as incomplete.
    """
    rows = []
    for gan, distill in ABLATION_FLAGS:
        row = AblationRow(gan=gan, distill=distill)
        for seed in seed_list(base_config.seed, seeds):
            config = with_changes(base_config, enable_gan=gan, enable_distill=distill, seed=seed)
            try:
                checkpoint = train(train_data, val_data, config)
            except TrainingAborted as e:
                log.error('Ablation %s (seed %d) aborted: %s', row.label, seed, e)
                row.error = str(e)
                break
            row.reports.append(evaluate(checkpoint, test_data))
        log.info('Ablation %s: median overall %.4f', row.label, row.median())
        rows.append(row)
    return AblationGrid(rows=rows)


def _teacher_checkpoint(train_data: Dataset, config: TrainingConfig) -> Checkpoint:
    state = init_state(config, train_data)
    train_teachers(train_data, config, state=state)
    return Checkpoint.capture(state.model, data_fingerprint=train_data.spec_fingerprint)


class ModuleAblation(BaseModel):
    """Reports per variant"""

    variants: dict[str, list[EvalReport]]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name, reports in self.variants.items():
            rows += _score_rows(reports, {'variant': name})
        return pd.DataFrame(rows, columns=CSV_SCHEMAS['modules'])


def run_module_ablation(
    train_data: Dataset,
    val_data: Optional[Dataset],
    test_data: Dataset,
    base_config: TrainingConfig,
    *,
    seeds: int = 1,
) -> ModuleAblation:
    """Question-only and visual-only teachers, the full model, OISA without GAN, GAN without OISA"""
    variants: dict[str, list[EvalReport]] = {name: [] for name in MODULE_VARIANTS}
    for seed in seed_list(base_config.seed, seeds):
        config = with_changes(base_config, seed=seed)
        teachers = _teacher_checkpoint(train_data, config)
        variants['question_only'].append(evaluate(teachers, test_data, head='teacher_q'))
        variants['visual_only'].append(evaluate(teachers, test_data, head='teacher_v'))
        for name, oisa, gan in (
            ('full', True, True),
            ('oisa_only', True, False),
            ('gan_only', False, True),
        ):
            checkpoint = train(
                train_data, val_data, with_changes(config, enable_oisa=oisa, enable_gan=gan)
            )
            variants[name].append(evaluate(checkpoint, test_data))
    for name, reports in variants.items():
        log.info('Module %s: median overall %.4f', name, np.median([r.overall for r in reports]))
    return ModuleAblation(variants=variants)


def _parameter_value(parameter: str, value: float) -> Union[int, float]:
    kind = SWEEP_PARAMETERS.get(parameter)
    if kind is None:
        raise ValidationError(
            f"cannot sweep {parameter}, expecting one of {sorted(SWEEP_PARAMETERS)}",
            field='param',
        )
    if kind is int:
        if value != int(value):
            raise ValidationError(f"{parameter} must be an integer, got {value}", field='values')
        return int(value)
    return float(value)


class _Runner:
    """Train once per (training settings, seed) and evaluate any beta on it"""

    def __init__(self, train_data, val_data, test_data, base_config, seeds) -> None:
        self.data = (train_data, val_data, test_data)
        self.base_config = base_config
        self.seeds = seed_list(base_config.seed, seeds)
        self._key: Optional[tuple] = None
        self._checkpoints: dict[int, tuple[Checkpoint, IogVqaModel]] = {}

    def reports(self, setting: dict[str, Union[int, float]]) -> list[EvalReport]:
        train_changes = {k: v for k, v in setting.items() if k != 'beta'}
        key = tuple(sorted(train_changes.items()))
        if key != self._key:
            self._key = key
            self._checkpoints = {}
        train_data, val_data, test_data = self.data
        result = []
        for seed in self.seeds:
            if seed not in self._checkpoints:
                config = with_changes(self.base_config, **train_changes, seed=seed)
                checkpoint = train(train_data, val_data, config)
                self._checkpoints[seed] = (checkpoint, checkpoint.restore_model())
            checkpoint, model = self._checkpoints[seed]
            result.append(evaluate(checkpoint, test_data, setting.get('beta'), model=model))
        return result


class SweepTable(BaseModel):
    parameter: str
    rows: list[tuple[float, list[EvalReport]]]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for value, reports in self.rows:
            rows += _score_rows(reports, {'param': self.parameter, 'value': value})
        return pd.DataFrame(rows, columns=CSV_SCHEMAS['sweep'])


def run_sweep(
    parameter: str,
    values: Sequence[float],
    base_config: TrainingConfig,
    train_data: Dataset,
    val_data: Optional[Dataset],
    test_data: Dataset,
    *,
    seeds: int = 1,
) -> SweepTable:
    """Evaluate each value of one hyperparameter with identical seeds

    Changing beta does not retrain, the other parameters train one model per value.
    """
    if not len(values):
        raise ValidationError("no values to sweep", field='values')
    runner = _Runner(train_data, val_data, test_data, base_config, seeds)
    rows = []
    for raw in values:
        value = _parameter_value(parameter, raw)
        reports = runner.reports({parameter: value})
        log.info('Sweep %s=%s: overall %.4f', parameter, value, reports[0].overall)
        rows.append((value, reports))
    return SweepTable(parameter=parameter, rows=rows)


class GridTable(BaseModel):
    param_x: str
    param_y: str
    cells: list[tuple[float, float, list[EvalReport]]]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for x, y, reports in self.cells:
            key = {'param_x': self.param_x, 'value_x': x, 'param_y': self.param_y, 'value_y': y}
            rows += _score_rows(reports, key)
        return pd.DataFrame(rows, columns=CSV_SCHEMAS['grid'])


def run_grid(
    param_x: str,
    values_x: Sequence[float],
    param_y: str,
    values_y: Sequence[float],
    base_config: TrainingConfig,
    train_data: Dataset,
    val_data: Optional[Dataset],
    test_data: Dataset,
    *,
    seeds: int = 1,
) -> GridTable:
    """Evaluate every pair of values of two hyperparameters"""
    if param_x == param_y:
        raise ValidationError("grid parameters must differ", field='param_y')
    if not len(values_x) or not len(values_y):
        raise ValidationError("no values for the grid", field='values')
    xs = [_parameter_value(param_x, v) for v in values_x]
    ys = [_parameter_value(param_y, v) for v in values_y]
    runner = _Runner(train_data, val_data, test_data, base_config, seeds)
    # beta varies in the inner loop so that models are reused
    if param_x == 'beta':
        pairs = [(x, y) for y in ys for x in xs]
    else:
        pairs = [(x, y) for x in xs for y in ys]
    cells = []
    for x, y in pairs:
        reports = runner.reports({param_x: x, param_y: y})
        log.info('Grid %s=%s %s=%s: overall %.4f', param_x, x, param_y, y, reports[0].overall)
        cells.append((x, y, reports))
    return GridTable(param_x=param_x, param_y=param_y, cells=cells)


#######################################
# FILES


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.10g')
    log.info('Wrote %d rows to %s', len(frame), path)


def read_results(path: Union[str, Path]) -> tuple[str, pd.DataFrame]:
    """Read a result CSV and identify its schema"""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"{path} is empty", field='csv') from e
    for name, columns in CSV_SCHEMAS.items():
        if set(columns) <= set(frame.columns):
            break
    else:
        raise SchemaError(
            f"{path}: columns {list(frame.columns)} match none of {sorted(CSV_SCHEMAS)}",
            field='csv',
        )
    if frame.empty:
        raise SchemaError(f"{path} has no rows", field='csv')
    return name, frame


def _summary(frame: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    """Median rows when present, otherwise the median over seeds"""
    median = frame['seed'].astype(str) == 'median'
    if median.any():
        return frame[median].reset_index(drop=True)
    return frame.groupby(keys, sort=False)[SCORE_COLUMNS].median().reset_index()


def _ablation_label(gan, distill) -> str:
    def flag(v) -> bool:
        return str(v).lower() in ('true', '1')

    return 'WCE' + ('+GAN' if flag(gan) else '') + ('+Distill' if flag(distill) else '')


def _draw(schema: str, frame: pd.DataFrame, ax) -> None:
    if schema in ('ablation', 'modules'):
        if schema == 'ablation':
            data = _summary(frame, ['gan', 'distill'])
            labels = [_ablation_label(g, d) for g, d in zip(data['gan'], data['distill'])]
        else:
            data = _summary(frame, ['variant'])
            labels = [str(v) for v in data['variant']]
        positions = np.arange(len(data))
        ax.bar(positions, 100 * data['overall'].astype(float), color='tab:blue')
        ax.set_xticks(positions)
        ax.set_xticklabels(labels, rotation=20)
        ax.set_ylabel('Accuracy (%)')
    elif schema == 'sweep':
        data = _summary(frame, ['param', 'value']).sort_values('value')
        for column in SCORE_COLUMNS:
            ax.plot(data['value'], 100 * data[column].astype(float), marker='o', label=column)
        ax.set_xlabel(str(data['param'].iloc[0]))
        ax.set_ylabel('Accuracy (%)')
        ax.legend()
    else:
        data = _summary(frame, ['param_x', 'value_x', 'param_y', 'value_y'])
        table = data.pivot_table(index='value_y', columns='value_x', values='overall')
        image = ax.imshow(100 * table.to_numpy(dtype=float), origin='lower', cmap='viridis')
        ax.set_xticks(range(len(table.columns)))
        ax.set_xticklabels([f"{v:g}" for v in table.columns])
        ax.set_yticks(range(len(table.index)))
        ax.set_yticklabels([f"{v:g}" for v in table.index])
        ax.set_xlabel(str(data['param_x'].iloc[0]))
        ax.set_ylabel(str(data['param_y'].iloc[0]))
        ax.figure.colorbar(image, ax=ax, label='Accuracy (%)')


def plot(csv_path: Union[str, Path], output_image_path: Union[str, Path]) -> None:
    """Render a result CSV to an image (format from the file suffix)"""
    import matplotlib

    matplotlib.use('Agg')
    from matplotlib.figure import Figure

    schema, frame = read_results(csv_path)
    output = Path(output_image_path)
    output.parent.mkdir(parents=True, exist_ok=True)
    fmt = output.suffix.lstrip('.').lower() or 'png'
    metadata = {
        'png': {'Software': None},
        'svg': {'Date': None},
        'pdf': {'CreationDate': None},
    }.get(fmt)
    with matplotlib.rc_context({'svg.hashsalt': 'iogvqa', 'svg.fonttype': 'none'}):
        figure = Figure(figsize=(6.4, 4.8))
        ax = figure.add_subplot()
        _draw(schema, frame, ax)
        ax.set_title(f"{schema} ({Path(csv_path).stem})")
        figure.tight_layout()
        figure.savefig(output, format=fmt, metadata=metadata)
    log.info('Plotted %s to %s', csv_path, output)
