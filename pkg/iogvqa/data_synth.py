import dataclasses
import hashlib
import json
import logging
from collections.abc import Sequence
from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import pydantic

from .config import QUESTION_TYPES, SyntheticSpec, fingerprint
from .errors import EmptySliceError, IntegrityError, ParseError, ValidationError

__doc__ = """Synthetic question answering corpora with a controlled prior shift

Each instance is rendered from a planted rule: the answer is chosen first
(following a per-question-type prior), then the question template and the
object features are drawn so that the answer can be read from them.
The train and test splits use different priors: the dominant answer of each
question type is moved to another answer, giving a total-variation distance
of `spec.prior_shift` between the splits.
"""

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPECIAL_TOKENS = ('<pad>', '<unk>')
PAD_ID = 0
UNK_ID = 1
TEMPLATE_WORDS = ('what', 'is', 'of', 'how', 'many', 'there')
ALPHABET = 'abcdefghijklmnopqrstuvwxyz0123456789'
NUM_ANNOTATORS = 10
FILLER_PROBABILITY = 0.3

Split = Literal['train', 'val', 'test']


class QuestionType(str, Enum):
    YESNO = 'yesno'
    NUMBER = 'number'
    OTHER = 'other'

    @property
    def index(self) -> int:
        return QUESTION_TYPES.index(self.value)


@dataclasses.dataclass(frozen=True, eq=False)
class TokenizedQuestion:
    """Word ids and per-token character ids of a question

    pad_mask is True on padding positions, which may only trail the real tokens.
    """

    word_ids: np.ndarray
    char_ids: np.ndarray
    pad_mask: np.ndarray

    @classmethod
    def from_ids(cls, word_ids: Sequence[int], char_ids: Sequence[Sequence[int]]):
        words = np.asarray(word_ids, dtype=np.int64)
        if words.size == 0:
            raise ValidationError("a question needs at least one token", field='word_ids')
        chars = np.asarray(char_ids, dtype=np.int64).reshape(len(words), -1)
        return cls(words, chars, words == PAD_ID)

    def __post_init__(self):
        if self.word_ids.ndim != 1 or self.char_ids.shape[:1] != self.word_ids.shape:
            raise ValidationError("one row of characters per word expected", field='char_ids')
        if self.length < 1:
            raise ValidationError("a question needs at least one token", field='word_ids')

    @property
    def length(self) -> int:
        return int((~self.pad_mask).sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenizedQuestion)
            and np.array_equal(self.word_ids, other.word_ids)
            and np.array_equal(self.char_ids, other.char_ids)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class ObjectSet:
    """Object feature vectors of a scene and its global feature"""

    objects: np.ndarray
    global_feature: np.ndarray

    def __post_init__(self):
        if self.objects.ndim != 2 or len(self.objects) < 1:
            raise ValidationError("expecting at least one object vector", field='objects')
        if self.global_feature.shape != self.objects.shape[1:]:
            raise ValidationError("global feature dimension mismatch", field='global_feature')
        if not (np.isfinite(self.objects).all() and np.isfinite(self.global_feature).all()):
            raise ValidationError("non-finite feature", field='objects')

    @property
    def n(self) -> int:
        return len(self.objects)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ObjectSet)
            and np.array_equal(self.objects, other.objects)
            and np.array_equal(self.global_feature, other.global_feature)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class QAInstance:
    question: TokenizedQuestion
    objects: ObjectSet
    answer_scores: np.ndarray
    question_type: QuestionType
    instance_id: str

    def __post_init__(self):
        if not (self.answer_scores > 0).any():
            raise ValidationError("no answer has a positive score", field='answer_scores')

    @property
    def answer(self) -> int:
        """Index of the best scored answer (lowest index on ties)"""
        return int(np.argmax(self.answer_scores))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QAInstance)
            and self.instance_id == other.instance_id
            and self.question_type == other.question_type
            and self.question == other.question
            and self.objects == other.objects
            and np.array_equal(self.answer_scores, other.answer_scores)
        )


@dataclasses.dataclass(frozen=True)
class Dataset:
    split: Split
    instances: tuple[QAInstance, ...]
    answer_vocab: tuple[str, ...]
    word_vocab: tuple[str, ...]
    char_vocab: tuple[str, ...]
    feature_dim: int
    spec_fingerprint: str

    def __len__(self) -> int:
        return len(self.instances)

    def validate(self) -> None:
        """Check vocabulary ranges and the uniqueness of instance ids"""
        ids = {i.instance_id for i in self.instances}
        if len(ids) != len(self.instances):
            raise ValidationError("duplicate instance ids", field='instances')
        for inst in self.instances:
            q = inst.question
            if q.word_ids.min() < 0 or q.word_ids.max() >= len(self.word_vocab):
                raise ValidationError(f"word id out of range in {inst.instance_id}")
            if q.char_ids.min() < 0 or q.char_ids.max() >= len(self.char_vocab):
                raise ValidationError(f"char id out of range in {inst.instance_id}")
            if inst.answer_scores.shape != (len(self.answer_vocab),):
                raise ValidationError(f"answer scores size mismatch in {inst.instance_id}")
            if inst.objects.objects.shape[1] != self.feature_dim:
                raise ValidationError(f"feature dimension mismatch in {inst.instance_id}")

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)


#######################################
# GENERATION


@dataclasses.dataclass(frozen=True)
class _World:
    """Vocabulary and feature prototypes shared by both splits"""

    spec: SyntheticSpec
    answer_vocab: tuple[str, ...]
    word_vocab: tuple[str, ...]
    char_vocab: tuple[str, ...]
    concept_words: tuple[str, ...]
    attribute_words: tuple[str, ...]
    filler_words: tuple[str, ...]
    answers_by_type: dict[QuestionType, tuple[int, ...]]
    value_family: dict[int, int]
    concept_means: np.ndarray
    value_means: np.ndarray

    def word_id(self, word: str) -> int:
        return self.word_vocab.index(word)

    def char_row(self, word: str) -> list[int]:
        limit = self.spec.max_word_len
        row = [self.char_vocab.index(c) if c in self.char_vocab else UNK_ID for c in word]
        row = row[:limit]
        return row + [PAD_ID] * (limit - len(row))


def _pseudo_words(rng: np.random.Generator, letters: str, count: int, taken: set) -> list[str]:
    words = []
    while len(words) < count:
        size = int(rng.integers(3, 7))
        word = ''.join(rng.choice(list(letters), size=size))
        if word in taken:
            # small alphabets run out of short words
            word = f"{word}{len(taken)}"
        taken.add(word)
        words.append(word)
    return words


def _allocate(total: int, fractions: Sequence[float]) -> list[int]:
    """Split total into integer counts proportional to fractions (largest remainder)"""
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:remainder]] += 1
    return counts.tolist()


def _build_world(spec: SyntheticSpec, rng: np.random.Generator) -> _World:
    letters = ALPHABET[: spec.char_vocab_size - len(SPECIAL_TOKENS)]
    char_vocab = (*SPECIAL_TOKENS, *letters)
    taken = set(TEMPLATE_WORDS) | {'yes', 'no'}
    concept_words = _pseudo_words(rng, letters, spec.num_concepts, taken)
    attribute_words = _pseudo_words(rng, letters, spec.num_attributes, taken)
    fillers = spec.word_vocab_size - spec.min_word_vocab_size
    filler_words = _pseudo_words(rng, letters, fillers, taken)
    value_words = _pseudo_words(rng, letters, spec.num_other_answers, taken)
    word_vocab = (
        *SPECIAL_TOKENS, *TEMPLATE_WORDS, *concept_words, *attribute_words, *filler_words
    )

    numbers = [str(i) for i in range(1, spec.num_numbers + 1)]
    answer_vocab = ('yes', 'no', *numbers, *value_words)
    first_value = 2 + spec.num_numbers
    answers_by_type = {
        QuestionType.YESNO: (0, 1),
        QuestionType.NUMBER: tuple(range(2, first_value)),
        QuestionType.OTHER: tuple(range(first_value, len(answer_vocab))),
    }
    # attribute values are dealt round-robin to the attribute families
    value_family = {
        a: i % spec.num_attributes for i, a in enumerate(answers_by_type[QuestionType.OTHER])
    }
    dim = spec.object_feature_dim
    return _World(
        spec=spec,
        answer_vocab=answer_vocab,
        word_vocab=word_vocab,
        char_vocab=char_vocab,
        concept_words=tuple(concept_words),
        attribute_words=tuple(attribute_words),
        filler_words=tuple(filler_words),
        answers_by_type=answers_by_type,
        value_family=value_family,
        concept_means=rng.standard_normal((spec.num_concepts, dim)),
        value_means=rng.standard_normal((len(answer_vocab), dim)),
    )


def _split_priors(
    world: _World, rng: np.random.Generator
) -> dict[QuestionType, tuple[np.ndarray, np.ndarray]]:
    """Train and test answer priors per question type

    Both priors mix a uniform distribution with a point mass of weight
    prior_shift; the test point mass sits on another answer, so the priors
    are permutations of each other at a total-variation distance of prior_shift.
    """
    shift = world.spec.prior_shift
    priors = {}
    for qtype, answers in world.answers_by_type.items():
        k = len(answers)
        if k < 2:
            prior = np.ones(1)
            priors[qtype] = (prior, prior)
            continue
        dominant_train, dominant_test = rng.choice(k, size=2, replace=False)
        train = np.full(k, (1 - shift) / k)
        test = train.copy()
        train[dominant_train] += shift
        test[dominant_test] += shift
        priors[qtype] = (train, test)
    return priors


def _render_question(
    world: _World, rng: np.random.Generator, words: list[str]
) -> TokenizedQuestion:
    limit = world.spec.max_question_len
    if world.filler_words and len(words) < limit and rng.random() < FILLER_PROBABILITY:
        position = int(rng.integers(0, len(words) + 1))
        words.insert(position, str(rng.choice(list(world.filler_words))))
    return TokenizedQuestion.from_ids(
        [world.word_id(w) for w in words], [world.char_row(w) for w in words]
    )


def _render_objects(
    world: _World, rng: np.random.Generator, rows: list[tuple[int, dict[int, int]]]
) -> ObjectSet:
    """Feature vectors for (concept, {family: value}) rows in a random order"""
    spec = world.spec
    families = range(spec.num_attributes)
    values_of = {
        f: [v for v, fam in world.value_family.items() if fam == f] for f in families
    }
    vectors = []
    for concept, values in rows:
        vec = world.concept_means[concept].copy()
        for f in families:
            value = values.get(f)
            if value is None:
                value = int(rng.choice(values_of[f]))
            vec += world.value_means[value]
        vec += spec.noise_std * rng.standard_normal(spec.object_feature_dim)
        vectors.append(vec)
    objects = np.asarray(vectors)[rng.permutation(len(vectors))].astype(np.float32)
    return ObjectSet(objects, objects.mean(axis=0))


def _distractor(world: _World, rng: np.random.Generator, concept: int) -> int:
    other = int(rng.integers(0, world.spec.num_concepts - 1))
    return other + 1 if other >= concept else other


def _render_scene(world: _World, rng: np.random.Generator, qtype: QuestionType, answer: int):
    spec = world.spec
    concept = int(rng.integers(0, spec.num_concepts))
    obj_word = world.concept_words[concept]
    if qtype is QuestionType.NUMBER:
        # counting scenes are full so that the count is a readable fraction
        count = int(world.answer_vocab[answer])
        n = spec.max_objects
        rows = [(concept, {})] * count
        words = ['how', 'many', obj_word]
    elif qtype is QuestionType.YESNO:
        n = int(rng.integers(1, spec.max_objects + 1))
        count = int(rng.integers(1, min(n, 3) + 1)) if answer == 0 else 0
        rows = [(concept, {})] * count
        words = ['is', 'there', obj_word]
    else:
        n = int(rng.integers(1, spec.max_objects + 1))
        family = world.value_family[answer]
        rows = [(concept, {family: answer})]
        words = ['what', 'is', world.attribute_words[family], 'of', obj_word]
    rows = rows + [(_distractor(world, rng, concept), {}) for _ in range(n - len(rows))]
    return _render_question(world, rng, words), _render_objects(world, rng, rows)


def _answer_scores(
    world: _World, rng: np.random.Generator, qtype: QuestionType, answer: int
) -> np.ndarray:
    scores = np.zeros(len(world.answer_vocab), dtype=np.float32)
    if not world.spec.soft_scores:
        scores[answer] = 1
        return scores
    votes = np.zeros(len(world.answer_vocab), dtype=np.int64)
    votes[answer] = int(rng.integers(6, NUM_ANNOTATORS + 1))
    distractors = [a for a in world.answers_by_type[qtype] if a != answer]
    for _ in range(NUM_ANNOTATORS - votes[answer]):
        open_answers = [a for a in distractors if votes[a] < 2]
        target = int(rng.choice(open_answers)) if open_answers else answer
        votes[target] += 1
    return scores_from_annotations(votes)


def scores_from_annotations(votes) -> np.ndarray:
    """Standard VQA soft score: min(#annotators / 3, 1) per answer"""
    votes = np.asarray(votes, dtype=np.float32)
    return np.minimum(votes / 3, 1).astype(np.float32)


def _generate_split(world: _World, rng: np.random.Generator, split: Split, total: int, priors):
    fingerprint_value = fingerprint(world.spec)
    type_counts = _allocate(total, world.spec.type_mix)
    plan = []
    for qtype, count in zip(QuestionType, type_counts):
        prior = priors[qtype][0 if split == 'train' else 1]
        answers = world.answers_by_type[qtype]
        per_answer = _allocate(count, prior)
        plan.extend((qtype, answers[i]) for i, c in enumerate(per_answer) for _ in range(c))
    order = rng.permutation(len(plan))
    instances = []
    for index, position in enumerate(order):
        qtype, answer = plan[position]
        question, objects = _render_scene(world, rng, qtype, answer)
        instances.append(
            QAInstance(
                question=question,
                objects=objects,
                answer_scores=_answer_scores(world, rng, qtype, answer),
                question_type=qtype,
                instance_id=f"{split}-{index:06d}",
            )
        )
    return Dataset(
        split=split,
        instances=tuple(instances),
        answer_vocab=world.answer_vocab,
        word_vocab=world.word_vocab,
        char_vocab=world.char_vocab,
        feature_dim=world.spec.object_feature_dim,
        spec_fingerprint=fingerprint_value,
    )


def generate(spec: Union[SyntheticSpec, dict]) -> tuple[Dataset, Dataset]:
    """Generate the train and test splits of a synthetic corpus

    The result depends only on the spec (including its seed).
    """
    if not isinstance(spec, SyntheticSpec):
        try:
            spec = SyntheticSpec.model_validate(spec)
        except pydantic.ValidationError as e:
            error = e.errors()[0]
            field = '.'.join(str(p) for p in error['loc']) or None
            raise ValidationError(error['msg'], field=field) from e
    rng = np.random.default_rng(spec.seed)
    world = _build_world(spec, rng)
    priors = _split_priors(world, rng)
    train = _generate_split(world, rng, 'train', spec.num_train, priors)
    test = _generate_split(world, rng, 'test', spec.num_test, priors)
    for qtype, tv in prior_shift_report(train, test).items():
        log.info('Generated %s questions: prior shift (TV) %.4f', qtype.value, tv)
    return train, test


#######################################
# PRIORS


def answer_prior(dataset: Dataset, qtype: Union[QuestionType, str]) -> np.ndarray:
    """Empirical distribution of the best scored answer for a question type"""
    qtype = QuestionType(qtype)
    answers = [i.answer for i in dataset.instances if i.question_type is qtype]
    if not answers:
        raise EmptySliceError(f"no {qtype.value} questions in the {dataset.split} split")
    counts = np.bincount(answers, minlength=len(dataset.answer_vocab))
    return counts / counts.sum()


def tv_distance(p, q) -> float:
    """Total-variation distance between two categorical distributions"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"distributions of sizes {p.shape} and {q.shape}")
    return float(np.abs(p - q).sum() / 2)


def prior_shift_report(train: Dataset, test: Dataset) -> dict[QuestionType, float]:
    """TV distance between the train and test priors for each present question type"""
    report = {}
    for qtype in QuestionType:
        try:
            report[qtype] = tv_distance(answer_prior(train, qtype), answer_prior(test, qtype))
        except EmptySliceError:
            continue
    return report


def class_frequencies(dataset: Dataset) -> np.ndarray:
    answers = [i.answer for i in dataset.instances]
    counts = np.bincount(answers, minlength=len(dataset.answer_vocab))
    return counts / max(1, counts.sum())


#######################################
# SPLITTING


def split_validation(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out a deterministic fraction of a split for validation

    Both parts keep the original instance order.
    """
    if not 0 <= fraction < 1:
        raise ValidationError("fraction must be in [0, 1)", field='fraction')
    size = int(round(len(dataset) * fraction))
    rng = np.random.default_rng(seed)
    held = set(rng.permutation(len(dataset))[:size].tolist())
    keep = tuple(inst for i, inst in enumerate(dataset.instances) if i not in held)
    val = tuple(inst for i, inst in enumerate(dataset.instances) if i in held)
    return dataset.replace(instances=keep), dataset.replace(split='val', instances=val)


def subset(dataset: Dataset, count: int) -> Dataset:
    return dataset.replace(instances=dataset.instances[:count])


#######################################
# SERIALIZATION


class _InstanceRecord(pydantic.BaseModel):
    instance_id: str
    question_type: QuestionType
    word_ids: list[int]
    char_ids: list[list[int]]
    answer_scores: list[float]
    offset: int = pydantic.Field(ge=0)
    num_objects: int = pydantic.Field(ge=1)


class _DatasetMeta(pydantic.BaseModel):
    format_version: int
    split: Split
    spec_fingerprint: str
    feature_dim: int = pydantic.Field(gt=0)
    features_bytes: int = pydantic.Field(ge=0)
    features_sha256: str
    answer_vocab: list[str]
    word_vocab: list[str]
    char_vocab: list[str]
    instances: list[_InstanceRecord]


META_FILE = 'meta.json'
FEATURES_FILE = 'features.bin'


def write(dataset: Dataset, directory: Union[str, Path]) -> None:
    """Write meta.json and features.bin (little-endian float32) into a directory"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    chunks = []
    offset = 0
    for inst in dataset.instances:
        rows = np.concatenate([inst.objects.objects, inst.objects.global_feature[None]])
        chunks.append(rows.astype('<f4').tobytes())
        records.append(
            {
                'instance_id': inst.instance_id,
                'question_type': inst.question_type.value,
                'word_ids': inst.question.word_ids.tolist(),
                'char_ids': inst.question.char_ids.tolist(),
                'answer_scores': [float(s) for s in inst.answer_scores],
                'offset': offset,
                'num_objects': inst.objects.n,
            }
        )
        offset += rows.size
    features = b''.join(chunks)
    meta = {
        'format_version': FORMAT_VERSION,
        'split': dataset.split,
        'spec_fingerprint': dataset.spec_fingerprint,
        'feature_dim': dataset.feature_dim,
        'features_bytes': len(features),
        'features_sha256': hashlib.sha256(features).hexdigest(),
        'answer_vocab': list(dataset.answer_vocab),
        'word_vocab': list(dataset.word_vocab),
        'char_vocab': list(dataset.char_vocab),
        'instances': records,
    }
    (directory / FEATURES_FILE).write_bytes(features)
    (directory / META_FILE).write_text(json.dumps(meta, indent=1) + '\n', encoding='utf-8')
    log.debug('Wrote %d %s instances to %s', len(records), dataset.split, directory)


def _read_meta(path: Path) -> _DatasetMeta:
    text = path.read_text(encoding='utf-8')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path=str(path), line=e.lineno, offset=e.colno) from e
    try:
        meta = _DatasetMeta.model_validate(data)
    except pydantic.ValidationError as e:
        error = e.errors()[0]
        where = '.'.join(str(p) for p in error['loc'])
        raise ParseError(f"{where}: {error['msg']}", path=str(path)) from e
    if meta.format_version != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {meta.format_version}", path=str(path))
    return meta


def read(directory: Union[str, Path]) -> Dataset:
    """Read a dataset directory written by write()"""
    directory = Path(directory)
    meta = _read_meta(directory / META_FILE)
    features_path = directory / FEATURES_FILE
    try:
        raw = features_path.read_bytes()
    except FileNotFoundError as e:
        raise IntegrityError(f"missing {features_path}") from e
    if len(raw) != meta.features_bytes:
        raise IntegrityError(
            f"{features_path}: expected {meta.features_bytes} bytes, found {len(raw)}"
        )
    if hashlib.sha256(raw).hexdigest() != meta.features_sha256:
        raise IntegrityError(f"{features_path}: checksum does not match {META_FILE}")
    features = np.frombuffer(raw, dtype='<f4').astype(np.float32)
    dim = meta.feature_dim
    instances = []
    for record in meta.instances:
        end = record.offset + (record.num_objects + 1) * dim
        if end > features.size:
            raise IntegrityError(f"{record.instance_id}: features out of bounds")
        rows = features[record.offset : end].reshape(record.num_objects + 1, dim)
        instances.append(
            QAInstance(
                question=TokenizedQuestion.from_ids(record.word_ids, record.char_ids),
                objects=ObjectSet(rows[:-1].copy(), rows[-1].copy()),
                answer_scores=np.asarray(record.answer_scores, dtype=np.float32),
                question_type=record.question_type,
                instance_id=record.instance_id,
            )
        )
    dataset = Dataset(
        split=meta.split,
        instances=tuple(instances),
        answer_vocab=tuple(meta.answer_vocab),
        word_vocab=tuple(meta.word_vocab),
        char_vocab=tuple(meta.char_vocab),
        feature_dim=dim,
        spec_fingerprint=meta.spec_fingerprint,
    )
    try:
        dataset.validate()
    except ValidationError as e:
        raise ParseError(str(e), path=str(directory)) from e
    return dataset


def write_corpus(train: Dataset, test: Dataset, directory: Union[str, Path]) -> None:
    directory = Path(directory)
    write(train, directory / 'train')
    write(test, directory / 'test')


def read_corpus(
    directory: Union[str, Path], splits: Sequence[str] = ('train', 'test')
) -> dict[str, Dataset]:
    directory = Path(directory)
    return {split: read(directory / split) for split in splits}


def find_split(
    corpus: dict[str, Dataset], split: str, *, val_fraction: float, seed: int
) -> Dataset:
    """Get a split of a corpus, carving "val" out of "train" when needed"""
    if split in corpus:
        return corpus[split]
    if split == 'val':
        return split_validation(corpus['train'], val_fraction, seed)[1]
    raise ValidationError(f"unknown split {split}", field='split')

