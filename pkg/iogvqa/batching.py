import dataclasses
from collections.abc import Iterator, Sequence
from typing import Optional

import numpy as np
import torch
from torch.utils.data import DataLoader

from .data_synth import PAD_ID, Dataset, QAInstance

__doc__ = """Padded tensor batches of QA instances"""


@dataclasses.dataclass
class Batch:
    """Padded batch; masks are True on padding positions

    word_ids: [batch, tokens]
    char_ids: [batch, tokens, chars]
    objects: [batch, objects, feature]
    global_features: [batch, feature]
    answer_scores: [batch, answers]
    """

    word_ids: torch.Tensor
    char_ids: torch.Tensor
    pad_mask: torch.Tensor
    objects: torch.Tensor
    object_mask: torch.Tensor
    global_features: torch.Tensor
    answer_scores: torch.Tensor
    question_types: torch.Tensor

    def __len__(self) -> int:
        return self.word_ids.shape[0]

    @property
    def answers(self) -> torch.Tensor:
        return self.answer_scores.argmax(dim=-1)

    def to(self, dtype: torch.dtype) -> "Batch":
        """Cast the floating point tensors"""
        return dataclasses.replace(
            self,
            objects=self.objects.to(dtype),
            global_features=self.global_features.to(dtype),
            answer_scores=self.answer_scores.to(dtype),
        )


def collate(instances: Sequence[QAInstance], dtype: torch.dtype = torch.float32) -> Batch:
    """Pad questions and object sets to the longest in the batch"""
    size = len(instances)
    tokens = max(i.question.length for i in instances)
    chars = max(i.question.char_ids.shape[1] for i in instances)
    num_objects = max(i.objects.n for i in instances)
    dim = instances[0].objects.objects.shape[1]
    word_ids = np.full((size, tokens), PAD_ID, dtype=np.int64)
    char_ids = np.full((size, tokens, chars), PAD_ID, dtype=np.int64)
    objects = np.zeros((size, num_objects, dim), dtype=np.float32)
    object_mask = np.ones((size, num_objects), dtype=bool)
    for row, inst in enumerate(instances):
        q = inst.question
        length = q.length
        word_ids[row, :length] = q.word_ids[:length]
        char_ids[row, :length, : q.char_ids.shape[1]] = q.char_ids[:length]
        objects[row, : inst.objects.n] = inst.objects.objects
        object_mask[row, : inst.objects.n] = False
    word_tensor = torch.from_numpy(word_ids)
    return Batch(
        word_ids=word_tensor,
        char_ids=torch.from_numpy(char_ids),
        pad_mask=word_tensor == PAD_ID,
        objects=torch.from_numpy(objects).to(dtype),
        object_mask=torch.from_numpy(object_mask),
        global_features=torch.from_numpy(
            np.stack([i.objects.global_feature for i in instances])
        ).to(dtype),
        answer_scores=torch.from_numpy(np.stack([i.answer_scores for i in instances])).to(dtype),
        question_types=torch.tensor([i.question_type.index for i in instances]),
    )


class _InstanceList(torch.utils.data.Dataset):
    def __init__(self, dataset: Dataset) -> None:
        self.instances = dataset.instances

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, index: int) -> QAInstance:
        return self.instances[index]


def batches(
    dataset: Dataset,
    batch_size: int,
    *,
    shuffle: bool = False,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> Iterator[Batch]:
    """Iterate over batches; the order depends only on the generator state"""
    if not len(dataset):
        return iter(())
    loader = DataLoader(
        _InstanceList(dataset),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        collate_fn=lambda items: collate(items, dtype),
    )
    return iter(loader)
