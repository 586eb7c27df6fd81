import torch

from iogvqa.batching import batches, collate
from iogvqa.data_synth import PAD_ID


def test_collate_padding(corpus):
    instances = corpus[0].instances[:8]
    batch = collate(instances)
    assert len(batch) == 8
    tokens = max(i.question.length for i in instances)
    assert batch.word_ids.shape == (8, tokens)
    assert batch.pad_mask.shape == (8, tokens)
    for row, inst in enumerate(instances):
        length = inst.question.length
        assert not batch.pad_mask[row, :length].any()
        assert batch.pad_mask[row, length:].all()
        assert (batch.word_ids[row, length:] == PAD_ID).all()
        assert (~batch.object_mask[row]).sum() == inst.objects.n
        assert int(batch.answers[row]) == inst.answer
        assert int(batch.question_types[row]) == inst.question_type.index


def test_collate_dtype(corpus):
    batch = collate(corpus[0].instances[:2], torch.float64)
    assert batch.objects.dtype == torch.float64
    assert batch.answer_scores.dtype == torch.float64
    assert batch.to(torch.float32).global_features.dtype == torch.float32


def test_batches_cover_dataset(corpus):
    train, _ = corpus
    sizes = [len(b) for b in batches(train, 10)]
    assert sum(sizes) == len(train)
    assert sizes[:-1] == [10] * (len(sizes) - 1)


def test_batches_shuffle_deterministic(corpus):
    train, _ = corpus

    def order(seed):
        g = torch.Generator()
        g.manual_seed(seed)
        return [b.word_ids.tolist() for b in batches(train, 16, shuffle=True, generator=g)]

    assert order(1) == order(1)
    assert order(1) != order(2)


def test_batches_empty(corpus):
    empty = corpus[0].replace(instances=())
    assert list(batches(empty, 4)) == []
