import struct

import pytest
import torch

from iogvqa import checkpoint as ckpt
from iogvqa import trainer
from iogvqa.batching import collate
from iogvqa.errors import IncompatibleCheckpointError, IntegrityError


@pytest.fixture(scope='function')
def snapshot(corpus, tiny_config):
    config = tiny_config.model_copy(update={'enable_distill': False})
    state = trainer.init_state(config, corpus[0])
    state.epoch = 1
    trainer.train_step(collate(corpus[0].instances[:8]), state)
    return ckpt.Checkpoint.capture(
        state.model,
        data_fingerprint=corpus[0].spec_fingerprint,
        optimizers=state.optimizers,
        epoch=1,
        best_score=0.25,
        history=[{'epoch': 1, 'val_accuracy': 0.25}],
    )


def test_round_trip(snapshot, tmp_path):
    path = tmp_path / 'model.ckpt'
    ckpt.save(snapshot, path)
    loaded = ckpt.load(path, expected_config=snapshot.config)
    assert loaded.config == snapshot.config
    assert loaded.shape == snapshot.shape
    assert (loaded.epoch, loaded.best_score, loaded.history) == (1, 0.25, snapshot.history)
    assert loaded.tensors.keys() == snapshot.tensors.keys()
    for name, tensor in snapshot.tensors.items():
        assert torch.equal(loaded.tensors[name], tensor), name
        assert loaded.tensors[name].dtype == tensor.dtype
    student = snapshot.optimizers['student']
    restored = loaded.optimizers['student']
    assert restored['param_groups'] == student['param_groups']
    for param_id, values in student['state'].items():
        for key, value in values.items():
            assert torch.equal(restored['state'][param_id][key], value)


def test_optimizer_groups_keep_tuples(snapshot):
    loaded = ckpt.from_bytes(ckpt.to_bytes(snapshot))
    for name, state in loaded.optimizers.items():
        group = state['param_groups'][0]
        assert isinstance(group['betas'], tuple), name
        assert isinstance(group['params'], list), name


def test_resume_continues_training(corpus, tiny_config):
    config = tiny_config.model_copy(update={'enable_distill': False, 'enable_gan': False})
    batch = collate(corpus[0].instances[:8])
    state = trainer.init_state(config, corpus[0])
    for _ in range(2):
        trainer.train_step(batch, state)
    saved = ckpt.from_bytes(
        ckpt.to_bytes(
            ckpt.Checkpoint.capture(
                state.model, data_fingerprint='', optimizers=state.optimizers, epoch=3
            )
        )
    )
    resumed = trainer.resume_state(saved, corpus[0])
    assert resumed.epoch == 3
    for name, optimizer in state.optimizers.items():
        moments = optimizer.state_dict()['state']
        restored = resumed.optimizers[name].state_dict()['state']
        assert moments.keys() == restored.keys(), name
    trainer.train_step(batch, state)
    trainer.train_step(batch, resumed)
    expected = state.model.state_dict()
    for key, value in resumed.model.state_dict().items():
        assert torch.equal(value, expected[key]), key


def test_restore_missing_optimizer(snapshot, corpus):
    state = trainer.init_state(snapshot.config, corpus[0])
    del state.optimizers['generator']
    with pytest.raises(IncompatibleCheckpointError):
        snapshot.restore_optimizers(state.optimizers)


def test_restore_model(snapshot, corpus):
    model = snapshot.restore_model()
    assert not model.training
    batch = collate(corpus[1].instances[:4])
    reference = ckpt.Checkpoint.capture(model, data_fingerprint='').restore_model()
    assert torch.equal(model.predict(batch).p_fused, reference.predict(batch).p_fused)


def test_bytes_deterministic(snapshot):
    assert ckpt.to_bytes(snapshot) == ckpt.to_bytes(snapshot)


def test_layout(snapshot):
    data = ckpt.to_bytes(snapshot)
    magic, version, _ = ckpt._PREFIX.unpack_from(data)
    assert magic == ckpt.MAGIC and version == ckpt.FORMAT_VERSION


def test_corrupted_checksum(snapshot):
    data = bytearray(ckpt.to_bytes(snapshot))
    data[-40] ^= 0xFF
    with pytest.raises(IntegrityError, match='checksum'):
        ckpt.from_bytes(bytes(data))


def test_bad_magic(snapshot):
    data = b'NOPE' + ckpt.to_bytes(snapshot)[4:]
    with pytest.raises(IntegrityError, match='magic'):
        ckpt.from_bytes(data)


def test_wrong_version(snapshot):
    data = ckpt.to_bytes(snapshot)
    data = data[:4] + struct.pack('<I', ckpt.FORMAT_VERSION + 1) + data[8:]
    with pytest.raises(IncompatibleCheckpointError):
        ckpt.from_bytes(data)


@pytest.mark.parametrize("size", [0, 10, 100])
def test_truncated(snapshot, size):
    data = ckpt.to_bytes(snapshot)[:size]
    with pytest.raises(IntegrityError):
        ckpt.from_bytes(data)


def test_truncated_body(snapshot):
    data = ckpt.to_bytes(snapshot)
    with pytest.raises(IntegrityError):
        ckpt.from_bytes(data[: len(data) // 2])


def test_trailing_data(snapshot):
    with pytest.raises(IntegrityError):
        ckpt.from_bytes(ckpt.to_bytes(snapshot) + b'\0')


def test_expected_config_mismatch(snapshot, tmp_path):
    path = tmp_path / 'model.ckpt'
    ckpt.save(snapshot, path)
    other = snapshot.config.model_copy(update={'beta': 0.1})
    with pytest.raises(IncompatibleCheckpointError):
        ckpt.load(path, expected_config=other)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckpt.load(tmp_path / 'missing.ckpt')
