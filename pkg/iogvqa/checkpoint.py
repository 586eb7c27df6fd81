import dataclasses
import hashlib
import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pydantic
import torch

from .config import TrainingConfig
from .errors import IncompatibleCheckpointError, IntegrityError
from .model import IogVqaModel, ModelShape, build_model

__doc__ = """Binary checkpoint container

Layout (little endian):
    magic b"IOGV" | format_version u32 | header length u32 | header (JSON)
    then for each tensor named in the header:
        name length u16 | name | ndim u8 | dims u64 * ndim | float64 data
    then the sha256 digest of everything before it.

The header holds the training configuration, fingerprints, epoch, best score,
history and the optimizer hyperparameters; optimizer state tensors are
stored as named tensors like the parameters.
"""

log = logging.getLogger(__name__)

MAGIC = b'IOGV'
FORMAT_VERSION = 1
_PREFIX = struct.Struct('<4sII')
_DIGEST_SIZE = 32


@dataclasses.dataclass
class Checkpoint:
    config: TrainingConfig
    shape: ModelShape
    data_fingerprint: str
    tensors: dict[str, torch.Tensor]
    optimizers: dict[str, dict] = dataclasses.field(default_factory=dict)
    epoch: int = 0
    best_score: float = 0.0
    history: list[dict[str, float]] = dataclasses.field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def config_fingerprint(self) -> str:
        return self.config.fingerprint

    @classmethod
    def capture(
        cls,
        model: IogVqaModel,
        *,
        data_fingerprint: str,
        optimizers: Optional[dict[str, torch.optim.Optimizer]] = None,
        **kwargs,
    ) -> "Checkpoint":
        """Snapshot (copy) of a model and its optimizers"""
        return cls(
            config=model.config,
            shape=model.shape,
            data_fingerprint=data_fingerprint,
            tensors={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizers={
                name: _copy_state(opt.state_dict()) for name, opt in (optimizers or {}).items()
            },
            **kwargs,
        )

    def restore_model(self) -> IogVqaModel:
        model = build_model(self.config, self.shape)
        model.load_state_dict(self.tensors)
        model.eval()
        return model

    def restore_optimizers(self, optimizers: dict[str, torch.optim.Optimizer]) -> None:
        """Load the saved state into optimizers built for the restored model"""
        missing = self.optimizers.keys() - optimizers.keys()
        if missing:
            raise IncompatibleCheckpointError(f"no optimizer for {sorted(missing)}")
        for name, state in self.optimizers.items():
            optimizers[name].load_state_dict(_copy_state(state))


def _copy_state(state: Any) -> Any:
    if isinstance(state, torch.Tensor):
        return state.detach().clone()
    if isinstance(state, dict):
        return {k: _copy_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [_copy_state(v) for v in state]
    return state


#######################################
# WRITING


def _flatten_optimizers(optimizers: dict[str, dict]):
    """Split optimizer state dicts into a JSON part and named tensors"""
    meta: dict[str, Any] = {}
    tensors: dict[str, torch.Tensor] = {}
    for name, state in optimizers.items():
        entries: dict[str, dict[str, Any]] = {}
        for param_id, param_state in state['state'].items():
            values = {}
            for key, value in param_state.items():
                if isinstance(value, torch.Tensor):
                    tensor_name = f"optimizer/{name}/{param_id}/{key}"
                    tensors[tensor_name] = value
                    values[key] = {'tensor': tensor_name}
                else:
                    values[key] = value
            entries[str(param_id)] = values
        meta[name] = {'param_groups': state['param_groups'], 'state': entries}
    return meta, tensors


def _tensor_record(name: str, tensor: torch.Tensor) -> bytes:
    encoded = name.encode()
    data = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
    return b''.join(
        [
            struct.pack('<H', len(encoded)),
            encoded,
            struct.pack('<B', data.ndim),
            struct.pack(f"<{data.ndim}Q", *data.shape),
            data.astype('<f8').tobytes(),
        ]
    )


def to_bytes(checkpoint: Checkpoint) -> bytes:
    optimizer_meta, optimizer_tensors = _flatten_optimizers(checkpoint.optimizers)
    tensors = {**checkpoint.tensors, **optimizer_tensors}
    header = {
        'config': checkpoint.config.model_dump(mode='json'),
        'config_fingerprint': checkpoint.config_fingerprint,
        'shape': checkpoint.shape.model_dump(),
        'data_fingerprint': checkpoint.data_fingerprint,
        'epoch': checkpoint.epoch,
        'best_score': checkpoint.best_score,
        'history': checkpoint.history,
        'optimizers': optimizer_meta,
        'tensors': [[name, str(t.dtype).removeprefix('torch.')] for name, t in tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = io.BytesIO()
    body.write(_PREFIX.pack(MAGIC, checkpoint.format_version, len(header_bytes)))
    body.write(header_bytes)
    for name, tensor in tensors.items():
        body.write(_tensor_record(name, tensor))
    content = body.getvalue()
    return content + hashlib.sha256(content).digest()


def save(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(checkpoint))
    log.info('Saved checkpoint (epoch %d) to %s', checkpoint.epoch, path)


#######################################
# READING


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise IntegrityError("checkpoint is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(reader: _Reader, expected_name: str, dtype: str) -> torch.Tensor:
    (name_length,) = reader.unpack('<H')
    name = reader.take(name_length).decode()
    if name != expected_name:
        raise IntegrityError(f"expecting tensor {expected_name}, found {name}")
    (ndim,) = reader.unpack('<B')
    dims = reader.unpack(f"<{ndim}Q") if ndim else ()
    count = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(reader.take(8 * count), dtype='<f8').reshape(dims)
    return torch.from_numpy(data.copy()).to(getattr(torch, dtype))


def _unflatten_optimizers(meta: dict, tensors: dict[str, torch.Tensor]) -> dict[str, dict]:
    result = {}
    for name, entry in meta.items():
        state = {}
        for param_id, values in entry['state'].items():
            state[int(param_id)] = {
                key: tensors.pop(value['tensor'])
                if isinstance(value, dict) and 'tensor' in value
                else value
                for key, value in values.items()
            }
        # JSON turns tuples such as Adam betas into lists
        groups = [
            {k: v if k == 'params' or not isinstance(v, list) else tuple(v) for k, v in g.items()}
            for g in entry['param_groups']
        ]
        result[name] = {'state': state, 'param_groups': groups}
    return result


def from_bytes(data: bytes, *, source: str = '<bytes>') -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise IntegrityError(f"{source}: checkpoint is truncated")
    magic, version, header_length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{source}: format version {version}, expecting {FORMAT_VERSION}"
        )
    content, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(content).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch")
    reader = _Reader(content)
    reader.take(_PREFIX.size)
    try:
        header = json.loads(reader.take(header_length))
        config = TrainingConfig.model_validate(header['config'])
        shape = ModelShape.model_validate(header['shape'])
    except (ValueError, KeyError, pydantic.ValidationError) as e:
        raise IntegrityError(f"{source}: invalid header: {e}") from e
    if config.fingerprint != header['config_fingerprint']:
        raise IncompatibleCheckpointError(f"{source}: configuration fingerprint mismatch")
    tensors = {name: _read_tensor(reader, name, dtype) for name, dtype in header['tensors']}
    if reader.offset != len(content):
        raise IntegrityError(f"{source}: trailing data")
    optimizers = _unflatten_optimizers(header['optimizers'], tensors)
    return Checkpoint(
        config=config,
        shape=shape,
        data_fingerprint=header['data_fingerprint'],
        tensors=tensors,
        optimizers=optimizers,
        epoch=header['epoch'],
        best_score=header['best_score'],
        history=header['history'],
        format_version=version,
    )


def load(
    path: Union[str, Path], *, expected_config: Optional[TrainingConfig] = None
) -> Checkpoint:
    """Read a checkpoint, optionally requiring a given training configuration"""
    path = Path(path)
    checkpoint = from_bytes(path.read_bytes(), source=str(path))
    if expected_config is not None and expected_config.fingerprint != checkpoint.config_fingerprint:
        raise IncompatibleCheckpointError(
            f"{path}: trained with configuration {checkpoint.config_fingerprint},"
            f" expecting {expected_config.fingerprint}"
        )
    return checkpoint
