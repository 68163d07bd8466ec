# Versioned binary checkpoints of model, prompt and optimizer state.
#
# Layout (little-endian):
#   magic "CZSLCKPT" | version u32
#   config echo  (u32 length | UTF-8)
#   seed u64 | epoch u32
#   mode         (u32 length | UTF-8)
#   record count u32
#   count × ( name (u32 length | UTF-8) | ndim u32 | ndim × u64 dims | f64 values )
#
# Record names: encoder/* (text weights plus the encoder/heads and
# encoder/causal scalars), image/projection, prompt/theta, prompt/phi,
# model/tau, optim/* (optimizer state), best/* (training's best snapshot).
#
# Tests are in tests/test_checkpoint.py.
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
import logging
import os
import struct

import numpy as np
import numpy.typing as npt

from .autodiff import FloatArray, Parameter, Tensor
from .data import CompositionSpace
from .encoders import EncoderDims, FrozenEncoders, ImageFeatureTable, TextEncoderWeights
from .errors import CheckpointIntegrityError, CheckpointVersionError
from .io import atomic_replace
from .model import ModelSnapshot
from .prompt import PromptMode, PromptState


__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "checkpoint_to_snapshot",
    "describe_checkpoint",
    "encoder_dims",
    "load_checkpoint",
    "prompt_records",
    "restore_prompt",
    "save_checkpoint",
    "snapshot_to_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'CZSLCKPT'
CHECKPOINT_VERSION = 1

OPTIM_PREFIX = 'optim/'
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')


@dataclass(eq=False, slots=True)
class Checkpoint:
    """In-memory checkpoint: header fields plus ordered named arrays."""

    config_echo: str
    seed: int
    epoch: int
    mode: PromptMode
    records: dict[str, FloatArray] = field(default_factory=dict)

    def record(self, name: str) -> FloatArray:
        try:
            return self.records[name]
        except KeyError:
            raise CheckpointIntegrityError(name, 'missing') from None

    def with_prefix(self, prefix: str) -> dict[str, FloatArray]:
        """Records under ``prefix``, with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.records.items() if k.startswith(prefix)}

    def optimizer_state(self) -> dict[str, FloatArray]:
        return self.with_prefix(OPTIM_PREFIX)


# ── Encoding ─────────────────────────────────────────────────────────────────


def _pack_str(value: str) -> bytes:
    raw = value.encode('utf-8')
    return _U32.pack(len(raw)) + raw


def save_checkpoint(path: str | os.PathLike[str], checkpoint: Checkpoint) -> None:
    """Atomically write ``checkpoint`` to ``path``."""
    parts = [
        CHECKPOINT_MAGIC,
        _U32.pack(CHECKPOINT_VERSION),
        _pack_str(checkpoint.config_echo),
        _U64.pack(checkpoint.seed % (1 << 64)),
        _U32.pack(checkpoint.epoch),
        _pack_str(checkpoint.mode.value),
        _U32.pack(len(checkpoint.records)),
    ]
    for name, values in checkpoint.records.items():
        arr = np.asarray(values, dtype='<f8')
        parts.append(_pack_str(name))
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U64.pack(dim) for dim in arr.shape)
        parts.append(np.ascontiguousarray(arr).tobytes())
    atomic_replace(target_file=path, data=b''.join(parts))
    logger.debug('wrote checkpoint %s (epoch %d, %d records)',
                 os.fspath(path), checkpoint.epoch, len(checkpoint.records))


class _Reader:
    __slots__ = ('data', 'offset')

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, record: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointIntegrityError(
                record, f'truncated: needs {size} bytes at offset {self.offset}, {len(self.data) - self.offset} left'
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, record: str) -> int:
        value: int = _U32.unpack(self.take(4, record))[0]
        return value

    def u64(self, record: str) -> int:
        value: int = _U64.unpack(self.take(8, record))[0]
        return value

    def text(self, record: str) -> str:
        raw = self.take(self.u32(record), record)
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointIntegrityError(record, f'not UTF-8: {e}') from None


def load_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    """Read a checkpoint, validating every length against the file size.

    Raises:
        CheckpointVersionError: On an unsupported format version.
        CheckpointIntegrityError: On bad magic, truncation, an unknown mode,
            duplicate record names or trailing bytes; names the record.
        OSError: If the file cannot be read.
    """
    with open(path, 'rb') as f:
        reader = _Reader(f.read())
    magic = reader.take(len(CHECKPOINT_MAGIC), 'header')
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError('header', f'bad magic {magic!r}')
    version = reader.u32('header')
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(version, CHECKPOINT_VERSION)
    config_echo = reader.text('config')
    seed = reader.u64('header')
    epoch = reader.u32('header')
    mode_name = reader.text('mode')
    try:
        mode = PromptMode(mode_name)
    except ValueError:
        raise CheckpointIntegrityError('mode', f'unknown prompt mode {mode_name!r}') from None
    count = reader.u32('header')

    records: dict[str, FloatArray] = {}
    for n in range(count):
        name = reader.text(f'record[{n}]')
        ndim = reader.u32(name)
        shape = tuple(reader.u64(name) for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.uint64)) if shape else 1
        raw = reader.take(8 * size, name)
        if name in records:
            raise CheckpointIntegrityError(name, 'duplicate record')
        records[name] = np.frombuffer(raw, dtype='<f8').astype(np.float64).reshape(shape)
    if reader.offset != len(reader.data):
        raise CheckpointIntegrityError('trailer', f'{len(reader.data) - reader.offset} unexpected trailing bytes')
    return Checkpoint(config_echo=config_echo, seed=seed, epoch=epoch, mode=mode, records=records)


# ── Snapshot conversion ──────────────────────────────────────────────────────


def prompt_records(state: PromptState, prefix: str = 'prompt/') -> dict[str, FloatArray]:
    out = {}
    if state.theta is not None:
        out[f'{prefix}theta'] = state.theta.values
    out[f'{prefix}phi'] = state.phi.values
    return out


def snapshot_to_checkpoint(snapshot: ModelSnapshot, *, config_echo: str, seed: int, epoch: int,
                           optimizer_state: Mapping[str, npt.ArrayLike] | None = None,
                           extra: Mapping[str, npt.ArrayLike] | None = None) -> Checkpoint:
    """Capture encoders, prompt, τ and optional optimizer/extra records."""
    text = snapshot.encoders.text
    records: dict[str, FloatArray] = {name: t.values for name, t in text.named_tensors()}
    records['encoder/heads'] = np.asarray(float(text.dims.heads))
    records['encoder/causal'] = np.asarray(1.0 if text.dims.causal else 0.0)
    records['image/projection'] = snapshot.encoders.images.projection.values
    records.update(prompt_records(snapshot.prompt))
    records['model/tau'] = np.asarray(snapshot.tau)
    for key, value in (optimizer_state or {}).items():
        records[OPTIM_PREFIX + key] = np.asarray(value, dtype=np.float64)
    for key, value in (extra or {}).items():
        records[key] = np.asarray(value, dtype=np.float64)
    return Checkpoint(config_echo=config_echo, seed=seed, epoch=epoch,
                      mode=snapshot.prompt.mode, records=records)


def _scalar(checkpoint: Checkpoint, name: str) -> float:
    arr = checkpoint.record(name)
    if arr.size != 1:
        raise CheckpointIntegrityError(name, f'expected a scalar, found shape {arr.shape}')
    return float(arr.reshape(-1)[0])


def encoder_dims(checkpoint: Checkpoint) -> EncoderDims:
    """Recover the encoder shape from the stored records."""
    special = checkpoint.record('encoder/special')
    positional = checkpoint.record('encoder/positional')
    projection = checkpoint.record('image/projection')
    blocks = len({k.split('/')[1] for k in checkpoint.records if k.startswith('encoder/block')})
    if special.ndim != 2 or positional.ndim != 2 or projection.ndim != 2:
        raise CheckpointIntegrityError('encoder/special', 'encoder records must be matrices')
    return EncoderDims(
        width=special.shape[1],
        blocks=blocks,
        heads=int(_scalar(checkpoint, 'encoder/heads')),
        context_length=positional.shape[0],
        image_dim=projection.shape[0],
        causal=bool(_scalar(checkpoint, 'encoder/causal')),
    )


def restore_prompt(checkpoint: Checkpoint, space: CompositionSpace,
                   prefix: str = 'prompt/') -> PromptState:
    """Rebuild the prompt state stored under ``prefix`` for ``space``."""
    mode = checkpoint.mode
    phi_values = checkpoint.record(f'{prefix}phi')
    if phi_values.ndim != 2 or phi_values.shape[0] != space.num_primitives:
        raise CheckpointIntegrityError(
            f'{prefix}phi', f'shape {phi_values.shape} does not fit {space.num_primitives} primitives'
        )
    theta = None
    if f'{prefix}theta' in checkpoint.records:
        theta = Parameter('prompt/theta', checkpoint.records[f'{prefix}theta'],
                          frozen=not mode.trains_prompt)
    phi = Parameter('prompt/phi', phi_values, frozen=not mode.trains_embedding)
    return PromptState(mode=mode, theta=theta, phi=phi,
                       num_attrs=space.num_attrs, num_objs=space.num_objs)


def checkpoint_to_snapshot(checkpoint: Checkpoint, space: CompositionSpace,
                           features: Mapping[str, FloatArray], *,
                           prompt_prefix: str = 'prompt/') -> ModelSnapshot:
    """Rebuild a ModelSnapshot; ``prompt_prefix='best/'`` restores the best snapshot.

    Raises:
        CheckpointIntegrityError: If a record is missing or mis-shaped.
    """
    dims = encoder_dims(checkpoint)
    text = TextEncoderWeights.from_named(dims, checkpoint.records)
    images = ImageFeatureTable(features=features, projection=Tensor(checkpoint.record('image/projection')))
    return ModelSnapshot(
        encoders=FrozenEncoders(text=text, images=images),
        prompt=restore_prompt(checkpoint, space, prompt_prefix),
        space=space,
        tau=_scalar(checkpoint, 'model/tau'),
    )


def describe_checkpoint(checkpoint: Checkpoint) -> str:
    """Human-readable summary printed by ``promptcompvl inspect``."""
    mode = checkpoint.mode
    theta = checkpoint.records.get('prompt/theta')
    phi = checkpoint.record('prompt/phi')
    trainable = 0
    if theta is not None and mode.trains_prompt:
        trainable += theta.size
    if mode.trains_embedding:
        trainable += phi.size
    lines = [
        f'format version: {CHECKPOINT_VERSION}',
        f'mode: {mode.value}',
        f'seed: {checkpoint.seed}',
        f'epoch: {checkpoint.epoch}',
        f'theta: {"x".join(map(str, theta.shape)) if theta is not None else "none"}',
        f'phi: {"x".join(map(str, phi.shape))}',
        f'trainable scalars: {trainable}',
        f'records: {len(checkpoint.records)}',
        'config:',
    ]
    lines.extend(f'  {line}' for line in checkpoint.config_echo.splitlines())
    return '\n'.join(lines) + '\n'
