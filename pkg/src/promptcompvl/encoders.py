# Frozen stand-ins for the vision-language encoders.
#
# The text side is a miniature pre-norm transformer whose attention is causal
# and block-diagonal: a batch of P contexts of length L is processed as one
# (P*L)×d matrix, and the attention mask keeps every sequence to itself.  The
# image side is a table of precomputed features plus a frozen projection.
#
# Tests are in tests/test_encoders.py.
from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
import logging
import math
import os
import struct
import threading

import numpy as np
import numpy.typing as npt

from .autodiff import (
    FloatArray,
    Tensor,
    add,
    add_constant,
    add_row,
    concat_cols,
    embedding_lookup,
    l2_normalize_rows,
    layer_norm_rows,
    matmul,
    mul_row,
    quick_gelu,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)
from .errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    FeatureLookupError,
)
from .io import atomic_write


__all__ = [
    "EOS",
    "FEATURE_MAGIC",
    "FEATURE_VERSION",
    "PAD",
    "SOS",
    "BlockWeights",
    "EncoderDims",
    "FrozenEncoders",
    "ImageFeatureTable",
    "TextEncoderWeights",
    "encode_image",
    "encode_text",
    "encode_texts",
    "init_frozen",
    "load_feature_table",
    "save_feature_table",
]

logger = logging.getLogger(__name__)

# Rows of TextEncoderWeights.special.
SOS, EOS, PAD = 0, 1, 2

FEATURE_MAGIC = b'CZSLFEAT'
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct('<8sIQI')

# Standard deviation of every randomly initialised frozen matrix.
INIT_GAIN = 0.02


@dataclass(frozen=True, slots=True)
class EncoderDims:
    """Shape of the frozen encoders.

    Attributes:
        width: Token and output dimension d.
        blocks: Number of transformer blocks.
        heads: Attention heads per block; must divide ``width``.
        context_length: Fixed text context length L_ctx.
        image_dim: Dimension of the stored image features.
        causal: Causal (CLIP-style) attention when True, bidirectional when
            False.
    """

    width: int = 64
    blocks: int = 2
    heads: int = 4
    context_length: int = 8
    image_dim: int = 32
    causal: bool = True

    def __post_init__(self) -> None:
        for name in ('width', 'blocks', 'heads', 'context_length', 'image_dim'):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f'{name} must be positive, got {getattr(self, name)}')
        if self.width % self.heads:
            raise ConfigurationError(f'heads ({self.heads}) must divide width ({self.width})')


@dataclass(frozen=True, slots=True)
class BlockWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    query: Tensor
    key: Tensor
    value: Tensor
    out: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_in: Tensor     # d × 4d
    ff_out: Tensor    # 4d × d


_BLOCK_FIELDS = ('ln1_gain', 'ln1_bias', 'query', 'key', 'value', 'out',
                 'ln2_gain', 'ln2_bias', 'ff_in', 'ff_out')


@dataclass(frozen=True, slots=True)
class TextEncoderWeights:
    """Frozen text transformer.  No tensor here ever requires a gradient."""

    dims: EncoderDims
    special: Tensor        # SOS, EOS, PAD rows: 3 × d
    positional: Tensor     # L_ctx × d
    blocks: tuple[BlockWeights, ...]
    final_gain: Tensor
    final_bias: Tensor
    projection: Tensor     # d × d

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Yield ``(name, tensor)`` in a fixed order (checkpoint layout)."""
        yield 'encoder/special', self.special
        yield 'encoder/positional', self.positional
        for i, block in enumerate(self.blocks):
            for name in _BLOCK_FIELDS:
                yield f'encoder/block{i}/{name}', getattr(block, name)
        yield 'encoder/final_gain', self.final_gain
        yield 'encoder/final_bias', self.final_bias
        yield 'encoder/projection', self.projection

    @classmethod
    def from_named(cls, dims: EncoderDims, tensors: Mapping[str, FloatArray]) -> TextEncoderWeights:
        def get(name: str, shape: tuple[int, ...]) -> Tensor:
            try:
                arr = tensors[name]
            except KeyError:
                raise CheckpointIntegrityError(name, 'missing') from None
            if tuple(arr.shape) != shape:
                raise CheckpointIntegrityError(name, f'shape {tuple(arr.shape)} != expected {shape}')
            return Tensor(arr)

        d, hidden = dims.width, 4 * dims.width
        shapes = {
            'ln1_gain': (d,), 'ln1_bias': (d,), 'query': (d, d), 'key': (d, d),
            'value': (d, d), 'out': (d, d), 'ln2_gain': (d,), 'ln2_bias': (d,),
            'ff_in': (d, hidden), 'ff_out': (hidden, d),
        }
        blocks = tuple(
            BlockWeights(**{n: get(f'encoder/block{i}/{n}', shapes[n]) for n in _BLOCK_FIELDS})
            for i in range(dims.blocks)
        )
        return cls(
            dims=dims,
            special=get('encoder/special', (3, d)),
            positional=get('encoder/positional', (dims.context_length, d)),
            blocks=blocks,
            final_gain=get('encoder/final_gain', (d,)),
            final_bias=get('encoder/final_bias', (d,)),
            projection=get('encoder/projection', (d, d)),
        )


def init_frozen(seed: int, dims: EncoderDims) -> tuple[TextEncoderWeights, Tensor]:
    """Deterministically initialise the frozen text encoder and image projection.

    Matrices are drawn from N(0, 0.02²); layer-norm gains start at one and
    biases at zero.  The same seed always yields identical weights.

    Args:
        seed: Any integer; reduced modulo 2**64.
        dims: Encoder shape.

    Returns:
        ``(text_weights, image_projection)`` where the projection is
        ``image_dim × width``.
    """
    rng = np.random.default_rng(seed % (1 << 64))
    d, hidden = dims.width, 4 * dims.width

    def normal(*shape: int) -> Tensor:
        return Tensor(rng.normal(0.0, INIT_GAIN, size=shape))

    special = normal(3, d)
    positional = normal(dims.context_length, d)
    blocks = []
    for _ in range(dims.blocks):
        blocks.append(BlockWeights(
            ln1_gain=Tensor(np.ones(d)), ln1_bias=Tensor(np.zeros(d)),
            query=normal(d, d), key=normal(d, d), value=normal(d, d), out=normal(d, d),
            ln2_gain=Tensor(np.ones(d)), ln2_bias=Tensor(np.zeros(d)),
            ff_in=normal(d, hidden), ff_out=normal(hidden, d),
        ))
    weights = TextEncoderWeights(
        dims=dims,
        special=special,
        positional=positional,
        blocks=tuple(blocks),
        final_gain=Tensor(np.ones(d)),
        final_bias=Tensor(np.zeros(d)),
        projection=normal(d, d),
    )
    return weights, normal(dims.image_dim, d)


# ── Text encoder ─────────────────────────────────────────────────────────────


def _attention_mask(num_seqs: int, length: int, causal: bool) -> FloatArray:
    """Additive mask: 0 where row may attend to column, -inf elsewhere."""
    local = np.tril(np.ones((length, length), dtype=bool)) if causal else np.ones((length, length), dtype=bool)
    allowed = np.kron(np.eye(num_seqs, dtype=bool), local)
    return np.where(allowed, 0.0, -np.inf)


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return add_row(mul_row(layer_norm_rows(x), gain), bias)


def _self_attention(h: Tensor, block: BlockWeights, heads: int, mask: FloatArray) -> Tensor:
    q = matmul(h, block.query)
    k = matmul(h, block.key)
    v = matmul(h, block.value)
    head_dim = h.shape[1] // heads
    outputs = []
    for i in range(heads):
        lo, hi = i * head_dim, (i + 1) * head_dim
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))),
                       1.0 / math.sqrt(head_dim))
        weights = softmax_rows(add_constant(scores, mask))
        outputs.append(matmul(weights, slice_cols(v, lo, hi)))
    return matmul(concat_cols(outputs), block.out)


def encode_texts(weights: TextEncoderWeights, contexts: Tensor,
                 eos_positions: Sequence[int]) -> Tensor:
    """Encode a batch of contexts stacked as a (P·L_ctx)×d matrix.

    Args:
        weights: Frozen text encoder.
        contexts: P contexts of L_ctx rows each, stacked vertically.
        eos_positions: Per-context EOS index in [0, L_ctx).

    Returns:
        P×d tensor of unit rows, differentiable w.r.t. ``contexts``.

    Raises:
        ContractError: If the row count is not a multiple of L_ctx, the
            width is wrong, or an EOS position is out of range.
    """
    dims = weights.dims
    length = dims.context_length
    rows = contexts.shape[0] if len(contexts.shape) == 2 else 0
    if len(contexts.shape) != 2 or contexts.shape[1] != dims.width or rows % length:
        raise ContractError(
            f'contexts must be (P*{length})x{dims.width}, got {"x".join(map(str, contexts.shape))}'
        )
    num_seqs = rows // length
    if len(eos_positions) != num_seqs:
        raise ContractError(f'{len(eos_positions)} EOS positions for {num_seqs} contexts')
    for eos in eos_positions:
        if not 0 <= eos < length:
            raise ContractError(f'eos_position {eos} outside [0, {length})')

    mask = _attention_mask(num_seqs, length, dims.causal)
    x = add_constant(contexts, np.tile(weights.positional.values, (num_seqs, 1)))
    for block in weights.blocks:
        x = add(x, _self_attention(_layer_norm(x, block.ln1_gain, block.ln1_bias),
                                   block, dims.heads, mask))
        hidden = quick_gelu(matmul(_layer_norm(x, block.ln2_gain, block.ln2_bias), block.ff_in))
        x = add(x, matmul(hidden, block.ff_out))
    x = _layer_norm(x, weights.final_gain, weights.final_bias)
    eos_rows = embedding_lookup(x, [i * length + eos for i, eos in enumerate(eos_positions)])
    return l2_normalize_rows(matmul(eos_rows, weights.projection))


def encode_text(weights: TextEncoderWeights, context: Tensor, eos_position: int) -> Tensor:
    """Encode one L_ctx×d context into a 1×d unit vector (hidden state at EOS).

    Raises:
        ContractError: If the context length differs from L_ctx.
    """
    if len(context.shape) != 2 or context.shape[0] != weights.dims.context_length:
        raise ContractError(
            f'context must have {weights.dims.context_length} rows, got shape {context.shape}'
        )
    return encode_texts(weights, context, [eos_position])


# ── Image features ───────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class ImageFeatureTable:
    """Precomputed image features and the frozen projection into text space."""

    features: Mapping[str, FloatArray]
    projection: Tensor   # image_dim × width

    def __post_init__(self) -> None:
        d_img = self.projection.shape[0]
        for image_id, vec in self.features.items():
            if vec.shape != (d_img,):
                raise ContractError(f'feature for {image_id!r} has shape {vec.shape}, expected ({d_img},)')

    def __contains__(self, image_id: object) -> bool:
        return image_id in self.features

    def __len__(self) -> int:
        return len(self.features)


def encode_image(table: ImageFeatureTable, image_id: str) -> Tensor:
    """Project the stored feature of ``image_id`` and normalise it (1×d).

    Raises:
        FeatureLookupError: If ``image_id`` is not in the table.
    """
    try:
        feature = table.features[image_id]
    except KeyError:
        raise FeatureLookupError('image id', image_id) from None
    return l2_normalize_rows(matmul(Tensor(feature.reshape(1, -1)), table.projection))


@dataclass(slots=True)
class FrozenEncoders:
    """Text weights plus the image table, with a per-id image-vector cache.

    Image vectors are computed one id at a time so the cached value for an id
    never depends on which batch requested it first.
    """

    text: TextEncoderWeights
    images: ImageFeatureTable
    _cache: dict[str, FloatArray] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def dims(self) -> EncoderDims:
        return self.text.dims

    def image_vector(self, image_id: str) -> FloatArray:
        with self._lock:
            cached = self._cache.get(image_id)
        if cached is None:
            cached = encode_image(self.images, image_id).values[0]
            with self._lock:
                self._cache.setdefault(image_id, cached)
        return cached

    def image_matrix(self, image_ids: Sequence[str]) -> Tensor:
        """N×d matrix of unit image vectors (no gradient)."""
        if not image_ids:
            raise ContractError('image_matrix: no image ids given')
        return Tensor(np.stack([self.image_vector(i) for i in image_ids]))


# ── Feature-table file ───────────────────────────────────────────────────────
#
# Layout (little-endian):
#   magic "CZSLFEAT" | version u32 | count u64 | d_img u32
#   count × ( id length u32 | id bytes (UTF-8) | d_img × f64 )


def save_feature_table(path: str | os.PathLike[str], features: Mapping[str, npt.ArrayLike]) -> None:
    """Write ``features`` (id → vector) in the feature-table binary format.

    Records are written in sorted id order so identical inputs give identical
    bytes.
    """
    items = sorted((k, np.asarray(v, dtype='<f8').reshape(-1)) for k, v in features.items())
    if not items:
        raise ContractError('feature table is empty')
    d_img = items[0][1].size
    with atomic_write(path, 'wb') as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(items), d_img))
        for image_id, vec in items:
            if vec.size != d_img:
                raise ContractError(f'feature for {image_id!r} has {vec.size} values, expected {d_img}')
            raw = image_id.encode('utf-8')
            f.write(struct.pack('<I', len(raw)))
            f.write(raw)
            f.write(vec.tobytes())
    logger.debug('wrote %d image features (d_img=%d) to %s', len(items), d_img, os.fspath(path))


def load_feature_table(path: str | os.PathLike[str]) -> dict[str, FloatArray]:
    """Read a feature-table file into an ordered id → vector mapping.

    Raises:
        CheckpointVersionError: On an unsupported version.
        CheckpointIntegrityError: On bad magic, truncation, duplicate ids or
            trailing bytes; names the failing record.
        OSError: If the file cannot be read.
    """
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < _FEATURE_HEADER.size:
        raise CheckpointIntegrityError('header', 'truncated')
    magic, version, count, d_img = _FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise CheckpointIntegrityError('header', f'bad magic {magic!r}')
    if version != FEATURE_VERSION:
        raise CheckpointVersionError(version, FEATURE_VERSION)
    offset = _FEATURE_HEADER.size
    out: dict[str, FloatArray] = {}
    for n in range(count):
        record = f'feature[{n}]'
        if offset + 4 > len(data):
            raise CheckpointIntegrityError(record, 'truncated id length')
        (id_len,) = struct.unpack_from('<I', data, offset)
        offset += 4
        end = offset + id_len + 8 * d_img
        if end > len(data):
            raise CheckpointIntegrityError(record, 'truncated record')
        try:
            image_id = data[offset:offset + id_len].decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointIntegrityError(record, f'id is not UTF-8: {e}') from None
        if image_id in out:
            raise CheckpointIntegrityError(record, f'duplicate id {image_id!r}')
        out[image_id] = np.frombuffer(data, dtype='<f8', count=d_img,
                                      offset=offset + id_len).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointIntegrityError('trailer', f'{len(data) - offset} unexpected trailing bytes')
    return out
