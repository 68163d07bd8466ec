# Scoring head: text vectors for a pair set, temperature-scaled cosine logits
# and argmax prediction over a target set.
#
# Tests are in tests/test_model.py.
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt

from .autodiff import FloatArray, Tensor, concat_rows, matmul, scale, softmax_rows, transpose
from .data import CompositionSpace, Pair
from .encoders import FrozenEncoders, encode_texts
from .errors import ConfigurationError, ContractError
from .prompt import PromptState, build_contexts


__all__ = [
    "DEFAULT_TAU",
    "ModelSnapshot",
    "label_probability",
    "logits",
    "predict",
    "rank",
    "text_matrix",
]

DEFAULT_TAU = 0.01

# Pairs encoded per attention batch; bounds the block-diagonal mask size.
TEXT_CHUNK = 64


def _check_tau(tau: float) -> None:
    if not tau > 0.0:
        raise ConfigurationError(f'temperature must be positive, got {tau}')


@dataclass(slots=True)
class ModelSnapshot:
    """Frozen encoders, prompt state, temperature and the space they serve."""

    encoders: FrozenEncoders
    prompt: PromptState
    space: CompositionSpace
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        _check_tau(self.tau)
        if (self.prompt.num_attrs, self.prompt.num_objs) != (self.space.num_attrs, self.space.num_objs):
            raise ContractError(
                f'prompt state is bound to a {self.prompt.num_attrs}x{self.prompt.num_objs} space, '
                f'not {self.space.num_attrs}x{self.space.num_objs}'
            )

    def frozen_copy(self) -> ModelSnapshot:
        """Snapshot whose prompt state is independent of this one."""
        return replace(self, prompt=self.prompt.copy())

    def with_tau(self, tau: float) -> ModelSnapshot:
        return replace(self, tau=tau)


def text_matrix(pairs: Sequence[Pair], snapshot: ModelSnapshot) -> Tensor:
    """Unit text vector for every pair, one row per pair, in order.

    Differentiable w.r.t. the trainable prompt blocks when a tape is active.

    Raises:
        FeatureLookupError: If a pair lies outside the space.
    """
    if not pairs:
        raise ContractError('text_matrix: no pairs given')
    weights = snapshot.encoders.text
    chunks = []
    for start in range(0, len(pairs), TEXT_CHUNK):
        contexts, eos = build_contexts(pairs[start:start + TEXT_CHUNK], snapshot.prompt, weights)
        chunks.append(encode_texts(weights, contexts, eos))
    return chunks[0] if len(chunks) == 1 else concat_rows(chunks)


def logits(images: Tensor, texts: Tensor, tau: float) -> Tensor:
    """Cosine similarity over τ between unit image rows (N×d) and text rows (P×d).

    Returns an N×P tensor; pass a 1×d image for a single row of logits.

    Raises:
        ConfigurationError: If τ <= 0.
    """
    _check_tau(tau)
    return scale(matmul(images, transpose(texts)), 1.0 / tau)


def label_probability(scores: Tensor) -> Tensor:
    """Softmax over each row of logits; -inf entries get probability 0."""
    return softmax_rows(scores)


def _cosines(image_id: str, target_pairs: Sequence[Pair], snapshot: ModelSnapshot,
             mask: npt.ArrayLike | None, texts: Tensor | None) -> FloatArray:
    if not target_pairs:
        raise ContractError('target set is empty')
    if texts is None:
        texts = text_matrix(target_pairs, snapshot)
    elif texts.shape[0] != len(target_pairs):
        raise ContractError(f'{texts.shape[0]} text rows for {len(target_pairs)} target pairs')
    cos: FloatArray = texts.values @ snapshot.encoders.image_vector(image_id)
    if mask is not None:
        masked = np.asarray(mask, dtype=bool)
        if masked.shape != cos.shape:
            raise ContractError(f'mask has shape {masked.shape}, expected {cos.shape}')
        if masked.all():
            raise ContractError('every target pair is masked')
        cos = np.where(masked, -np.inf, cos)
    return cos


def predict(image_id: str, target_pairs: Sequence[Pair], snapshot: ModelSnapshot,
            mask: npt.ArrayLike | None = None, *, texts: Tensor | None = None) -> Pair:
    """Most similar unmasked target pair for an image.

    The argmax runs on raw cosines, so the result does not depend on τ.  Ties
    go to the lowest target index.

    Args:
        image_id: Key into the image feature table.
        target_pairs: Candidate pairs.
        snapshot: Model to score with.
        mask: Optional boolean array, True where a pair is masked out.
        texts: Precomputed text_matrix(target_pairs) to reuse across images.

    Raises:
        ContractError: If the target set is empty or fully masked.
        FeatureLookupError: If ``image_id`` is unknown.
    """
    cos = _cosines(image_id, target_pairs, snapshot, mask, texts)
    return Pair(*target_pairs[int(np.argmax(cos))])


def rank(image_id: str, target_pairs: Sequence[Pair], snapshot: ModelSnapshot,
         mask: npt.ArrayLike | None = None, *, top: int = 5,
         texts: Tensor | None = None) -> list[tuple[Pair, float]]:
    """Up to ``top`` unmasked pairs with their cosines, best first."""
    cos = _cosines(image_id, target_pairs, snapshot, mask, texts)
    order = np.argsort(-cos, kind='stable')
    return [(Pair(*target_pairs[int(j)]), float(cos[j])) for j in order[:top] if np.isfinite(cos[j])]
