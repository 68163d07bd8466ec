# Learnable text-side layers and text-context assembly.
#
# A context for pair (a, o) is laid out as
#
#   [SOS, v_1 .. v_k, e_a, e_o, EOS, PAD ...]     (padded to L_ctx rows)
#
# where v_1..v_k are the prompt rows (theta) and e_a, e_o are rows of the
# primitive embedding table (phi: attribute rows first, then object rows).
# Which of theta/phi receives gradients depends on the PromptMode.
#
# Tests are in tests/test_prompt.py.
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import enum

import numpy as np
import numpy.typing as npt

from .autodiff import Parameter, Tensor, concat_rows, embedding_lookup
from .data import CompositionSpace, Pair
from .encoders import EOS, INIT_GAIN, PAD, SOS, EncoderDims, TextEncoderWeights
from .errors import ConfigurationError, ContractError, FeatureLookupError


__all__ = [
    "PromptInit",
    "PromptMode",
    "PromptState",
    "build_context",
    "build_contexts",
    "init_prompt_state",
    "trainable_count",
    "trainable_params",
]

# Rows preceding the prompt in the token table: SOS, EOS, PAD.
_NUM_SPECIAL = 3


class PromptMode(enum.Enum):
    CLIP_HARD = 'clip_hard'                    # fixed prompt, frozen vocabulary
    COOP_SOFT_PROMPT = 'coop_soft_prompt'      # learn the prompt only
    CSP_SOFT_EMBEDDING = 'csp_soft_embedding'  # learn the primitive embeddings only
    PROMPTCOMPVL = 'promptcompvl'              # learn both

    @property
    def trains_prompt(self) -> bool:
        return self in (PromptMode.COOP_SOFT_PROMPT, PromptMode.PROMPTCOMPVL)

    @property
    def trains_embedding(self) -> bool:
        return self in (PromptMode.CSP_SOFT_EMBEDDING, PromptMode.PROMPTCOMPVL)


class PromptInit(enum.Enum):
    RANDOM = 'random'  # soft prompt rows drawn from N(0, 0.02²)
    HARD = 'hard'      # soft prompt rows start as a copy of the fixed prompt


@dataclass(slots=True)
class PromptState:
    """Prompt rows and primitive embeddings bound to one composition space.

    ``theta`` is None when the prompt length is zero.  Freezing follows the
    mode: a block the mode does not train is a frozen Parameter.
    """

    mode: PromptMode
    theta: Parameter | None
    phi: Parameter
    num_attrs: int
    num_objs: int

    @property
    def prompt_length(self) -> int:
        return 0 if self.theta is None else self.theta.shape[0]

    @property
    def width(self) -> int:
        return self.phi.shape[1]

    def copy(self) -> PromptState:
        """Independent copy; used for best-so-far and inference snapshots."""
        return PromptState(
            mode=self.mode,
            theta=None if self.theta is None else self.theta.copy(),
            phi=self.phi.copy(),
            num_attrs=self.num_attrs,
            num_objs=self.num_objs,
        )


def _check_fits(prompt_length: int, context_length: int) -> None:
    if prompt_length < 0:
        raise ConfigurationError(f'prompt length must be >= 0, got {prompt_length}')
    if prompt_length + 4 > context_length:
        raise ConfigurationError(
            f'prompt length {prompt_length} does not fit context length {context_length} '
            f'(needs prompt_length + 4 <= context_length)'
        )


def init_prompt_state(space: CompositionSpace, mode: PromptMode, seed: int, *,
                      dims: EncoderDims, prompt_length: int = 3,
                      frozen_vocab: npt.ArrayLike | Tensor | None = None,
                      prompt_init: PromptInit = PromptInit.RANDOM) -> PromptState:
    """Create the prompt and embedding blocks for ``space``.

    Draw order from ``default_rng(seed)`` is fixed: the hard prompt rows, the
    soft prompt rows, then the embedding table, so a given seed yields the
    same state in every mode.

    Args:
        space: Composition space; fixes the embedding row count |A|+|O|.
        mode: Which blocks are trainable.
        seed: RNG seed.
        dims: Encoder shape; supplies d and L_ctx.
        prompt_length: k, the number of prompt rows.
        frozen_vocab: Optional (|A|+|O|)×d rows to copy into the embedding
            table instead of drawing it at random.
        prompt_init: Start soft prompt rows from random values or from the
            fixed prompt.

    Raises:
        ConfigurationError: If k + 4 exceeds the context length.
        ContractError: If ``frozen_vocab`` has the wrong shape.
    """
    _check_fits(prompt_length, dims.context_length)
    d = dims.width
    rows = space.num_primitives
    rng = np.random.default_rng(seed % (1 << 64))
    k = prompt_length
    hard = rng.normal(0.0, INIT_GAIN, size=(k, d))
    soft = rng.normal(0.0, INIT_GAIN, size=(k, d))
    table = rng.normal(0.0, INIT_GAIN, size=(rows, d))
    if frozen_vocab is not None:
        vocab = frozen_vocab.values if isinstance(frozen_vocab, Tensor) else np.asarray(frozen_vocab, dtype=np.float64)
        if vocab.shape != (rows, d):
            raise ContractError(f'frozen_vocab has shape {vocab.shape}, expected ({rows}, {d})')
        table = np.array(vocab, dtype=np.float64)
    if prompt_init is PromptInit.HARD:
        soft = hard.copy()

    theta = None
    if k:
        theta = Parameter('prompt/theta', soft if mode.trains_prompt else hard,
                          frozen=not mode.trains_prompt)
    phi = Parameter('prompt/phi', table, frozen=not mode.trains_embedding)
    return PromptState(mode=mode, theta=theta, phi=phi,
                       num_attrs=space.num_attrs, num_objs=space.num_objs)


def trainable_params(state: PromptState) -> list[Parameter]:
    """Parameters the mode trains: theta before phi; empty for clip_hard."""
    return [p for p in (state.theta, state.phi) if p is not None and not p.frozen]


def trainable_count(state: PromptState) -> int:
    return sum(int(np.prod(p.shape)) for p in trainable_params(state))


def _token_table(state: PromptState, encoder: TextEncoderWeights) -> Tensor:
    if encoder.dims.width != state.width:
        raise ContractError(f'encoder width {encoder.dims.width} != prompt width {state.width}')
    parts = [encoder.special]
    if state.theta is not None:
        parts.append(state.theta.forward_value())
    parts.append(state.phi.forward_value())
    return concat_rows(parts)


def _context_indices(pair: Pair, state: PromptState, context_length: int) -> tuple[list[int], int]:
    attr, obj = pair
    if not (0 <= attr < state.num_attrs and 0 <= obj < state.num_objs):
        raise FeatureLookupError('pair', (attr, obj))
    k = state.prompt_length
    base = _NUM_SPECIAL + k
    idx = [SOS, *range(_NUM_SPECIAL, base), base + attr, base + state.num_attrs + obj, EOS]
    eos = len(idx) - 1
    idx.extend([PAD] * (context_length - len(idx)))
    return idx, eos


def build_contexts(pairs: Sequence[Pair], state: PromptState,
                   encoder: TextEncoderWeights) -> tuple[Tensor, list[int]]:
    """Contexts for ``pairs`` stacked as a (P·L_ctx)×d matrix, plus EOS positions.

    All rows come from one embedding_lookup into the concatenated token table
    (special rows, theta, phi), so gradients reach exactly the theta rows and
    the phi rows of the primitives named in ``pairs``.

    Raises:
        ConfigurationError: If k + 4 exceeds the context length.
        FeatureLookupError: If a pair lies outside the bound space.
    """
    if not pairs:
        raise ContractError('build_contexts: no pairs given')
    length = encoder.dims.context_length
    _check_fits(state.prompt_length, length)
    indices: list[int] = []
    eos_positions = []
    for pair in pairs:
        idx, eos = _context_indices(Pair(*pair), state, length)
        indices.extend(idx)
        eos_positions.append(eos)
    return embedding_lookup(_token_table(state, encoder), indices), eos_positions


def build_context(attr: int, obj: int, state: PromptState,
                  encoder: TextEncoderWeights) -> tuple[Tensor, int]:
    """Single L_ctx×d context for (attr, obj) and its EOS position (k + 3)."""
    contexts, eos = build_contexts([Pair(attr, obj)], state, encoder)
    return contexts, eos[0]
