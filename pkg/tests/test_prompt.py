# SPDX-License-Identifier: LGPL-3.0-or-later
"""Tests for prompt/embedding initialisation and context assembly."""

import numpy as np
import pytest

from conftest import TOY_DIMS, make_grid_space as grid_space
from promptcompvl.autodiff import Tape, backward, sum
from promptcompvl.data import Pair
from promptcompvl.encoders import EOS, PAD, SOS, EncoderDims, encode_texts, init_frozen
from promptcompvl.errors import ConfigurationError, ContractError, FeatureLookupError
from promptcompvl.prompt import (
    PromptInit,
    PromptMode,
    build_context,
    build_contexts,
    init_prompt_state,
    trainable_count,
    trainable_params,
)


@pytest.fixture
def toy_text():
    weights, _ = init_frozen(0, TOY_DIMS)
    return weights


# ── init_prompt_state ─────────────────────────────────────────────────────────

@pytest.mark.parametrize('mode, expected', [
    (PromptMode.CLIP_HARD, 0),
    (PromptMode.COOP_SOFT_PROMPT, 3 * 64),
    (PromptMode.CSP_SOFT_EMBEDDING, 12 * 64),
    (PromptMode.PROMPTCOMPVL, 960),
])
def test_trainable_scalar_counts(mode, expected):
    dims = EncoderDims(width=64, context_length=8)
    state = init_prompt_state(grid_space(5, 7), mode, 0, dims=dims, prompt_length=3)
    assert trainable_count(state) == expected
    assert state.phi.shape == (12, 64)
    assert state.theta.shape == (3, 64)


def test_trainable_params_order_and_freezing():
    space = grid_space(2, 2)
    full = init_prompt_state(space, PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS)
    assert [p.name for p in trainable_params(full)] == ['prompt/theta', 'prompt/phi']

    coop = init_prompt_state(space, PromptMode.COOP_SOFT_PROMPT, 0, dims=TOY_DIMS)
    assert coop.phi.frozen and not coop.theta.frozen
    csp = init_prompt_state(space, PromptMode.CSP_SOFT_EMBEDDING, 0, dims=TOY_DIMS)
    assert csp.theta.frozen and not csp.phi.frozen
    assert trainable_params(init_prompt_state(space, PromptMode.CLIP_HARD, 0, dims=TOY_DIMS)) == []


def test_same_seed_gives_same_blocks_across_modes():
    space = grid_space(3, 2)
    states = {m: init_prompt_state(space, m, 11, dims=TOY_DIMS) for m in PromptMode}
    phis = {m: s.phi.values.tobytes() for m, s in states.items()}
    assert len(set(phis.values())) == 1
    # Modes that freeze the prompt use the fixed prompt; the others the soft one.
    hard = states[PromptMode.CLIP_HARD].theta.values
    assert np.array_equal(states[PromptMode.CSP_SOFT_EMBEDDING].theta.values, hard)
    soft = states[PromptMode.PROMPTCOMPVL].theta.values
    assert np.array_equal(states[PromptMode.COOP_SOFT_PROMPT].theta.values, soft)
    assert not np.array_equal(hard, soft)


def test_hard_init_copies_the_fixed_prompt():
    space = grid_space(2, 2)
    hard = init_prompt_state(space, PromptMode.CLIP_HARD, 4, dims=TOY_DIMS).theta.values
    init = init_prompt_state(space, PromptMode.PROMPTCOMPVL, 4, dims=TOY_DIMS,
                             prompt_init=PromptInit.HARD).theta.values
    assert np.array_equal(hard, init)


def test_zero_length_prompt():
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0,
                              dims=TOY_DIMS, prompt_length=0)
    assert state.theta is None
    assert state.prompt_length == 0
    assert [p.name for p in trainable_params(state)] == ['prompt/phi']


@pytest.mark.parametrize('k', [5, -1])
def test_prompt_must_fit_context(k):
    with pytest.raises(ConfigurationError):
        init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS, prompt_length=k)


def test_longest_prompt_that_fits():
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS, prompt_length=4)
    assert state.prompt_length == 4


def test_frozen_vocab_is_copied_and_checked():
    space = grid_space(2, 3)
    vocab = np.arange(5 * TOY_DIMS.width, dtype=float).reshape(5, TOY_DIMS.width)
    state = init_prompt_state(space, PromptMode.CLIP_HARD, 0, dims=TOY_DIMS, frozen_vocab=vocab)
    assert np.array_equal(state.phi.values, vocab)
    vocab[0, 0] = -1.0
    assert state.phi.values[0, 0] == 0.0

    with pytest.raises(ContractError):
        init_prompt_state(space, PromptMode.CLIP_HARD, 0, dims=TOY_DIMS, frozen_vocab=np.zeros((4, TOY_DIMS.width)))


def test_state_copy_is_independent():
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS)
    clone = state.copy()
    clone.phi.assign(np.zeros(clone.phi.shape))
    assert not np.array_equal(state.phi.values, clone.phi.values)
    assert clone.mode is state.mode and not clone.theta.frozen


# ── context assembly ──────────────────────────────────────────────────────────

def test_context_layout(toy_text):
    space = grid_space(2, 2)
    state = init_prompt_state(space, PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS, prompt_length=2)
    ctx, eos = build_context(1, 0, state, toy_text)
    rows = ctx.values
    special = toy_text.special.values
    assert eos == 5
    assert ctx.shape == (TOY_DIMS.context_length, TOY_DIMS.width)
    assert np.array_equal(rows[0], special[SOS])
    assert np.array_equal(rows[1:3], state.theta.values)
    assert np.array_equal(rows[3], state.phi.values[1])
    assert np.array_equal(rows[4], state.phi.values[2 + 0])
    assert np.array_equal(rows[5], special[EOS])
    assert np.array_equal(rows[6:], np.tile(special[PAD], (2, 1)))


def test_zero_length_context_layout(toy_text):
    state = init_prompt_state(grid_space(2, 2), PromptMode.CSP_SOFT_EMBEDDING, 0,
                              dims=TOY_DIMS, prompt_length=0)
    ctx, eos = build_context(0, 1, state, toy_text)
    assert eos == 3
    assert np.array_equal(ctx.values[1], state.phi.values[0])
    assert np.array_equal(ctx.values[2], state.phi.values[3])


def test_build_contexts_stacks_pairs(toy_text):
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS)
    pairs = [Pair(0, 0), Pair(1, 1), Pair(0, 1)]
    stacked, eos = build_contexts(pairs, state, toy_text)
    L = TOY_DIMS.context_length
    assert stacked.shape == (3 * L, TOY_DIMS.width)
    assert eos == [6, 6, 6]
    single, _ = build_context(1, 1, state, toy_text)
    assert np.array_equal(stacked.values[L:2 * L], single.values)


def test_gradient_reaches_only_used_embedding_rows(toy_text):
    space = grid_space(2, 2)
    state = init_prompt_state(space, PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS, prompt_length=2)
    tape = Tape()
    with tape:
        ctx, eos = build_contexts([Pair(0, 1)], state, toy_text)
        loss = sum(encode_texts(toy_text, ctx, eos))
    backward(loss)
    grad = state.phi.grad
    # attr 0 is row 0, object 1 is row |A| + 1 = 3
    assert np.any(grad[0] != 0) and np.any(grad[3] != 0)
    assert not np.any(grad[1]) and not np.any(grad[2])
    assert np.any(state.theta.grad != 0)


def test_frozen_blocks_get_no_gradient(toy_text):
    state = init_prompt_state(grid_space(2, 2), PromptMode.COOP_SOFT_PROMPT, 0, dims=TOY_DIMS)
    tape = Tape()
    with tape:
        ctx, eos = build_contexts([Pair(1, 0)], state, toy_text)
        loss = sum(encode_texts(toy_text, ctx, eos))
    backward(loss)
    assert state.phi.grad is None
    assert state.theta.grad is not None


def test_pair_outside_space(toy_text):
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0, dims=TOY_DIMS)
    with pytest.raises(FeatureLookupError):
        build_context(2, 0, state, toy_text)
    with pytest.raises(ContractError):
        build_contexts([], state, toy_text)


def test_encoder_width_mismatch(toy_text):
    dims = EncoderDims(width=32, blocks=1, heads=2, context_length=8, image_dim=8)
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0, dims=dims)
    with pytest.raises(ContractError, match='width'):
        build_context(0, 0, state, toy_text)


def test_context_that_no_longer_fits(toy_text):
    state = init_prompt_state(grid_space(2, 2), PromptMode.PROMPTCOMPVL, 0,
                              dims=EncoderDims(width=16, heads=2, context_length=16), prompt_length=6)
    with pytest.raises(ConfigurationError):
        build_context(0, 0, state, toy_text)
