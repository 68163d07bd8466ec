"""
Shared fixtures for promptcompvl tests.

Small encoder shapes keep every test well under a second; the synthetic
benchmark in test_benchmark.py uses the full default shapes.  When the
package is not installed, the CLI scripts directory is registered as
``_promptcompvl_scripts`` so tests/scripts can import it.
"""

import importlib.util
import os
import sys

import numpy as np
import pytest

from promptcompvl.autodiff import Tensor
from promptcompvl.data import CompositionSpace, Pair, Sample
from promptcompvl.encoders import EncoderDims, FrozenEncoders, ImageFeatureTable, init_frozen


# ── scripts package ───────────────────────────────────────────────────────────

def _register_scripts():
    if importlib.util.find_spec('_promptcompvl_scripts') is not None:
        return
    scripts_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'scripts')
    spec = importlib.util.spec_from_file_location(
        '_promptcompvl_scripts', os.path.join(scripts_dir, '__init__.py'),
        submodule_search_locations=[scripts_dir],
    )
    module = importlib.util.module_from_spec(spec)
    sys.modules['_promptcompvl_scripts'] = module
    spec.loader.exec_module(module)


_register_scripts()


# ── finite differences ────────────────────────────────────────────────────────

def numeric_grad(fn, values, h=1e-5):
    """Central-difference gradient of scalar ``fn(array)`` at ``values``."""
    values = np.array(values, dtype=np.float64)
    grad = np.zeros_like(values)
    it = np.nditer(values, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        plus = values.copy()
        plus[idx] += h
        minus = values.copy()
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def assert_close_relative(analytic, numeric, rtol=1e-4, atol=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    assert np.all(err <= rtol * scale + atol), f'max abs error {err.max():.3e}'


# ── toy composition space ─────────────────────────────────────────────────────

TOY_DIMS = EncoderDims(width=16, blocks=1, heads=2, context_length=8, image_dim=8)


def make_toy_space():
    """2 attributes × 2 objects; (blue, ball) is the only unseen pair."""
    seen = (Pair(0, 0), Pair(0, 1), Pair(1, 0))
    unseen = (Pair(1, 1),)
    return CompositionSpace(
        attributes=('red', 'blue'),
        objects=('car', 'ball'),
        train_pairs=seen,
        val_seen_pairs=(Pair(0, 0),),
        val_unseen_pairs=unseen,
        test_seen_pairs=(Pair(0, 1), Pair(1, 0)),
        test_unseen_pairs=unseen,
        train_samples=(
            Sample('tr0', 0, 0), Sample('tr1', 0, 1), Sample('tr2', 1, 0), Sample('tr3', 0, 0),
        ),
        val_samples=(Sample('va0', 0, 0), Sample('va1', 1, 1)),
        test_samples=(Sample('te0', 0, 1), Sample('te1', 1, 0), Sample('te2', 1, 1)),
    )


def make_features(space, image_dim, seed=0):
    rng = np.random.default_rng(seed)
    ids = [s.image_id for split in ('train', 'val', 'test') for s in space.samples(split)]
    return {i: rng.normal(size=image_dim) for i in ids}


def make_encoders(features, dims=TOY_DIMS, seed=0):
    text, projection = init_frozen(seed, dims)
    return FrozenEncoders(text=text, images=ImageFeatureTable(features=features, projection=projection))


@pytest.fixture
def toy_space():
    return make_toy_space()


@pytest.fixture
def toy_encoders(toy_space):
    return make_encoders(make_features(toy_space, TOY_DIMS.image_dim))


@pytest.fixture
def identity_projection():
    """image_dim == width identity projection, so image vectors equal normalised features."""
    return Tensor(np.eye(TOY_DIMS.width))


def make_grid_space(num_attrs, num_objs):
    """Every attribute × object pair is a training pair; no val/test pairs."""
    pairs = tuple(Pair(a, o) for a in range(num_attrs) for o in range(num_objs))
    return CompositionSpace(
        attributes=tuple(f'a{i}' for i in range(num_attrs)),
        objects=tuple(f'o{i}' for i in range(num_objs)),
        train_pairs=pairs,
        val_seen_pairs=(), val_unseen_pairs=(), test_seen_pairs=(), test_unseen_pairs=(),
    )
