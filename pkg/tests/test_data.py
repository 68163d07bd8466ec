# SPDX-License-Identifier: LGPL-3.0-or-later
"""Tests for CompositionSpace, split files, target sets and the synthetic generator."""

import os

import numpy as np
import pytest

from promptcompvl.data import (
    CompositionSpace,
    CzslSetting,
    Pair,
    Phase,
    Sample,
    SynthConfig,
    format_statistics,
    load_splits,
    pairs_for,
    samples_for,
    save_splits,
    space_statistics,
    synth_generate,
    target_set,
)
from promptcompvl.errors import ConfigurationError, DataValidationError, FeatureLookupError, GenerationError


def benchmark_shaped_space(num_attrs, num_objs, n_train, n_val, n_test, seed=0):
    """Space with real-benchmark split sizes: seen pairs drawn from train,
    unseen pairs from the rest of the grid."""
    order = np.random.default_rng(seed).permutation(num_attrs * num_objs)
    pairs = [Pair(*divmod(int(i), num_objs)) for i in order]
    train = pairs[:n_train]
    val_unseen = pairs[n_train:n_train + n_val]
    test_unseen = pairs[n_train + n_val:n_train + n_val + n_test]
    return CompositionSpace(
        attributes=tuple(f'a{i}' for i in range(num_attrs)),
        objects=tuple(f'o{i}' for i in range(num_objs)),
        train_pairs=tuple(sorted(train)),
        val_seen_pairs=tuple(sorted(train[:n_val])),
        val_unseen_pairs=tuple(sorted(val_unseen)),
        test_seen_pairs=tuple(sorted(train[:n_test])),
        test_unseen_pairs=tuple(sorted(test_unseen)),
    )


def write_split_dir(root, files):
    os.makedirs(root, exist_ok=True)
    for name, lines in files.items():
        with open(os.path.join(root, name), 'w') as f:
            f.write('\n'.join(lines) + '\n')


TOY_FILES = {
    'train_pairs.txt': ['red car', 'red ball', 'blue car'],
    'val_seen_pairs.txt': ['red car'],
    'val_unseen_pairs.txt': ['blue ball'],
    'test_seen_pairs.txt': ['red ball', 'blue car'],
    'test_unseen_pairs.txt': ['blue ball'],
    'samples.txt': [
        '# image attribute object split',
        'tr0 red car train',
        'tr1 red ball train',
        '',
        'va0 red car val',
        'va1 blue ball val',
        'te0 blue ball test',
    ],
}


def _write_benchmark_metadata(directory, num_attrs, num_objs, n_train, n_val, n_test, seed=0):
    """Split files in the combined val_pairs.txt / test_pairs.txt layout the
    public benchmark metadata uses; seen vs unseen follows train membership."""
    attrs = [f'attr{i:03d}' for i in range(num_attrs)]
    objs = [f'obj{i:03d}' for i in range(num_objs)]
    order = np.random.default_rng(seed).permutation(num_attrs * num_objs)
    names = [f'{attrs[i // num_objs]} {objs[i % num_objs]}' for i in order]
    train = names[:n_train]
    val = train[:n_val] + names[n_train:n_train + n_val]
    test = train[:n_test] + names[n_train + n_val:n_train + n_val + n_test]
    files = {
        'attrs.txt': attrs,
        'objs.txt': objs,
        'train_pairs.txt': train,
        'val_pairs.txt': val,
        'test_pairs.txt': test,
        'samples.txt': [f'img_tr {train[0]} train', f'img_va {val[-1]} val', f'img_te {test[0]} test'],
    }
    for name, lines in files.items():
        (directory / name).write_text('\n'.join(lines) + '\n')


# ── CompositionSpace ──────────────────────────────────────────────────────────

def test_mit_states_shaped_split_sizes(tmp_path):
    _write_benchmark_metadata(tmp_path, 115, 245, 1262, 300, 400)
    space = load_splits(tmp_path)
    stats = space_statistics(space)
    assert stats['# Attr.'] == 115
    assert stats['# Obj.'] == 245
    assert stats['# Attr. x Obj.'] == 28175
    assert stats['# Train Pair'] == 1262
    assert (stats['# Val. Seen Pair'], stats['# Val. Unseen Pair']) == (300, 300)
    assert (stats['# Test Seen Pair'], stats['# Test Unseen Pair']) == (400, 400)
    assert len(target_set(space, CzslSetting.GENERALIZED, Phase.TEST)) == 800
    assert len(target_set(space, CzslSetting.OPEN_WORLD, Phase.TEST)) == 28175
    assert len(target_set(space, CzslSetting.STANDARD, Phase.TEST)) == 400
    assert [len(space.samples(split)) for split in ('train', 'val', 'test')] == [1, 1, 1]


def test_ut_zappos_shaped_split_sizes():
    space = benchmark_shaped_space(16, 12, 83, 15, 18)
    assert space.num_attrs * space.num_objs == 192
    assert len(space.train_pairs) == 83
    assert len(target_set(space, CzslSetting.STANDARD, Phase.TEST)) == 18
    assert len(target_set(space, CzslSetting.GENERALIZED, Phase.VAL)) == 30


def test_target_sets_are_attribute_major(toy_space):
    assert target_set(toy_space, CzslSetting.OPEN_WORLD, Phase.VAL) == \
        (Pair(0, 0), Pair(0, 1), Pair(1, 0), Pair(1, 1))
    assert target_set(toy_space, CzslSetting.GENERALIZED, Phase.TEST) == \
        (Pair(0, 1), Pair(1, 0), Pair(1, 1))
    assert target_set(toy_space, CzslSetting.STANDARD, Phase.VAL) == (Pair(1, 1),)
    assert pairs_for(toy_space, Phase.VAL) == (Pair(0, 0), Pair(1, 1))


def test_lookups(toy_space):
    assert toy_space.attr_index('blue') == 1
    assert toy_space.obj_index('ball') == 1
    assert toy_space.pair_name(Pair(1, 0)) == 'blue car'
    assert toy_space.is_seen(Pair(0, 1)) and not toy_space.is_seen(Pair(1, 1))
    assert toy_space.num_primitives == 4
    assert samples_for(toy_space, 'val') == toy_space.val_samples
    assert samples_for(toy_space, Phase.TEST) == toy_space.test_samples
    with pytest.raises(FeatureLookupError, match='green'):
        toy_space.attr_index('green')
    with pytest.raises(FeatureLookupError):
        toy_space.obj_index('boat')
    with pytest.raises(ValueError):
        toy_space.samples('holdout')


def _space(**overrides):
    fields = dict(
        attributes=('red', 'blue'), objects=('car', 'ball'),
        train_pairs=(Pair(0, 0), Pair(0, 1), Pair(1, 0)),
        val_seen_pairs=(Pair(0, 0),), val_unseen_pairs=(Pair(1, 1),),
        test_seen_pairs=(), test_unseen_pairs=(Pair(1, 1),),
    )
    fields.update(overrides)
    return CompositionSpace(**fields)


@pytest.mark.parametrize('overrides, message', [
    ({'attributes': ('red', 'red')}, 'duplicate attribute'),
    ({'train_pairs': (Pair(0, 0), Pair(0, 0))}, 'duplicate pair'),
    ({'train_pairs': (Pair(0, 0), Pair(2, 0))}, 'outside'),
    ({'val_seen_pairs': (Pair(1, 1),), 'val_unseen_pairs': (Pair(1, 1),)}, 'both seen and unseen'),
    ({'test_unseen_pairs': (Pair(0, 1),)}, 'is a training pair'),
    ({'val_seen_pairs': (Pair(1, 1),), 'val_unseen_pairs': ()}, 'not a training pair'),
    ({'val_samples': (Sample('x', 0, 1),)}, 'not a val pair'),
    ({'train_samples': (Sample('x', 1, 1),)}, 'not a train pair'),
])
def test_space_validation(overrides, message):
    with pytest.raises(DataValidationError, match=message):
        _space(**overrides)


# ── split files ───────────────────────────────────────────────────────────────

def test_load_splits(tmp_path):
    write_split_dir(tmp_path, TOY_FILES)
    space = load_splits(tmp_path)
    # no vocab files: sorted union of the names used
    assert space.attributes == ('blue', 'red')
    assert space.objects == ('ball', 'car')
    assert space.pair_name(space.val_unseen_pairs[0]) == 'blue ball'
    assert [s.image_id for s in space.train_samples] == ['tr0', 'tr1']
    assert len(space.val_samples) == 2


def test_load_splits_uses_vocab_files(tmp_path):
    files = dict(TOY_FILES, **{'attrs.txt': ['red', 'blue', 'green'], 'objs.txt': ['car', 'ball']})
    write_split_dir(tmp_path, files)
    space = load_splits(tmp_path)
    assert space.attributes == ('red', 'blue', 'green')
    assert len(target_set(space, CzslSetting.OPEN_WORLD, Phase.TEST)) == 6


def test_load_splits_combined_phase_files(tmp_path):
    files = {k: v for k, v in TOY_FILES.items() if not k.startswith(('val_', 'test_'))}
    files['val_pairs.txt'] = ['red car', 'blue ball']
    files['test_pairs.txt'] = ['red ball', 'blue car', 'blue ball']
    write_split_dir(tmp_path, files)
    combined = load_splits(tmp_path)

    write_split_dir(tmp_path / 'separate', TOY_FILES)
    assert combined == load_splits(tmp_path / 'separate')


def test_save_load_round_trip(tmp_path, toy_space):
    save_splits(toy_space, tmp_path)
    assert load_splits(tmp_path) == toy_space
    assert (tmp_path / 'test_unseen_pairs.txt').read_text() == 'blue ball\n'


def test_synthetic_save_load_round_trip(tmp_path):
    space = synth_generate(SynthConfig(num_attrs=4, num_objs=5, images_per_pair=3, seed=1)).space
    save_splits(space, tmp_path / 'synth')
    assert load_splits(tmp_path / 'synth') == space


def _expect_error(tmp_path, files, match, filename, lineno):
    write_split_dir(tmp_path, files)
    with pytest.raises(DataValidationError, match=match) as exc:
        load_splits(tmp_path)
    assert os.path.basename(exc.value.path) == filename
    assert exc.value.lineno == lineno


def test_unknown_attribute_names_file_and_line(tmp_path):
    files = dict(TOY_FILES, **{'attrs.txt': ['red', 'blue'], 'objs.txt': ['car', 'ball'],
                               'test_seen_pairs.txt': ['red ball', 'wet car']})
    _expect_error(tmp_path, files, "unknown attribute 'wet'", 'test_seen_pairs.txt', 2)


def test_pair_both_seen_and_unseen(tmp_path):
    files = dict(TOY_FILES, **{'val_unseen_pairs.txt': ['blue ball', 'red car']})
    _expect_error(tmp_path, files, 'both seen and unseen', 'val_unseen_pairs.txt', 2)


def test_unseen_pair_in_training(tmp_path):
    files = dict(TOY_FILES, **{'test_unseen_pairs.txt': ['blue ball', 'red car']})
    _expect_error(tmp_path, files, 'is a training pair', 'test_unseen_pairs.txt', 2)


def test_seen_pair_not_in_training(tmp_path):
    files = dict(TOY_FILES, **{'val_seen_pairs.txt': ['red car', 'blue ball'],
                               'val_unseen_pairs.txt': []})
    _expect_error(tmp_path, files, 'not a training pair', 'val_seen_pairs.txt', 2)


def test_sample_outside_its_split(tmp_path):
    files = dict(TOY_FILES, **{'samples.txt': ['tr0 red car train', 'tr1 blue ball train']})
    _expect_error(tmp_path, files, 'not a train pair', 'samples.txt', 2)


def test_duplicate_image_id(tmp_path):
    files = dict(TOY_FILES, **{'samples.txt': ['tr0 red car train', 'tr0 red ball train']})
    _expect_error(tmp_path, files, 'duplicate image id', 'samples.txt', 2)


def test_unknown_sample_split(tmp_path):
    files = dict(TOY_FILES, **{'samples.txt': ['x red car holdout']})
    _expect_error(tmp_path, files, 'unknown split', 'samples.txt', 1)


def test_malformed_line(tmp_path):
    files = dict(TOY_FILES, **{'train_pairs.txt': ['red car', 'red ball extra', 'blue car']})
    _expect_error(tmp_path, files, 'expected 2', 'train_pairs.txt', 2)


def test_duplicate_pair_line(tmp_path):
    files = dict(TOY_FILES, **{'train_pairs.txt': ['red car', 'red ball', 'red car', 'blue car']})
    _expect_error(tmp_path, files, 'duplicate pair', 'train_pairs.txt', 3)


def test_missing_train_file(tmp_path):
    with pytest.raises(OSError):
        load_splits(tmp_path)


# ── statistics ────────────────────────────────────────────────────────────────

def test_statistics_order_and_format(toy_space):
    stats = space_statistics(toy_space)
    assert list(stats) == [
        '# Attr.', '# Obj.', '# Attr. x Obj.', '# Train Pair', '# Train Img.',
        '# Val. Seen Pair', '# Val. Unseen Pair', '# Val. Img.',
        '# Test Seen Pair', '# Test Unseen Pair', '# Test Img.',
    ]
    assert stats['# Train Img.'] == 4
    assert stats['# Test Img.'] == 3
    lines = format_statistics(toy_space, 'toy').splitlines()
    assert len(lines) == 12
    assert lines[0].strip() == 'toy'
    assert lines[1].split() == ['#', 'Attr.', '2']


# ── synthetic generator ───────────────────────────────────────────────────────

def test_synth_defaults():
    data = synth_generate(SynthConfig())
    space = data.space
    assert (space.num_attrs, space.num_objs) == (8, 8)
    assert len(space.val_unseen_pairs) == 8
    assert len(space.test_unseen_pairs) == 8
    assert len(space.train_pairs) == 48
    assert len(data.features) == 64 * 20
    assert len(space.train_samples) == 48 * 12
    assert len(space.val_samples) == 48 * 4 + 8 * 20
    assert len(space.test_samples) == 48 * 4 + 8 * 20
    assert all(v.shape == (32,) for v in data.features.values())
    assert space.val_seen_pairs == space.train_pairs


def test_synth_keeps_every_primitive_seen():
    for seed in range(10):
        space = synth_generate(SynthConfig(num_attrs=5, num_objs=4, unseen_fraction=0.4,
                                           images_per_pair=2, seed=seed)).space
        assert {p.attr for p in space.train_pairs} == set(range(5))
        assert {p.obj for p in space.train_pairs} == set(range(4))


def test_synth_is_deterministic():
    cfg = SynthConfig(num_attrs=3, num_objs=4, images_per_pair=3, seed=9)
    a, b = synth_generate(cfg), synth_generate(cfg)
    assert a.space == b.space
    assert list(a.features) == list(b.features)
    assert all(a.features[k].tobytes() == b.features[k].tobytes() for k in a.features)
    c = synth_generate(SynthConfig(num_attrs=3, num_objs=4, images_per_pair=3, seed=10))
    assert any(not np.array_equal(a.features[k], c.features[k]) for k in a.features)


def test_synth_features_are_additive_without_noise():
    data = synth_generate(SynthConfig(num_attrs=3, num_objs=3, noise=0.0, images_per_pair=1,
                                      unseen_fraction=0.25, seed=2))
    f = {(s.attr, s.obj): data.features[s.image_id]
         for split in ('train', 'val', 'test') for s in data.space.samples(split)}
    assert np.allclose(f[0, 0] + f[1, 2], f[0, 2] + f[1, 0], atol=1e-12)
    assert 'img_attr00_obj00_000' in data.features


@pytest.mark.parametrize('kwargs', [
    {'num_attrs': 2, 'num_objs': 2, 'unseen_fraction': 0.25},   # one unseen pair
    {'num_attrs': 2, 'num_objs': 2, 'unseen_fraction': 0.75},   # a primitive loses all seen pairs
])
def test_synth_generation_errors(kwargs):
    with pytest.raises(GenerationError):
        synth_generate(SynthConfig(**kwargs))


@pytest.mark.parametrize('kwargs', [
    {'unseen_fraction': 1.0},
    {'unseen_fraction': 0.0},
    {'noise': -0.1},
    {'images_per_pair': 0},
])
def test_synth_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SynthConfig(**kwargs)
