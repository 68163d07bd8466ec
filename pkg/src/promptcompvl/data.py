# Composition space, split files, CZSL target sets and the synthetic generator.
#
# Split-file layout (UTF-8, one record per line, '#' comments allowed):
#   attrs.txt, objs.txt            optional vocabularies, one name per line
#   train_pairs.txt                "attribute object"
#   val_seen_pairs.txt, val_unseen_pairs.txt, test_seen_pairs.txt,
#   test_unseen_pairs.txt          "attribute object"
#   samples.txt                    "image_id attribute object split"
#
# The combined de-facto files val_pairs.txt / test_pairs.txt are accepted in
# place of the seen/unseen pair files; seen membership is then membership in
# train_pairs.txt.
#
# Tests are in tests/test_data.py.
from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
import enum
import logging
import os
from typing import NamedTuple

import numpy as np

from .autodiff import FloatArray
from .errors import ConfigurationError, DataValidationError, FeatureLookupError, GenerationError
from .io import atomic_write


__all__ = [
    "ATTRS_FILE",
    "OBJS_FILE",
    "SAMPLES_FILE",
    "CompositionSpace",
    "CzslSetting",
    "Pair",
    "Phase",
    "Sample",
    "SynthConfig",
    "SynthDataset",
    "format_statistics",
    "load_splits",
    "pairs_for",
    "samples_for",
    "save_splits",
    "space_statistics",
    "synth_generate",
    "target_set",
]

logger = logging.getLogger(__name__)

ATTRS_FILE = 'attrs.txt'
OBJS_FILE = 'objs.txt'
SAMPLES_FILE = 'samples.txt'
TRAIN_PAIRS_FILE = 'train_pairs.txt'
_SPLIT_PAIR_FILES = {
    ('val', True): 'val_seen_pairs.txt',
    ('val', False): 'val_unseen_pairs.txt',
    ('test', True): 'test_seen_pairs.txt',
    ('test', False): 'test_unseen_pairs.txt',
}
_COMBINED_PAIR_FILES = {'val': 'val_pairs.txt', 'test': 'test_pairs.txt'}


class Pair(NamedTuple):
    """Attribute-object composition, as indices into the space vocabularies."""
    attr: int
    obj: int


class Sample(NamedTuple):
    image_id: str
    attr: int
    obj: int

    @property
    def pair(self) -> Pair:
        return Pair(self.attr, self.obj)


class CzslSetting(enum.Enum):
    STANDARD = 'standard'        # target = unseen pairs of the phase
    GENERALIZED = 'generalized'  # target = seen ∪ unseen pairs of the phase
    OPEN_WORLD = 'open_world'    # target = every attribute × object


class Phase(enum.Enum):
    VAL = 'val'
    TEST = 'test'


def _sorted_pairs(pairs: Iterable[Pair]) -> tuple[Pair, ...]:
    return tuple(sorted(Pair(*p) for p in pairs))


@dataclass(frozen=True, slots=True)
class CompositionSpace:
    """Vocabularies, pair splits and image samples of one CZSL dataset.

    Pair tuples are kept sorted attribute-major.  Construction validates every
    invariant and raises DataValidationError on the first violation.
    """

    attributes: tuple[str, ...]
    objects: tuple[str, ...]
    train_pairs: tuple[Pair, ...]
    val_seen_pairs: tuple[Pair, ...]
    val_unseen_pairs: tuple[Pair, ...]
    test_seen_pairs: tuple[Pair, ...]
    test_unseen_pairs: tuple[Pair, ...]
    train_samples: tuple[Sample, ...] = ()
    val_samples: tuple[Sample, ...] = ()
    test_samples: tuple[Sample, ...] = ()
    _attr_index: dict[str, int] = field(init=False, repr=False, compare=False)
    _obj_index: dict[str, int] = field(init=False, repr=False, compare=False)
    _train: frozenset[Pair] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, '_attr_index', {n: i for i, n in enumerate(self.attributes)})
        object.__setattr__(self, '_obj_index', {n: i for i, n in enumerate(self.objects)})
        object.__setattr__(self, '_train', frozenset(self.train_pairs))
        if len(self._attr_index) != len(self.attributes):
            raise DataValidationError('duplicate attribute name')
        if len(self._obj_index) != len(self.objects):
            raise DataValidationError('duplicate object name')

        for name in ('train_pairs', 'val_seen_pairs', 'val_unseen_pairs',
                     'test_seen_pairs', 'test_unseen_pairs'):
            pairs = getattr(self, name)
            if len(set(pairs)) != len(pairs):
                raise DataValidationError(f'{name} contains a duplicate pair')
            for p in pairs:
                if not (0 <= p.attr < self.num_attrs and 0 <= p.obj < self.num_objs):
                    raise DataValidationError(f'{name}: pair {tuple(p)} outside the attribute × object grid')

        train = set(self.train_pairs)
        for phase in Phase:
            seen, unseen = set(self.seen_pairs(phase)), set(self.unseen_pairs(phase))
            overlap = seen & unseen
            if overlap:
                raise DataValidationError(
                    f'{phase.value}: pair {self.pair_name(min(overlap))!r} is both seen and unseen'
                )
            if unseen & train:
                raise DataValidationError(
                    f'{phase.value}: unseen pair {self.pair_name(min(unseen & train))!r} is a training pair'
                )
            if seen - train:
                raise DataValidationError(
                    f'{phase.value}: seen pair {self.pair_name(min(seen - train))!r} is not a training pair'
                )

        for split, allowed in (('train', train),
                               ('val', set(self.phase_pairs(Phase.VAL))),
                               ('test', set(self.phase_pairs(Phase.TEST)))):
            for s in self.samples(split):
                if s.pair not in allowed:
                    raise DataValidationError(
                        f'{split} sample {s.image_id!r} is labelled {self.pair_name(s.pair)!r}, '
                        f'which is not a {split} pair'
                    )

    @property
    def num_attrs(self) -> int:
        return len(self.attributes)

    @property
    def num_objs(self) -> int:
        return len(self.objects)

    @property
    def num_primitives(self) -> int:
        return self.num_attrs + self.num_objs

    def all_pairs(self) -> tuple[Pair, ...]:
        """Full attribute × object product, attribute-major."""
        return tuple(Pair(a, o) for a in range(self.num_attrs) for o in range(self.num_objs))

    def seen_pairs(self, phase: Phase) -> tuple[Pair, ...]:
        return self.val_seen_pairs if phase is Phase.VAL else self.test_seen_pairs

    def unseen_pairs(self, phase: Phase) -> tuple[Pair, ...]:
        return self.val_unseen_pairs if phase is Phase.VAL else self.test_unseen_pairs

    def phase_pairs(self, phase: Phase) -> tuple[Pair, ...]:
        return _sorted_pairs(set(self.seen_pairs(phase)) | set(self.unseen_pairs(phase)))

    def samples(self, split: str | Phase) -> tuple[Sample, ...]:
        key = split.value if isinstance(split, Phase) else split
        if key == 'train':
            return self.train_samples
        if key == 'val':
            return self.val_samples
        if key == 'test':
            return self.test_samples
        raise ValueError(f'{split}: unknown split')

    def attr_index(self, name: str) -> int:
        try:
            return self._attr_index[name]
        except KeyError:
            raise FeatureLookupError('attribute', name) from None

    def obj_index(self, name: str) -> int:
        try:
            return self._obj_index[name]
        except KeyError:
            raise FeatureLookupError('object', name) from None

    def pair_name(self, pair: Pair) -> str:
        return f'{self.attributes[pair.attr]} {self.objects[pair.obj]}'

    def is_seen(self, pair: Pair) -> bool:
        """True for a training (seen) pair."""
        return pair in self._train


def pairs_for(space: CompositionSpace, phase: Phase) -> tuple[Pair, ...]:
    """Seen ∪ unseen pairs of a phase, attribute-major."""
    return space.phase_pairs(phase)


def samples_for(space: CompositionSpace, split: str | Phase) -> tuple[Sample, ...]:
    return space.samples(split)


def target_set(space: CompositionSpace, setting: CzslSetting, phase: Phase) -> tuple[Pair, ...]:
    """Candidate labels for one evaluation phase, attribute-major.

    standard → the phase's unseen pairs; generalized → its seen ∪ unseen
    pairs; open_world → the whole attribute × object product.
    """
    if setting is CzslSetting.STANDARD:
        return space.unseen_pairs(phase)
    if setting is CzslSetting.GENERALIZED:
        return space.phase_pairs(phase)
    return space.all_pairs()


# ── Split files ──────────────────────────────────────────────────────────────


def _records(path: str, fields: int) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split()
            if len(parts) != fields:
                raise DataValidationError(
                    f'expected {fields} whitespace-separated fields, found {len(parts)}', path, lineno
                )
            yield lineno, parts


def _read_vocab(path: str) -> tuple[str, ...]:
    names = []
    for lineno, (name,) in _records(path, 1):
        if name in names:
            raise DataValidationError(f'duplicate name {name!r}', path, lineno)
        names.append(name)
    return tuple(names)


def _read_pair_names(path: str) -> list[tuple[int, str, str]]:
    out = []
    seen: set[tuple[str, str]] = set()
    for lineno, (attr, obj) in _records(path, 2):
        if (attr, obj) in seen:
            raise DataValidationError(f'duplicate pair {attr} {obj}', path, lineno)
        seen.add((attr, obj))
        out.append((lineno, attr, obj))
    return out


def load_splits(metadata_path: str | os.PathLike[str]) -> CompositionSpace:
    """Load and validate a CompositionSpace from a split-file directory.

    Args:
        metadata_path: Directory containing the split files described at the
            top of this module.

    Returns:
        Validated CompositionSpace.

    Raises:
        DataValidationError: On malformed lines, unknown concept names,
            overlapping seen/unseen pairs or samples outside their split;
            carries the offending file and line where one exists.
        OSError: If a required file cannot be read.
    """
    root = os.fspath(metadata_path)

    def path_of(name: str) -> str:
        return os.path.join(root, name)

    train_raw = _read_pair_names(path_of(TRAIN_PAIRS_FILE))
    phase_raw: dict[tuple[str, bool], tuple[str, list[tuple[int, str, str]]]] = {}
    for phase in ('val', 'test'):
        seen_file = path_of(_SPLIT_PAIR_FILES[(phase, True)])
        unseen_file = path_of(_SPLIT_PAIR_FILES[(phase, False)])
        if os.path.exists(seen_file) or os.path.exists(unseen_file):
            phase_raw[(phase, True)] = (seen_file, _read_pair_names(seen_file))
            phase_raw[(phase, False)] = (unseen_file, _read_pair_names(unseen_file))
        else:
            combined = path_of(_COMBINED_PAIR_FILES[phase])
            train_names = {(a, o) for _, a, o in train_raw}
            rows = _read_pair_names(combined)
            phase_raw[(phase, True)] = (combined, [r for r in rows if (r[1], r[2]) in train_names])
            phase_raw[(phase, False)] = (combined, [r for r in rows if (r[1], r[2]) not in train_names])

    all_rows = [(TRAIN_PAIRS_FILE, r) for r in train_raw]
    for src, rows in phase_raw.values():
        all_rows.extend((src, r) for r in rows)

    if os.path.exists(path_of(ATTRS_FILE)):
        attributes = _read_vocab(path_of(ATTRS_FILE))
    else:
        attributes = tuple(sorted({r[1] for _, r in all_rows}))
    if os.path.exists(path_of(OBJS_FILE)):
        objects = _read_vocab(path_of(OBJS_FILE))
    else:
        objects = tuple(sorted({r[2] for _, r in all_rows}))
    attr_index = {n: i for i, n in enumerate(attributes)}
    obj_index = {n: i for i, n in enumerate(objects)}

    def resolve(src: str, lineno: int, attr: str, obj: str) -> Pair:
        if attr not in attr_index:
            raise DataValidationError(f'unknown attribute {attr!r}', src, lineno)
        if obj not in obj_index:
            raise DataValidationError(f'unknown object {obj!r}', src, lineno)
        return Pair(attr_index[attr], obj_index[obj])

    train_pairs = _sorted_pairs(resolve(path_of(TRAIN_PAIRS_FILE), *r) for r in train_raw)
    train_set = set(train_pairs)
    located: dict[tuple[str, bool], list[tuple[str, int, Pair]]] = {
        key: [(src, r[0], resolve(src, *r)) for r in rows] for key, (src, rows) in phase_raw.items()
    }

    def name_of(p: Pair) -> str:
        return f'{attributes[p.attr]} {objects[p.obj]}'

    for phase in ('val', 'test'):
        seen_here = {p for _, _, p in located[(phase, True)]}
        for src, lineno, p in located[(phase, False)]:
            if p in seen_here:
                raise DataValidationError(f'{phase} pair {name_of(p)!r} is declared both seen and unseen',
                                          src, lineno)
            if p in train_set:
                raise DataValidationError(f'unseen pair {name_of(p)!r} is a training pair', src, lineno)
        for src, lineno, p in located[(phase, True)]:
            if p not in train_set:
                raise DataValidationError(f'seen pair {name_of(p)!r} is not a training pair', src, lineno)
    declared = {key: _sorted_pairs(p for _, _, p in rows) for key, rows in located.items()}
    allowed = {
        'train': train_set,
        'val': set(declared[('val', True)]) | set(declared[('val', False)]),
        'test': set(declared[('test', True)]) | set(declared[('test', False)]),
    }

    samples: dict[str, list[Sample]] = {'train': [], 'val': [], 'test': []}
    samples_path = path_of(SAMPLES_FILE)
    if os.path.exists(samples_path):
        ids: set[str] = set()
        for lineno, (image_id, attr, obj, split) in _records(samples_path, 4):
            if split not in samples:
                raise DataValidationError(f'unknown split {split!r}', samples_path, lineno)
            if image_id in ids:
                raise DataValidationError(f'duplicate image id {image_id!r}', samples_path, lineno)
            ids.add(image_id)
            p = resolve(samples_path, lineno, attr, obj)
            if p not in allowed[split]:
                raise DataValidationError(
                    f'sample {image_id!r} labelled {attr} {obj} is not a {split} pair', samples_path, lineno
                )
            samples[split].append(Sample(image_id, p.attr, p.obj))

    space = CompositionSpace(
        attributes=attributes,
        objects=objects,
        train_pairs=train_pairs,
        val_seen_pairs=declared[('val', True)],
        val_unseen_pairs=declared[('val', False)],
        test_seen_pairs=declared[('test', True)],
        test_unseen_pairs=declared[('test', False)],
        train_samples=tuple(sorted(samples['train'])),
        val_samples=tuple(sorted(samples['val'])),
        test_samples=tuple(sorted(samples['test'])),
    )
    logger.debug('loaded composition space from %s: %d attributes, %d objects, %d train pairs',
                 root, space.num_attrs, space.num_objs, len(space.train_pairs))
    return space


def save_splits(space: CompositionSpace, directory: str | os.PathLike[str]) -> None:
    """Write ``space`` as split files; load_splits() reads it back unchanged."""
    root = os.fspath(directory)
    os.makedirs(root, exist_ok=True)

    def write_lines(name: str, lines: Iterable[str]) -> None:
        with atomic_write(os.path.join(root, name)) as f:
            for line in lines:
                f.write(line + '\n')

    write_lines(ATTRS_FILE, space.attributes)
    write_lines(OBJS_FILE, space.objects)
    write_lines(TRAIN_PAIRS_FILE, (space.pair_name(p) for p in space.train_pairs))
    for phase in Phase:
        write_lines(_SPLIT_PAIR_FILES[(phase.value, True)],
                    (space.pair_name(p) for p in space.seen_pairs(phase)))
        write_lines(_SPLIT_PAIR_FILES[(phase.value, False)],
                    (space.pair_name(p) for p in space.unseen_pairs(phase)))
    write_lines(SAMPLES_FILE, (
        f'{s.image_id} {space.pair_name(s.pair)} {split}'
        for split in ('train', 'val', 'test')
        for s in space.samples(split)
    ))


# ── Statistics ───────────────────────────────────────────────────────────────


def space_statistics(space: CompositionSpace) -> dict[str, int]:
    """Dataset split statistics, keyed and ordered as the usual CZSL table."""
    return {
        '# Attr.': space.num_attrs,
        '# Obj.': space.num_objs,
        '# Attr. x Obj.': space.num_attrs * space.num_objs,
        '# Train Pair': len(space.train_pairs),
        '# Train Img.': len(space.train_samples),
        '# Val. Seen Pair': len(space.val_seen_pairs),
        '# Val. Unseen Pair': len(space.val_unseen_pairs),
        '# Val. Img.': len(space.val_samples),
        '# Test Seen Pair': len(space.test_seen_pairs),
        '# Test Unseen Pair': len(space.test_unseen_pairs),
        '# Test Img.': len(space.test_samples),
    }


def format_statistics(space: CompositionSpace, name: str = 'dataset') -> str:
    stats = space_statistics(space)
    width = max(len(k) for k in stats)
    lines = [f'{"":<{width}}  {name}']
    lines.extend(f'{k:<{width}}  {v}' for k, v in stats.items())
    return '\n'.join(lines)


# ── Synthetic generator ──────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class SynthConfig:
    """Parameters of the synthetic additive-prototype dataset.

    Attributes:
        num_attrs, num_objs: Vocabulary sizes |A| and |O|.
        image_dim: Feature dimension d_img.
        noise: Standard deviation σ of per-dimension Gaussian feature noise.
        images_per_pair: Images generated for every pair.
        unseen_fraction: Fraction of pairs withheld from training, in (0, 1).
        seed: RNG seed.
    """

    num_attrs: int = 8
    num_objs: int = 8
    image_dim: int = 32
    noise: float = 0.05
    images_per_pair: int = 20
    unseen_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ('num_attrs', 'num_objs', 'image_dim', 'images_per_pair'):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f'{name} must be positive, got {getattr(self, name)}')
        if self.noise < 0:
            raise ConfigurationError(f'noise must be >= 0, got {self.noise}')
        if not 0.0 < self.unseen_fraction < 1.0:
            raise ConfigurationError(f'unseen_fraction must lie in (0, 1), got {self.unseen_fraction}')

    @property
    def num_unseen(self) -> int:
        """Pairs withheld from training: unseen_fraction × |A|·|O|, rounded."""
        return int(round(self.unseen_fraction * self.num_attrs * self.num_objs))


@dataclass(frozen=True, slots=True)
class SynthDataset:
    space: CompositionSpace
    features: dict[str, FloatArray]


def _prototypes(rng: np.random.Generator, count: int, dim: int) -> FloatArray:
    raw = rng.normal(size=(dim, count))
    if count <= dim:
        q, r = np.linalg.qr(raw)
        # Fix column signs so the factorisation is unique.
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return np.ascontiguousarray(q.T)
    vecs = raw.T
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def synth_generate(config: SynthConfig) -> SynthDataset:
    """Generate a separable CZSL dataset with additive structure.

    Each attribute a and object o gets a unit prototype (mutually orthogonal
    when |A|+|O| ≤ d_img); an image of pair (a, o) has feature
    ``p_a + q_o + N(0, σ²)``.  ``num_unseen`` pairs are withheld from training
    and split between validation (first half) and test (rest); every seen pair
    contributes images to all three splits (60/20/20).

    Raises:
        GenerationError: If the unseen pairs cannot be chosen while every
            primitive keeps at least one seen pair, or fewer than two pairs
            would be unseen.
    """
    rng = np.random.default_rng(config.seed)
    na, no = config.num_attrs, config.num_objs
    n_unseen = config.num_unseen
    if n_unseen < 2:
        raise GenerationError(f'{n_unseen} unseen pairs; need at least one for val and one for test')
    if n_unseen > na * no - max(na, no):
        raise GenerationError(f'cannot withhold {n_unseen} of {na * no} pairs and keep every primitive seen')

    attrs = tuple(f'attr{i:02d}' for i in range(na))
    objs = tuple(f'obj{i:02d}' for i in range(no))
    protos = _prototypes(rng, na + no, config.image_dim)
    attr_protos, obj_protos = protos[:na], protos[na:]

    order = rng.permutation(na * no)
    attr_left = np.full(na, no)
    obj_left = np.full(no, na)
    unseen: list[Pair] = []
    for flat in order:
        if len(unseen) == n_unseen:
            break
        a, o = divmod(int(flat), no)
        if attr_left[a] > 1 and obj_left[o] > 1:
            attr_left[a] -= 1
            obj_left[o] -= 1
            unseen.append(Pair(a, o))
    if len(unseen) < n_unseen:
        raise GenerationError(f'only {len(unseen)} of {n_unseen} pairs could be withheld')
    if (attr_left == 0).any() or (obj_left == 0).any():
        raise GenerationError('a primitive is absent from every seen pair')

    half = n_unseen // 2
    val_unseen = _sorted_pairs(unseen[:half])
    test_unseen = _sorted_pairs(unseen[half:])
    unseen_set = set(unseen)
    train_pairs = tuple(p for p in (Pair(a, o) for a in range(na) for o in range(no))
                        if p not in unseen_set)

    features: dict[str, FloatArray] = {}
    samples: dict[str, list[Sample]] = {'train': [], 'val': [], 'test': []}
    n_img = config.images_per_pair
    n_train = max(1, (3 * n_img) // 5)
    n_val = (n_img - n_train) // 2
    for a in range(na):
        for o in range(no):
            pair = Pair(a, o)
            noise = rng.normal(0.0, config.noise, size=(n_img, config.image_dim)) if config.noise > 0 \
                else np.zeros((n_img, config.image_dim))
            for n in range(n_img):
                image_id = f'img_{attrs[a]}_{objs[o]}_{n:03d}'
                features[image_id] = attr_protos[a] + obj_protos[o] + noise[n]
                if pair in unseen_set:
                    split = 'val' if pair in val_unseen else 'test'
                elif n < n_train:
                    split = 'train'
                elif n < n_train + n_val:
                    split = 'val'
                else:
                    split = 'test'
                samples[split].append(Sample(image_id, a, o))

    val_seen = _sorted_pairs({s.pair for s in samples['val']} - unseen_set)
    test_seen = _sorted_pairs({s.pair for s in samples['test']} - unseen_set)
    space = CompositionSpace(
        attributes=attrs,
        objects=objs,
        train_pairs=train_pairs,
        val_seen_pairs=val_seen,
        val_unseen_pairs=val_unseen,
        test_seen_pairs=test_seen,
        test_unseen_pairs=test_unseen,
        train_samples=tuple(sorted(samples['train'])),
        val_samples=tuple(sorted(samples['val'])),
        test_samples=tuple(sorted(samples['test'])),
    )
    logger.info('generated synthetic space: %d x %d, %d unseen pairs, %d images',
                na, no, n_unseen, len(features))
    return SynthDataset(space=space, features=features)
