# Generalized and open-world CZSL metrics.
#
# A calibration bias c is added to every unseen-pair score; sweeping c trades
# seen accuracy for unseen accuracy.  For one image only the gap between its
# best seen score and its best unseen score matters: the image switches from a
# seen prediction to an unseen one exactly when c reaches that gap.  The sweep
# therefore evaluates every candidate bias exactly instead of on a grid.
#
# Tests are in tests/test_evaluation.py.
from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
import logging
from typing import NamedTuple
import warnings

import numpy as np
import numpy.typing as npt

from .autodiff import FloatArray, Parameter, Tensor
from .data import CompositionSpace, CzslSetting, Pair, Phase, target_set
from .errors import ConfigurationError, ContractError, DataValidationError
from .model import ModelSnapshot, logits, text_matrix


__all__ = [
    "MIT_STATES_THRESHOLD",
    "UT_ZAPPOS_THRESHOLD",
    "CurvePoint",
    "EvalReport",
    "FeasibilityScores",
    "bias_sweep",
    "evaluate",
    "feasibility_scores",
    "format_report",
    "parse_report",
    "score_matrix",
    "summarize",
    "tune_feasibility_threshold",
]

logger = logging.getLogger(__name__)

# Tuned open-world thresholds for the two real benchmarks.
MIT_STATES_THRESHOLD = 0.40691
UT_ZAPPOS_THRESHOLD = 0.5299


class CurvePoint(NamedTuple):
    bias: float
    seen_acc: float
    unseen_acc: float

    @property
    def harmonic_mean(self) -> float:
        s, u = self.seen_acc, self.unseen_acc
        return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


@dataclass(frozen=True, slots=True)
class EvalReport:
    """Metrics of one evaluation pass.

    S, U and HM are maximised independently along the curve, so they may come
    from different biases.
    """

    setting: CzslSetting
    phase: Phase
    S: float
    U: float
    HM: float
    AUC: float
    curve: tuple[CurvePoint, ...]
    threshold: float | None = None
    flagged: tuple[str, ...] = ()

    @property
    def best_hm_point(self) -> CurvePoint:
        """First curve point reaching the best harmonic mean."""
        return max(self.curve, key=lambda p: p.harmonic_mean)


# ── Scores ───────────────────────────────────────────────────────────────────


def score_matrix(snapshot: ModelSnapshot, image_ids: Sequence[str], target_pairs: Sequence[Pair],
                 mask: npt.ArrayLike | None = None, *, texts: Tensor | None = None) -> Tensor:
    """N_img×P matrix of cosine/τ scores; masked columns hold -inf.

    Args:
        snapshot: Model to score with.
        image_ids: Images, one row each.
        target_pairs: Candidate pairs, one column each.
        mask: Optional length-P boolean array, True where a pair is masked.
        texts: Precomputed text_matrix(target_pairs).
    """
    if texts is None:
        texts = text_matrix(target_pairs, snapshot)
    scores = logits(snapshot.encoders.image_matrix(image_ids), texts, snapshot.tau).values
    if mask is not None:
        masked = np.asarray(mask, dtype=bool)
        if masked.shape != (len(target_pairs),):
            raise ContractError(f'mask has shape {masked.shape}, expected ({len(target_pairs)},)')
        scores = np.where(masked[None, :], -np.inf, scores)
    return Tensor(scores)


def _group_best(scores: FloatArray, columns: npt.NDArray[np.bool_]) -> tuple[FloatArray, npt.NDArray[np.intp]]:
    # Best score and (lowest) best column inside the selected column group.
    restricted = np.where(columns[None, :], scores, -np.inf)
    best_col = np.argmax(restricted, axis=1)
    return restricted[np.arange(scores.shape[0]), best_col], best_col


def bias_sweep(scores: Tensor | npt.ArrayLike, truth: Sequence[int],
               seen_flags: Sequence[bool]) -> tuple[CurvePoint, ...]:
    """Seen/unseen accuracy for every distinct calibration bias.

    Candidate biases are -inf plus, for every image, the gap between its best
    seen score and each finite unseen score; duplicates are removed and the
    curve is sorted by bias.  At bias c an image is predicted as its best
    unseen pair when ``best_unseen + c >= best_seen`` and as its best seen pair
    otherwise; within a group ties go to the lowest column.

    Args:
        scores: N_img×P score matrix (masked entries -inf).
        truth: Column of each image's true pair.
        seen_flags: Per column, True for a seen pair.

    Raises:
        ContractError: If no image has a seen true pair or none has an unseen
            one, or the shapes disagree.
    """
    s = scores.values if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ContractError(f'scores must be a matrix, got shape {s.shape}')
    n, p = s.shape
    truth_idx = np.asarray(truth, dtype=np.intp)
    seen_cols = np.asarray(seen_flags, dtype=bool)
    if truth_idx.shape != (n,) or seen_cols.shape != (p,):
        raise ContractError(f'{truth_idx.size} labels and {seen_cols.size} flags for a {n}x{p} score matrix')
    if ((truth_idx < 0) | (truth_idx >= p)).any():
        raise ContractError('a true pair lies outside the target set')
    seen_img = seen_cols[truth_idx]
    if not seen_img.any() or seen_img.all():
        raise ContractError('bias sweep needs images with seen and with unseen true pairs')

    best_seen, seen_col = _group_best(s, seen_cols)
    best_unseen, unseen_col = _group_best(s, ~seen_cols)
    with np.errstate(invalid='ignore'):
        gap = best_seen - best_unseen                     # +inf when every unseen pair is masked
        all_gaps = best_seen[:, None] - s[:, ~seen_cols]
    candidates = np.unique(all_gaps[np.isfinite(all_gaps)])
    biases = np.concatenate([[-np.inf], candidates])

    # An image switches to its unseen prediction once bias >= gap.
    seen_hit = seen_img & (seen_col == truth_idx)
    unseen_hit = ~seen_img & (unseen_col == truth_idx) & np.isfinite(best_unseen)
    seen_hit_gaps = np.sort(gap[seen_hit])
    unseen_hit_gaps = np.sort(gap[unseen_hit])
    n_seen, n_unseen = int(seen_img.sum()), int((~seen_img).sum())
    # seen correct: hit and still predicted seen (gap > c); unseen correct: hit and gap <= c.
    seen_correct = seen_hit_gaps.size - np.searchsorted(seen_hit_gaps, biases, side='right')
    unseen_correct = np.searchsorted(unseen_hit_gaps, biases, side='right')
    return tuple(CurvePoint(float(c), sc / n_seen, uc / n_unseen)
                 for c, sc, uc in zip(biases, seen_correct.tolist(), unseen_correct.tolist()))


def summarize(curve: Sequence[CurvePoint]) -> tuple[float, float, float, float]:
    """(S, U, HM, AUC) of a curve.

    AUC integrates unseen accuracy over seen accuracy with the trapezoid rule
    along the monotone upper frontier; it is not extended to the axes.
    """
    if not curve:
        raise ContractError('summarize: empty curve')
    seen = np.array([p.seen_acc for p in curve], dtype=np.float64)
    unseen = np.array([p.unseen_acc for p in curve], dtype=np.float64)
    best_hm = max(p.harmonic_mean for p in curve)

    xs = np.unique(seen)
    # best unseen accuracy reachable at seen accuracy >= x
    ys = np.array([unseen[seen >= x].max() for x in xs])
    auc = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0)) if xs.size > 1 else 0.0
    return float(seen.max()), float(unseen.max()), float(best_hm), auc


# ── Feasibility ──────────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class FeasibilityScores:
    """Per-pair plausibility computed from the primitive embeddings.

    ``scores`` is |A|×|O|; seen pairs hold +inf and are never masked.
    ``flagged`` names primitives without a seen partner, whose half of the
    score was taken as 0.
    """

    scores: FloatArray
    flagged: tuple[str, ...] = ()

    def __getitem__(self, pair: Pair) -> float:
        return float(self.scores[pair[0], pair[1]])

    def mask(self, pairs: Sequence[Pair], threshold: float) -> npt.NDArray[np.bool_]:
        """True for every pair scoring strictly below ``threshold``."""
        idx = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        masked: npt.NDArray[np.bool_] = self.scores[idx[:, 0], idx[:, 1]] < threshold
        return masked

    def unseen_values(self) -> FloatArray:
        finite: FloatArray = np.unique(self.scores[np.isfinite(self.scores)])
        return finite


def _unit_rows(x: FloatArray) -> FloatArray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    out: FloatArray = x / np.where(norms > 0, norms, 1.0)
    return out


def feasibility_scores(space: CompositionSpace,
                       soft_embedding: Parameter | Tensor | npt.ArrayLike) -> FeasibilityScores:
    """Score every pair from primitive-embedding similarities.

    For an unseen pair (a, o), the attribute half is the best cosine between
    o and any object seen with a; the object half is the best cosine between
    a and any attribute seen with o.  The score is their mean.
    """
    if isinstance(soft_embedding, Parameter):
        table = soft_embedding.values
    elif isinstance(soft_embedding, Tensor):
        table = soft_embedding.values
    else:
        table = np.asarray(soft_embedding, dtype=np.float64)
    na, no = space.num_attrs, space.num_objs
    if table.ndim != 2 or table.shape[0] != na + no:
        raise ContractError(f'embedding table has shape {table.shape}, expected ({na + no}, d)')
    attrs = _unit_rows(table[:na])
    objs = _unit_rows(table[na:])
    obj_cos = objs @ objs.T
    attr_cos = attrs @ attrs.T

    seen = np.zeros((na, no), dtype=bool)
    for a, o in space.train_pairs:
        seen[a, o] = True
    # f_attr[a, o] = max over o' seen with a of cos(o, o')
    f_attr = np.where(seen[:, None, :], obj_cos[None, :, :], -np.inf).max(axis=2)
    # f_obj[a, o] = max over a' seen with o of cos(a, a')
    f_obj = np.where(seen.T[:, None, :], attr_cos[None, :, :], -np.inf).max(axis=2).T

    flagged = [space.attributes[a] for a in np.flatnonzero(~seen.any(axis=1))]
    flagged += [space.objects[o] for o in np.flatnonzero(~seen.any(axis=0))]
    if flagged:
        warnings.warn(f'no seen partner for {", ".join(flagged)}; feasibility uses 0 for that half',
                      RuntimeWarning, stacklevel=2)
    f_attr = np.where(np.isfinite(f_attr), f_attr, 0.0)
    f_obj = np.where(np.isfinite(f_obj), f_obj, 0.0)
    scores = np.where(seen, np.inf, (f_attr + f_obj) / 2.0)
    return FeasibilityScores(scores=scores, flagged=tuple(flagged))


# ── Evaluation ───────────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class _PhaseScores:
    targets: tuple[Pair, ...]
    raw: FloatArray                  # unmasked N_img×P scores
    truth: npt.NDArray[np.intp]
    seen_flags: npt.NDArray[np.bool_]


def _phase_scores(snapshot: ModelSnapshot, space: CompositionSpace, setting: CzslSetting,
                  phase: Phase) -> _PhaseScores:
    targets = target_set(space, setting, phase)
    samples = space.samples(phase)
    if setting is CzslSetting.STANDARD:
        unseen = set(space.unseen_pairs(phase))
        samples = tuple(s for s in samples if s.pair in unseen)
    if not samples:
        raise ContractError(f'{phase.value}: no images to evaluate in the {setting.value} setting')
    if not targets:
        raise ContractError(f'{phase.value}: empty {setting.value} target set')
    column = {p: j for j, p in enumerate(targets)}
    try:
        truth = np.array([column[s.pair] for s in samples], dtype=np.intp)
    except KeyError as e:
        raise DataValidationError(f'{phase.value}: true pair {e.args[0]} is not in the target set') from None
    raw = score_matrix(snapshot, [s.image_id for s in samples], targets).values
    seen_flags = np.array([space.is_seen(p) for p in targets], dtype=bool)
    return _PhaseScores(targets=targets, raw=raw, truth=truth, seen_flags=seen_flags)


def _report(scores: _PhaseScores, setting: CzslSetting, phase: Phase,
            mask: npt.NDArray[np.bool_] | None, threshold: float | None,
            flagged: tuple[str, ...]) -> EvalReport:
    s = scores.raw if mask is None else np.where(mask[None, :], -np.inf, scores.raw)
    if setting is CzslSetting.STANDARD:
        accuracy = float(np.mean(np.argmax(s, axis=1) == scores.truth))
        curve: tuple[CurvePoint, ...] = (CurvePoint(0.0, 0.0, accuracy),)
        return EvalReport(setting, phase, 0.0, accuracy, 0.0, 0.0, curve, threshold, flagged)
    curve = bias_sweep(s, scores.truth, scores.seen_flags)
    seen_max, unseen_max, hm, auc = summarize(curve)
    return EvalReport(setting, phase, seen_max, unseen_max, hm, auc, curve, threshold, flagged)


def evaluate(snapshot: ModelSnapshot, space: CompositionSpace, setting: CzslSetting,
             phase: Phase, threshold: float | None = None) -> EvalReport:
    """Evaluate ``snapshot`` on one phase of ``space``.

    The standard setting scores only images with unseen true pairs against
    the unseen pairs and reports plain accuracy as U (single curve point).
    The generalized and open-world settings run the bias sweep.  In the open
    world, unseen pairs whose feasibility score is below ``threshold`` are
    masked.

    Raises:
        ConfigurationError: If ``threshold`` is missing in the open world or
            given for another setting.
        ContractError: If the phase lacks seen- or unseen-labelled images.
    """
    if setting is CzslSetting.OPEN_WORLD and threshold is None:
        raise ConfigurationError('the open-world setting requires a feasibility threshold')
    if setting is not CzslSetting.OPEN_WORLD and threshold is not None:
        raise ConfigurationError(f'a feasibility threshold only applies to the open world, not {setting.value}')
    scores = _phase_scores(snapshot, space, setting, phase)
    mask = None
    flagged: tuple[str, ...] = ()
    if threshold is not None:
        feasibility = feasibility_scores(space, snapshot.prompt.phi)
        mask = feasibility.mask(scores.targets, threshold)
        flagged = feasibility.flagged
        logger.debug('feasibility threshold %r masks %d of %d pairs',
                     threshold, int(mask.sum()), mask.size)
    report = _report(scores, setting, phase, mask, threshold, flagged)
    logger.debug('%s/%s: S=%.4f U=%.4f HM=%.4f AUC=%.4f', setting.value, phase.value,
                 report.S, report.U, report.HM, report.AUC)
    return report


def tune_feasibility_threshold(snapshot: ModelSnapshot, space: CompositionSpace,
                               candidates: Iterable[float] | None = None, *,
                               max_candidates: int = 50) -> tuple[float, EvalReport]:
    """Threshold maximising validation open-world AUC (ties: lowest threshold).

    Without explicit candidates, up to ``max_candidates`` of the distinct
    unseen-pair feasibility scores are tried, evenly spaced in rank.
    """
    feasibility = feasibility_scores(space, snapshot.prompt.phi)
    if candidates is None:
        values = feasibility.unseen_values()
        if values.size > max_candidates:
            values = values[np.linspace(0, values.size - 1, max_candidates).round().astype(np.intp)]
        trial = sorted(set(values.tolist()))
    else:
        trial = sorted(set(float(c) for c in candidates))
    if not trial:
        raise ContractError('no feasibility threshold candidates')
    scores = _phase_scores(snapshot, space, CzslSetting.OPEN_WORLD, Phase.VAL)
    best: EvalReport | None = None
    for threshold in trial:
        report = _report(scores, CzslSetting.OPEN_WORLD, Phase.VAL,
                         feasibility.mask(scores.targets, threshold), threshold, feasibility.flagged)
        if best is None or report.AUC > best.AUC:
            best = report
    assert best is not None and best.threshold is not None
    logger.info('tuned feasibility threshold %r (val open-world AUC %.4f)', best.threshold, best.AUC)
    return best.threshold, best


# ── Report text ──────────────────────────────────────────────────────────────


def format_report(report: EvalReport) -> str:
    """Fixed-order key=value rendering; floats use repr so they parse back exactly."""
    lines = [
        f'setting={report.setting.value}',
        f'phase={report.phase.value}',
        f'S={report.S!r}',
        f'U={report.U!r}',
        f'HM={report.HM!r}',
        f'AUC={report.AUC!r}',
        f'threshold={"none" if report.threshold is None else repr(report.threshold)}',
        f'flagged={",".join(report.flagged) if report.flagged else "none"}',
        f'curve={len(report.curve)}',
    ]
    lines.extend(f'{p.bias!r} {p.seen_acc!r} {p.unseen_acc!r}' for p in report.curve)
    return '\n'.join(lines) + '\n'


_REPORT_KEYS = ('setting', 'phase', 'S', 'U', 'HM', 'AUC', 'threshold', 'flagged', 'curve')


def parse_report(text: str) -> EvalReport:
    """Inverse of format_report().

    Raises:
        DataValidationError: If the text is not a well-formed report.
    """
    lines = text.splitlines()
    if len(lines) < len(_REPORT_KEYS):
        raise DataValidationError('report is truncated')
    fields: dict[str, str] = {}
    for lineno, (key, line) in enumerate(zip(_REPORT_KEYS, lines), start=1):
        name, sep, value = line.partition('=')
        if not sep or name != key:
            raise DataValidationError(f'expected {key}=..., found {line!r}', lineno=lineno)
        fields[key] = value
    try:
        count = int(fields['curve'])
        rows = lines[len(_REPORT_KEYS):]
        if len(rows) != count:
            raise DataValidationError(f'curve declares {count} points, found {len(rows)}')
        curve = tuple(CurvePoint(*(float(v) for v in row.split())) for row in rows)
        return EvalReport(
            setting=CzslSetting(fields['setting']),
            phase=Phase(fields['phase']),
            S=float(fields['S']),
            U=float(fields['U']),
            HM=float(fields['HM']),
            AUC=float(fields['AUC']),
            curve=curve,
            threshold=None if fields['threshold'] == 'none' else float(fields['threshold']),
            flagged=() if fields['flagged'] == 'none' else tuple(fields['flagged'].split(',')),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, DataValidationError):
            raise
        raise DataValidationError(f'malformed report: {e}') from None
