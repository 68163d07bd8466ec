# Cross-entropy training of the soft prompt and soft embeddings over the seen
# training pairs, with per-epoch checkpoints, exact resume and selection of
# the best validation-AUC snapshot.
#
# Every step scores the batch images against ALL seen training pairs, so the
# softmax denominator always runs over the full training label set.
#
# Tests are in tests/test_training.py and tests/test_benchmark.py.
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
import logging
import math
import os
import tempfile
import time
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from .autodiff import (
    LrSchedule,
    Optimizer,
    OptimizerConfig,
    OptimizerKind,
    Tape,
    Tensor,
    backward,
    cross_entropy,
    optimizer_step,
)
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    prompt_records,
    restore_prompt,
    save_checkpoint,
    snapshot_to_checkpoint,
)
from .data import CompositionSpace, CzslSetting, Phase, Sample
from .encoders import FrozenEncoders
from .errors import CheckpointIntegrityError, ConfigurationError, ContractError, DataValidationError
from .evaluation import EvalReport, evaluate
from .model import DEFAULT_TAU, ModelSnapshot, logits, text_matrix
from .prompt import PromptInit, PromptMode, init_prompt_state, trainable_params


__all__ = [
    "BEST_PREFIX",
    "FINAL_CHECKPOINT",
    "EpochStats",
    "TrainConfig",
    "TrainStats",
    "batch_loss",
    "checkpoint_name",
    "compare_modes",
    "initial_snapshot",
    "train",
    "train_step",
]

logger = logging.getLogger(__name__)

BEST_PREFIX = 'best/'
FINAL_CHECKPOINT = 'final.ckpt'


def checkpoint_name(epoch: int) -> str:
    return f'epoch-{epoch:04d}.ckpt'


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Hyperparameters of one training run.

    Attributes:
        epochs: Passes over the training images.
        batch_size: Images per step.
        learning_rate, optimizer, schedule: Update rule; the cosine schedule
            decays over every step of the run.
        seed: Seeds prompt initialisation and the per-epoch shuffles.
        mode: Prompting strategy; decides which blocks train.
        tau: Logit temperature.
        prompt_length: k.
        prompt_init: Initial soft prompt rows.
        checkpoint_every: Epoch cadence of checkpoints; 0 writes only the
            last epoch and final.ckpt.
        select_best: Return the snapshot with the best validation AUC rather
            than the last one.
        config_echo: Provenance text stored in every checkpoint.
    """

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    optimizer: OptimizerKind = OptimizerKind.SGD
    schedule: LrSchedule = LrSchedule.CONSTANT
    seed: int = 0
    mode: PromptMode = PromptMode.PROMPTCOMPVL
    tau: float = DEFAULT_TAU
    prompt_length: int = 3
    prompt_init: PromptInit = PromptInit.RANDOM
    checkpoint_every: int = 1
    select_best: bool = True
    config_echo: str = ''

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError('epochs and batch_size must be positive')
        if self.learning_rate < 0:
            raise ConfigurationError(f'learning_rate must be >= 0, got {self.learning_rate}')
        if not self.tau > 0:
            raise ConfigurationError(f'temperature must be positive, got {self.tau}')
        if self.seed < 0 or self.checkpoint_every < 0:
            raise ConfigurationError('seed and checkpoint_every must be >= 0')

    def optimizer_config(self, steps_per_epoch: int) -> OptimizerConfig:
        return OptimizerConfig(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            schedule=self.schedule,
            total_steps=self.epochs * steps_per_epoch if self.schedule is LrSchedule.COSINE else 0,
        )


class EpochStats(NamedTuple):
    epoch: int
    loss: float
    seen_acc: float
    seconds: float
    validation: EvalReport | None


@dataclass(slots=True)
class TrainStats:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    best_auc: float | None = None

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]


# ── Steps ────────────────────────────────────────────────────────────────────


def _targets(batch: Sequence[Sample], snapshot: ModelSnapshot) -> list[int]:
    column = {p: j for j, p in enumerate(snapshot.space.train_pairs)}
    targets = []
    for s in batch:
        j = column.get(s.pair)
        if j is None:
            raise DataValidationError(
                f'training sample {s.image_id!r} is labelled with unseen pair '
                f'{snapshot.space.pair_name(s.pair)!r}'
            )
        targets.append(j)
    return targets


def batch_loss(batch: Sequence[Sample], snapshot: ModelSnapshot) -> tuple[Tensor, Tensor]:
    """Loss and logits of ``batch`` against every seen training pair.

    Records on the active tape, if any.

    Raises:
        DataValidationError: If a sample's pair is not a training pair.
    """
    if not batch:
        raise ContractError('empty batch')
    targets = _targets(batch, snapshot)
    texts = text_matrix(snapshot.space.train_pairs, snapshot)
    images = snapshot.encoders.image_matrix([s.image_id for s in batch])
    scores = logits(images, texts, snapshot.tau)
    return cross_entropy(scores, targets), scores


def _step(batch: Sequence[Sample], snapshot: ModelSnapshot, optimizer: Optimizer) -> tuple[float, int]:
    params = trainable_params(snapshot.prompt)
    if not params:
        raise ContractError(f'mode {snapshot.prompt.mode.value} has no trainable parameters')
    tape = Tape()
    with tape:
        loss, scores = batch_loss(batch, snapshot)
    backward(loss)
    optimizer_step(params, optimizer)
    correct = int((np.argmax(scores.values, axis=1) == _targets(batch, snapshot)).sum())
    return loss.item(), correct


def train_step(batch: Sequence[Sample], snapshot: ModelSnapshot, optimizer: Optimizer) -> float:
    """One optimizer update from ``batch``; returns the pre-update loss.

    Only the prompt blocks the mode trains are changed; encoder weights are
    never touched.

    Raises:
        ContractError: If the mode has nothing to train.
        DataValidationError: If a sample's pair is not a training pair.
    """
    return _step(batch, snapshot, optimizer)[0]


# ── Training loop ────────────────────────────────────────────────────────────


def initial_snapshot(space: CompositionSpace, encoders: FrozenEncoders, config: TrainConfig,
                     frozen_vocab: npt.ArrayLike | None = None) -> ModelSnapshot:
    """Untrained snapshot for ``config`` (the zero-shot model in clip_hard mode)."""
    prompt = init_prompt_state(space, config.mode, config.seed, dims=encoders.dims,
                               prompt_length=config.prompt_length,
                               frozen_vocab=frozen_vocab, prompt_init=config.prompt_init)
    return ModelSnapshot(encoders=encoders, prompt=prompt, space=space, tau=config.tau)


def _check_writable(directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with tempfile.TemporaryFile(dir=directory):
        pass


def _can_validate(space: CompositionSpace) -> bool:
    seen = set(space.train_pairs)
    flags = {s.pair in seen for s in space.val_samples}
    return flags == {True, False}


@dataclass(slots=True)
class _Best:
    auc: float
    epoch: int
    records: dict[str, npt.NDArray[np.float64]]


def _best_records(best: _Best | None) -> dict[str, npt.NDArray[np.float64]]:
    if best is None:
        return {}
    return {**best.records,
            f'{BEST_PREFIX}auc': np.asarray(best.auc),
            f'{BEST_PREFIX}epoch': np.asarray(float(best.epoch))}


def _restore_best(checkpoint: Checkpoint) -> _Best | None:
    if f'{BEST_PREFIX}auc' not in checkpoint.records:
        return None
    records = {k: v for k, v in checkpoint.records.items()
               if k.startswith(BEST_PREFIX) and k.rsplit('/', 1)[1] in ('theta', 'phi')}
    return _Best(auc=float(checkpoint.records[f'{BEST_PREFIX}auc']),
                 epoch=int(checkpoint.records[f'{BEST_PREFIX}epoch']),
                 records=records)


def train(config: TrainConfig, space: CompositionSpace, encoders: FrozenEncoders, *,
          checkpoint_dir: str | os.PathLike[str] | None = None,
          resume_from: str | os.PathLike[str] | None = None,
          frozen_vocab: npt.ArrayLike | None = None) -> tuple[ModelSnapshot, TrainStats]:
    """Train the mode's prompt blocks on the seen training images.

    Each epoch shuffles the images with ``default_rng([seed, epoch])``, so a
    run resumed from an epoch checkpoint replays the remaining epochs exactly.
    After each epoch the generalized validation split is evaluated when it has
    both seen- and unseen-labelled images; the best-AUC prompt is kept.

    Args:
        config: Hyperparameters.
        space: Composition space with training samples.
        encoders: Frozen encoders holding every referenced image feature.
        checkpoint_dir: Where epoch checkpoints and final.ckpt go.
        resume_from: Epoch checkpoint of an interrupted run with the same
            configuration.
        frozen_vocab: Optional initial embedding rows.

    Returns:
        ``(snapshot, stats)``; the snapshot is independent of training state.

    Raises:
        ContractError: If the mode trains nothing or there are no training
            images.
        OSError: If ``checkpoint_dir`` is not writable; raised before the
            first step.
        CheckpointIntegrityError: If ``resume_from`` does not match the run.
    """
    ckpt_dir = None if checkpoint_dir is None else os.fspath(checkpoint_dir)
    if ckpt_dir is not None:
        _check_writable(ckpt_dir)
    snapshot = initial_snapshot(space, encoders, config, frozen_vocab)
    if not trainable_params(snapshot.prompt):
        raise ContractError(f'mode {config.mode.value} has no trainable parameters; evaluate it untrained')
    samples = space.train_samples
    if not samples:
        raise ContractError('no training images')

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    optimizer = Optimizer(config.optimizer_config(steps_per_epoch))
    best: _Best | None = None
    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.mode is not config.mode or ckpt.seed != config.seed:
            raise CheckpointIntegrityError(
                'header', f'checkpoint is {ckpt.mode.value}/seed {ckpt.seed}, '
                          f'run is {config.mode.value}/seed {config.seed}'
            )
        snapshot.prompt = restore_prompt(ckpt, space)
        optimizer.load_state_dict(ckpt.optimizer_state())
        best = _restore_best(ckpt)
        start = ckpt.epoch
        logger.info('resuming %s from epoch %d', os.fspath(resume_from), start)

    validate = _can_validate(space)
    stats = TrainStats()
    for epoch in range(start + 1, config.epochs + 1):
        began = time.monotonic()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        loss_sum, correct = 0.0, 0
        for lo in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[lo:lo + config.batch_size]]
            loss, hits = _step(batch, snapshot, optimizer)
            loss_sum += loss * len(batch)
            correct += hits
        mean_loss = loss_sum / len(samples)
        if not math.isfinite(mean_loss):
            raise ContractError(f'epoch {epoch}: loss is not finite')

        report = evaluate(snapshot, space, CzslSetting.GENERALIZED, Phase.VAL) if validate else None
        if report is not None and (best is None or report.AUC > best.auc):
            best = _Best(report.AUC, epoch, prompt_records(snapshot.prompt.copy(), BEST_PREFIX))
            logger.debug('epoch %d: new best validation AUC %.6f', epoch, report.AUC)

        seen_acc = correct / len(samples)
        epoch_stats = EpochStats(epoch, mean_loss, seen_acc, time.monotonic() - began, report)
        stats.epochs.append(epoch_stats)
        _log_epoch(epoch_stats)

        due = config.checkpoint_every and epoch % config.checkpoint_every == 0
        if ckpt_dir is not None and (due or epoch == config.epochs):
            path = os.path.join(ckpt_dir, checkpoint_name(epoch))
            save_checkpoint(path, snapshot_to_checkpoint(
                snapshot, config_echo=config.config_echo, seed=config.seed, epoch=epoch,
                optimizer_state=optimizer.state_dict(), extra=_best_records(best),
            ))
            logger.info('wrote checkpoint %s', path)

    if best is not None:
        stats.best_epoch, stats.best_auc = best.epoch, best.auc
    final = snapshot.frozen_copy()
    if config.select_best and best is not None:
        final.prompt = restore_prompt(
            Checkpoint(config.config_echo, config.seed, best.epoch, config.mode, dict(best.records)),
            space, BEST_PREFIX,
        )
        logger.info('selected epoch %d (validation AUC %.6f)', best.epoch, best.auc)
    if ckpt_dir is not None:
        final_epoch = best.epoch if config.select_best and best is not None else config.epochs
        save_checkpoint(os.path.join(ckpt_dir, FINAL_CHECKPOINT), snapshot_to_checkpoint(
            final, config_echo=config.config_echo, seed=config.seed, epoch=final_epoch,
        ))
    return final, stats


def _log_epoch(stats: EpochStats) -> None:
    fields: dict[str, float] = {'epoch': stats.epoch, 'loss': stats.loss, 'seen_acc': stats.seen_acc}
    if stats.validation is not None:
        v = stats.validation
        fields.update(val_S=v.S, val_U=v.U, val_HM=v.HM, val_AUC=v.AUC)
    logger.info(' '.join(f'{k}={v:.6g}' if isinstance(v, float) else f'{k}={v}' for k, v in fields.items()),
                extra=fields)


def compare_modes(space: CompositionSpace, encoders: FrozenEncoders,
                  config: TrainConfig) -> dict[PromptMode, EvalReport]:
    """Validation reports for all four prompting strategies with one seed.

    clip_hard is evaluated untrained; the others are trained with ``config``.
    """
    reports: dict[PromptMode, EvalReport] = {}
    for mode in PromptMode:
        mode_config = replace(config, mode=mode)
        if mode is PromptMode.CLIP_HARD:
            snapshot = initial_snapshot(space, encoders, mode_config)
        else:
            snapshot, _ = train(mode_config, space, encoders)
        reports[mode] = evaluate(snapshot, space, CzslSetting.GENERALIZED, Phase.VAL)
        logger.info('%s: val AUC %.4f HM %.4f', mode.value, reports[mode].AUC, reports[mode].HM)
    return reports
