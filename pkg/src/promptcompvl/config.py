# Run configuration: built-in defaults < key=value config file < flag overrides.
#
# Config file format: one ``key = value`` per line, '#' starts a comment, blank
# lines are ignored, dashes in keys are read as underscores.  Unknown keys are
# rejected with the file and line.
#
# Tests are in tests/test_config.py.
from __future__ import annotations

from collections.abc import Mapping
import os
from typing import Any, Literal

import pydantic

from .autodiff import LrSchedule, OptimizerKind
from .data import CzslSetting, Phase, SynthConfig
from .encoders import EncoderDims
from .errors import ConfigurationError
from .prompt import PromptInit, PromptMode
from .training import TrainConfig


__all__ = [
    "RunConfig",
    "load_config_file",
    "resolve_config",
]

# Fields that locate inputs and outputs; left out of the provenance echo so
# that relocating a run does not change its checkpoints.
_PATH_FIELDS = frozenset({'data_dir', 'features', 'out', 'checkpoint', 'log_level'})


class RunConfig(pydantic.BaseModel):
    """Every knob of a run.  Strings from files and flags are coerced by pydantic."""

    model_config = pydantic.ConfigDict(extra='forbid', frozen=True)

    # paths
    data_dir: str | None = None
    features: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    log_level: Literal['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'] | None = None

    # model
    mode: PromptMode = PromptMode.PROMPTCOMPVL
    seed: int = pydantic.Field(default=0, ge=0)
    tau: float = pydantic.Field(default=0.01, gt=0.0)
    prompt_length: int = pydantic.Field(default=3, ge=0)
    prompt_init: PromptInit = PromptInit.RANDOM
    width: int = pydantic.Field(default=64, gt=0)
    blocks: int = pydantic.Field(default=2, gt=0)
    heads: int = pydantic.Field(default=4, gt=0)
    context_length: int = pydantic.Field(default=8, gt=0)
    causal: bool = True

    # training
    epochs: int = pydantic.Field(default=30, gt=0)
    batch_size: int = pydantic.Field(default=64, gt=0)
    learning_rate: float = pydantic.Field(default=0.05, ge=0.0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    schedule: LrSchedule = LrSchedule.CONSTANT
    checkpoint_every: int = pydantic.Field(default=1, ge=0)
    select_best: bool = True

    # evaluation
    setting: CzslSetting = CzslSetting.GENERALIZED
    phase: Phase = Phase.TEST
    feasibility_threshold: float | None = None

    # synthetic data
    attrs: int = pydantic.Field(default=8, gt=0)
    objs: int = pydantic.Field(default=8, gt=0)
    image_dim: int = pydantic.Field(default=32, gt=0)
    noise: float = pydantic.Field(default=0.05, ge=0.0)
    images_per_pair: int = pydantic.Field(default=20, gt=0)
    unseen_frac: float = 0.25

    @pydantic.model_validator(mode='after')
    def _check_shapes(self) -> RunConfig:
        if self.width % self.heads:
            raise ValueError(f'heads ({self.heads}) must divide width ({self.width})')
        if self.prompt_length + 4 > self.context_length:
            raise ValueError(
                f'prompt_length {self.prompt_length} does not fit context_length '
                f'{self.context_length} (needs prompt_length + 4 <= context_length)'
            )
        return self

    def encoder_dims(self, image_dim: int | None = None) -> EncoderDims:
        return EncoderDims(
            width=self.width,
            blocks=self.blocks,
            heads=self.heads,
            context_length=self.context_length,
            image_dim=self.image_dim if image_dim is None else image_dim,
            causal=self.causal,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_attrs=self.attrs,
            num_objs=self.objs,
            image_dim=self.image_dim,
            noise=self.noise,
            images_per_pair=self.images_per_pair,
            unseen_fraction=self.unseen_frac,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            schedule=self.schedule,
            seed=self.seed,
            mode=self.mode,
            tau=self.tau,
            prompt_length=self.prompt_length,
            prompt_init=self.prompt_init,
            checkpoint_every=self.checkpoint_every,
            select_best=self.select_best,
            config_echo=self.echo(),
        )

    def echo(self) -> str:
        """Canonical sorted ``key=value`` text of every non-path field."""
        lines = []
        for key, value in sorted(self.model_dump(mode='json').items()):
            if key in _PATH_FIELDS:
                continue
            lines.append(f'{key}={_render(value)}')
        return '\n'.join(lines) + '\n'


def _render(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def load_config_file(path: str | os.PathLike[str]) -> dict[str, str]:
    """Parse a key=value config file into raw strings.

    Raises:
        ConfigurationError: On a malformed line, a repeated key or an unknown
            key; the message carries ``path:line``.
        OSError: If the file cannot be read.
    """
    where = os.fspath(path)
    values: dict[str, str] = {}
    with open(where, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            key = key.strip().replace('-', '_')
            if not sep or not key:
                raise ConfigurationError(f'{where}:{lineno}: expected key=value, found {line!r}')
            if key not in RunConfig.model_fields:
                raise ConfigurationError(f'{where}:{lineno}: unknown key {key!r}')
            if key in values:
                raise ConfigurationError(f'{where}:{lineno}: {key!r} given twice')
            values[key] = value.strip()
    return values


def _normalise(raw: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in raw.items():
        if isinstance(value, str) and value.lower() == 'none':
            value = None
        out[key.replace('-', '_')] = value
    return out


def resolve_config(config_file: str | os.PathLike[str] | None = None,
                   overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge defaults, an optional config file and flag overrides (flags win).

    Override entries whose value is None are treated as "flag not given".

    Raises:
        ConfigurationError: On any invalid or inconsistent value.
    """
    merged: dict[str, Any] = {}
    if config_file is not None:
        merged.update(_normalise(load_config_file(config_file)))
    merged.update(_normalise({k: v for k, v in (overrides or {}).items() if v is not None}))
    try:
        return RunConfig(**merged)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        where = '.'.join(str(p) for p in first['loc']) or 'config'
        raise ConfigurationError(f'{where}: {first["msg"]}') from None
