# Named parameters and the optimizers that update them.
#
# Optimizer state is a flat name → array mapping so the checkpoint module can
# persist it as ordinary tensor records and resume bit-exactly.
#
# Tests are in tests/autodiff/test_optim.py.
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
import enum
import math

import numpy as np
import numpy.typing as npt

from ..errors import ConfigurationError, ContractError
from .tensor import FloatArray, Tensor


__all__ = [
    "LrSchedule",
    "Optimizer",
    "OptimizerConfig",
    "OptimizerKind",
    "Parameter",
    "optimizer_step",
]


class Parameter:
    """A named tensor that an optimizer may update.

    The underlying tensor always has ``requires_grad`` set; ``frozen``
    parameters are never modified by optimizer steps.  Forward code should use
    :meth:`forward_value`, which hands frozen parameters to the graph without
    gradient tracking.
    """

    __slots__ = ('name', 'frozen', 'tensor')

    def __init__(self, name: str, values: npt.ArrayLike, *, frozen: bool = False) -> None:
        self.name = name
        self.frozen = frozen
        self.tensor = Tensor(values, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def values(self) -> FloatArray:
        return self.tensor.values

    @property
    def grad(self) -> FloatArray | None:
        return self.tensor.grad

    def forward_value(self) -> Tensor:
        return self.tensor.detach() if self.frozen else self.tensor

    def assign(self, values: npt.ArrayLike) -> None:
        """Replace the values (shape must not change); clears the gradient."""
        new = Tensor(values, requires_grad=True)
        if new.shape != self.tensor.shape:
            raise ContractError(f'{self.name}: cannot assign shape {new.shape} to {self.tensor.shape}')
        self.tensor = new

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def copy(self) -> Parameter:
        return Parameter(self.name, self.values, frozen=self.frozen)

    def __repr__(self) -> str:
        return f'Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})'


class OptimizerKind(enum.Enum):
    SGD = 'sgd'    # plain gradient descent
    ADAM = 'adam'  # adaptive moments with bias correction


class LrSchedule(enum.Enum):
    CONSTANT = 'constant'
    COSINE = 'cosine'    # half-cosine decay to zero over total_steps


@dataclass(frozen=True, slots=True)
class OptimizerConfig:
    """Configuration for :class:`Optimizer`.

    Attributes:
        kind: Update rule.
        learning_rate: Base step size; zero is allowed and leaves parameters
            bit-identical.
        beta1, beta2, eps: Adam moment decay rates and denominator floor.
        schedule: Learning-rate schedule.
        total_steps: Horizon of the cosine schedule; ignored when constant.
    """

    kind: OptimizerKind = OptimizerKind.SGD
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: LrSchedule = LrSchedule.CONSTANT
    total_steps: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0.0:
            raise ConfigurationError(f'learning_rate must be >= 0, got {self.learning_rate}')
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError('Adam betas must lie in [0, 1)')
        if self.eps <= 0.0:
            raise ConfigurationError(f'eps must be positive, got {self.eps}')
        if self.schedule is LrSchedule.COSINE and self.total_steps <= 0:
            raise ConfigurationError('cosine schedule needs total_steps > 0')


class Optimizer:
    """Gradient-descent or Adam updates over a sequence of parameters."""

    def __init__(self, config: OptimizerConfig) -> None:
        self.config = config
        self.step_count = 0
        self._moments: dict[str, FloatArray] = {}

    def current_lr(self) -> float:
        cfg = self.config
        if cfg.schedule is LrSchedule.CONSTANT:
            return cfg.learning_rate
        progress = min(self.step_count, cfg.total_steps) / cfg.total_steps
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self, params: Sequence[Parameter]) -> None:
        """Apply one update to every non-frozen parameter.

        Raises:
            ContractError: If a trainable parameter has no gradient.
        """
        trainable = [p for p in params if not p.frozen]
        for p in trainable:
            if p.grad is None:
                raise ContractError(f'parameter {p.name!r} has no gradient')

        lr = self.current_lr()
        self.step_count += 1
        for p in trainable:
            grad = p.grad
            assert grad is not None
            if self.config.kind is OptimizerKind.SGD:
                p.assign(p.values - lr * grad)
            else:
                p.assign(p.values - lr * self._adam_direction(p.name, grad))

    def _adam_direction(self, name: str, grad: FloatArray) -> FloatArray:
        cfg = self.config
        m = self._moments.get(f'adam/m/{name}', np.zeros_like(grad))
        v = self._moments.get(f'adam/v/{name}', np.zeros_like(grad))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        self._moments[f'adam/m/{name}'] = m
        self._moments[f'adam/v/{name}'] = v
        m_hat = m / (1.0 - cfg.beta1 ** self.step_count)
        v_hat = v / (1.0 - cfg.beta2 ** self.step_count)
        direction: FloatArray = m_hat / (np.sqrt(v_hat) + cfg.eps)
        return direction

    def state_dict(self) -> dict[str, FloatArray]:
        state = {'step': np.asarray(float(self.step_count))}
        for key in sorted(self._moments):
            state[key] = self._moments[key].copy()
        return state

    def load_state_dict(self, state: Mapping[str, FloatArray]) -> None:
        if 'step' not in state:
            raise ContractError('optimizer state is missing the step counter')
        self.step_count = int(np.asarray(state['step']).reshape(-1)[0])
        self._moments = {k: np.array(v, dtype=np.float64) for k, v in state.items() if k != 'step'}


def optimizer_step(params: Sequence[Parameter], optimizer: Optimizer) -> None:
    """Update ``params`` in place from their gradients, then clear the gradients.

    Frozen parameters are skipped, even when a gradient is present.
    """
    optimizer.step(params)
    for p in params:
        p.zero_grad()
