# Dense float64 tensors and the tape that records differentiable operations.
#
# A Tape is activated with ``with tape:``; every primitive in functional.py
# that sees an input with requires_grad appends one node to the active tape.
# Nodes are appended in evaluation order, so replaying them backwards is a
# valid reverse topological order.  Once backward() has run the tape is
# consumed and must be reset() before it records again.
#
# Tests are in tests/autodiff/test_tensor.py.
from __future__ import annotations

from collections.abc import Callable
import contextvars
from dataclasses import dataclass
from types import TracebackType

import numpy as np
import numpy.typing as npt

from ..errors import ContractError, TapeStateError


__all__ = ["FloatArray", "Tape", "Tensor", "active_tape", "backward"]


FloatArray = npt.NDArray[np.float64]

# Adjoint of one recorded primitive: maps d loss / d output to a tuple of
# d loss / d input (None where the input needs no gradient).
Adjoint = Callable[[FloatArray], tuple[FloatArray | None, ...]]

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    'promptcompvl_active_tape', default=None
)


def _frozen_array(values: npt.ArrayLike, copy: bool) -> FloatArray:
    arr = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
    if arr.ndim > 0 and 0 in arr.shape:
        raise ContractError(f'tensor shape must be positive, got {arr.shape}')
    arr.flags.writeable = False
    return arr


class Tensor:
    """Dense row-major float64 array with an optional gradient.

    ``values`` are read-only once constructed; operations always produce new
    tensors.  ``grad`` is None until backward() reaches the tensor.
    """

    __slots__ = ('_values', 'requires_grad', 'grad', '_tape')

    def __init__(self, values: npt.ArrayLike, *, requires_grad: bool = False) -> None:
        self._values = _frozen_array(values, copy=True)
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, values: FloatArray, requires_grad: bool) -> Tensor:
        # Internal constructor for freshly computed arrays; skips the copy.
        out = cls.__new__(cls)
        out._values = _frozen_array(values, copy=False)
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        return out

    @property
    def values(self) -> FloatArray:
        return self._values

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self._values.shape)

    @property
    def size(self) -> int:
        return int(self._values.size)

    @property
    def tape(self) -> Tape | None:
        """Tape that recorded the operation producing this tensor, if any."""
        return self._tape

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f'item() needs a single-element tensor, got shape {self.shape}')
        return float(self._values.reshape(-1)[0])

    def detach(self) -> Tensor:
        """Same values, no gradient tracking."""
        return Tensor._wrap(self._values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'


@dataclass(slots=True)
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


class Tape:
    """Ordered record of primitive operations.

    Confined to the thread (context) that activated it.  Usage::

        tape = Tape()
        with tape:
            loss = cross_entropy(logits(...), targets)
        backward(loss)
        tape.reset()
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._consumed = False
        self._tokens: list[contextvars.Token[Tape | None]] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type: type[BaseException] | None, exc: BaseException | None,
                 tb: TracebackType | None) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def reset(self) -> None:
        """Drop every recorded node and make the tape usable again."""
        for node in self._nodes:
            node.output._tape = None
        self._nodes.clear()
        self._consumed = False

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], adjoint: Adjoint) -> None:
        if self._consumed:
            raise TapeStateError('tape already consumed by backward(); call reset() first')
        self._nodes.append(_Node(inputs, output, adjoint))
        output._tape = self

    def backward(self, loss: Tensor) -> None:
        """Replay adjoints in reverse and populate ``grad`` on leaf tensors.

        Leaf gradients accumulate onto an existing ``grad`` so several losses
        may contribute before an optimizer step.
        """
        if self._consumed:
            raise TapeStateError('backward() already ran on this tape; call reset() first')
        if loss.size != 1:
            raise ContractError(f'backward() needs a scalar loss, got shape {loss.shape}')
        if loss._tape is not self:
            raise ContractError('loss was not recorded on this tape')
        self._consumed = True

        grads: dict[int, FloatArray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            upstream = grads.pop(id(node.output), None)
            owners.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, contribution in zip(node.inputs, node.adjoint(upstream)):
                if contribution is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
                    owners[key] = tensor

        # Whatever is left was never produced by a node on this tape: leaves.
        for key, grad in grads.items():
            leaf = owners[key]
            grad = np.asarray(grad, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad


def active_tape() -> Tape | None:
    """Return the tape active in the current context, if any."""
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Populate gradients of ``loss`` on every reachable requires_grad leaf.

    Raises:
        ContractError: If ``loss`` is not a scalar or was not produced through
            recorded operations.
        TapeStateError: If the tape that recorded ``loss`` was already consumed.
    """
    if loss.size != 1:
        raise ContractError(f'backward() needs a scalar loss, got shape {loss.shape}')
    if loss.tape is None:
        raise ContractError('loss was not produced through recorded operations')
    loss.tape.backward(loss)


def _emit(values: FloatArray, inputs: tuple[Tensor, ...], adjoint: Adjoint) -> Tensor:
    """Wrap a primitive's result and record it when any input needs a gradient."""
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires_grad=needs)
    if needs:
        assert tape is not None
        tape.record(out, inputs, adjoint)
    return out


