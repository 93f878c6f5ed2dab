###############################################################################
# Copyright 2024 The kan_mixers Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
###############################################################################
"""Dense tensors with define-by-run reverse-mode automatic differentiation.

Every differentiable operation computes its result with numpy and, when any
input requires a gradient, appends a `TapeEntry` to the tape of the calling
thread. `backward` walks that tape once in reverse and then resets it.
"""
import contextlib
import dataclasses
import logging
import math
import threading
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

PRECISIONS: dict[str, type[np.floating]] = {
    'float32': np.float32,
    'float64': np.float64,
}

_precision = {'name': 'float32'}

ArrayLike = Union[np.ndarray, float, int, Sequence]
Operand = Union['Tensor', float, int]
BackwardFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class DimensionError(ValueError):
    """Raised when tensor extents violate an operation's shape contract."""


class GradientError(RuntimeError):
    """Raised when gradients cannot be computed or verified."""


def set_precision(name: str) -> None:
    """Selects the scalar type used by every tensor created afterwards.

    Args:
        name: 'float32' (training runs) or 'float64' (gradient tests)
    """
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision '{name}', expected one of "
                         f"{sorted(PRECISIONS)}")
    _precision['name'] = name


def get_precision() -> str:
    return _precision['name']


def get_dtype() -> type[np.floating]:
    return PRECISIONS[_precision['name']]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switches the global precision."""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class TapeEntry(NamedTuple):
    name: str
    inputs: tuple['Tensor', ...]
    output: 'Tensor'
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations for one thread."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.enabled = True

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def current_tape() -> Tape:
    """Returns the tape of the calling thread, creating it on first use."""
    tape = getattr(_local, 'tape', None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspends tape recording in the calling thread."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


class Tensor:
    """n-dimensional array that may take part in gradient recording.

    Data is stored row-major and contiguous in the global precision. Leaves
    created with `requires_grad=True` receive `grad` after `backward`.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.data: np.ndarray = np.asarray(data, dtype=get_dtype(), order='C')
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._entry: Optional[TapeEntry] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ''
        return (f'Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, '
                f'requires_grad={self.requires_grad})')

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def reshape(self, *shape: int) -> 'Tensor':
        return reshape(self, shape)

    def sum(self) -> 'Tensor':
        return sum_all(self)

    def mean(self) -> 'Tensor':
        return mean_all(self)


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(name: str, inputs: Sequence[Tensor], data: np.ndarray,
           backward: BackwardFn) -> Tensor:
    """Wraps an operation result and registers it on the tape when needed.

    Args:
        name: operation name, used in diagnostics
        inputs: tensors the result depends on
        data: forward result
        backward: maps the output gradient to one gradient (or None) per input

    Returns:
        result tensor
    """
    tape = current_tape()
    requires_grad = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        entry = TapeEntry(name, tuple(inputs), out, backward)
        tape.record(entry)
        out._entry = entry  # pylint: disable=protected-access
    return out


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduces a broadcast gradient back onto the extents of an input."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_leading_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    """Only broadcasting over leading axes is supported: the shorter shape
    must be a suffix of the longer one."""
    short, long_ = sorted((a.shape, b.shape), key=len)
    if short and long_[len(long_) - len(short):] != short:
        raise DimensionError(f'{op}: shapes {a.shape} and {b.shape} are not '
                             f'broadcastable over leading axes')


def add(a: Operand, b: Operand) -> Tensor:
    x, y = as_tensor(a), as_tensor(b)
    _check_leading_broadcast(x, y, 'add')

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return _sum_to_shape(g, x.shape), _sum_to_shape(g, y.shape)

    return record('add', (x, y), x.data + y.data, backward)


def sub(a: Operand, b: Operand) -> Tensor:
    x, y = as_tensor(a), as_tensor(b)
    _check_leading_broadcast(x, y, 'sub')

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return _sum_to_shape(g, x.shape), _sum_to_shape(-g, y.shape)

    return record('sub', (x, y), x.data - y.data, backward)


def mul(a: Operand, b: Operand) -> Tensor:
    x, y = as_tensor(a), as_tensor(b)
    _check_leading_broadcast(x, y, 'mul')

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (_sum_to_shape(g * y.data, x.shape),
                _sum_to_shape(g * x.data, y.shape))

    return record('mul', (x, y), x.data * y.data, backward)


def neg(a: Tensor) -> Tensor:
    return record('neg', (a,), -a.data, lambda g: (-g,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f'cannot reshape {a.shape} into '
                             f'{tuple(shape)}') from e
    return record('reshape', (a,), out, lambda g: (g.reshape(a.shape),))


def sum_all(a: Tensor) -> Tensor:
    return record('sum', (a,), np.asarray(a.data.sum()),
                  lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return record('mean', (a,), np.asarray(a.data.mean()), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction `[..., m, k] x [..., k, n] -> [..., m, n]`."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul: cannot contract {a.shape} with {b.shape}')
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f'matmul: batch extents of {a.shape} and '
                             f'{b.shape} do not broadcast') from e

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _sum_to_shape(ga, a.shape),
                None if gb is None else _sum_to_shape(gb, b.shape))

    return record('matmul', (a, b), a.data @ b.data, backward)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """`x @ weight.T` for `x: [..., n_in]` and `weight: [n_out, n_in]`."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f'linear: cannot apply weight {weight.shape} to '
                             f'input {x.shape}')
    n_out, n_in = weight.shape
    flat = x.data.reshape(-1, n_in)

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        return gx, gw

    out = (flat @ weight.data.T).reshape(*x.shape[:-1], n_out)
    return record('linear', (x, weight), out, backward)


def transpose_tokens(x: Tensor) -> Tensor:
    """Swaps the token and channel axes of a `[b, s, c]` tensor."""
    if x.ndim != 3:
        raise DimensionError(f'transpose_tokens expects a rank-3 tensor, '
                             f'got shape {x.shape}')
    return record('transpose_tokens', (x,),
                  np.ascontiguousarray(np.swapaxes(x.data, 1, 2)),
                  lambda g: (np.ascontiguousarray(np.swapaxes(g, 1, 2)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalizes each slice along the last axis with the biased variance,
    then applies `gamma * x_hat + beta`."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError('layer_norm over an empty last axis')
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f'layer_norm: gamma {gamma.shape} and beta '
                             f'{beta.shape} must both be ({d},) for input '
                             f'{x.shape}')
    if eps < 0:
        raise ValueError(f'layer_norm eps must be >= 0, got {eps}')

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        g_hat = g * gamma.data
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        g_gamma = (g * x_hat).reshape(-1, d).sum(axis=0)
        g_beta = g.reshape(-1, d).sum(axis=0)
        return gx, g_gamma, g_beta

    return record('layer_norm', (x, gamma, beta),
                  x_hat * gamma.data + beta.data, backward)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), with an overflow-free logistic."""
    s = special.expit(x.data)
    return record('silu', (x,), x.data * s,
                  lambda g: (g * (s + x.data * s * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return record('gelu', (x,), x.data * cdf,
                  lambda g: (g * (cdf + x.data * pdf),))


def relu(x: Tensor) -> Tensor:
    """NaN inputs stay NaN so divergence is not masked."""
    mask = x.data > 0
    return record('relu', (x,), np.maximum(x.data, 0.0),
                  lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the identity in evaluation mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f'dropout rate must be in [0, 1), got {rate}')
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    return record('dropout', (x,), x.data * keep, lambda g: (g * keep,))


def global_mean_pool(x: Tensor) -> Tensor:
    """Averages `[b, s, c]` over the token axis (adaptive pooling to size 1)."""
    if x.ndim != 3:
        raise DimensionError(f'global_mean_pool expects [b, s, c], got {x.shape}')
    s = x.shape[1]

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (np.repeat(g[:, None, :] / s, s, axis=1),)

    return record('global_mean_pool', (x,), x.data.mean(axis=1), backward)


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f'softmax_cross_entropy expects [b, k] logits, '
                             f'got {logits.shape}')
    b, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != b:
        raise DimensionError(f'{y.shape[0]} labels for logits {logits.shape}')
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f'label out of range [0, {k}): '
                         f'{int(y[(y < 0) | (y >= k)][0])}')

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = (lse - shifted[rows, y]).mean()

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        probs = np.exp(shifted - lse[:, None])
        probs[rows, y] -= 1.0
        return (probs * (g / b),)

    return record('softmax_cross_entropy', (logits,), np.asarray(loss), backward)


def backward(loss: Tensor) -> None:
    """Populates `grad` on every leaf that requires it and resets the tape.

    Raises:
        GradientError: if loss is not a scalar produced on the current tape
    """
    if loss.ndim != 0:
        raise GradientError(f'backward requires a scalar loss, got shape '
                            f'{loss.shape}')
    tape = current_tape()
    if loss.is_leaf or not loss.requires_grad:
        raise GradientError('loss is not connected to the gradient tape')

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
    logger.debug(f'backward traversed {len(tape)} tape entries')
    tape.reset()
    loss._entry = None  # pylint: disable=protected-access


@dataclasses.dataclass(frozen=True)
class GradCheckReport:
    max_error: float
    worst_index: tuple[int, ...]
    checked: int
    tolerance: float
    max_abs_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               tol: float = 1e-6, max_elements: Optional[int] = None,
               seed: int = 0, atol: float = 1e-8) -> GradCheckReport:
    """Compares the analytic gradient of scalar `f` at `x` with central
    differences.

    `x` must be a leaf; it is perturbed in place and restored. The error of an
    element is the relative error `|analytic - numeric| / max(|analytic|,
    |numeric|)`; elements that agree within `atol` score zero.

    Args:
        f: scalar-valued tensor function
        x: point of evaluation
        h: finite-difference step
        tol: pass threshold on the maximum relative error
        max_elements: if set, only a seeded sample of this many elements is
            checked
        seed: sampling seed
        atol: absolute agreement below which an element is not scored

    Returns:
        GradCheckReport

    Raises:
        GradientError: if `f` produces non-finite values
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise GradientError(f'grad_check: non-finite output {out.data}')
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)

    flat = np.arange(x.size)
    if max_elements is not None and max_elements < x.size:
        flat = np.sort(np.random.default_rng(seed).choice(
            x.size, size=max_elements, replace=False))

    worst, worst_abs, worst_idx = 0.0, 0.0, (0,) * x.ndim
    view = x.data.reshape(-1)
    with no_grad():
        for i in flat:
            original = view[i]
            view[i] = original + h
            plus = f(x).item()
            view[i] = original - h
            minus = f(x).item()
            view[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradientError(f'grad_check: non-finite output at '
                                    f'element {i}')
            numeric = (plus - minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            diff = abs(a - numeric)
            worst_abs = max(worst_abs, diff)
            err = 0.0 if diff <= atol else diff / max(abs(a), abs(numeric))
            if err > worst:
                worst = err
                worst_idx = tuple(int(j) for j in np.unravel_index(i, x.shape))
    return GradCheckReport(max_error=float(worst), worst_index=worst_idx,
                           checked=len(flat), tolerance=tol,
                           max_abs_error=float(worst_abs))
