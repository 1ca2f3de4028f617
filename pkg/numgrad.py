"""
Dense reverse-mode differentiation on numpy arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded in
execution order; ``tape.backward(loss)`` replays them in reverse and adds the
resulting gradients into the ``grad`` slots of the parameters held by a
ParamStore. Outside a tape nothing is recorded, which is how inference runs.
"""

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import CheckpointError, ConfigurationError, ContractError, DimensionError, NumericError
from utils import atomic_write

logger = logging.getLogger(__name__)

DTYPES = {'float64': np.float64, 'float32': np.float32}
CHECKPOINT_MAGIC = 'symnet-checkpoint'
CHECKPOINT_VERSION = 1

_tape_stack: List[Optional['Tape']] = []


def resolve_dtype(name) -> np.dtype:
    if isinstance(name, np.dtype):
        return name
    try:
        return np.dtype(DTYPES[str(name)])
    except KeyError:
        raise ConfigurationError(f"unsupported dtype '{name}' (use float64 or float32)") from None


def active_tape() -> Optional['Tape']:
    return _tape_stack[-1] if _tape_stack else None


@contextmanager
def no_grad():
    """Suspend recording, also inside an enclosing tape"""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


class Tensor:
    """An n-dimensional array that can take part in recorded computations"""

    __array_priority__ = 100

    def __init__(self, data, name: str = '', dtype=None):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype.kind != 'f':
            array = array.astype(np.float64)
        self.data = array
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ''
        return f"Tensor{label}(shape={list(self.shape)}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    out: Tensor
    parents: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Primitive operations recorded in execution order"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(Node(out, parents, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every reachable parameter slot"""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, parent_grad in zip(node.parents, node.vjp(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.grad is not None:
                    parent.grad += parent_grad
                else:
                    key = id(parent)
                    grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


# ---------------------------------------------------------------------------
# primitives

def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], vjp, name: str = '') -> Tensor:
    out = Tensor(data, name=name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(out: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite values produced by {where}")
    return out


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    return _as_tensor(a, b), b


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot {op} shapes {list(a.shape)} and {list(b.shape)}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, 'add')
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, 'subtract')
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, 'multiply')
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, 'divide')
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {list(x.shape)} into {list(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {list(x.shape)} to {list(shape)}") from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on the way back"""
    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)
    return _result(np.array(x.data[key]), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[list(t.shape) for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink keeps satisfied hinges inert
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


hinge = relu


def sigmoid(x: Tensor) -> Tensor:
    info = np.finfo(x.dtype)
    out = np.clip(expit(x.data), info.tiny, 1.0 - info.epsneg)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out ** 2),))


def softmax(x: Tensor) -> Tensor:
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm over one axis; gradient taken as 0 where the norm vanishes"""
    out = np.sqrt((x.data ** 2).sum(axis=axis))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)
    return _result(out, (x,), vjp)


def distance(a: Tensor, b: Tensor, kind: str = 'l2') -> Tensor:
    """Row distance over the last axis"""
    if kind == 'l2':
        return norm(a - b)
    if kind == 'l1':
        return tensor_sum(absolute(a - b), axis=-1)
    if kind == 'cosine':
        dot = tensor_sum(a * b, axis=-1)
        return 1.0 - dot / (norm(a) * norm(b) + 1e-12)
    raise ConfigurationError(f"unknown distance '{kind}' (use l2, l1 or cosine)")


ACTIVATIONS = {
    'sigmoid': sigmoid,
    'relu': relu,
    'tanh': tanh,
    'softmax': softmax,
}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation '{kind}'") from None
    return _check_finite(fn(x), f"{kind} activation")


# ---------------------------------------------------------------------------
# parameters and layers

class ParamStore:
    """Named parameters with paired gradient slots, plus non-trainable buffers"""

    def __init__(self, seed: int = 0, dtype='float64'):
        self.seed = int(seed)
        self.dtype = resolve_dtype(dtype)
        self.rng = np.random.default_rng(self.seed)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def _check_new(self, name):
        if name in self:
            raise ContractError(f"parameter name '{name}' already registered")

    def add_param(self, name: str, shape, init: str = 'zeros', fan_in: Optional[int] = None) -> Tensor:
        self._check_new(name)
        shape = tuple(int(s) for s in shape)
        if init == 'uniform':
            bound = np.sqrt(1.0 / max(fan_in or shape[0], 1))
            values = self.rng.uniform(-bound, bound, size=shape)
        elif init == 'ones':
            values = np.ones(shape)
        elif init == 'zeros':
            values = np.zeros(shape)
        else:
            raise ConfigurationError(f"unknown initialiser '{init}'")
        param = Tensor(values.astype(self.dtype), name=name)
        param.grad = np.zeros_like(param.data)
        param.requires_grad = True
        self.params[name] = param
        return param

    def add_buffer(self, name: str, values) -> np.ndarray:
        self._check_new(name)
        self.buffers[name] = np.array(values, dtype=self.dtype)
        return self.buffers[name]

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad[...] = 0

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: p.grad.copy() for name, p in self.params.items()}

    def state(self) -> Dict[str, np.ndarray]:
        """Every stored array, parameters first, in registration order"""
        state = {name: p.data for name, p in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state(self, other: 'ParamStore') -> None:
        """Copy values from a store with the same layout"""
        mine, theirs = self.state(), other.state()
        layout = {n for n in mine if not n.endswith('.velocity')}
        missing = sorted(layout ^ {n for n in theirs if not n.endswith('.velocity')})
        if missing:
            raise CheckpointError(f"parameter layout differs: {', '.join(missing)}")
        for name, values in theirs.items():
            if name not in mine:
                self.buffers[name] = values.astype(self.dtype)
                continue
            if mine[name].shape != values.shape:
                raise CheckpointError(
                    f"shape of '{name}' is {list(values.shape)}, expected {list(mine[name].shape)}")
            mine[name][...] = values


class Affine:
    """Fully-connected layer y = xW + b"""

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int):
        self.name = name
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = store.add_param(f"{name}.weight", (in_dim, out_dim), init='uniform', fan_in=in_dim)
        self.bias = store.add_param(f"{name}.bias", (out_dim,), init='zeros')

    def __call__(self, x: Tensor) -> Tensor:
        return affine(self, x)


def affine(layer: Affine, x: Tensor) -> Tensor:
    x = _as_tensor(x, layer.weight)
    W, b = layer.weight, layer.bias
    if x.ndim == 0 or x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"{layer.name}: input shape {list(x.shape)} does not match weight shape {list(W.shape)}")
    out = x.data @ W.data + b.data

    def vjp(g):
        g2 = g.reshape(-1, W.shape[1])
        x2 = x.data.reshape(-1, W.shape[0])
        return g @ W.data.T, x2.T @ g2, g2.sum(axis=0)
    return _check_finite(_result(out, (x, W, b), vjp), f"affine layer '{layer.name}'")


class BatchNorm:
    """Per-feature normalisation over every leading axis"""

    def __init__(self, store: ParamStore, name: str, dim: int, momentum: float = 0.9,
                 eps: float = 1e-5, single_sample: str = 'error'):
        if single_sample not in ('error', 'identity'):
            raise ConfigurationError(f"bn single_sample must be 'error' or 'identity', got '{single_sample}'")
        self.name = name
        self.momentum, self.eps, self.single_sample = momentum, eps, single_sample
        self.gamma = store.add_param(f"{name}.gamma", (dim,), init='ones')
        self.beta = store.add_param(f"{name}.beta", (dim,), init='zeros')
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(dim))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(dim))

    def __call__(self, x: Tensor, mode: str = 'train') -> Tensor:
        return batchnorm(self, x, mode)


def batchnorm(layer: BatchNorm, x: Tensor, mode: str = 'train') -> Tensor:
    x = _as_tensor(x, layer.gamma)
    dim = layer.gamma.shape[0]
    if x.shape[-1] != dim:
        raise DimensionError(f"{layer.name}: input shape {list(x.shape)} does not match {dim} features")
    gamma, beta = layer.gamma, layer.beta
    flat = x.data.reshape(-1, dim)
    rows = flat.shape[0]

    if mode == 'train':
        if rows < 2:
            if layer.single_sample == 'identity':
                return x
            raise ContractError(f"{layer.name}: batch size {rows} in train mode needs at least 2 rows")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        xhat = (flat - mean) * inv_std
        layer.running_mean *= layer.momentum
        layer.running_mean += (1.0 - layer.momentum) * mean
        layer.running_var *= layer.momentum
        layer.running_var += (1.0 - layer.momentum) * var * rows / (rows - 1)

        def vjp(g):
            g2 = g.reshape(-1, dim)
            dxhat = g2 * gamma.data
            dx = inv_std / rows * (rows * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)
    elif mode == 'eval':
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (flat - layer.running_mean) * inv_std

        def vjp(g):
            g2 = g.reshape(-1, dim)
            return (g2 * gamma.data * inv_std).reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)
    else:
        raise ConfigurationError(f"unknown batchnorm mode '{mode}'")

    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    return _check_finite(_result(out, (x, gamma, beta), vjp), f"batchnorm '{layer.name}'")


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0) -> None:
    """p <- p - lr * g (or the momentum velocity), then zero every gradient"""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if momentum < 0:
        raise ConfigurationError(f"momentum must be non-negative, got {momentum}")
    for name, param in store.params.items():
        step = param.grad
        if momentum:
            key = f"{name}.velocity"
            if key not in store.buffers:
                store.buffers[key] = np.zeros_like(param.data)
            velocity = store.buffers[key]
            velocity *= momentum
            velocity += param.grad
            step = velocity
        param.data -= lr * step
        param.grad[...] = 0


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    worst: Optional[Tuple[str, Tuple[int, ...], float, float]] = None
    kinks: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def summary(self) -> str:
        status = 'pass' if self.passed else 'FAIL'
        text = f"{status}: max rel err {self.max_error:.3e} over {self.checked} entries (tol {self.tol:g})"
        if self.kinks:
            text += f", {len(self.kinks)} non-differentiable point(s) skipped"
        if self.worst and not self.passed:
            name, idx, analytic, numeric = self.worst
            text += f"; worst {name}{list(idx)} analytic={analytic:.6e} numeric={numeric:.6e}"
        return text


LossOutput = Union[Tensor, Mapping[str, Tensor]]


def _named_outputs(loss_fn: Callable[[], LossOutput]) -> Dict:
    out = loss_fn()
    return {None: out} if isinstance(out, Tensor) else dict(out)


def tape_gradients(loss_fn: Callable[[], LossOutput], store: ParamStore) -> Tuple[Dict, Dict]:
    """Loss values and parameter gradients for every output of loss_fn, one backward pass each"""
    store.zero_grad()
    with Tape() as tape:
        losses = _named_outputs(loss_fn)
    values, gradients = {}, {}
    for key, loss in losses.items():
        values[key] = float(loss.data)
        if not np.isfinite(values[key]):
            raise NumericError(f"non-finite loss{'' if key is None else f' {key}'} at the unperturbed parameters")
        tape.backward(loss)
        gradients[key] = store.gradients()
        store.zero_grad()
    return values, gradients


def finite_diff_check(loss_fn: Callable[[], LossOutput], store: ParamStore, eps: float = 1e-6,
                      tol: float = 1e-5, kink_tol: float = 1e-2,
                      names: Optional[Sequence[str]] = None, gradients: Optional[Mapping] = None):
    """Compare tape gradients with central differences for every parameter entry.

    The relative error of an entry is |a - n| / max(|a|, |n|, 1). Entries where
    the one-sided slopes disagree by more than ``kink_tol`` are reported as
    non-differentiable points and left out of the pass/fail decision.

    ``loss_fn`` returns a scalar Tensor, or a dict of them; a dict yields one
    GradCheckReport per key from a single sweep of perturbations.

    ``gradients`` replaces the tape gradients of ``store`` with ones computed
    elsewhere, keyed like the loss output ({param name: array} for a single
    loss). A float32 model is checked this way against a float64 copy.
    """
    base, analytic = tape_gradients(loss_fn, store)
    if gradients is not None:
        analytic = {None: gradients} if None in base else dict(gradients)
        missing = [str(key) for key in base if key not in analytic]
        if missing:
            raise ContractError(f"no supplied gradients for loss output(s) {', '.join(missing)}")

    def evaluate(name, idx):
        with no_grad():
            values = {key: float(loss.data) for key, loss in _named_outputs(loss_fn).items()}
        if not all(np.isfinite(v) for v in values.values()):
            raise NumericError(f"non-finite loss with parameter {name}{list(idx)} perturbed")
        return values

    reports = {key: GradCheckReport(tol=tol) for key in base}
    worst_err = {key: -1.0 for key in base}
    for name in (names if names is not None else list(store.params)):
        param = store.params[name]
        errors = {key: [0.0] for key in base}
        for idx in np.ndindex(param.shape):
            original = float(param.data[idx])
            param.data[idx] = original + eps
            upper = float(param.data[idx])
            f_plus = evaluate(name, idx)
            param.data[idx] = original - eps
            lower = float(param.data[idx])
            f_minus = evaluate(name, idx)
            param.data[idx] = original

            for key, report in reports.items():
                numeric = (f_plus[key] - f_minus[key]) / (upper - lower)
                forward = (f_plus[key] - base[key]) / (upper - original)
                backward_slope = (base[key] - f_minus[key]) / (original - lower)
                if abs(forward - backward_slope) > kink_tol * max(1.0, abs(numeric)):
                    report.kinks.append((name, idx))
                    continue
                a = float(analytic[key][name][idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
                errors[key].append(err)
                report.checked += 1
                if err > worst_err[key]:
                    worst_err[key] = err
                    report.worst = (name, idx, a, numeric)
        for key, report in reports.items():
            report.max_rel_error[name] = max(errors[key])

    kinks = sum(len(r.kinks) for r in reports.values())
    if kinks:
        logger.info(f"finite_diff_check skipped {kinks} non-differentiable point(s)")
    if None in reports:
        return reports[None]
    return reports


# ---------------------------------------------------------------------------
# checkpoint codec

def _shape_text(shape) -> str:
    return 'x'.join(str(s) for s in shape) if len(shape) else 'scalar'


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == 'scalar' else tuple(int(s) for s in text.split('x'))


def save_checkpoint(path: str, store: ParamStore, meta: Optional[Dict] = None) -> str:
    """Write a key-value manifest followed by raw little-endian values"""
    lines = [f"{CHECKPOINT_MAGIC}: {CHECKPOINT_VERSION}",
             f"dtype: {store.dtype.name}",
             f"seed: {store.seed}"]
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key}: {json.dumps(value, sort_keys=True)}")
    entries = [('param', name, p.data) for name, p in store.params.items()]
    entries += [('buffer', name, values) for name, values in store.buffers.items()]
    for kind, name, values in entries:
        lines.append(f"{kind} {name} {_shape_text(values.shape)}")
    lines.append('data:')

    little = store.dtype.newbyteorder('<')

    def write(f):
        f.write(('\n'.join(lines) + '\n').encode('utf-8'))
        for _, _, values in entries:
            f.write(np.ascontiguousarray(values, dtype=little).tobytes())
    return atomic_write(path, write, binary=True)


def load_checkpoint(path: str) -> Tuple[ParamStore, Dict]:
    """Inverse of save_checkpoint; values come back bit-identical"""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()
    marker = b'\ndata:\n'
    cut = blob.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing 'data:' section")
    header = blob[:cut].decode('utf-8').splitlines()
    payload = memoryview(blob)[cut + len(marker):]

    fields: Dict[str, str] = {}
    entries: List[Tuple[str, str, Tuple[int, ...]]] = []
    for lineno, line in enumerate(header, start=1):
        if line.startswith('param ') or line.startswith('buffer '):
            parts = line.split()
            if len(parts) != 3:
                raise CheckpointError(f"{path}:{lineno}: malformed entry '{line}'")
            entries.append((parts[0], parts[1], _parse_shape(parts[2])))
        elif ': ' in line:
            key, value = line.split(': ', 1)
            fields[key] = value
        else:
            raise CheckpointError(f"{path}:{lineno}: unreadable line '{line}'")
    if fields.get(CHECKPOINT_MAGIC) != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")

    store = ParamStore(seed=int(fields.get('seed', 0)), dtype=fields.get('dtype', 'float64'))
    little = store.dtype.newbyteorder('<')
    offset = 0
    for kind, name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * little.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated data for '{name}' at byte offset {offset}")
        values = np.frombuffer(payload[offset:offset + nbytes], dtype=little).reshape(shape)
        values = values.astype(store.dtype)
        offset += nbytes
        if kind == 'param':
            param = Tensor(values, name=name)
            param.grad = np.zeros_like(param.data)
            param.requires_grad = True
            store.params[name] = param
        else:
            store.buffers[name] = values
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after data")
    meta = {key[len('meta.'):]: json.loads(value) for key, value in fields.items() if key.startswith('meta.')}
    return store, meta
