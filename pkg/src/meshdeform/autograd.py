"""Dense float64 tensors with reverse-mode differentiation, plus Adam.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the nodes in reverse
creation order, which is a valid topological order and keeps gradient
accumulation deterministic.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .container import read_container, write_container
from .errors import InvalidArgumentError, NumericError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap ``data`` as the result of an op; records it on the tape if needed."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_counter)
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # --- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # --- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def square(self):
        return square(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgumentError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; no gradient flows where the floor is active."""
    a = as_tensor(a)
    mask = a.data >= floor
    return Tensor._make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def clip(a, lo, hi) -> Tensor:
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# --- reductions and shape ------------------------------------------------
def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise InvalidArgumentError("concat: no tensors given")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise InvalidArgumentError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# --- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), bw)


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    m = sp.csr_matrix(matrix)
    if m.shape[1] != x.shape[0]:
        raise InvalidArgumentError(f"spmm: incompatible shapes {m.shape} and {x.shape}")
    mt = m.T.tocsr()
    return Tensor._make(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise InvalidArgumentError(f"gather_rows: index out of range for shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), bw)


def scatter_add_rows(base, indices, values) -> Tensor:
    """Return ``base`` with ``values[k]`` added into row ``indices[k]``."""
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    if values.shape[0] != idx.shape[0] or values.shape[1:] != base.shape[1:]:
        raise InvalidArgumentError(
            f"scatter_add_rows: values shape {values.shape} does not fit base {base.shape} with {idx.shape[0]} indices"
        )
    out = base.data.copy()
    np.add.at(out, idx, values.data)
    return Tensor._make(out, (base, values), lambda g: (g, g[idx]))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution on a single ``H x W x C`` image.

    ``weight`` has shape ``(kh, kw, C_in, C_out)``; ``bias`` has shape ``(C_out,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[2] != weight.shape[2]:
        raise InvalidArgumentError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    kh, kw, cin, cout = weight.shape
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    H, W = xp.shape[:2]
    ho, wo = (H - kh) // s + 1, (W - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise InvalidArgumentError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    cols = np.empty((ho, wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + s * ho:s, j:j + s * wo:s, :]
    cols2 = cols.reshape(ho * wo, kh * kw * cin)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + s * ho:s, j:j + s * wo:s, :] += gcols[:, :, i, j, :]
            gx = gxp[p:H - p, p:W - p, :] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return Tensor._make(out, parents, bw)


# --- backward pass -------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# --- optimizer -----------------------------------------------------------
class Adam:
    """Adam with decoupled weight decay.

    The step is ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 3e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ):
        if lr <= 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam/step"][0])
        for k in self.params:
            self.m[k] = arrays[f"adam/m/{k}"].copy()
            self.v[k] = arrays[f"adam/v/{k}"].copy()


def lr_at(schedule: Sequence[Sequence[float]], step: int) -> float:
    """Piecewise-constant learning rate from ``[(start_step, lr), ...]`` pairs."""
    lr = None
    for start, value in sorted(schedule, key=lambda p: p[0]):
        if step >= start:
            lr = float(value)
    if lr is None:
        raise InvalidArgumentError(f"learning-rate schedule has no entry covering step {step}")
    return lr


# --- checkpoints ---------------------------------------------------------
def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    write_container(path, arrays, {"format": "meshdeform-checkpoint", **(meta or {})})


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, header = read_container(path)
    if header.get("format") != "meshdeform-checkpoint":
        raise InvalidArgumentError(f"{path}: not a checkpoint (format {header.get('format')!r})")
    return arrays, header


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_entries: int | None = None,
) -> float:
    """Worst relative error between autograd and central differences.

    ``fn`` must rebuild the graph from the current ``data`` of ``inputs``.
    When ``max_entries`` is set, that many randomly chosen entries per input
    are probed instead of every entry.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = fn().item()
            flat[i] = orig - h
            with no_grad():
                dn = fn().item()
            flat[i] = orig
            num = (up - dn) / (2.0 * h)
            ana = a.reshape(-1)[i]
            scale = max(abs(num), abs(ana), 1e-6 * max(1.0, abs(up)))
            err = abs(num - ana) / scale if scale > 0 else 0.0
            if not math.isnan(err):
                worst = max(worst, err)
            else:
                worst = math.inf
    return worst
