"""Minimal reverse-mode autodiff over float32 numpy arrays.

Dense tensors only; the primitive set is exactly what the toy pose networks
need (matmul, add, relu, concat, narrow, scale, l2_normalize, mse,
quat_geodesic) plus a hook for externally defined ops (used by the LSQ fake
quantizer). Values are stored in single precision; reductions accumulate in
double precision so repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf (error state, never silent)."""


class ShapeError(ValueError):
    pass


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: produced non-finite values")


class Tensor:
    """A dense float32 array with an optional gradient slot.

    `grad_mask` (bool array, same shape) zeroes incoming gradient where
    False; it is how frozen (quantized) weights opt out of training.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_mask")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.grad_mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    Backward replays the records once each, in reverse order. Use as a
    context manager around a forward pass.
    """

    __slots__ = ("records",)

    def __init__(self):
        # each record: (output Tensor, inputs tuple, backward fn)
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def _tape_active() -> bool:
    return bool(_TAPE_STACK)


def record_op(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    """Create the output tensor of a primitive and register it on the tape.

    `backward_fn(grad_out)` must return one gradient array (or None) per
    input, in order. External modules can define new primitives through
    this hook.
    """
    out_data = _as_f32(out_data)
    _check_finite(name, out_data)
    rg = _tape_active() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        _TAPE_STACK[-1].records.append((out, inputs, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float32)
    if t.grad_mask is not None:
        g = np.where(t.grad_mask, g, np.float32(0.0))
    t.grad = g if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate dLoss/d(everything) back through the tape.

    Gradients accumulate into each reachable tensor's `.grad`; leaves with a
    grad_mask receive zeros where the mask is False.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.records:
        raise ValueError("backward: empty tape")
    _check_finite("backward(loss)", loss.data)
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            _accumulate(inp, gi)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    out = ad @ bd

    def bwd(g):
        g64 = g.astype(np.float64)
        ga = (g64 @ bd.T).astype(np.float32) if a.requires_grad else None
        gb = (ad.T @ g64).astype(np.float32) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), bwd, "matmul")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes do not broadcast: {a.shape} + {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), bwd, "add")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, np.float32(0.0))
    mask = x.data > 0

    def bwd(g):
        return (np.where(mask, g, np.float32(0.0)),)

    return record_op(out, (x,), bwd, "relu")


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum(widths)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(piece if p.requires_grad else None for piece, p in zip(pieces, parts))

    return record_op(out, tuple(parts), bwd, "concat")


def narrow(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"narrow: range [{start}:{stop}) invalid for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record_op(out, (x,), bwd, "narrow")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * np.float32(c)

    def bwd(g):
        return (g * np.float32(c),)

    return record_op(out, (x,), bwd, "scale")


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    xd = x.data.astype(np.float64)
    norm = np.sqrt(np.maximum((xd * xd).sum(axis=axis, keepdims=True), eps))
    y = xd / norm

    def bwd(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=axis, keepdims=True)
        return (((g64 - y * dot) / norm).astype(np.float32),)

    return record_op(y, (x,), bwd, "l2_normalize")


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = np.asarray((diff * diff).mean())
    n = diff.size

    def bwd(g):
        coeff = 2.0 * float(g.reshape(())) / n
        ga = (coeff * diff).astype(np.float32) if a.requires_grad else None
        gb = (-coeff * diff).astype(np.float32) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), bwd, "mse")


def quat_geodesic(q: Tensor, r: Tensor) -> Tensor:
    """Mean geodesic rotation distance 2*acos(|<q_i, r_i>|) over batch rows.

    Both inputs are (B, 4) unit quaternions; the absolute dot product makes
    the result invariant to the quaternion double cover. Gradients blow up
    as |dot| -> 1, so the backward denominator is floored.
    """
    if q.data.ndim != 2 or q.shape[1] != 4 or q.shape != r.shape:
        raise ShapeError(f"quat_geodesic: expected matching (B,4) inputs, got {q.shape} and {r.shape}")
    qd = q.data.astype(np.float64)
    rd = r.data.astype(np.float64)
    d = np.clip((qd * rd).sum(axis=1), -1.0, 1.0)
    out = np.asarray((2.0 * np.arccos(np.abs(d))).mean())
    bsz = qd.shape[0]

    def bwd(g):
        denom = np.sqrt(np.maximum(1.0 - d * d, 1e-6))
        factor = (-2.0 * np.sign(d) / denom) * (float(g.reshape(())) / bsz)
        gq = (factor[:, None] * rd).astype(np.float32) if q.requires_grad else None
        gr = (factor[:, None] * qd).astype(np.float32) if r.requires_grad else None
        return gq, gr

    return record_op(out, (q, r), bwd, "quat_geodesic")


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

class Parameter:
    """A trainable tensor plus the metadata the quantizers need.

    `trainable_mask` is shared with the tensor's grad_mask, so freezing an
    entry stops both its gradient and its SGD update.
    """

    def __init__(self, value, layer_id: str, module_id: str):
        self.tensor = Tensor(value, requires_grad=True)
        self.layer_id = layer_id
        self.module_id = module_id
        self.tensor.grad_mask = np.ones(self.tensor.shape, dtype=bool)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, arr) -> None:
        arr = _as_f32(arr)
        if arr.shape != self.tensor.shape:
            raise ShapeError(f"parameter {self.layer_id}: shape {arr.shape} != {self.tensor.shape}")
        self.tensor.data = arr

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def trainable_mask(self) -> np.ndarray:
        return self.tensor.grad_mask

    @trainable_mask.setter
    def trainable_mask(self, mask) -> None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.tensor.shape:
            raise ShapeError(f"parameter {self.layer_id}: mask shape {mask.shape} != {self.tensor.shape}")
        self.tensor.grad_mask = mask

    @property
    def size(self) -> int:
        return self.tensor.size

    def copy(self) -> "Parameter":
        p = Parameter(self.value.copy(), self.layer_id, self.module_id)
        p.trainable_mask = self.trainable_mask.copy()
        return p

    def __repr__(self):
        return f"Parameter({self.layer_id!r}, shape={self.tensor.shape})"


class SGD:
    """Plain SGD with momentum; updates skip entries whose mask is False.

    Masked entries are carried over bit-identically (np.where copies them
    untouched), which is what the INQ freezing contract requires.
    """

    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"SGD: lr must be positive, got {lr}")
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"SGD: momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros(p.tensor.shape, dtype=np.float32) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            g = p.tensor.grad
            if g is None:
                continue
            v *= np.float32(self.momentum)
            v += g
            p.tensor.data = np.where(
                p.tensor.grad_mask, p.tensor.data - np.float32(self.lr) * v, p.tensor.data
            )


# ---------------------------------------------------------------------------
# finite-difference Hessian-vector product
# ---------------------------------------------------------------------------

def flatten_params(params: list[Parameter]) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in params]).astype(np.float64)


def _gather_grads(params: list[Parameter]) -> np.ndarray:
    out = []
    for p in params:
        g = p.tensor.grad
        out.append(np.zeros(p.size) if g is None else g.ravel().astype(np.float64))
    return np.concatenate(out)


def hvp_fd(loss_fn, params: list[Parameter], v: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Hessian-vector product by central differences of first-order grads.

    Returns (grad(w + eps*v) - grad(w - eps*v)) / (2*eps) as float64 over the
    flattened parameter vector. `loss_fn()` must rebuild the loss from the
    current parameter values. O(eps^2) accurate; default eps is scale-aware.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    total = sum(p.size for p in params)
    if v.size != total:
        raise ShapeError(f"hvp_fd: v has {v.size} entries, parameters have {total}")
    if not np.any(v != 0.0):
        raise ValueError("hvp_fd: v must be nonzero")
    originals = [p.value.copy() for p in params]
    saved_grads = [p.tensor.grad for p in params]
    if eps is None:
        w_inf = max((float(np.max(np.abs(o))) if o.size else 0.0) for o in originals)
        eps = 1e-3 * (1.0 + w_inf)
    if eps <= 0:
        raise ValueError(f"hvp_fd: eps must be positive, got {eps}")

    def grad_at(sign: float) -> np.ndarray:
        off = 0
        for p, orig in zip(params, originals):
            chunk = v[off:off + p.size].reshape(p.tensor.shape)
            p.tensor.data = (orig.astype(np.float64) + sign * eps * chunk).astype(np.float32)
            p.tensor.zero_grad()
            off += p.size
        with Tape() as tape:
            loss = loss_fn()
            backward(tape, loss)
        g = _gather_grads(params)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("hvp_fd: non-finite gradient at probe point")
        return g

    try:
        g_plus = grad_at(+1.0)
        g_minus = grad_at(-1.0)
    finally:
        for p, orig, sg in zip(params, originals, saved_grads):
            p.tensor.data = orig
            p.tensor.grad = sg
    return (g_plus - g_minus) / (2.0 * eps)
