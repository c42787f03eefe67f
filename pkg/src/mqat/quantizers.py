"""Weight quantization mechanics: symmetric uniform levels, LSQ fake
quantization with straight-through gradients, and INQ partition-and-freeze.

Levels are linear (uniform) for both modes: b=1 gives binary {-1,+1}, b=2
gives ternary {-1,0,+1}, b>=2 generally {-Q..Q} with Q = 2^(b-1)-1. Only
weights are quantized; activations stay full precision throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

KIND_NONE = "none"
KIND_INQ = "inq"
KIND_LSQ = "lsq"
KINDS = (KIND_NONE, KIND_INQ, KIND_LSQ)

_MIN_SCALE = 1e-8


def qrange(bits: int) -> tuple[int, int]:
    """Symmetric clamp bounds (Q_N, Q_P); binary uses the {-1,+1} pair."""
    if bits < 1:
        raise ValueError(f"qrange: bits must be >= 1, got {bits}")
    if bits == 1:
        return 1, 1
    q = 2 ** (bits - 1) - 1
    return q, q


def uniform_levels(bits: int) -> np.ndarray:
    """Ordered integer level multipliers: {-1,1} for b=1, {-Q..Q} above."""
    if bits < 1:
        raise ValueError(f"uniform_levels: bits must be >= 1, got {bits}")
    if bits == 1:
        return np.array([-1, 1], dtype=np.int64)
    q = 2 ** (bits - 1) - 1
    return np.arange(-q, q + 1, dtype=np.int64)


def fit_scale_max(weights, bits: int) -> float:
    """Scale that maps the largest-magnitude weight onto the top level."""
    _, qp = qrange(bits)
    w_max = float(np.max(np.abs(weights))) if np.size(weights) else 0.0
    return max(w_max / qp, _MIN_SCALE)


def fit_scale_lsq_init(weights, bits: int) -> float:
    """Standard LSQ initialization: 2*mean(|w|)/sqrt(Q_P)."""
    _, qp = qrange(bits)
    w = np.asarray(weights)
    mean_abs = float(np.mean(np.abs(w))) if w.size else 0.0
    return max(2.0 * mean_abs / np.sqrt(qp), _MIN_SCALE)


def nearest_level(values, scale: float, bits: int) -> np.ndarray:
    """Integer level index of the closest representable value."""
    if scale <= 0:
        raise ValueError(f"nearest_level: scale must be positive, got {scale}")
    v = np.asarray(values, dtype=np.float64) / scale
    if bits == 1:
        return np.where(v >= 0, 1, -1).astype(np.int64)
    qn, qp = qrange(bits)
    return np.clip(np.round(v), -qn, qp).astype(np.int64)


def quantize_values(values, scale: float, bits: int) -> np.ndarray:
    """Snap values onto the level grid; results are exact multiples of scale."""
    k = nearest_level(values, scale, bits)
    return (k.astype(np.float32) * np.float32(scale)).astype(np.float32)


# ---------------------------------------------------------------------------
# LSQ fake quantization (autodiff primitive)
# ---------------------------------------------------------------------------

def fake_quant_lsq(w: Tensor, step: Tensor, bits: int, grad_scale: float) -> Tensor:
    """LSQ forward: clamp(round(w/s), -Q_N, Q_P) * s.

    Weight gradients are straight-through inside the clamp range and zero
    outside. The step-size gradient follows the LSQ rule ((round(v) - v)
    inside, the clamp bound outside), multiplied by `grad_scale`
    (1/sqrt(N * Q_P) for a layer of N weights).
    """
    s = float(step.data.reshape(()))
    if s <= 0:
        raise ValueError(f"fake_quant_lsq: step size must be positive, got {s}")
    qn, qp = qrange(bits)
    v = w.data.astype(np.float64) / s
    if bits == 1:
        k = np.where(v >= 0, 1.0, -1.0)
        inside = np.abs(v) <= 1.0
    else:
        k = np.clip(np.round(v), -qn, qp)
        inside = (v >= -qn) & (v <= qp)
    out = (k * s).astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        gw = np.where(inside, g64, 0.0).astype(np.float32) if w.requires_grad else None
        gs = None
        if step.requires_grad:
            local = np.where(inside, k - v, k)
            gs = np.asarray((g64 * local).sum() * grad_scale, dtype=np.float32).reshape(step.shape)
        return gw, gs

    return ad.record_op(out, (w, step), bwd, "fake_quant_lsq")


# ---------------------------------------------------------------------------
# per-module quantizer state
# ---------------------------------------------------------------------------

@dataclass
class QuantizerState:
    """Quantization bookkeeping for one module.

    For INQ the frozen masks live inside the Parameters (inverted
    trainable_mask); this records the shared grid (scale per layer) and the
    cumulative fraction. For LSQ the step sizes are trainable Parameters and
    the model weights themselves act as the full-precision shadow copy.
    """

    kind: str = KIND_NONE
    bits: int = 32
    scales: dict[str, float] = field(default_factory=dict)
    step_params: dict[str, Parameter] = field(default_factory=dict)
    grad_scales: dict[str, float] = field(default_factory=dict)
    inq_fraction_done: float = 0.0

    @property
    def complete(self) -> bool:
        if self.kind == KIND_INQ:
            return self.inq_fraction_done >= 1.0
        return self.kind == KIND_LSQ

    def scale_of(self, layer_id: str) -> float:
        """Current grid scale; for LSQ this tracks the learned step size."""
        if self.kind == KIND_LSQ:
            return float(self.step_params[layer_id].value.reshape(()))
        return self.scales[layer_id]

    def copy(self) -> "QuantizerState":
        dup = QuantizerState(self.kind, self.bits, dict(self.scales), {}, dict(self.grad_scales),
                             self.inq_fraction_done)
        for lid, p in self.step_params.items():
            dup.step_params[lid] = p.copy()
        return dup


class QuantContext:
    """Maps module_id -> QuantizerState and supplies the per-layer weight
    transform that ModularModel.forward consumes.

    `layer_states` holds layer-granular overrides for the mixed-precision
    baseline mode; a layer entry wins over its module's entry.
    """

    def __init__(self):
        self.states: dict[str, QuantizerState] = {}
        self.layer_states: dict[str, QuantizerState] = {}

    def state_of(self, module_id: str) -> QuantizerState:
        return self.states.get(module_id) or QuantizerState()

    def weight_fn(self):
        has_lsq = any(s.kind == KIND_LSQ for s in self.states.values()) or \
            any(s.kind == KIND_LSQ for s in self.layer_states.values())
        if not has_lsq:
            return None

        def fn(param: Parameter) -> Tensor:
            st = self.layer_states.get(param.layer_id) or self.states.get(param.module_id)
            if st is None or st.kind != KIND_LSQ:
                return param.tensor
            step = st.step_params[param.layer_id]
            return fake_quant_lsq(param.tensor, step.tensor, st.bits, st.grad_scales[param.layer_id])

        return fn

    def trainable_steps(self) -> list[Parameter]:
        out = []
        for mid in sorted(self.states):
            st = self.states[mid]
            if st.kind == KIND_LSQ:
                out.extend(st.step_params[k] for k in sorted(st.step_params))
        for lid in sorted(self.layer_states):
            st = self.layer_states[lid]
            if st.kind == KIND_LSQ:
                out.extend(st.step_params[k] for k in sorted(st.step_params))
        return out

    def copy(self) -> "QuantContext":
        dup = QuantContext()
        dup.states = {m: s.copy() for m, s in self.states.items()}
        dup.layer_states = {l: s.copy() for l, s in self.layer_states.items()}
        return dup


def attach_lsq(ctx: QuantContext, model, module_id: str, bits: int) -> QuantizerState:
    """Install LSQ fake quantization on every layer of a module."""
    layers = model.layers_of(module_id)
    if not layers:
        raise ValueError(f"attach_lsq: module {module_id!r} has no layers")
    st = QuantizerState(kind=KIND_LSQ, bits=bits)
    _, qp = qrange(bits)
    for layer in layers:
        w = layer.weight.value
        s0 = fit_scale_lsq_init(w, bits)
        st.scales[layer.layer_id] = s0
        st.grad_scales[layer.layer_id] = 1.0 / np.sqrt(w.size * qp)
        st.step_params[layer.layer_id] = Parameter(
            np.array(s0, dtype=np.float32).reshape(()), f"{layer.layer_id}::step", module_id
        )
    ctx.states[module_id] = st
    return st


def attach_lsq_layer(ctx: QuantContext, layer, bits: int) -> QuantizerState:
    """Layer-granular LSQ attachment (mixed-precision baseline mode)."""
    st = QuantizerState(kind=KIND_LSQ, bits=bits)
    _, qp = qrange(bits)
    w = layer.weight.value
    s0 = fit_scale_lsq_init(w, bits)
    st.scales[layer.layer_id] = s0
    st.grad_scales[layer.layer_id] = 1.0 / np.sqrt(w.size * qp)
    st.step_params[layer.layer_id] = Parameter(
        np.array(s0, dtype=np.float32).reshape(()), f"{layer.layer_id}::step", layer.module_id
    )
    ctx.layer_states[layer.layer_id] = st
    return st


def begin_inq(ctx: QuantContext, model, module_id: str, bits: int) -> QuantizerState:
    """Fix the INQ grid for a module from its current weights."""
    layers = model.layers_of(module_id)
    if not layers:
        raise ValueError(f"begin_inq: module {module_id!r} has no layers")
    st = QuantizerState(kind=KIND_INQ, bits=bits)
    for layer in layers:
        st.scales[layer.layer_id] = fit_scale_max(layer.weight.value, bits)
    ctx.states[module_id] = st
    return st


def inq_partition(values: np.ndarray, frozen_mask: np.ndarray, target_fraction: float,
                  strategy: str = "magnitude", rng: np.random.Generator | None = None) -> np.ndarray:
    """Select the flat indices to freeze so that round(fraction*N) are frozen.

    Magnitude strategy freezes the largest |w| first (the INQ default);
    already-frozen entries are never revisited, so masks grow monotonically.
    """
    if not (0.0 <= target_fraction <= 1.0):
        raise ValueError(f"inq_partition: fraction must be in [0, 1], got {target_fraction}")
    flat = values.ravel()
    frozen = frozen_mask.ravel()
    n = flat.size
    target = int(round(target_fraction * n))
    current = int(frozen.sum())
    if target < current:
        raise ValueError(
            f"inq_partition: target fraction {target_fraction} would shrink the frozen set "
            f"({target} < {current})")
    need = target - current
    if need == 0:
        return np.empty(0, dtype=np.int64)
    candidates = np.flatnonzero(~frozen)
    if strategy == "magnitude":
        order = np.argsort(-np.abs(flat[candidates]), kind="stable")
    elif strategy == "random":
        if rng is None:
            raise ValueError("inq_partition: random strategy needs an rng")
        order = rng.permutation(candidates.size)
    else:
        raise ValueError(f"inq_partition: unknown strategy {strategy!r}")
    return candidates[order[:need]]


def inq_apply(param: Parameter, freeze_idx: np.ndarray, scale: float, bits: int) -> None:
    """Snap the selected entries onto the grid and freeze them."""
    if freeze_idx.size == 0:
        return
    flat = param.value.ravel().copy()
    flat[freeze_idx] = quantize_values(flat[freeze_idx], scale, bits)
    mask = param.trainable_mask.ravel().copy()
    mask[freeze_idx] = False
    param.value = flat.reshape(param.tensor.shape)
    param.trainable_mask = mask.reshape(param.tensor.shape)


def inq_step(ctx: QuantContext, model, module_id: str, target_fraction: float,
             strategy: str = "magnitude", rng: np.random.Generator | None = None) -> None:
    """Advance a module's INQ schedule to the given cumulative fraction."""
    st = ctx.states.get(module_id)
    if st is None or st.kind != KIND_INQ:
        raise ValueError(f"inq_step: module {module_id!r} has no active INQ state")
    for layer in model.layers_of(module_id):
        frozen = ~layer.weight.trainable_mask
        idx = inq_partition(layer.weight.value, frozen, target_fraction, strategy, rng)
        inq_apply(layer.weight, idx, st.scales[layer.layer_id], st.bits)
    st.inq_fraction_done = max(st.inq_fraction_done, target_fraction)


def module_on_grid(model, ctx: QuantContext, module_id: str) -> bool:
    """True when every weight of the module sits exactly on its level grid."""
    st = ctx.state_of(module_id)
    if st.kind == KIND_NONE:
        return False
    for layer in model.layers_of(module_id):
        s = st.scale_of(layer.layer_id)
        w = layer.weight.value
        snapped = quantize_values(w, s, st.bits)
        if not np.array_equal(snapped, w):
            return False
    return True
