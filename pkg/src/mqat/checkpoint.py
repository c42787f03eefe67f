"""Checkpoint container: little-endian header plus per-layer payload.

Full-precision layers are stored as raw float32; layers of a completed
quantized module are stored as bit-packed level codes (b bits per weight,
layer-major) plus one float32 scale per layer, which is what realizes the
reported compression factor on disk. Loading reconstructs the effective
weights bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from . import quantizers as qz
from .posetask import ModularModel, build_model

MAGIC = b"MQCK"
VERSION = 1

_KIND_CODE = {qz.KIND_NONE: 0, qz.KIND_INQ: 1, qz.KIND_LSQ: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class CheckpointError(ValueError):
    pass


def pack_codes(levels: np.ndarray, bits: int) -> bytes:
    """Bit-pack integer level indices, little-endian within each byte."""
    levels = np.asarray(levels, dtype=np.int64).ravel()
    if bits == 1:
        codes = ((levels + 1) // 2).astype(np.uint8)       # -1 -> 0, +1 -> 1
    else:
        qn, _ = qz.qrange(bits)
        codes = (levels + qn).astype(np.uint8)
    bit_matrix = ((codes[:, None] >> np.arange(bits)[None, :]) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; returns integer levels."""
    raw = np.frombuffer(buf, dtype=np.uint8)
    bit_stream = np.unpackbits(raw, bitorder="little")
    needed = count * bits
    if bit_stream.size < needed:
        raise CheckpointError(f"packed payload too short: {bit_stream.size} bits < {needed}")
    bit_matrix = bit_stream[:needed].reshape(count, bits).astype(np.int64)
    codes = (bit_matrix << np.arange(bits)).sum(axis=1)
    if bits == 1:
        return codes * 2 - 1
    qn, _ = qz.qrange(bits)
    return codes - qn


def packed_size_bytes(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def payload_size_bits(model: ModularModel, qctx: qz.QuantContext) -> int:
    """Logical payload size: quantized weights at their bits, everything
    unquantized (full-precision weights and all biases) at 32."""
    total = 0
    for layer in model.layers:
        st = qctx.state_of(layer.module_id)
        bits = st.bits if st.kind != qz.KIND_NONE and st.complete else 32
        total += bits * layer.weight.size + 32 * layer.bias.size
    return total


def _module_entries(model: ModularModel, qctx: qz.QuantContext):
    modules = list(dict.fromkeys(l.module_id for l in model.layers))
    for module_id in modules:
        st = qctx.state_of(module_id)
        stored_kind = st.kind if st.kind != qz.KIND_NONE and st.complete else qz.KIND_NONE
        yield module_id, st, stored_kind


def save_checkpoint(path, model: ModularModel, qctx: qz.QuantContext | None = None,
                    meta: dict | None = None) -> None:
    qctx = qctx or qz.QuantContext()
    arch_blob = json.dumps({"arch": model.arch, "input_dim": model.input_dim,
                            "backbone_taps": model.backbone_taps}, sort_keys=True).encode()
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(arch_blob)) + arch_blob
    out += struct.pack("<I", len(meta_blob)) + meta_blob

    entries = list(_module_entries(model, qctx))
    out += struct.pack("<B", len(entries))
    for module_id, st, stored_kind in entries:
        name = module_id.encode()
        layers = model.layers_of(module_id)
        out += struct.pack("<B", len(name)) + name
        out += struct.pack("<BBH", _KIND_CODE[stored_kind],
                           st.bits if stored_kind != qz.KIND_NONE else 32, len(layers))
        if stored_kind != qz.KIND_NONE:
            for layer in layers:
                out += struct.pack("<f", np.float32(st.scale_of(layer.layer_id)))

    for module_id, st, stored_kind in entries:
        for layer in model.layers_of(module_id):
            w = layer.weight.value
            if stored_kind == qz.KIND_NONE:
                out += w.astype("<f4").tobytes()
            else:
                s = np.float32(st.scale_of(layer.layer_id))
                levels = qz.nearest_level(w, float(s), st.bits)
                out += pack_codes(levels, st.bits)
            out += layer.bias.value.astype("<f4").tobytes()

    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(tmp_fd, "wb") as f:
            f.write(bytes(out))
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.buf)}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (model, qctx, meta). Effective weights are reproduced
    bit-exactly; quantized modules come back frozen (INQ) or with fake
    quantization active (LSQ)."""
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not an MQCK checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (arch_len,) = r.unpack("<I")
    try:
        arch_info = json.loads(r.take(arch_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt architecture descriptor: {e}") from None
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata block: {e}") from None

    model = build_model(arch_info["arch"], seed=0)
    (n_modules,) = r.unpack("<B")
    module_meta = []
    for _ in range(n_modules):
        (name_len,) = r.unpack("<B")
        module_id = r.take(name_len).decode()
        kind_code, bits, n_layers = r.unpack("<BBH")
        if kind_code not in _CODE_KIND:
            raise CheckpointError(f"unknown quantizer kind code {kind_code}")
        kind = _CODE_KIND[kind_code]
        layers = model.layers_of(module_id)
        if len(layers) != n_layers:
            raise CheckpointError(
                f"module {module_id!r}: checkpoint has {n_layers} layers, model has {len(layers)}")
        scales = {}
        if kind != qz.KIND_NONE:
            for layer in layers:
                (s,) = r.unpack("<f")
                scales[layer.layer_id] = float(s)
        module_meta.append((module_id, kind, bits, scales))

    qctx = qz.QuantContext()
    for module_id, kind, bits, scales in module_meta:
        for layer in model.layers_of(module_id):
            n = layer.weight.size
            if kind == qz.KIND_NONE:
                w = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(layer.weight.tensor.shape)
                layer.weight.value = w.copy()
            else:
                levels = unpack_codes(r.take(packed_size_bytes(n, bits)), n, bits)
                s = np.float32(scales[layer.layer_id])
                layer.weight.value = (levels.astype(np.float32) * s).reshape(
                    layer.weight.tensor.shape)
            nb = layer.bias.size
            layer.bias.value = np.frombuffer(r.take(4 * nb), dtype="<f4").copy()
        if kind == qz.KIND_INQ:
            st = qz.QuantizerState(kind=kind, bits=bits, scales=scales, inq_fraction_done=1.0)
            qctx.states[module_id] = st
            for layer in model.layers_of(module_id):
                layer.weight.trainable_mask = np.zeros(layer.weight.tensor.shape, dtype=bool)
        elif kind == qz.KIND_LSQ:
            st = qz.QuantizerState(kind=kind, bits=bits, scales=scales)
            _, qp = qz.qrange(bits)
            for layer in model.layers_of(module_id):
                lid = layer.layer_id
                st.grad_scales[lid] = 1.0 / np.sqrt(layer.weight.size * qp)
                st.step_params[lid] = qz.Parameter(
                    np.array(scales[lid], dtype=np.float32).reshape(()), f"{lid}::step", module_id)
            qctx.states[module_id] = st
    if r.off != len(buf):
        raise CheckpointError(f"trailing bytes after payload: {len(buf) - r.off}")
    return model, qctx, meta
