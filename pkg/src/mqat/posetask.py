"""Synthetic 6D-pose dataset and the K=3 modular regression network.

The "object" is a unit cube sampled at its 8 corners and 6 face centers
(V=14, diameter sqrt(3)). Each sample projects the mesh through a fixed
pinhole camera under a random rigid transform; the network sees the noisy
projected coordinates plus per-vertex facing flags and regresses an
unnormalized quaternion and a translation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .metrics import quat_to_matrix

FOCAL_PX = 500.0
TRANSLATION_LOW = np.array([-0.5, -0.5, 2.0])
TRANSLATION_HIGH = np.array([0.5, 0.5, 6.0])
TRANSLATION_LOSS_WEIGHT = 1.0

MODULE_NAMES = ("backbone", "aggregator", "head")

DATASET_MAGIC = b"MQTD"
DATASET_VERSION = 1


def _build_mesh() -> np.ndarray:
    corners = [
        (x, y, z)
        for x in (-0.5, 0.5)
        for y in (-0.5, 0.5)
        for z in (-0.5, 0.5)
    ]
    centers = [(-0.5, 0, 0), (0.5, 0, 0), (0, -0.5, 0), (0, 0.5, 0), (0, 0, -0.5), (0, 0, 0.5)]
    return np.array(corners + centers, dtype=np.float32)


MESH_VERTICES = _build_mesh()
NUM_VERTICES = MESH_VERTICES.shape[0]
INPUT_DIM = 3 * NUM_VERTICES


def mesh_diameter(vertices) -> float:
    verts = np.asarray(vertices, dtype=np.float64)
    diff = verts[:, None, :] - verts[None, :, :]
    return float(np.linalg.norm(diff, axis=2).max())


MESH_DIAMETER = mesh_diameter(MESH_VERTICES)


@dataclass
class PoseSample:
    input: np.ndarray        # (3V,) float32: u0,v0,...,u13,v13 pixels, then V facing flags
    gt_rotation: np.ndarray  # (4,) float32 unit quaternion (w, x, y, z)
    gt_translation: np.ndarray  # (3,) float32 meters
    vertices: np.ndarray     # (V, 3) float32 object-frame mesh
    diameter: float


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # per-sample stream so generation order (or parallelism) cannot matter
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via the three-uniform (Shoemake) construction."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.array([
        b * np.cos(2 * np.pi * u3),
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
    ])
    return q / np.linalg.norm(q)


def generate_sample(seed: int, index: int, noise_std: float) -> PoseSample:
    rng = _sample_rng(seed, index)
    q = random_unit_quaternion(rng)
    t = rng.uniform(TRANSLATION_LOW, TRANSLATION_HIGH)
    noise = rng.standard_normal(2 * NUM_VERTICES)

    R = quat_to_matrix(q)
    verts = MESH_VERTICES.astype(np.float64)
    pts = verts @ R.T + t
    proj = FOCAL_PX * pts[:, :2] / pts[:, 2:3]
    coords = proj.ravel() + noise_std * noise

    # facing flag: outward vertex normal pointing toward the camera
    normals = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    facing = (np.einsum("vi,vi->v", normals @ R.T, pts) < 0).astype(np.float64)

    return PoseSample(
        input=np.concatenate([coords, facing]).astype(np.float32),
        gt_rotation=q.astype(np.float32),
        gt_translation=t.astype(np.float32),
        vertices=MESH_VERTICES.copy(),
        diameter=MESH_DIAMETER,
    )


def generate_dataset(seed: int, n: int, noise_std: float = 0.0) -> list[PoseSample]:
    if n <= 0:
        raise ValueError(f"generate_dataset: n must be positive, got {n}")
    if noise_std < 0:
        raise ValueError(f"generate_dataset: noise_std must be nonnegative, got {noise_std}")
    return [generate_sample(seed, i, noise_std) for i in range(n)]


# ---------------------------------------------------------------------------
# flat binary container
# ---------------------------------------------------------------------------

def dataset_to_bytes(samples: list[PoseSample]) -> bytes:
    n = len(samples)
    head = DATASET_MAGIC + struct.pack("<III", DATASET_VERSION, n, NUM_VERTICES)
    body = bytearray()
    for s in samples:
        body += s.input.astype("<f4").tobytes()
        body += s.gt_rotation.astype("<f4").tobytes()
        body += s.gt_translation.astype("<f4").tobytes()
        body += s.vertices.astype("<f4").tobytes()
        body += struct.pack("<f", s.diameter)
    return head + bytes(body)


def dataset_from_bytes(buf: bytes) -> list[PoseSample]:
    if buf[:4] != DATASET_MAGIC:
        raise ValueError("dataset: bad magic (not an MQTD file)")
    version, n, nv = struct.unpack_from("<III", buf, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"dataset: unsupported version {version}")
    rec = (3 * nv) + 4 + 3 + (3 * nv) + 1
    expected = 16 + 4 * rec * n
    if len(buf) != expected:
        raise ValueError(f"dataset: expected {expected} bytes, got {len(buf)}")
    samples = []
    off = 16
    for _ in range(n):
        vals = np.frombuffer(buf, dtype="<f4", count=rec, offset=off)
        off += 4 * rec
        i0 = 3 * nv
        samples.append(PoseSample(
            input=vals[:i0].copy(),
            gt_rotation=vals[i0:i0 + 4].copy(),
            gt_translation=vals[i0 + 4:i0 + 7].copy(),
            vertices=vals[i0 + 7:i0 + 7 + 3 * nv].reshape(nv, 3).copy(),
            diameter=float(vals[-1]),
        ))
    return samples


def save_dataset(path, samples: list[PoseSample]) -> None:
    data = dataset_to_bytes(samples)
    with open(path, "wb") as f:
        f.write(data)


def load_dataset(path) -> list[PoseSample]:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def dataset_arrays(samples: list[PoseSample]):
    """Stack a sample list into (X, Q, T) training arrays."""
    X = np.stack([s.input for s in samples])
    Q = np.stack([s.gt_rotation for s in samples])
    T = np.stack([s.gt_translation for s in samples])
    return X, Q, T


# ---------------------------------------------------------------------------
# modular network
# ---------------------------------------------------------------------------

DEFAULT_ARCH = {
    "backbone_widths": [64, 64, 64],
    "backbone_taps": [0, 2],
    "aggregator_widths": [16, 16],
    "head_widths": [64, 64],
}


class DenseLayer:
    """Dense layer whose weight matrix is the quantization unit.

    The bias stays a separate full-precision parameter (it trains alongside
    the weights but is never quantized, frozen, masked, or counted in the
    compression payload — same status as the quantizer scales).
    """

    def __init__(self, layer_id: str, module_id: str, in_dim: int, out_dim: int,
                 activation: bool, rng: np.random.Generator, weight_scale: float | None = None,
                 bias_init: np.ndarray | None = None):
        self.layer_id = layer_id
        self.module_id = module_id
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        std = weight_scale if weight_scale is not None else np.sqrt(2.0 / in_dim)
        w = (std * rng.standard_normal((in_dim, out_dim))).astype(np.float32)
        b = np.zeros(out_dim, dtype=np.float32) if bias_init is None else \
            np.asarray(bias_init, dtype=np.float32)
        self.weight = Parameter(w, layer_id, module_id)
        self.bias = Parameter(b, f"{layer_id}::bias", module_id)

    def forward(self, x: Tensor, weight: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, weight), self.bias.tensor)
        return ad.relu(y) if self.activation else y

    def macs(self) -> int:
        # multiply-accumulates for one sample
        return self.in_dim * self.out_dim


class ModularModel:
    """Backbone -> feature aggregator -> head, with backbone skip taps.

    The aggregator consumes a concatenation of selected backbone activations
    (an FPN-ish skip structure), so the three modules are contiguous in
    forward order apart from those taps.
    """

    def __init__(self, layers: list[DenseLayer], backbone_taps: list[int], input_dim: int, arch: dict):
        self.layers = layers
        self.backbone_taps = list(backbone_taps)
        self.input_dim = input_dim
        self.arch = arch
        self.partition = {l.layer_id: l.module_id for l in layers}

    def parameters(self) -> list[Parameter]:
        out = []
        for l in self.layers:
            out.append(l.weight)
            out.append(l.bias)
        return out

    def layers_of(self, module_id: str) -> list[DenseLayer]:
        return [l for l in self.layers if l.module_id == module_id]

    def module_sizes(self) -> dict[str, int]:
        """Quantizable weight counts S_k per module (biases are metadata)."""
        sizes = {m: 0 for m in MODULE_NAMES}
        for l in self.layers:
            sizes[l.module_id] += l.weight.size
        return sizes

    def num_params(self) -> int:
        """Total quantizable weight count (sum of module_sizes)."""
        return sum(l.weight.size for l in self.layers)

    def forward(self, x: Tensor, weight_fn=None) -> Tensor:
        """Run the network; `weight_fn(param) -> Tensor` lets a quantizer
        substitute fake-quantized weights per layer."""
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError(f"model: expected (B, {self.input_dim}) input, got {x.shape}")
        ncoord = 2 * (self.input_dim // 3)
        coords = ad.scale(ad.narrow(x, 0, ncoord), 1.0 / FOCAL_PX)
        flags = ad.narrow(x, ncoord, self.input_dim)
        h = ad.concat([coords, flags], axis=1)

        def weight_of(layer):
            return weight_fn(layer.weight) if weight_fn is not None else layer.weight.tensor

        taps = []
        for layer in self.layers_of("backbone"):
            h = layer.forward(h, weight_of(layer))
            taps.append(h)
        h = ad.concat([taps[i] for i in self.backbone_taps], axis=1)
        for layer in self.layers_of("aggregator"):
            h = layer.forward(h, weight_of(layer))
        for layer in self.layers_of("head"):
            h = layer.forward(h, weight_of(layer))
        return h

    def copy(self) -> "ModularModel":
        dup = ModularModel.__new__(ModularModel)
        dup.backbone_taps = list(self.backbone_taps)
        dup.input_dim = self.input_dim
        dup.arch = dict(self.arch)
        dup.layers = []
        for l in self.layers:
            nl = DenseLayer.__new__(DenseLayer)
            nl.layer_id, nl.module_id = l.layer_id, l.module_id
            nl.in_dim, nl.out_dim, nl.activation = l.in_dim, l.out_dim, l.activation
            nl.weight = l.weight.copy()
            nl.bias = l.bias.copy()
            dup.layers.append(nl)
        dup.partition = {l.layer_id: l.module_id for l in dup.layers}
        return dup


def build_model(arch: dict | None = None, seed: int = 0) -> ModularModel:
    """Construct the K=3 network; module sizes follow aggregator < head < backbone."""
    cfg = dict(DEFAULT_ARCH)
    if arch:
        cfg.update(arch)
    for key in ("backbone_widths", "aggregator_widths", "head_widths"):
        if not cfg.get(key):
            raise ValueError(f"build_model: {key} must list at least one layer width")
    taps = cfg.get("backbone_taps") or [len(cfg["backbone_widths"]) - 1]
    if any(t < 0 or t >= len(cfg["backbone_widths"]) for t in taps):
        raise ValueError(f"build_model: backbone_taps {taps} out of range")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 2))))
    layers: list[DenseLayer] = []
    in_dim = INPUT_DIM
    for i, w in enumerate(cfg["backbone_widths"]):
        layers.append(DenseLayer(f"backbone.{i}", "backbone", in_dim, w, True, rng))
        in_dim = w
    agg_in = sum(cfg["backbone_widths"][t] for t in taps)
    in_dim = agg_in
    for i, w in enumerate(cfg["aggregator_widths"]):
        layers.append(DenseLayer(f"aggregator.{i}", "aggregator", in_dim, w, True, rng))
        in_dim = w
    for i, w in enumerate(cfg["head_widths"]):
        layers.append(DenseLayer(f"head.{i}", "head", in_dim, w, True, rng))
        in_dim = w
    out_bias = np.array([1, 0, 0, 0, 0, 0, 4], dtype=np.float32)
    layers.append(DenseLayer(f"head.{len(cfg['head_widths'])}", "head", in_dim, 7, False, rng,
                             weight_scale=1.0 / np.sqrt(in_dim), bias_init=out_bias))
    return ModularModel(layers, taps, INPUT_DIM, cfg)


def pose_loss(pred: Tensor, gt_quat: Tensor, gt_trans: Tensor) -> Tensor:
    """Geodesic rotation distance plus weighted squared translation error.

    `pred` is the raw (B, 7) network output; the quaternion part is
    normalized here, and its double cover is absorbed by the |dot| inside
    quat_geodesic. The translation term is the batch mean of ||dt||^2.
    """
    if pred.data.ndim != 2 or pred.shape[1] != 7:
        raise ad.ShapeError(f"pose_loss: expected (B, 7) prediction, got {pred.shape}")
    qnorms = np.linalg.norm(pred.data[:, :4].astype(np.float64), axis=1)
    if np.any(qnorms < 1e-12):
        raise ValueError("pose_loss: zero-norm predicted quaternion")
    rot = ad.quat_geodesic(ad.l2_normalize(ad.narrow(pred, 0, 4)), gt_quat)
    # mse averages over B*3 entries; x3 turns it into mean ||dt||^2 per sample
    trans = ad.scale(ad.mse(ad.narrow(pred, 4, 7), gt_trans), 3.0 * TRANSLATION_LOSS_WEIGHT)
    return ad.add(rot, trans)
