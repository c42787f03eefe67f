"""Per-layer Hessian-trace sensitivities and the per-module importance table.

Sensitivity lambda_i is a Hutchinson trace estimate of the layer's Hessian
block, averaged per parameter and clamped at zero. The importance of module
k at bit width b averages (lambda_i / N_i) * ||Q_b(W_i) - W_i||^2 over the
module's layers, with the quantization scale re-fitted for every candidate
bit width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quantizers as qz


@dataclass
class SensitivityProfile:
    lam: dict[str, float] = field(default_factory=dict)          # layer_id -> lambda
    omega: dict[tuple[str, int], float] = field(default_factory=dict)  # (module, bits) -> importance
    n_params: dict[str, int] = field(default_factory=dict)
    layers_per_module: dict[str, int] = field(default_factory=dict)
    num_hutchinson_samples: int = 0
    seed: int = 0


def hutchinson_trace(loss_fn, layer_params: list[ad.Parameter], m: int, seed,
                     eps: float | None = None) -> float:
    """Per-parameter Hessian trace of one layer block: mean_j v^T H v / N.

    Rademacher probes come from a stream derived from `seed`, so estimates
    for different layers can run in any order (or concurrently) and still
    reduce to identical results.
    """
    if m < 1:
        raise ValueError(f"hutchinson_trace: m must be >= 1, got {m}")
    n = sum(p.size for p in layer_params)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    acc = 0.0
    for _ in range(m):
        v = rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
        hv = ad.hvp_fd(loss_fn, layer_params, v, eps=eps)
        if not np.all(np.isfinite(hv)):
            raise ad.NonFiniteError("hutchinson_trace: non-finite Hessian-vector product")
        acc += float(v @ hv)
    return acc / (m * n)


def compute_lambdas(model, loss_fn, m: int, seed: int) -> dict[str, float]:
    """Clamped per-layer sensitivities, one Rademacher stream per layer."""
    lam = {}
    for index, layer in enumerate(model.layers):
        est = hutchinson_trace(loss_fn, [layer.weight], m, (seed, 6, index))
        lam[layer.layer_id] = max(est, 0.0)
    return lam


def quant_error(values, bits: int) -> float:
    """||Q(W) - W||_2^2 with the scale refit for this bit width."""
    w = np.asarray(values, dtype=np.float64).ravel()
    scale = qz.fit_scale_max(w, bits)
    snapped = qz.quantize_values(w, scale, bits).astype(np.float64)
    diff = snapped - w
    return float(diff @ diff)


def importance_table(model, lam: dict[str, float], candidate_bits) -> dict[tuple[str, int], float]:
    """Fill omega[(module, bits)] for every module and candidate bit width."""
    omega: dict[tuple[str, int], float] = {}
    for module_id in dict.fromkeys(l.module_id for l in model.layers):
        layers = model.layers_of(module_id)
        for bits in candidate_bits:
            total = 0.0
            for layer in layers:
                if layer.layer_id not in lam:
                    raise KeyError(f"importance_table: layer {layer.layer_id!r} has no sensitivity")
                err = quant_error(layer.weight.value, bits)
                total += (lam[layer.layer_id] / layer.weight.size) * err
            omega[(module_id, bits)] = total / len(layers)
    return omega


def build_profile(model, loss_fn, candidate_bits, m: int, seed: int) -> SensitivityProfile:
    lam = compute_lambdas(model, loss_fn, m, seed)
    profile = SensitivityProfile(
        lam=lam,
        omega=importance_table(model, lam, candidate_bits),
        n_params={l.layer_id: l.weight.size for l in model.layers},
        layers_per_module={m_: len(model.layers_of(m_)) for m_ in
                           dict.fromkeys(l.module_id for l in model.layers)},
        num_hutchinson_samples=m,
        seed=seed,
    )
    return profile


# ---------------------------------------------------------------------------
# profile persistence (structured text, one record per line)
# ---------------------------------------------------------------------------

def save_profile(path, profile: SensitivityProfile, partition: dict[str, str]) -> None:
    lines = [f"# sensitivity profile v1 seed={profile.seed} samples={profile.num_hutchinson_samples}"]
    for layer_id in profile.lam:
        lines.append(
            f"layer\t{layer_id}\t{partition[layer_id]}\t{profile.n_params[layer_id]}\t"
            f"{profile.lam[layer_id]!r}"
        )
    for (module_id, bits), val in profile.omega.items():
        lines.append(f"omega\t{module_id}\t{bits}\t{val!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_profile(path) -> tuple[SensitivityProfile, dict[str, str]]:
    profile = SensitivityProfile()
    partition: dict[str, str] = {}
    with open(path) as f:
        header = f.readline()
        if not header.startswith("# sensitivity profile v1"):
            raise ValueError(f"load_profile: {path} is not a sensitivity profile")
        for tok in header.split():
            if tok.startswith("seed="):
                profile.seed = int(tok[5:])
            elif tok.startswith("samples="):
                profile.num_hutchinson_samples = int(tok[8:])
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "layer":
                _, layer_id, module_id, n, lam = parts
                partition[layer_id] = module_id
                profile.n_params[layer_id] = int(n)
                profile.lam[layer_id] = float(lam)
            elif parts[0] == "omega":
                _, module_id, bits, val = parts
                profile.omega[(module_id, int(bits))] = float(val)
            else:
                raise ValueError(f"load_profile: unknown record {parts[0]!r}")
    profile.layers_per_module = {}
    for module_id in partition.values():
        profile.layers_per_module[module_id] = profile.layers_per_module.get(module_id, 0) + 1
    return profile, partition
