"""Training orchestration: the published LR / INQ-fraction schedules, the
per-module quantize-and-retrain loop, baseline probes, and the end-to-end
modular quantization run.

Every random draw descends from the run's root seed through fixed stream
tags ((seed, 3, epoch) for pretraining shuffles, (seed, 4, probe index,
epoch) for probes, (seed, 5, stage index, epoch) for flow stages, (seed, 6,
layer index) for Hutchinson probes), so identical configs reproduce
bit-identical trajectories.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from . import planner
from . import posetask as pt
from . import quantizers as qz
from . import sensitivity as sens


class DivergenceError(ArithmeticError):
    def __init__(self, stage: str, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in stage {stage!r} at epoch {epoch}: {detail}")
        self.stage = stage
        self.epoch = epoch


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleEntry:
    epoch: int
    gamma: float
    fraction: float | None = None


# (epoch, gamma, cumulative INQ fraction) — the published 16-row table
_INQ_TABLE = (
    (0, 1.0, 0.2), (3, 0.1, None), (5, 1.0, 0.4), (7, 0.1, None),
    (9, 1.0, 0.6), (11, 0.1, None), (13, 1.0, 0.8), (15, 0.1, None),
    (17, 1.0, 0.9), (19, 0.1, None), (21, 1.0, 0.95), (23, 0.1, None),
    (25, 1.0, 0.975), (27, 0.1, None), (29, 1.0, 1.0), (30, 0.1, None),
)


def inq_schedule(epochs: int = 30) -> list[ScheduleEntry]:
    """INQ gamma/fraction schedule; the literal table at 30 epochs, scaled
    proportionally otherwise (fraction steps always land inside training)."""
    if epochs < 1:
        raise ValueError(f"inq_schedule: epochs must be >= 1, got {epochs}")
    r = epochs / 30.0
    out = []
    for epoch, gamma, fraction in _INQ_TABLE:
        e = int(round(epoch * r))
        if fraction is not None:
            e = min(e, epochs - 1)
        else:
            e = min(e, epochs)
        out.append(ScheduleEntry(e, gamma, fraction))
    return out


def lsq_schedule(epochs: int = 30) -> list[ScheduleEntry]:
    """Multi-step LR decay (x0.1 at 10, 20, 25 of a 30-epoch run, scaled
    proportionally for other lengths); no fraction steps, no LR increases."""
    if epochs < 1:
        raise ValueError(f"lsq_schedule: epochs must be >= 1, got {epochs}")
    r = epochs / 30.0
    return [
        ScheduleEntry(0, 1.0),
        ScheduleEntry(int(round(10 * r)), 0.1),
        ScheduleEntry(int(round(20 * r)), 0.01),
        ScheduleEntry(int(round(25 * r)), 0.001),
    ]


def lr_gamma(entries: list[ScheduleEntry], epoch: int) -> float:
    g = 1.0
    for e in entries:
        if e.epoch <= epoch:
            g = e.gamma
    return g


def fractions_at(entries: list[ScheduleEntry], epoch: int) -> list[float]:
    return [e.fraction for e in entries if e.epoch == epoch and e.fraction is not None]


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    quantizer: str = qz.KIND_INQ
    candidate_bits: tuple[int, ...] = (2, 4, 8)
    budget: float = 4.0
    epochs_per_module: int = 30
    probe_epochs: int = 30
    base_lr: float = 1e-2
    batch_size: int = 8
    momentum: float = 0.9
    clip_grad_norm: float = 2.0
    seed: int = 0
    n_train: int = 6000
    n_val: int = 2000
    noise_std: float = 1.0
    pretrain_epochs: int = 160
    hutchinson_samples: int = 32
    calibration_samples: int = 256
    inq_strategy: str = "magnitude"
    compare_budgets: tuple[float, ...] = (2.0, 4.0, 8.0)
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.quantizer not in qz.KINDS:
            raise ValueError(f"quantizer must be one of {qz.KINDS}, got {self.quantizer!r}")
        if self.epochs_per_module < 1:
            raise ValueError(f"epochs_per_module must be >= 1, got {self.epochs_per_module}")
        if self.probe_epochs < 1:
            raise ValueError(f"probe_epochs must be >= 1, got {self.probe_epochs}")
        if self.budget < 1.0:
            raise ValueError(f"budget (compression factor) must be >= 1, got {self.budget}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.candidate_bits or any(b < 1 for b in self.candidate_bits):
            raise ValueError(f"candidate_bits must be >= 1, got {self.candidate_bits}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be nonnegative, got {self.noise_std}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidate_bits"] = list(self.candidate_bits)
        d["compare_budgets"] = list(self.compare_budgets)
        return d


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MQAT_THREADS", "1")))
    except ValueError:
        return 1


class RunLog:
    """Line-delimited JSON progress log; optionally echoes to stdout."""

    def __init__(self, path=None, echo: bool = False):
        self.path = path
        self.echo = echo
        self.rows: list[dict] = []

    def record(self, **fields):
        self.rows.append(fields)
        line = json.dumps(fields, sort_keys=True)
        if self.path:
            with open(self.path, "a") as f:
                f.write(line + "\n")
        if self.echo:
            print(line, flush=True)


# ---------------------------------------------------------------------------
# data and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TaskData:
    X_train: np.ndarray
    Q_train: np.ndarray
    T_train: np.ndarray
    X_val: np.ndarray
    Q_val: np.ndarray
    T_val: np.ndarray
    vertices: np.ndarray
    diameter: float


def make_datasets(cfg: RunConfig) -> TaskData:
    # val split uses the next seed so the two sample streams never overlap
    train = pt.generate_dataset(cfg.seed, cfg.n_train, cfg.noise_std)
    val = pt.generate_dataset(cfg.seed + 1, cfg.n_val, cfg.noise_std)
    Xt, Qt, Tt = pt.dataset_arrays(train)
    Xv, Qv, Tv = pt.dataset_arrays(val)
    return TaskData(Xt, Qt, Tt, Xv, Qv, Tv, train[0].vertices, train[0].diameter)


def predict(model, qctx, X: np.ndarray, batch: int = 1024) -> np.ndarray:
    weight_fn = qctx.weight_fn() if qctx is not None else None
    outs = []
    for i in range(0, len(X), batch):
        outs.append(model.forward(ad.Tensor(X[i:i + batch]), weight_fn).data)
    return np.concatenate(outs)


def evaluate_model(model, qctx, X, Q, T, vertices, diameter) -> dict:
    P = predict(model, qctx, X)
    R_est = mt.quats_to_matrices(P[:, :4])
    R_gt = mt.quats_to_matrices(Q)
    add = mt.add_errors_batch(R_est, P[:, 4:], R_gt, T, vertices)
    adi = mt.adi_errors_batch(R_est, P[:, 4:], R_gt, T, vertices)
    return {
        "add_01d": mt.threshold_accuracy(add, diameter, 0.1),
        "add_05d": mt.threshold_accuracy(add, diameter, 0.5),
        "adi_01d": mt.threshold_accuracy(adi, diameter, 0.1),
        "adi_05d": mt.threshold_accuracy(adi, diameter, 0.5),
        "mean_add": float(add.mean()),
        "mean_adi": float(adi.mean()),
        "metric_split": "val",
    }


def accuracy(model, qctx, data: TaskData) -> float:
    """ac(M): ADD-0.1d on the held-out split."""
    return evaluate_model(model, qctx, data.X_val, data.Q_val, data.T_val,
                          data.vertices, data.diameter)["add_01d"]


def _clip_gradients(params: list[ad.Parameter], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        s = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.tensor.grad = p.grad * s
    return norm


def _epoch_rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _train_one_epoch(model, qctx, opt, data: TaskData, cfg: RunConfig, rng, stage: str, epoch: int) -> float:
    weight_fn = qctx.weight_fn() if qctx is not None else None
    n = len(data.X_train)
    perm = rng.permutation(n)
    nb = n // cfg.batch_size
    total = 0.0
    for b in range(nb):
        idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        opt.zero_grad()
        try:
            with ad.Tape() as tape:
                out = model.forward(ad.Tensor(data.X_train[idx]), weight_fn)
                loss = pt.pose_loss(out, ad.Tensor(data.Q_train[idx]), ad.Tensor(data.T_train[idx]))
                ad.backward(tape, loss)
        except ad.NonFiniteError as e:
            raise DivergenceError(stage, epoch, str(e)) from e
        _clip_gradients(opt.params, cfg.clip_grad_norm)
        opt.step()
        total += loss.item()
    mean = total / max(nb, 1)
    if not np.isfinite(mean):
        raise DivergenceError(stage, epoch, "non-finite epoch loss")
    return mean


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def pretrain(cfg: RunConfig, data: TaskData, log: RunLog | None = None) -> pt.ModularModel:
    """Full-precision training from scratch (multi-step LR decay)."""
    log = log or RunLog()
    model = pt.build_model(cfg.arch, seed=cfg.seed)
    opt = ad.SGD(model.parameters(), cfg.base_lr, cfg.momentum)
    E = cfg.pretrain_epochs
    for epoch in range(E):
        g = 1.0
        if epoch >= int(0.9 * E):
            g = 0.001
        elif epoch >= int(0.75 * E):
            g = 0.01
        elif epoch >= int(0.5 * E):
            g = 0.1
        opt.lr = cfg.base_lr * g
        loss = _train_one_epoch(model, None, opt, data, cfg,
                                _epoch_rng(cfg.seed, 3, epoch), "pretrain", epoch)
        log.record(stage="pretrain", epoch=epoch, loss=loss, lr=opt.lr, fraction=None,
                   val_add01=accuracy(model, None, data))
    return model


def quantize_and_retrain(model, qctx: qz.QuantContext, module_bits: dict[str, int],
                         cfg: RunConfig, data: TaskData, epochs: int, stream: tuple,
                         log: RunLog | None = None, stage: str = "stage") -> None:
    """Quantize the given modules (per the configured quantizer) and retrain.

    Previously quantized modules keep their guarantees: INQ-frozen weights
    cannot move (masked updates) and LSQ fake quantization stays active. All
    still-unquantized modules continue training at full precision.
    """
    log = log or RunLog()
    kind = cfg.quantizer
    for module_id, bits in module_bits.items():
        if not model.layers_of(module_id):
            raise ValueError(f"quantize_and_retrain: unknown module {module_id!r}")
        if kind == qz.KIND_INQ:
            qz.begin_inq(qctx, model, module_id, bits)
        elif kind == qz.KIND_LSQ:
            qz.attach_lsq(qctx, model, module_id, bits)
    entries = inq_schedule(epochs) if kind == qz.KIND_INQ else lsq_schedule(epochs)
    params = model.parameters() + qctx.trainable_steps()
    opt = ad.SGD(params, cfg.base_lr, cfg.momentum)
    for epoch in range(epochs):
        opt.lr = cfg.base_lr * lr_gamma(entries, epoch)
        fraction = None
        if kind == qz.KIND_INQ:
            for frac in fractions_at(entries, epoch):
                fraction = frac
                for module_id in module_bits:
                    rng = (_epoch_rng(*stream, 9, epoch) if cfg.inq_strategy == "random" else None)
                    qz.inq_step(qctx, model, module_id, frac, cfg.inq_strategy, rng)
        loss = _train_one_epoch(model, qctx, opt, data, cfg,
                                _epoch_rng(*stream, epoch), stage, epoch)
        log.record(stage=stage, epoch=epoch, loss=loss, lr=opt.lr, fraction=fraction,
                   val_add01=accuracy(model, qctx, data))
    if kind == qz.KIND_INQ:
        for module_id in module_bits:
            st = qctx.states[module_id]
            if st.inq_fraction_done < 1.0:
                raise RuntimeError(
                    f"quantize_and_retrain: INQ schedule ended at fraction "
                    f"{st.inq_fraction_done} for module {module_id!r}")


def _probe_one(model, qctx, cfg: RunConfig, data: TaskData, module_id: str, index: int,
               log: RunLog) -> tuple[pt.ModularModel, qz.QuantContext, float]:
    probe_model = model.copy()
    probe_ctx = qctx.copy()
    quantize_and_retrain(probe_model, probe_ctx, {module_id: 2}, cfg, data, cfg.probe_epochs,
                         (cfg.seed, 4, index), log, stage=f"probe:{module_id}")
    return probe_model, probe_ctx, accuracy(probe_model, probe_ctx, data)


def run_probes(model, qctx, cfg: RunConfig, data: TaskData, log: RunLog):
    """Train the K independent 2-bit module probes (optionally in parallel)."""
    modules = [m for m in pt.MODULE_NAMES if model.layers_of(m)]
    artifacts: dict[str, tuple] = {}

    def worker(args):
        idx, module_id = args
        return module_id, _probe_one(model, qctx, cfg, data, module_id, idx, log)

    jobs = list(enumerate(modules))
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for module_id, art in pool.map(worker, jobs):
                artifacts[module_id] = art
    else:
        for job in jobs:
            module_id, art = worker(job)
            artifacts[module_id] = art
    return modules, artifacts


def compute_sensitivities(cfg: RunConfig, model, data: TaskData) -> dict[str, float]:
    return sens.compute_lambdas(model, calibration_loss_fn(model, data, cfg.calibration_samples),
                                cfg.hutchinson_samples, cfg.seed)


def calibration_loss_fn(model, data: TaskData, n: int):
    """Deterministic calibration-batch loss closure for Hessian probes."""
    n = min(n, len(data.X_train))
    Xc = ad.Tensor(data.X_train[:n])
    Qc = ad.Tensor(data.Q_train[:n])
    Tc = ad.Tensor(data.T_train[:n])

    def loss_fn():
        return pt.pose_loss(model.forward(Xc), Qc, Tc)

    return loss_fn


def quantized_size_bits(model, qctx: qz.QuantContext) -> int:
    """Current payload size: quantized modules at their bits, rest at 32."""
    total = 0
    for module_id, size in model.module_sizes().items():
        st = qctx.state_of(module_id)
        bits = st.bits if st.kind != qz.KIND_NONE else planner.FP_BITS
        total += bits * size
    return total


def mqat_run(cfg: RunConfig, model: pt.ModularModel, data: TaskData | None = None,
             log: RunLog | None = None):
    """The full modular QAT pipeline on a pretrained model.

    Probe every module at 2 bits, keep the best strictly-improving probe,
    order the remaining modules by size, allocate bits by exact ILP under
    the compression budget, then quantize-and-retrain sequentially.
    Returns (model, qctx, plan, report).
    """
    data = data or make_datasets(cfg)
    log = log or RunLog()
    qctx = qz.QuantContext()
    sizes = model.module_sizes()
    layer_macs = {l.layer_id: l.macs() for l in model.layers}
    baseline_acc = accuracy(model, qctx, data)

    if cfg.quantizer == qz.KIND_NONE:
        bits = {m: planner.FP_BITS for m in sizes}
        plan = planner.QuantPlan([], bits, None, cfg.budget,
                                 planner.achieved_size_bits(sizes, bits),
                                 planner.compression_factor(sizes, bits))
        report = _build_report(cfg, plan, baseline_acc, {}, [], model, qctx, data, 0,
                               layer_macs)
        return model, qctx, plan, report

    # sensitivities are computed once, at the pretrained full-precision weights
    lam = compute_sensitivities(cfg, model, data)

    modules, artifacts = run_probes(model, qctx, cfg, data, log)
    probe_accs = {m: artifacts[m][2] for m in modules}
    k_best, probe_results = planner.baseline_probe(
        modules, baseline_acc, lambda m: probe_accs[m])
    epochs_used = cfg.probe_epochs * len(modules)
    if k_best is not None:
        model, qctx, _ = artifacts[k_best]

    flow = planner.derive_flow(sizes, k_best)
    # quantization error is measured on the current (possibly probe-adopted)
    # weights; lambda stays from the initial profile
    omega = sens.importance_table(model, lam, cfg.candidate_bits)
    fixed = {k_best: 2} if k_best is not None else {}
    bits = planner.ilp_allocate(omega, sizes, cfg.candidate_bits, cfg.budget, fixed)

    stage_accs = []
    for i, module_id in enumerate(flow):
        quantize_and_retrain(model, qctx, {module_id: bits[module_id]}, cfg, data,
                             cfg.epochs_per_module, (cfg.seed, 5, i), log,
                             stage=f"flow:{module_id}@{bits[module_id]}")
        epochs_used += cfg.epochs_per_module
        stage_accs.append({
            "stage": module_id,
            "bits": bits[module_id],
            "val_add01": accuracy(model, qctx, data),
            "size_bits": quantized_size_bits(model, qctx),
        })

    plan = planner.QuantPlan(flow, bits, k_best, cfg.budget,
                             planner.achieved_size_bits(sizes, bits),
                             planner.compression_factor(sizes, bits),
                             probe_results)
    report = _build_report(cfg, plan, baseline_acc, probe_results, stage_accs, model, qctx,
                           data, epochs_used, layer_macs)
    report["sensitivity"] = {
        "lambda": lam,
        "omega": [[m, b, v] for (m, b), v in omega.items()],
    }
    return model, qctx, plan, report


def execute_plan(cfg: RunConfig, model: pt.ModularModel, plan_dict: dict,
                 data: TaskData | None = None, log: RunLog | None = None):
    """Run the quantize-and-retrain stages of a previously exported plan.

    The probe phase is skipped; a k_best module in the plan is simply the
    first stage (at its planned bits). Each stage trains epochs_per_module.
    """
    data = data or make_datasets(cfg)
    log = log or RunLog()
    qctx = qz.QuantContext()
    sizes = model.module_sizes()
    layer_macs = {l.layer_id: l.macs() for l in model.layers}
    baseline_acc = accuracy(model, qctx, data)
    bits = {m: int(b) for m, b in plan_dict["bits"].items()}
    k_best = plan_dict.get("k_best")
    stages = ([k_best] if k_best else []) + [m for m in plan_dict["flow"]]
    stage_accs = []
    epochs_used = 0
    for i, module_id in enumerate(stages):
        quantize_and_retrain(model, qctx, {module_id: bits[module_id]}, cfg, data,
                             cfg.epochs_per_module, (cfg.seed, 5, i), log,
                             stage=f"flow:{module_id}@{bits[module_id]}")
        epochs_used += cfg.epochs_per_module
        stage_accs.append({
            "stage": module_id,
            "bits": bits[module_id],
            "val_add01": accuracy(model, qctx, data),
            "size_bits": quantized_size_bits(model, qctx),
        })
    plan = planner.QuantPlan(list(plan_dict["flow"]), bits, k_best, float(plan_dict["budget"]),
                             planner.achieved_size_bits(sizes, bits),
                             planner.compression_factor(sizes, bits))
    report = _build_report(cfg, plan, baseline_acc, {}, stage_accs, model, qctx, data,
                           epochs_used, layer_macs)
    return model, qctx, plan, report


def _build_report(cfg, plan, baseline_acc, probe_results, stage_accs, model, qctx, data,
                  epochs_used, layer_macs):
    final = evaluate_model(model, qctx, data.X_val, data.Q_val, data.T_val,
                           data.vertices, data.diameter)
    layer_bits = {l.layer_id: plan.bits[l.module_id] for l in model.layers}
    return {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "baseline_val_add01": baseline_acc,
        "probe_results": probe_results,
        "plan": plan.summary(),
        "stages": stage_accs,
        "final_metrics": final,
        "total_training_epochs": epochs_used,
        "achieved_size_bits": plan.achieved_size_bits,
        "achieved_compression": plan.achieved_compression,
        "bops": planner.bops_estimate(layer_macs, layer_bits),
        "bops_fp32": planner.bops_estimate(layer_macs, {k: 32 for k in layer_macs}),
        "schedules": {
            "inq": [asdict(e) for e in inq_schedule(cfg.epochs_per_module)],
            "lsq": [asdict(e) for e in lsq_schedule(cfg.epochs_per_module)],
        },
    }


def mqat_total_epochs(cfg: RunConfig, n_modules: int, has_winner: bool) -> int:
    flow_len = n_modules - (1 if has_winner else 0)
    return cfg.probe_epochs * n_modules + cfg.epochs_per_module * flow_len


# ---------------------------------------------------------------------------
# comparison baselines (uniform LSQ / layer-wise mixed precision)
# ---------------------------------------------------------------------------

def uniform_bits_for_budget(candidate_bits, budget: float) -> int:
    """Largest candidate width whose uniform assignment meets the budget."""
    feasible = [b for b in candidate_bits if planner.FP_BITS / b >= budget]
    if not feasible:
        raise planner.InfeasibleBudgetError(
            f"no uniform bit width in {tuple(candidate_bits)} meets budget {budget}x")
    return max(feasible)


def uniform_lsq_run(cfg: RunConfig, model: pt.ModularModel, data: TaskData, budget: float,
                    total_epochs: int, log: RunLog | None = None, stream_tag: int = 0):
    """Uniform-precision LSQ baseline: whole network quantized in one step."""
    bits = uniform_bits_for_budget(cfg.candidate_bits, budget)
    run_model = model.copy()
    qctx = qz.QuantContext()
    ucfg = replace(cfg, quantizer=qz.KIND_LSQ)
    modules = [m for m in pt.MODULE_NAMES if run_model.layers_of(m)]
    quantize_and_retrain(run_model, qctx, {m: bits for m in modules}, ucfg, data,
                         total_epochs, (cfg.seed, 7, stream_tag), log, stage=f"uniform-lsq@{bits}")
    sizes = run_model.module_sizes()
    bits_map = {m: bits for m in sizes}
    return run_model, qctx, {
        "method": "uniform-lsq",
        "bits": bits_map,
        "val_add01": accuracy(run_model, qctx, data),
        "achieved_compression": planner.compression_factor(sizes, bits_map),
        "achieved_size_bits": planner.achieved_size_bits(sizes, bits_map),
        "total_training_epochs": total_epochs,
    }


def layerwise_lsq_run(cfg: RunConfig, model: pt.ModularModel, data: TaskData, budget: float,
                      total_epochs: int, lam: dict[str, float] | None = None,
                      log: RunLog | None = None, stream_tag: int = 0):
    """Layer-wise mixed-precision baseline: per-layer ILP then one LSQ stage."""
    if lam is None:
        lam = sens.compute_lambdas(model, calibration_loss_fn(model, data, cfg.calibration_samples),
                                   cfg.hutchinson_samples, cfg.seed)
    layer_sizes = {l.layer_id: l.weight.size for l in model.layers}
    omega = {}
    for layer in model.layers:
        for b in cfg.candidate_bits:
            err = sens.quant_error(layer.weight.value, b)
            omega[(layer.layer_id, b)] = (lam[layer.layer_id] / layer.weight.size) * err
    layer_bits = planner.layerwise_allocate(omega, layer_sizes, cfg.candidate_bits, budget)

    run_model = model.copy()
    qctx = qz.QuantContext()
    for layer in run_model.layers:
        qz.attach_lsq_layer(qctx, layer, layer_bits[layer.layer_id])
    lcfg = replace(cfg, quantizer=qz.KIND_LSQ)
    entries = lsq_schedule(total_epochs)
    params = run_model.parameters() + qctx.trainable_steps()
    opt = ad.SGD(params, cfg.base_lr, cfg.momentum)
    log = log or RunLog()
    for epoch in range(total_epochs):
        opt.lr = cfg.base_lr * lr_gamma(entries, epoch)
        loss = _train_one_epoch(run_model, qctx, opt, data, lcfg,
                                _epoch_rng(cfg.seed, 7, 100 + stream_tag, epoch),
                                "layerwise-lsq", epoch)
        log.record(stage="layerwise-lsq", epoch=epoch, loss=loss, lr=opt.lr, fraction=None,
                   val_add01=accuracy(run_model, qctx, data))
    quant_bits = sum(layer_bits[lid] * n for lid, n in layer_sizes.items())
    total_bits = planner.FP_BITS * sum(layer_sizes.values())
    return run_model, qctx, {
        "method": "layerwise-lsq",
        "bits": layer_bits,
        "val_add01": accuracy(run_model, qctx, data),
        "achieved_compression": total_bits / quant_bits,
        "achieved_size_bits": quant_bits,
        "total_training_epochs": total_epochs,
    }


# ---------------------------------------------------------------------------
# experiment harnesses (flow search, bit sweep, method comparison)
# ---------------------------------------------------------------------------

def flow_search_run(cfg: RunConfig, model: pt.ModularModel, data: TaskData | None = None,
                    log: RunLog | None = None) -> dict:
    """Quantize every module subset to 2 bits, retrain, tabulate accuracy."""
    data = data or make_datasets(cfg)
    log = log or RunLog()
    modules = [m for m in pt.MODULE_NAMES if model.layers_of(m)]
    baseline_acc = accuracy(model, qz.QuantContext(), data)
    subset_index = {}

    def evaluate_subset(subset):
        if not subset:
            return baseline_acc
        idx = subset_index.setdefault(subset, len(subset_index) + 1)
        run_model = model.copy()
        qctx = qz.QuantContext()
        quantize_and_retrain(run_model, qctx, {m: 2 for m in subset}, cfg, data,
                             cfg.epochs_per_module, (cfg.seed, 8, idx), log,
                             stage="flowsearch:" + "+".join(subset))
        return accuracy(run_model, qctx, data)

    rows = planner.flow_search_exhaustive(modules, evaluate_subset)
    return {
        "title": "exhaustive 2-bit flow search",
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "baseline_val_add01": baseline_acc,
        "rows": [{"subset": list(s), "val_add01": acc} for s, acc in rows],
        "plotdata": [("flowsearch", i, acc) for i, (_, acc) in enumerate(rows)],
    }


def bit_sweep_run(cfg: RunConfig, model: pt.ModularModel, module_id: str, bits_list,
                  data: TaskData | None = None, log: RunLog | None = None) -> dict:
    """Quantize one module to each candidate width (others full precision)."""
    data = data or make_datasets(cfg)
    log = log or RunLog()
    if not model.layers_of(module_id):
        raise ValueError(f"bit_sweep_run: unknown module {module_id!r}")
    baseline_acc = accuracy(model, qz.QuantContext(), data)
    rows = []
    for i, bits in enumerate(bits_list):
        run_model = model.copy()
        qctx = qz.QuantContext()
        quantize_and_retrain(run_model, qctx, {module_id: int(bits)}, cfg, data,
                             cfg.epochs_per_module, (cfg.seed, 10, i), log,
                             stage=f"bitsweep:{module_id}@{bits}")
        rows.append({"bits": int(bits), "val_add01": accuracy(run_model, qctx, data)})
    return {
        "title": f"bit sweep on module {module_id}",
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "module": module_id,
        "baseline_val_add01": baseline_acc,
        "rows": rows,
        "plotdata": [(module_id, r["bits"], r["val_add01"]) for r in rows],
    }


def compare_run(cfg: RunConfig, model: pt.ModularModel, data: TaskData | None = None,
                log: RunLog | None = None) -> dict:
    """MQAT vs uniform LSQ vs layer-wise mixed precision at matched budgets
    and matched total training epochs."""
    data = data or make_datasets(cfg)
    log = log or RunLog()
    baseline_acc = accuracy(model, qz.QuantContext(), data)
    lam = compute_sensitivities(cfg, model, data)
    rows = []
    plotdata = []
    for bi, budget in enumerate(cfg.compare_budgets):
        bcfg = replace(cfg, budget=float(budget))
        _, _, plan, rep = mqat_run(bcfg, model.copy(), data, log)
        total_ep = rep["total_training_epochs"]
        rows.append({"method": "mqat", "budget": budget,
                     "bits": plan.bits, "val_add01": rep["final_metrics"]["add_01d"],
                     "achieved_compression": plan.achieved_compression,
                     "total_training_epochs": total_ep})
        _, _, urow = uniform_lsq_run(cfg, model, data, budget, total_ep, log, stream_tag=bi)
        urow["budget"] = budget
        rows.append(urow)
        _, _, lrow = layerwise_lsq_run(cfg, model, data, budget, total_ep, lam, log, stream_tag=bi)
        lrow["budget"] = budget
        rows.append(lrow)
    for r in rows:
        plotdata.append((r["method"], r["achieved_compression"], r["val_add01"]))
    return {
        "title": "uniform vs layer-wise mixed vs modular QAT",
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "baseline_val_add01": baseline_acc,
        "rows": rows,
        "plotdata": plotdata,
    }
