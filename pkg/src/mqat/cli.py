"""Command-line entry points, one subcommand per experiment protocol.

Exit codes: 0 success, 2 config error, 3 infeasible compression budget,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import checkpoint as ckpt
from . import config as cfgmod
from . import planner
from . import posetask as pt
from . import quantizers as qz
from . import report as rpt
from . import sensitivity as sens
from . import trainer as tr

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4


def _load_cfg(args) -> tr.RunConfig:
    return cfgmod.parse_config(args.config)


def _load_model(path):
    model, qctx, meta = ckpt.load_checkpoint(path)
    return model, qctx, meta


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _log_for(args, outdir) -> tr.RunLog:
    return tr.RunLog(os.path.join(outdir, "train_log.jsonl"), echo=args.verbose)


def _write_profile(outdir, model, lam, omega, cfg):
    profile = sens.SensitivityProfile(
        lam=dict(lam),
        omega={(m, int(b)): v for m, b, v in omega},
        n_params={l.layer_id: l.weight.size for l in model.layers},
        layers_per_module={m: len(model.layers_of(m)) for m in pt.MODULE_NAMES},
        num_hutchinson_samples=cfg.hutchinson_samples,
        seed=cfg.seed,
    )
    path = os.path.join(outdir, "profile.txt")
    sens.save_profile(path, profile, model.partition)
    return path


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    data = tr.make_datasets(cfg)
    log = _log_for(args, outdir)
    model = tr.pretrain(cfg, data, log)
    metrics = tr.evaluate_model(model, None, data.X_val, data.Q_val, data.T_val,
                                data.vertices, data.diameter)
    path = os.path.join(outdir, "pretrained.mqck")
    ckpt.save_checkpoint(path, model, None, {
        "config_hash": tr.config_hash(cfg), "seed": cfg.seed, "kind": "pretrained",
        "val_add01": metrics["add_01d"],
    })
    rpt.emit_report({
        "title": "full-precision pretraining",
        "config": cfg.to_dict(), "config_hash": tr.config_hash(cfg), "seed": cfg.seed,
        "final_metrics": metrics,
        "total_training_epochs": cfg.pretrain_epochs,
    }, outdir)
    print(f"pretrained model -> {path} (val ADD-0.1d {metrics['add_01d']:.4f})")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    model, qctx, _ = _load_model(args.model)
    data = tr.make_datasets(cfg)
    log = _log_for(args, outdir)
    baseline = tr.accuracy(model, qctx, data)
    modules, artifacts = tr.run_probes(model, qctx, cfg, data, log)
    probe_accs = {m: artifacts[m][2] for m in modules}
    k_best, results = planner.baseline_probe(modules, baseline, lambda m: probe_accs[m])
    rpt.emit_report({
        "title": "2-bit baseline probes",
        "config_hash": tr.config_hash(cfg), "seed": cfg.seed,
        "baseline_val_add01": baseline,
        "probe_results": results,
        "k_best": k_best,
        "plotdata": [("probe", i, results[m]) for i, m in enumerate(modules)],
    }, outdir)
    print(f"baseline {baseline:.4f}; probes: " +
          ", ".join(f"{m}={results[m]:.4f}" for m in modules) +
          f"; winner: {k_best or 'none'}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    model, _, _ = _load_model(args.model)
    data = tr.make_datasets(cfg)
    if args.profile:
        profile, _ = sens.load_profile(args.profile)
        lam = profile.lam
    else:
        lam = tr.compute_sensitivities(cfg, model, data)
    omega = sens.importance_table(model, lam, cfg.candidate_bits)
    sizes = model.module_sizes()
    k_best = args.k_best
    if k_best and not model.layers_of(k_best):
        raise cfgmod.ConfigError(f"--k-best: unknown module {k_best!r}")
    flow = planner.derive_flow(sizes, k_best)
    fixed = {k_best: 2} if k_best else {}
    bits = planner.ilp_allocate(omega, sizes, cfg.candidate_bits, cfg.budget, fixed)
    layer_macs = {l.layer_id: l.macs() for l in model.layers}
    layer_bits = {l.layer_id: bits[l.module_id] for l in model.layers}
    summary = {
        "flow": flow, "bits": bits, "k_best": k_best, "budget": cfg.budget,
        "achieved_size_bits": planner.achieved_size_bits(sizes, bits),
        "achieved_compression": planner.compression_factor(sizes, bits),
        "bops": planner.bops_estimate(layer_macs, layer_bits),
    }
    plan_path = os.path.join(outdir, "plan.toml")
    rpt.write_plan(plan_path, summary)
    profile_path = _write_profile(outdir, model, lam,
                                  [[m, b, v] for (m, b), v in omega.items()], cfg)
    rpt.emit_report({
        "title": "quantization plan",
        "config_hash": tr.config_hash(cfg), "seed": cfg.seed,
        "plan": summary,
        "sensitivity": {"lambda": lam, "omega": [[m, b, v] for (m, b), v in omega.items()]},
    }, outdir)
    print(f"plan -> {plan_path} (flow {' -> '.join(flow)}, bits {bits})")
    print(f"profile -> {profile_path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    model, _, _ = _load_model(args.model)
    data = tr.make_datasets(cfg)
    log = _log_for(args, outdir)
    if args.plan:
        plan_dict = rpt.read_plan(args.plan)
        model, qctx, plan, report = tr.execute_plan(cfg, model, plan_dict, data, log)
    else:
        model, qctx, plan, report = tr.mqat_run(cfg, model, data, log)
    final_path = os.path.join(outdir, "quantized.mqck")
    ckpt.save_checkpoint(final_path, model, qctx, {
        "config_hash": tr.config_hash(cfg), "seed": cfg.seed, "kind": "mqat",
        "plan": plan.summary(),
        "payload_size_bits": ckpt.payload_size_bits(model, qctx),
        "achieved_size_bits": plan.achieved_size_bits,
        "achieved_compression": plan.achieved_compression,
    })
    report["title"] = "modular quantization-aware training run"
    rpt.emit_report(report, outdir)
    rpt.write_plan(os.path.join(outdir, "plan.toml"),
                   {**plan.summary(), "bops": report["bops"]})
    if "sensitivity" in report:
        _write_profile(outdir, model, report["sensitivity"]["lambda"],
                       report["sensitivity"]["omega"], cfg)
    print(f"quantized model -> {final_path}")
    print(f"flow {' -> '.join(plan.flow) or '(none)'}; bits {plan.bits}; "
          f"compression {plan.achieved_compression:.2f}x; "
          f"val ADD-0.1d {report['final_metrics']['add_01d']:.4f}")
    return EXIT_OK


def cmd_flowsearch(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    model, _, _ = _load_model(args.model)
    data = tr.make_datasets(cfg)
    result = tr.flow_search_run(cfg, model, data, _log_for(args, outdir))
    rpt.emit_report(result, outdir)
    for row in result["rows"]:
        label = "+".join(row["subset"]) or "(none)"
        print(f"{label:>32}: {row['val_add01']:.4f}")
    return EXIT_OK


def cmd_bitsweep(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    model, _, _ = _load_model(args.model)
    data = tr.make_datasets(cfg)
    bits_list = [int(b) for b in args.bits.split(",")]
    result = tr.bit_sweep_run(cfg, model, args.module, bits_list, data, _log_for(args, outdir))
    rpt.emit_report(result, outdir)
    for row in result["rows"]:
        print(f"{args.module} @ {row['bits']:>2} bits: {row['val_add01']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(args)
    model, _, _ = _load_model(args.model)
    data = tr.make_datasets(cfg)
    result = tr.compare_run(cfg, model, data, _log_for(args, outdir))
    rpt.emit_report(result, outdir)
    for row in result["rows"]:
        print(f"{row['method']:>14} @ budget {row['budget']:>4}x: add01 {row['val_add01']:.4f} "
              f"(achieved {row['achieved_compression']:.2f}x, {row['total_training_epochs']} epochs)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model, qctx, meta = _load_model(args.model)
    data = tr.make_datasets(cfg)
    metrics = tr.evaluate_model(model, qctx, data.X_val, data.Q_val, data.T_val,
                                data.vertices, data.diameter)
    out = {"checkpoint": args.model, "metrics": metrics,
           "payload_size_bits": ckpt.payload_size_bits(model, qctx)}
    if meta:
        out["meta"] = meta
    print(json.dumps(out, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.input) as f:
        artifacts = json.load(f)
    outdir = _outdir(args)
    written = rpt.emit_report(artifacts, outdir, formats=tuple(args.formats.split(",")),
                              timestamp=artifacts.get("timestamp"))
    for fmt, path in written.items():
        print(f"{fmt} -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqat",
                                description="modular quantization-aware training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("-c", "--config", required=True, help="run config (TOML)")
        if model:
            sp.add_argument("-m", "--model", required=True, help="input checkpoint (.mqck)")
        sp.add_argument("-o", "--out", default="out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true", help="echo progress records")

    sp = sub.add_parser("pretrain", help="train the full-precision reference model")
    common(sp, model=False)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("probe", help="2-bit per-module baseline probes")
    common(sp)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("plan", help="sensitivity profile, flow and ILP bit allocation")
    common(sp)
    sp.add_argument("--profile", help="reuse a sensitivity profile file")
    sp.add_argument("--k-best", help="treat this module as the fixed 2-bit probe winner")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("run", help="full modular QAT pipeline")
    common(sp)
    sp.add_argument("--plan", help="execute a previously exported plan.toml")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("flowsearch", help="exhaustive 2-bit module-subset search")
    common(sp)
    sp.set_defaults(func=cmd_flowsearch)

    sp = sub.add_parser("bitsweep", help="per-module bit-width sweep")
    common(sp)
    sp.add_argument("--module", required=True, help="module to sweep")
    sp.add_argument("--bits", default="1,2,3,4,8", help="comma-separated bit widths")
    sp.set_defaults(func=cmd_bitsweep)

    sp = sub.add_parser("compare", help="uniform vs layer-wise vs modular at matched budgets")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("-m", "--model", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="re-emit report formats from a structured report")
    sp.add_argument("-i", "--input", required=True, help="report.json from a previous run")
    sp.add_argument("-o", "--out", default="out")
    sp.add_argument("--formats", default="tabular,plotdata")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except planner.InfeasibleBudgetError as e:
        print(f"infeasible budget: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except tr.DivergenceError as e:
        print(f"{e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ckpt.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"file not found: {e.filename}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
