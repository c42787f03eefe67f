"""Report emission: structured JSON, a human-readable table, and flat
(series, x, y) plot data for the bit-sweep / budget-sweep figures."""

from __future__ import annotations

import json
import os
import tempfile
from datetime import datetime, timezone


def _atomic_write(path, text: str) -> None:
    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(tmp_fd, "w") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def emit_report(artifacts: dict, outdir, formats=("structured", "tabular", "plotdata"),
                timestamp: str | None = None, basename: str = "report") -> dict:
    """Write the requested formats; returns {format: path}.

    The structured report is byte-for-byte deterministic apart from the
    `timestamp` field.
    """
    os.makedirs(outdir, exist_ok=True)
    written = {}
    if "structured" in formats:
        payload = dict(artifacts)
        payload["timestamp"] = timestamp or datetime.now(timezone.utc).isoformat()
        path = os.path.join(outdir, f"{basename}.json")
        _atomic_write(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
        written["structured"] = path
    if "tabular" in formats:
        path = os.path.join(outdir, f"{basename}.txt")
        _atomic_write(path, render_table(artifacts))
        written["tabular"] = path
    if "plotdata" in formats:
        path = os.path.join(outdir, f"{basename}_plotdata.csv")
        rows = artifacts.get("plotdata", [])
        lines = ["series,x,y"]
        lines += [f"{series},{x},{y}" for series, x, y in rows]
        _atomic_write(path, "\n".join(lines) + "\n")
        written["plotdata"] = path
    return written


def render_table(artifacts: dict) -> str:
    lines = []
    title = artifacts.get("title", "run report")
    lines.append(f"== {title} ==")
    for key in ("config_hash", "seed", "baseline_val_add01", "total_training_epochs",
                "achieved_compression", "achieved_size_bits", "bops"):
        if key in artifacts:
            lines.append(f"{key:>24}: {artifacts[key]}")
    plan = artifacts.get("plan")
    if plan:
        lines.append(f"{'flow':>24}: {' -> '.join(plan['flow']) or '(empty)'}")
        lines.append(f"{'bits':>24}: " + ", ".join(f"{m}={b}" for m, b in plan["bits"].items()))
        if plan.get("k_best"):
            lines.append(f"{'k_best':>24}: {plan['k_best']} (fixed at 2 bits)")
    probes = artifacts.get("probe_results")
    if probes:
        lines.append("-- 2-bit probe accuracies (ADD-0.1d, val) --")
        for m, acc in probes.items():
            lines.append(f"  {m:>12}: {acc:.4f}")
    stages = artifacts.get("stages")
    if stages:
        lines.append("-- flow stages --")
        for s in stages:
            lines.append(f"  {s['stage']:>12} @{s['bits']}b: add01={s['val_add01']:.4f} "
                         f"size={s['size_bits']}b")
    final = artifacts.get("final_metrics")
    if final:
        lines.append("-- final metrics (val) --")
        for k in ("add_01d", "add_05d", "adi_01d", "adi_05d", "mean_add", "mean_adi"):
            if k in final:
                lines.append(f"  {k:>12}: {final[k]:.4f}")
    rows = artifacts.get("rows")
    if rows:
        lines.append("-- rows --")
        for row in rows:
            lines.append("  " + json.dumps(row, sort_keys=True))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plan files (structured text, TOML-compatible, consumed by `run --plan`)
# ---------------------------------------------------------------------------

def write_plan(path, plan_summary: dict) -> None:
    lines = ["# quantization plan v1"]
    flow = ", ".join(f'"{m}"' for m in plan_summary["flow"])
    lines.append(f"flow = [{flow}]")
    if plan_summary.get("k_best"):
        lines.append(f"k_best = \"{plan_summary['k_best']}\"")
    lines.append(f"budget = {float(plan_summary['budget'])!r}")
    lines.append(f"achieved_compression = {float(plan_summary['achieved_compression'])!r}")
    lines.append(f"achieved_size_bits = {int(plan_summary['achieved_size_bits'])}")
    if "bops" in plan_summary:
        lines.append(f"bops = {int(plan_summary['bops'])}")
    lines.append("")
    lines.append("[bits]")
    for module_id, bits in plan_summary["bits"].items():
        lines.append(f"{module_id} = {int(bits)}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_plan(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib
    with open(path, "rb") as f:
        data = tomllib.load(f)
    for key in ("flow", "bits", "budget"):
        if key not in data:
            raise ValueError(f"plan file {path} is missing {key!r}")
    return data
