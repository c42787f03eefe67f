"""Run-configuration files: a strict, flat TOML dialect with one section per
concern. Unknown keys are rejected (with a did-you-mean suggestion) so typos
cannot silently fall back to defaults."""

from __future__ import annotations

import difflib

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .trainer import RunConfig


class ConfigError(ValueError):
    pass


# section -> key -> RunConfig field
_SCHEMA = {
    "run": {"seed": "seed"},
    "dataset": {"n_train": "n_train", "n_val": "n_val", "noise_std": "noise_std"},
    "train": {
        "base_lr": "base_lr",
        "batch_size": "batch_size",
        "momentum": "momentum",
        "clip_grad_norm": "clip_grad_norm",
        "pretrain_epochs": "pretrain_epochs",
    },
    "quant": {
        "quantizer": "quantizer",
        "candidate_bits": "candidate_bits",
        "budget": "budget",
        "epochs_per_module": "epochs_per_module",
        "probe_epochs": "probe_epochs",
        "inq_strategy": "inq_strategy",
    },
    "sensitivity": {
        "hutchinson_samples": "hutchinson_samples",
        "calibration_samples": "calibration_samples",
    },
    "compare": {"budgets": "compare_budgets"},
    "arch": {
        "backbone_widths": None,  # collected into RunConfig.arch
        "backbone_taps": None,
        "aggregator_widths": None,
        "head_widths": None,
    },
}

_INT_FIELDS = {"seed", "n_train", "n_val", "batch_size", "pretrain_epochs",
               "epochs_per_module", "probe_epochs", "hutchinson_samples",
               "calibration_samples"}
_FLOAT_FIELDS = {"noise_std", "base_lr", "momentum", "clip_grad_norm", "budget"}
_STR_FIELDS = {"quantizer", "inq_strategy"}
_INT_LIST_FIELDS = {"candidate_bits"}
_FLOAT_LIST_FIELDS = {"compare_budgets"}


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _coerce(dotted: str, field_name: str, value):
    if field_name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted}: expected an integer, got {value!r}")
        return value
    if field_name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted}: expected a number, got {value!r}")
        return float(value)
    if field_name in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(f"{dotted}: expected a string, got {value!r}")
        return value
    if field_name in _INT_LIST_FIELDS:
        if not isinstance(value, list) or not value or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{dotted}: expected a non-empty list of integers, got {value!r}")
        return tuple(value)
    if field_name in _FLOAT_LIST_FIELDS:
        if not isinstance(value, list) or not value or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{dotted}: expected a non-empty list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    return value  # arch entries are validated by build_model


def parse_config_dict(raw: dict) -> RunConfig:
    fields: dict = {}
    arch: dict = {}
    for section, content in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]{_suggest(section, _SCHEMA)}")
        if not isinstance(content, dict):
            raise ConfigError(f"[{section}] must be a section of key = value entries")
        allowed = _SCHEMA[section]
        for key, value in content.items():
            dotted = f"{section}.{key}"
            if key not in allowed:
                raise ConfigError(f"unknown config key {dotted!r}{_suggest(key, allowed)}")
            field_name = allowed[key]
            if field_name is None:
                arch[key] = value
            else:
                fields[field_name] = _coerce(dotted, field_name, value)
    if arch:
        fields["arch"] = arch
    try:
        return RunConfig(**fields)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config syntax error in {path}: {e}") from None
    return parse_config_dict(raw)


def write_config(path, cfg: RunConfig) -> None:
    """Emit a config file that parses back to `cfg` (defaults included)."""
    lines = []

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    values = {
        "run": {"seed": cfg.seed},
        "dataset": {"n_train": cfg.n_train, "n_val": cfg.n_val, "noise_std": cfg.noise_std},
        "train": {"base_lr": cfg.base_lr, "batch_size": cfg.batch_size,
                  "momentum": cfg.momentum, "clip_grad_norm": cfg.clip_grad_norm,
                  "pretrain_epochs": cfg.pretrain_epochs},
        "quant": {"quantizer": cfg.quantizer, "candidate_bits": list(cfg.candidate_bits),
                  "budget": cfg.budget, "epochs_per_module": cfg.epochs_per_module,
                  "probe_epochs": cfg.probe_epochs, "inq_strategy": cfg.inq_strategy},
        "sensitivity": {"hutchinson_samples": cfg.hutchinson_samples,
                        "calibration_samples": cfg.calibration_samples},
        "compare": {"budgets": list(cfg.compare_budgets)},
    }
    if cfg.arch:
        values["arch"] = dict(cfg.arch)
    for section, content in values.items():
        lines.append(f"[{section}]")
        for k, v in content.items():
            lines.append(f"{k} = {fmt(v)}")
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))
