"""Run configuration: typed schema, `key = value` files, CLI overrides.

Built-in defaults are the full-scale training values; the bundled
``configs/desk.cfg`` overlays the small-model preset that trains in
minutes on one core.  Unknown keys are rejected rather than ignored so a
typo cannot silently fall back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass


class ConfigError(Exception):
    """Bad config file, override syntax, key or value."""


@dataclass(frozen=True)
class KeySpec:
    """One config key: python type, full-scale and desk defaults, help."""

    type: type
    full: object
    desk: object
    help: str


SCHEMA: dict[str, KeySpec] = {
    "seed": KeySpec(int, 0, 0, "master seed; every RNG stream derives from it"),
    "dtype": KeySpec(str, "f64", "f32", "parameter/activation precision: f64 or f32"),
    "d": KeySpec(int, 512, 64, "encoder feature and memory dimension (multiple of 8)"),
    "d_emb": KeySpec(int, 32, 16, "token embedding size"),
    "hidden": KeySpec(int, 512, 64, "LSTM hidden size per decoder layer"),
    "attn_dim": KeySpec(int, 512, 64, "attention projection width"),
    "out_dim": KeySpec(int, 512, 64, "output head width, fed back to the next step"),
    "dropout": KeySpec(float, 0.4, 0.0, "dropout rate in the decoder"),
    "standard_cell_output": KeySpec(
        bool, False, False, "use h = o * tanh(c) instead of the literal h = o * c"),
    "attend_current_hidden": KeySpec(
        bool, False, False, "attention query is the current top hidden state "
                            "instead of the previous one"),
    "bn_momentum": KeySpec(float, 0.1, 0.1, "batch-norm running-statistics momentum"),
    "timescale": KeySpec(float, 10000.0, 10000.0, "positional-encoding timescale"),
    "lr": KeySpec(float, 0.1, 0.001, "Adam learning rate for the mle phase"),
    "rl_lr": KeySpec(float, 5e-05, 5e-05, "Adam learning rate for the rl phase"),
    "steps": KeySpec(int, 100000, 2000, "total optimizer steps for the run"),
    "batch_size": KeySpec(int, 16, 32, "examples per batch within a bucket"),
    "validate_every": KeySpec(int, 1000, 100, "steps between validation passes"),
    "patience": KeySpec(int, 3, 50, "stale validations tolerated before early stop"),
    "max_len": KeySpec(int, 200, 50, "decoding and sampling length cap, in tokens"),
    "k": KeySpec(int, 20, 5, "sampled rollouts per image in the rl phase"),
    "clip_norm": KeySpec(float, 5.0, 5.0, "global gradient-norm clip"),
    "leave_one_out": KeySpec(
        bool, False, False, "exclude each rollout from its own reward baseline"),
    "beam": KeySpec(int, 5, 5, "default beam width for prediction"),
    "threshold": KeySpec(float, 0.5, 0.5, "ink threshold for binarizing image metrics"),
}


def full_defaults() -> dict:
    return {key: spec.full for key, spec in SCHEMA.items()}


def desk_defaults() -> dict:
    return {key: spec.desk for key, spec in SCHEMA.items()}


def coerce(key: str, raw: str, where: str = "") -> object:
    """Parse a raw string for a known key; raise ConfigError otherwise."""
    prefix = f"{where}: " if where else ""
    spec = SCHEMA.get(key)
    if spec is None:
        raise ConfigError(f"{prefix}unknown config key {key!r}")
    text = raw.strip()
    if spec.type is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{prefix}key {key!r} expects a boolean, got {raw!r}")
    try:
        if spec.type is int:
            return int(text)
        if spec.type is float:
            return float(text)
    except ValueError:
        raise ConfigError(
            f"{prefix}key {key!r} expects {spec.type.__name__}, got {raw!r}") from None
    return text


def parse_config_file(path: str) -> dict:
    """Read `key = value` lines; '#' starts a comment, blanks ignored."""
    values: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{path}:{lineno}"
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        key, raw = text.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, raw, where)
    return values


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply `key=value` strings from the command line, highest precedence."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        out[key] = coerce(key, raw, f"--set {key}")
    return out


def load_config(path: str | None = None, overrides=()) -> dict:
    """Full-scale defaults, overlaid by an optional file, then overrides."""
    cfg = full_defaults()
    if path is not None:
        cfg.update(parse_config_file(path))
    return apply_overrides(cfg, overrides)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_effective(cfg: dict) -> str:
    """One `key = value` line per key; parseable back as a config file."""
    return "\n".join(f"{key} = {format_value(cfg[key])}" for key in sorted(cfg))


def format_help() -> str:
    """Per-key listing with both defaults, for --help output."""
    lines = []
    for key, spec in SCHEMA.items():
        lines.append(f"  {key} (default {format_value(spec.full)}, "
                     f"desk {format_value(spec.desk)}): {spec.help}")
    return "\n".join(lines)
