"""Run configuration: a flat key-value file with dotted keys mirroring the
CLI flags. Flags override file values; a preset sits between the two.

Example::

    variant = repopt
    dataset = synth:n=2000,classes=10,res=16,seed=3
    clients = 10
    participation = 1.0
    optimizer keys use their flag names (lr, momentum)
    model.widths = 16,32,64
"""

import os
from dataclasses import dataclass

from .errors import ConfigError

VARIANT_ALIASES = {"rep-tr": "rep_tr", "rep_tr": "rep_tr", "plain": "plain", "csla": "csla", "repopt": "repopt"}

PRESETS = {
    # cross-silo: every client participates, one local epoch, momentum 0
    "cross-silo": {"clients": "10", "participation": "1.0", "epochs": "1", "momentum": "0.0"},
    # cross-device: 10% of many clients per round, five local epochs
    "cross-device": {"clients": "100", "participation": "0.10", "epochs": "5", "momentum": "0.0"},
}


def parse_config_file(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            values[key.replace("-", "_")] = value
    return values


def merge_values(defaults, file_values, preset_name, flag_values):
    """defaults < config file < preset < explicit flags."""
    merged = dict(defaults)
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged.update(file_values)
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}, expected one of {sorted(PRESETS)}")
        merged.update(PRESETS[preset_name])
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def parse_bool(value, key):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_int(value, key):
    try:
        return int(str(value).strip())
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def parse_float(value, key):
    try:
        return float(str(value).strip())
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def parse_participation(value):
    """Integer counts select K clients; fractions select a share C."""
    text = str(value).strip()
    if "." in text or "e" in text.lower():
        return parse_float(text, "participation")
    return parse_int(text, "participation")


def parse_int_tuple(value, key):
    try:
        return tuple(int(part) for part in str(value).split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {value!r}") from None


def parse_variant(value):
    text = str(value).strip()
    if text not in VARIANT_ALIASES:
        raise ConfigError(f"unknown variant {text!r}, expected one of {sorted(set(VARIANT_ALIASES))}")
    return VARIANT_ALIASES[text]


@dataclass
class RunConfig:
    """Everything a fed-train run needs, validated up front."""

    spec: object            # ModelSpec
    variant: str
    fed: object             # FederatedConfig
    dataset: str
    testset: str
    hs_path: str
    out_dir: str
    dtype: str
    wallclock: bool

    def __post_init__(self):
        if self.variant == "repopt" and self.hs_path is None:
            raise ConfigError("the repopt variant requires --hs (run hs-search first)")
        for label, path in (("--hs", self.hs_path),):
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{label} path not found: {path}")
        for label, arg in (("--dataset", self.dataset), ("--testset", self.testset)):
            if arg is not None and not arg.startswith("synth:") and not os.path.isdir(arg):
                raise ConfigError(f"{label} directory not found: {arg}")
        if self.dtype not in ("fp32", "fp64"):
            raise ConfigError(f"dtype must be fp32 or fp64, got {self.dtype!r}")
