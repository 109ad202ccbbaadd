"""Flat `key = value` run configuration with [section] headers.

One file drives every pipeline stage.  Parsing is strict: an unknown
section or key, or a value that does not coerce to the default's type,
fails immediately with the offending name and line number.  Keys absent
from the file keep their defaults; every tunable in the package appears
below so a config snapshot fully determines a run.
"""

import numpy as np

from .errors import ContractViolation
from .pendulum import DEFAULT_STAGE_Q, DEFAULT_STAGE_R, PendulumParams

__all__ = ["DEFAULTS", "RunConfig", "parse_config", "load_config",
           "config_text"]

_P = PendulumParams()
_Q_DIAG = tuple(float(v) for v in np.diag(DEFAULT_STAGE_Q))

DEFAULTS = {
    "run": {
        "seed": 0,
        "out_dir": "runs/default",
        "threads": 0,              # 0 = leave BLAS pools alone
    },
    "pendulum": {
        "mass": _P.mass,
        "length": _P.length,
        "gravity": _P.gravity,
        "damping": _P.damping,
        "dt": _P.dt,
        "u_max": _P.u_max,
    },
    "collect": {
        "n_points": 10_000,
        "episode_len": 1000,
        "gain": (-10.0, 0.0),      # collection policy, physical units
    },
    "model": {
        "sigma_w": 0.01,
        "hidden": 64,
        "horizon": 10,
        "lr": 1e-4,
        "max_epochs": 1000,
        "first_target_loss": -2.94,
        "n_background": 256,
        "background_resample_every": 5,
        "sigma_y_init": 0.01,
    },
    "safe-set": {
        "outer": 61,
        "inner_v": 10,
        "inner_k": 10,
        "lr_v": 1e-3,
        "lr_k": 1e-2,
        "grid_counts": (100, 100),
        "sigma_bar": 2.0,
        "rho": 1.0,
        "gamma": 100.0,
        "q": _Q_DIAG,
        "r": float(DEFAULT_STAGE_R),
        "k0": (-10.0, 0.0),
        "v_hidden": (64, 64, 64),
        "n_v": 100,
        "eps": 0.01,
        "angle_cap": 0.3,
    },
    "verify": {
        "n_samples": 5000,
        "delta": 0.05,
        "sigma_bar": 2.0,
        "confidence": 0.99,
        "shared_w": True,
    },
    "explore": {
        "alpha": 100.0,
        "beta": 1.0,
        "gamma": 100.0,
        "outer": 3,
        "min_steps": 3000,
        "min_lr": 0.1,
        "max_steps": 100,
        "max_lr": 1e-4,
        "sigma_bar": 2.0,
        "steps": 5000,
        "trials": 50,              # semi-random baseline episodes
        "grid_counts": (50, 50),
    },
    "figures": {
        "levels": 8,
        "grid_counts": (100, 100),
    },
}


class RunConfig:
    """Section -> key -> value mapping with strict lookups."""

    def __init__(self, values):
        self._values = values

    def get(self, section, key):
        try:
            return self._values[section][key]
        except KeyError:
            raise ContractViolation(f"missing config key: {section}.{key}") from None

    def section(self, name):
        if name not in self._values:
            raise ContractViolation(f"missing config section: {name}")
        return dict(self._values[name])

    def replace(self, section, key, value):
        self.get(section, key)
        self._values[section][key] = value

    def as_dict(self):
        return {s: dict(kv) for s, kv in self._values.items()}


def _coerce(raw, default, where):
    if isinstance(default, bool):
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ContractViolation(f"{where}: expected true/false, got {raw!r}")
    try:
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(part.strip()) for part in raw.split(","))
        return type(default)(raw)
    except ValueError:
        raise ContractViolation(
            f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text):
    """Overlay `key = value` lines onto DEFAULTS; strict on names."""
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in values:
                raise ContractViolation(
                    f"line {lineno}: unknown config section [{section}]")
            continue
        if "=" not in stripped:
            raise ContractViolation(f"line {lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ContractViolation(f"line {lineno}: key outside any [section]")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in values[section]:
            raise ContractViolation(f"line {lineno}: unknown config key {section}.{key}")
        values[section][key] = _coerce(raw, DEFAULTS[section][key],
                                       f"line {lineno}: {section}.{key}")
    return RunConfig(values)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_text(cfg):
    """Render a RunConfig back to parseable text (snapshot format)."""
    lines = []
    for section, kv in cfg.as_dict().items():
        lines.append(f"[{section}]")
        for key, value in kv.items():
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)
