"""Strict parsing of run configuration files (YAML or JSON)."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import DomainError, RickerError
from .offspring import OffspringDistribution
from .params import ModelParams


class ConfigError(RickerError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


def _num(path, v, lo=None, hi=None, strict_lo=False, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if integer and not (isinstance(v, int) or float(v).is_integer()):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(path, "must be finite")
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ConfigError(path, f"must be {'>' if strict_lo else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(path, f"must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _pos(lo=0.0, strict=True):
    return lambda p, v: _num(p, v, lo, strict_lo=strict)


def _int(lo=0):
    return lambda p, v: _num(p, v, lo, integer=True)


def _real(p, v):
    return _num(p, v)


def _choice(*options):
    def check(p, v):
        if v not in options:
            raise ConfigError(p, f"must be one of {list(options)}, got {v!r}")
        return v

    return check


def _list_of(item, min_len=1):
    def check(p, v):
        if not isinstance(v, list) or len(v) < min_len:
            raise ConfigError(p, f"expected a list with at least {min_len} entries")
        return [item(f"{p}[{i}]", x) for i, x in enumerate(v)]

    return check


def _pair(item):
    def check(p, v):
        if not isinstance(v, list) or len(v) != 2:
            raise ConfigError(p, "expected a two-element list")
        return [item(f"{p}[0]", v[0]), item(f"{p}[1]", v[1])]

    return check


def _bool(p, v):
    if not isinstance(v, bool):
        raise ConfigError(p, f"expected true/false, got {v!r}")
    return v


# section -> key -> (validator, default); REQUIRED marks mandatory keys
REQUIRED = object()

SCHEMA = {
    "model": {
        "r": (_real, REQUIRED),
        "r_tilde": (_real, REQUIRED),
        "K": (_pos(), REQUIRED),
        "K_tilde": (_pos(), REQUIRED),
        "a": (_pos(strict=False), REQUIRED),
        "b": (_pos(strict=False), REQUIRED),
    },
    "offspring": {
        "kind": (_choice("poisson", "geometric", "geometric1", "finite"), "poisson"),
        "probs_u": (_list_of(_pos(strict=False)), None),
        "probs_v": (_list_of(_pos(strict=False)), None),
    },
    "analyze": {
        "grid": (_int(3), 201),
        "max_N": (_int(1), 8),
    },
    "simulate": {
        "initial": (_pair(_int(0)), REQUIRED),
        "max_steps": (_int(1), 10_000),
        "n_trajectories": (_int(1), 100),
        "write_trajectories": (_bool, True),
    },
    "qsd": {
        "cap": (_int(1), None),
        "tol": (_pos(), 1e-10),
        "max_iter": (_int(1), 100_000),
        "method": (_choice("matrix", "monte_carlo"), "matrix"),
        "n_particles": (_int(100), 10_000),
        "t_max": (_int(2), 2_000),
        "overflow_budget": (_pos(), 1e-8),
    },
    "sweep": {
        "K_list": (_list_of(_pos()), REQUIRED),
        "experiments": (
            _list_of(_choice("lambda", "tightness", "retention", "ar", "cycles")),
            ["lambda"],
        ),
        "method": (_choice("matrix", "monte_carlo"), "matrix"),
        "strip_width": (_pos(), 0.05),
        "retention_N": (_int(1), None),
        "retention_samples": (_int(1), 2_000),
        "retention_K_list": (_list_of(_pos()), None),
        "cycle_radius": (_pos(), 0.1),
    },
    "cycles": {
        "burn_in": (_int(0), 10_000),
        "max_period": (_int(1), 64),
        "tol": (_pos(), 1e-8),
        "p0": (_pair(_pos(strict=False)), None),
    },
}

TOP_LEVEL = set(SCHEMA) | {"seed"}


@dataclass
class RunConfig:
    model: ModelParams
    seed: int
    sections: dict  # validated section dicts, defaults filled in
    raw: dict  # canonical validated config, used for hashing

    def section(self, name):
        return self.sections[name]

    @property
    def digest(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _validate_section(name, data):
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a mapping")
    schema = SCHEMA[name]
    unknown = sorted(set(data) - set(schema))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown key")
    out = {}
    for key, (check, default) in schema.items():
        path = f"{name}.{key}"
        if key in data and data[key] is not None:
            out[key] = check(path, data[key])
        elif default is REQUIRED:
            raise ConfigError(path, "missing required key")
        else:
            out[key] = default
    return out


def parse_config(data, seed_override=None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = sorted(set(data) - TOP_LEVEL)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "model" not in data:
        raise ConfigError("model", "missing required section")
    sections = {name: _validate_section(name, data.get(name, {}) or {}) for name in SCHEMA
                if name in data or name in ("model", "offspring", "analyze", "qsd", "cycles")}
    seed = seed_override if seed_override is not None else data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")

    m, off = sections["model"], sections["offspring"]
    try:
        kw = {}
        law = off["kind"]
        if law == "finite":
            if off["probs_u"] is None or off["probs_v"] is None:
                raise ConfigError("offspring.probs_u", "finite law needs probs_u and probs_v")
            kw["offspring_u"] = OffspringDistribution.finite(off["probs_u"])
            kw["offspring_v"] = OffspringDistribution.finite(off["probs_v"])
            law = "poisson"
        model = ModelParams(law=law, **m, **kw)
    except DomainError as exc:
        raise ConfigError("model", str(exc)) from None
    raw = {"seed": seed, **{k: v for k, v in sections.items()}}
    return RunConfig(model, seed, sections, raw)


def load_config(path, seed_override=None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML/JSON: {exc}") from None
    return parse_config(data, seed_override)
