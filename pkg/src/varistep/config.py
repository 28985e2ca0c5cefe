"""YAML configuration parsing, validation and the run manifest.

A config file is a mapping with top-level scalars ``mode``, ``tau``,
``h``, ``T_end``, ``stride``, ``fluid_reg`` and the sections
``material``, ``regularization``, ``grid``, ``container``, ``force``,
``initial`` and ``tolerances``.  Every problem found is reported at once,
each prefixed with its field path.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources

import yaml

from . import __version__
from .energetics import MaterialParams, RegularizationParams
from .errors import ValidationError
from .geometry import ContainerBox
from .steppers import (ForceSpec, GridSpec, InitialSpec, SchemeConfig,
                       Tolerances)

__all__ = [
    "parse_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "shipped_config",
    "shipped_configs",
    "RunManifest",
]

_SECTIONS = {
    "material": MaterialParams,
    "regularization": RegularizationParams,
    "grid": GridSpec,
    "container": ContainerBox,
    "force": ForceSpec,
    "initial": InitialSpec,
    "tolerances": Tolerances,
}
_ATTR = {"regularization": "reg", "tolerances": "tol"}
_SCALARS = ("mode", "tau", "h", "T_end", "stride", "fluid_reg")
_TUPLES = {"lengths", "origin", "lo", "hi", "vector", "center", "velocity",
           "det_bounds", "affine"}


def _coerce(name, value):
    if name in _TUPLES and value is not None:
        if name == "affine":
            return tuple(float(v) for row in value for v in
                         (row if isinstance(row, (list, tuple)) else [row]))
        return tuple(float(v) for v in value)
    if name == "t_off" and value is None:
        return math.inf
    return value


def _build_section(name, cls, data, problems):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.append(f"{name}: must be a mapping")
        return cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown field")
            continue
        try:
            kwargs[key] = _coerce(key, value)
        except (TypeError, ValueError):
            problems.append(f"{name}.{key}: malformed value {value!r}")
    try:
        return cls(**kwargs)
    except ValidationError as err:
        for v in err.violations:
            problems.append(v if v.startswith(f"{name}.") else f"{name}: {v}")
    except (TypeError, ValueError) as err:
        problems.append(f"{name}: {err}")
    # fall back to defaults so the remaining checks can still run
    return cls()


def config_from_dict(data):
    """Build and validate a :class:`SchemeConfig` from a plain mapping.

    Raises
    ------
    ValidationError
        Listing every violation with its field path.
    """
    if not isinstance(data, dict):
        raise ValidationError(["config: top level must be a mapping"])
    problems = []
    for key in data:
        if key not in _SCALARS and key not in _SECTIONS:
            problems.append(f"{key}: unknown field")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[_ATTR.get(name, name)] = _build_section(name, cls, data.get(name),
                                                       problems)
    for key in _SCALARS:
        if key in data:
            kwargs[key] = data[key]
    for key in ("tau", "h", "T_end"):
        if key in kwargs and not isinstance(kwargs[key], (int, float)):
            problems.append(f"{key}: must be a number")
            del kwargs[key]
    if "stride" in kwargs and not (isinstance(kwargs["stride"], int)
                                   and kwargs["stride"] >= 0):
        problems.append("stride: must be a non-negative integer")
        del kwargs["stride"]
    for key in ("tau", "h", "T_end"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    cfg = SchemeConfig(**kwargs)
    problems.extend(cfg.violations())
    if problems:
        raise ValidationError(problems)
    return cfg


def parse_config(path):
    """Read a YAML config file and return a validated :class:`SchemeConfig`."""
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ValidationError([f"config: not valid YAML ({err})"]) from err
    return config_from_dict(data if data is not None else {})


def config_to_dict(cfg):
    """Plain mapping in the file layout; inverse of :func:`config_from_dict`."""
    d = cfg.to_dict()
    out = {k: d[k] for k in _SCALARS}
    for name in _SECTIONS:
        sec = dict(d[_ATTR.get(name, name)])
        for k, v in sec.items():
            if isinstance(v, tuple):
                sec[k] = list(v)
        out[name] = sec
    return out


def config_hash(cfg):
    """SHA-256 over the canonical JSON of every config field and the version."""
    payload = json.dumps({"config": config_to_dict(cfg), "version": __version__},
                         sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(payload.encode()).hexdigest()


def shipped_configs():
    """Names of the configs bundled with the package."""
    root = resources.files("varistep") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def shipped_config(name):
    """Path-like handle of a bundled config, e.g. ``parabolic_solid``."""
    return resources.files("varistep") / "configs" / f"{name}.yaml"


@dataclass
class RunManifest:
    """Identity and outcome of one run."""

    config_hash: str
    version: str = __version__
    mode: str = ""
    start: str = "t=0"
    stop_reason: str = "completed"
    stop_time: float = None
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg):
        return cls(config_hash=config_hash(cfg), mode=cfg.mode)

    def to_json(self):
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)},
                          indent=2, sort_keys=True, default=repr)
