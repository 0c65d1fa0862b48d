"""Run configuration: a strict nested JSON document with dotted overrides and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .posenc import EncodingStrategy

OUTPUT_ROOT_ENV = "RAYROPE_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration (maps to exit code 2)."""


# None marks an optional value: flags left unset take the strategy's default.
DEFAULTS = {
    "encoding": {
        "kind": "rayrope",
        "use_sigma": None,
        "point_at_infinity": None,
        "rays_per_patch": None,
        "single_frequency": None,
        "encode_value_output": None,
        "known_depth_mode": None,
        "omega_min": 0.05,
        "omega_max": 50.0,
    },
    "model": {"dim": 72, "heads": 1, "layers": 4, "ff": 256, "image": 32, "patch": 4, "views": 3},
    "data": {
        "path": "data",
        "world_frame": "first_camera",
        "num_scenes": 64,
        "first_seed": 0,
        "fov_min": 30.0,
        "fov_max": 70.0,
        "radius_min": 2.2,
        "radius_max": 3.0,
        "elevation_min": -10.0,
        "elevation_max": 40.0,
        "azimuth_spread": 90.0,
    },
    "optim": {
        "lr": 3e-4,
        "beta1": 0.9,
        "beta2": 0.95,
        "eps": 1e-8,
        "warmup": 100,
        "steps": 2000,
        "batch_size": 4,
        "grad_clip": 1.0,
        "seed": 0,
    },
    "run": {"dtype": "float32", "out_dir": "runs/default", "val_every": 500, "val_batch": 16, "threads": 1},
    "sweep": {"head_dim": 72, "points": 57, "sigmas": [0.0, 0.2, 0.5], "smooth_window": 7},
    "bench": {"kinds": ["rayrope", "prope", "gta", "cape", "rope_on_rays", "plucker_input"], "views": [2, 3, 4, 6],
              "warmup": 3, "repeats": 10},
}

_FLAG_TYPES = {"rays_per_patch": int}
_ENUMS = {
    ("data", "world_frame"): ("first_camera", "randomized"),
    ("run", "dtype"): ("float32", "float64"),
}


def _check_type(path: str, value, default):
    if default is None:
        key = path.split(".")[-1]
        want = _FLAG_TYPES.get(key, bool)
        if value is not None and not (type(value) is want):
            raise ConfigError(f"{path}: expected {want.__name__} or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _check_type(path, value, DEFAULTS_FLAT.get(path, base[key]))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def parse_override(text: str) -> tuple[str, object]:
    """``section.key=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _nest(key: str, value) -> dict:
    parts = key.split(".")
    out: dict = {}
    cur = out
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return out


class RunConfig:
    """Fully resolved configuration. Access sections as attributes returning dicts."""

    def __init__(self, data: dict):
        self.doc = data
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from e
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} must be a JSON object")
            _merge(cfg, doc)
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            if key not in DEFAULTS_FLAT:
                raise ConfigError(f"unknown config key {key!r}")
            _merge(cfg, _nest(key, value))
        return cls(cfg)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        _merge(cfg, doc)
        return cls(cfg)

    def with_overrides(self, overrides) -> "RunConfig":
        cfg = copy.deepcopy(self.doc)
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            if key not in DEFAULTS_FLAT:
                raise ConfigError(f"unknown config key {key!r}")
            _merge(cfg, _nest(key, value))
        return RunConfig(cfg)

    def __getattr__(self, name):
        if name != "doc" and name in self.__dict__.get("doc", {}):
            return self.doc[name]
        raise AttributeError(name)

    def validate(self) -> None:
        for (sec, key), allowed in _ENUMS.items():
            if self.doc[sec][key] not in allowed:
                raise ConfigError(f"{sec}.{key} must be one of {allowed}, got {self.doc[sec][key]!r}")
        try:
            strat = self.strategy()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        m = self.doc["model"]
        if m["dim"] % m["heads"]:
            raise ConfigError(f"model.dim {m['dim']} not divisible by model.heads {m['heads']}")
        try:
            strat.check_head_dim(m["dim"] // m["heads"])
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e
        if m["image"] % m["patch"]:
            raise ConfigError("model.image must be divisible by model.patch")
        o = self.doc["optim"]
        if o["steps"] < 0 or o["batch_size"] < 1 or o["lr"] <= 0:
            raise ConfigError("optim: need steps >= 0, batch_size >= 1, lr > 0")

    def strategy(self) -> EncodingStrategy:
        e = self.doc["encoding"]
        flags = {k: v for k, v in e.items() if k not in ("kind", "omega_min", "omega_max")}
        return EncodingStrategy.create(e["kind"], e["omega_min"], e["omega_max"], **flags)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Short digest of everything that affects results (output location excluded)."""
        d = copy.deepcopy(self.doc)
        d["run"].pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def out_dir(self) -> Path:
        p = Path(self.doc["run"]["out_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p
