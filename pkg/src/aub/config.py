"""Experiment configuration: parsing, defaults and validation.

A config is a TOML document (or the equivalent JSON object) with top-level
``seed`` and ``out`` keys and ``[data]``, ``[model]``, ``[train]`` and
``[eval]`` sections.  Every key is checked against a fixed schema; unknown
keys and ill-typed values are rejected before any file is written.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import tomli

from .alignment import Mode, TrainConfig
from .checkpoint import fingerprint

_TOP_KEYS = {"seed", "out", "data", "model", "train", "eval"}

_DATA_KEYS = {
    "moons": {"n": 2000, "noise_sd": 0.05},
    "blobs": {"n": 2000, "n_components": 3, "box": [-2.0, 2.0], "sd": 0.25},
    "gaussians": {"n": 10000, "means": [0.0, 4.0], "sds": [1.0, 1.0]},
    "tabular": {"n_rows": 5000, "n_features": 6, "split_features": [-1], "standardize": True},
    "csv": {"path": None, "has_header": False, "split_features": [-1], "standardize": True, "name": "table"},
}

_FLOW_KEYS = {
    "identity": {},
    "affine": {},
    "realnvp": {"n_layers": None, "hidden_dim": None, "n_hidden": 1, "scale_clamp": 5.0, "norm": True},
}

_DENSITY_KEYS = {
    "standard_normal": {},
    "diag_gaussian": {},
    "mog": {"n_components": None},
    "flow": {"n_layers": None, "hidden_dim": None, "n_hidden": 1, "scale_clamp": 5.0, "norm": True},
}

_TRAIN_KEYS = {"max_epochs", "batch_size", "lr_q", "lr_t", "optimizer", "seed", "mode", "patience"}
_EVAL_KEYS = {"energy": True, "roundtrip": True}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, got: dict, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def _fill(section: str, got: dict, defaults: dict) -> dict:
    _reject_unknown(section, got, defaults)
    out = {}
    for key, default in defaults.items():
        if key in got:
            out[key] = got[key]
        elif default is None:
            raise ConfigError(f"{section}: missing required key {key!r}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def _expect(section, key, value, types):
    # bool is an int subclass; never let true/false stand in for a number
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{section}.{key} must be {types[0].__name__}, got {value!r}")
    if not isinstance(value, types):
        raise ConfigError(f"{section}.{key} must be {types[0].__name__}, got {value!r}")


def _check_types(section: str, values: dict) -> None:
    for key, value in values.items():
        if key in {"n", "n_rows", "n_features", "n_components", "n_layers", "hidden_dim", "n_hidden"}:
            _expect(section, key, value, (int,))
            if value < 1:
                raise ConfigError(f"{section}.{key} must be positive")
        elif key in {"noise_sd", "sd", "scale_clamp"}:
            _expect(section, key, value, (float, int))
            if value < 0:
                raise ConfigError(f"{section}.{key} must be non-negative")
        elif key in {"standardize", "has_header", "norm"}:
            _expect(section, key, value, (bool,))
        elif key in {"box", "means", "sds", "split_features"}:
            _expect(section, key, value, (list,))
            inner = (int,) if key == "split_features" else (float, int)
            for v in value:
                _expect(section, key, v, inner)
        elif key in {"path", "name"}:
            _expect(section, key, value, (str,))


def _resolve_data(raw: dict) -> dict:
    if "generator" not in raw:
        raise ConfigError("data: missing required key 'generator'")
    gen = raw["generator"]
    if gen not in _DATA_KEYS:
        raise ConfigError(f"data.generator must be one of {sorted(_DATA_KEYS)}, got {gen!r}")
    body = {k: v for k, v in raw.items() if k not in ("generator", "seed")}
    data = _fill(f"data ({gen})", body, _DATA_KEYS[gen])
    _check_types("data", data)
    data["generator"] = gen
    if "seed" in raw:
        _expect("data", "seed", raw["seed"], (int,))
        data["seed"] = raw["seed"]
    if gen == "blobs" and len(data["box"]) != 2:
        raise ConfigError("data.box must be [lo, hi]")
    if gen == "gaussians" and len(data["means"]) != len(data["sds"]):
        raise ConfigError("data.means and data.sds must have equal length")
    if gen in ("tabular", "csv") and not 1 <= len(data["split_features"]) <= 4:
        raise ConfigError("data.split_features must list between 1 and 4 features")
    return data


def _resolve_flow(section: str, raw) -> dict:
    if not isinstance(raw, dict) or "type" not in raw:
        raise ConfigError(f"{section} must be a table with a 'type' key")
    kind = raw["type"]
    if kind not in _FLOW_KEYS:
        raise ConfigError(f"{section}.type must be one of {sorted(_FLOW_KEYS)}, got {kind!r}")
    spec = _fill(section, {k: v for k, v in raw.items() if k != "type"}, _FLOW_KEYS[kind])
    _check_types(section, spec)
    return {"type": kind, **spec}


def _resolve_density(raw) -> dict:
    if not isinstance(raw, dict) or "type" not in raw:
        raise ConfigError("model.density must be a table with a 'type' key")
    kind = raw["type"]
    if kind not in _DENSITY_KEYS:
        raise ConfigError(f"model.density.type must be one of {sorted(_DENSITY_KEYS)}, got {kind!r}")
    spec = _fill("model.density", {k: v for k, v in raw.items() if k != "type"}, _DENSITY_KEYS[kind])
    _check_types("model.density", spec)
    if kind == "flow":
        return {"type": "flow", "flow": {"type": "realnvp", **spec}}
    return {"type": kind, **spec}


def domain_count(data: dict) -> int:
    gen = data["generator"]
    if gen in ("moons", "blobs"):
        return 2
    if gen == "gaussians":
        return len(data["means"])
    return 2 ** len(data["split_features"])


@dataclass
class ExperimentConfig:
    seed: int
    out: str | None
    data: dict
    model: dict
    train: TrainConfig
    eval: dict
    train_raw: dict

    @property
    def k(self) -> int:
        return domain_count(self.data)

    @property
    def data_seed(self) -> int:
        return self.data.get("seed", self.seed)

    def resolved(self) -> dict:
        """Canonical dict of everything that determines a trained model."""
        return {
            "seed": self.seed,
            "data": self.data,
            "model": self.model,
            "train": {**self.train_raw, "mode": self.train.mode.value, "seed": self.train.seed},
        }

    def fingerprint(self) -> str:
        return fingerprint(self.resolved())

    def data_fingerprint(self) -> str:
        return fingerprint({"data": self.data, "seed": self.data_seed})


def resolve(raw: dict, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table/object at top level")
    _reject_unknown("config", raw, _TOP_KEYS)
    for section in ("data", "model", "train"):
        if section not in raw:
            raise ConfigError(f"missing [{section}] section")
    seed = raw.get("seed", 0) if seed_override is None else seed_override
    _expect("config", "seed", seed, (int,))
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    out = out_override if out_override is not None else raw.get("out")

    data = _resolve_data(raw["data"])
    k = domain_count(data)

    train_raw = dict(raw["train"])
    _reject_unknown("train", train_raw, _TRAIN_KEYS)
    try:
        train = TrainConfig(**{**train_raw, "seed": train_raw.get("seed", seed)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None

    model_raw = dict(raw["model"])
    _reject_unknown("model", model_raw, {"flow", "flows", "density", "weights"})
    if ("flow" in model_raw) == ("flows" in model_raw):
        raise ConfigError("model: give exactly one of 'flow' (shared spec) or 'flows' (one per domain)")
    if "flows" in model_raw:
        if not isinstance(model_raw["flows"], list) or len(model_raw["flows"]) != k:
            raise ConfigError(f"model.flows must list {k} flow specs, one per domain")
        flows = [_resolve_flow(f"model.flows[{j}]", f) for j, f in enumerate(model_raw["flows"])]
    else:
        shared = _resolve_flow("model.flow", model_raw["flow"])
        flows = [dict(shared) for _ in range(k)]
        # LRMF fixes the second domain's map at the identity
        if train.mode is Mode.LRMF and k == 2:
            flows[1] = {"type": "identity"}
    if "density" in model_raw:
        density = _resolve_density(model_raw["density"])
    elif train.mode is Mode.ALIGNFLOW_MLE:
        density = {"type": "standard_normal"}
    else:
        raise ConfigError("model: missing required key 'density'")
    model = {"flows": flows, "density": density}
    if "weights" in model_raw:
        w = model_raw["weights"]
        _expect("model", "weights", w, (list,))
        if len(w) != k:
            raise ConfigError(f"model.weights must have {k} entries")
        model["weights"] = [float(v) for v in w]

    ev = _fill("eval", dict(raw.get("eval", {})), _EVAL_KEYS)
    for key, value in ev.items():
        _expect("eval", key, value, (bool,))

    cfg = ExperimentConfig(seed, out, data, model, train, ev, train_raw)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Mode rules checked on the spec alone, before any model is built."""
    mode = cfg.train.mode
    flows, density = cfg.model["flows"], cfg.model["density"]
    if mode is Mode.ALIGNFLOW_MLE and density["type"] != "standard_normal":
        raise ConfigError("alignflow_mle mode requires density type 'standard_normal'")
    if mode is Mode.LRMF:
        if cfg.k != 2:
            raise ConfigError(f"lrmf mode requires exactly 2 domains, config yields {cfg.k}")
        if flows[1]["type"] != "identity":
            raise ConfigError("lrmf mode requires the second flow to be 'identity'")
    if cfg.data["generator"] == "gaussians" and any(f["type"] == "realnvp" for f in flows):
        raise ConfigError("realnvp flows need dim >= 2; the gaussians generator is 1-D")
    weights = cfg.model.get("weights")
    if weights is not None and (any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9):
        raise ConfigError("model.weights must be positive and sum to 1")


def parse_text(text: str, suffix: str) -> dict:
    if suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = resolve(parse_text(text, path.suffix.lower()), seed_override, out_override)
    if cfg.data["generator"] == "csv":
        p = Path(cfg.data["path"])
        if not p.is_absolute():
            cfg.data["path"] = str((path.parent / p).resolve())
    return cfg
