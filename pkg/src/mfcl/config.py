"""Run specification: TOML config file + command-line overrides + defaults.

Grammar: a TOML document with the flat sections listed in ``SCHEMA``; each
key holds a scalar or, for ``seeds``/``shape``/``conv_channels``, a list of
integers. Nested tables beyond one level and unknown keys are rejected.
Precedence is flags > file > defaults.
"""
from __future__ import annotations

import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import BlobSpec
from .federation import ExperimentConfig
from .losses import LossWeights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ROOT_ENV = "MFCL_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


# (section, key) -> (destination, type). Destinations: "cfg.<field>",
# "w.<weight>", "data.<field>", "run.<field>".
SCHEMA = {
    ("federation", "num_clients"): ("cfg.num_clients", int),
    ("federation", "clients_per_round"): ("cfg.clients_per_round", int),
    ("federation", "rounds"): ("cfg.rounds", int),
    ("federation", "local_epochs"): ("cfg.local_epochs", int),
    ("federation", "tasks"): ("cfg.tasks", int),
    ("federation", "batch_size"): ("cfg.batch_size", int),
    ("federation", "synthetic_batch_size"): ("cfg.synthetic_batch_size", int),
    ("federation", "alpha"): ("cfg.alpha", float),
    ("federation", "baseline"): ("cfg.baseline", str),
    ("federation", "per_round_eval"): ("cfg.per_round_eval", bool),
    ("generator", "epochs"): ("cfg.gen_epochs", int),
    ("generator", "steps_per_epoch"): ("cfg.gen_steps_per_epoch", int),
    ("generator", "batch_size"): ("cfg.gen_batch_size", int),
    ("generator", "lr"): ("cfg.gen_lr", float),
    ("generator", "noise_dim"): ("cfg.noise_dim", int),
    ("generator", "width"): ("cfg.gen_width", int),
    ("generator", "base_size"): ("cfg.gen_base_size", int),
    ("generator", "reinit_per_task"): ("cfg.reinit_generator", bool),
    ("client", "lr"): ("cfg.client_lr", float),
    ("client", "momentum"): ("cfg.client_momentum", float),
    ("client", "kd_input"): ("cfg.kd_input", str),
    ("loss", "w_div"): ("w.w_div", float),
    ("loss", "w_bn"): ("w.w_bn", float),
    ("loss", "w_ft"): ("w.w_ft", float),
    ("loss", "w_kd"): ("w.w_kd", float),
    ("model", "template"): ("cfg.template", str),
    ("model", "hidden"): ("cfg.hidden", int),
    ("model", "feature_dim"): ("cfg.feature_dim", int),
    ("model", "conv_channels"): ("cfg.conv_channels", list),
    ("data", "source"): ("data.source", str),
    ("data", "num_classes"): ("data.num_classes", int),
    ("data", "samples_per_class"): ("data.samples_per_class", int),
    ("data", "test_per_class"): ("data.test_per_class", int),
    ("data", "shape"): ("data.shape", list),
    ("data", "seed"): ("data.seed", int),
    ("data", "std"): ("data.std", float),
    ("data", "center_scale"): ("data.center_scale", float),
    ("data", "train_images"): ("data.train_images", str),
    ("data", "train_labels"): ("data.train_labels", str),
    ("data", "test_images"): ("data.test_images", str),
    ("data", "test_labels"): ("data.test_labels", str),
    ("run", "seeds"): ("run.seeds", list),
    ("run", "out"): ("run.out", str),
}
_KEY_OF = {dest: f"{sec}.{key}" for (sec, key), (dest, _) in SCHEMA.items()}

# full-size dataset defaults: 100 classes of 500 samples, 32x32 RGB
DATA_DEFAULTS = {"source": "blobs", "num_classes": 100, "samples_per_class": 500,
                 "test_per_class": 100, "shape": [3, 32, 32], "seed": 0, "std": 0.5,
                 "center_scale": 0.6, "train_images": "", "train_labels": "",
                 "test_images": "", "test_labels": ""}


@dataclass
class DataSource:
    source: str = "blobs"
    blobs: BlobSpec | None = None
    idx_paths: dict = field(default_factory=dict)

    def to_dict(self):
        if self.source == "blobs":
            return {"source": "blobs", "manifest": json.loads(self.blobs.to_json())}
        return {"source": "idx", **self.idx_paths}


@dataclass
class RunSpec:
    config: ExperimentConfig
    data: DataSource
    out_dir: Path
    seeds: list[int]

    def to_dict(self):
        return {"config": self.config.to_dict(), "data": self.data.to_dict(),
                "out_dir": str(self.out_dir), "seeds": list(self.seeds)}


def _coerce(value, typ, key):
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is str:
        if isinstance(value, str):
            return value
    elif typ is list:
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                           for v in value):
            return list(value)
    raise ConfigError(f"{key}: expected {typ.__name__}, got {type(value).__name__} {value!r}")


def _flatten(doc: dict, origin: str) -> dict:
    flat = {}
    for section, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"{origin}: top-level key {section!r} must be a [section]")
        for key, value in table.items():
            if (section, key) not in SCHEMA:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            dest, typ = SCHEMA[(section, key)]
            flat[dest] = _coerce(value, typ, f"{section}.{key}")
    return flat


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from exc
    return _flatten(doc, str(path))


def parse_config(path=None, overrides: dict | None = None) -> RunSpec:
    """Resolve a RunSpec. ``overrides`` uses ``"section.key"`` names, e.g.
    ``{"federation.num_clients": 8}``."""
    flat = load_config_file(path) if path else {}
    for name, value in (overrides or {}).items():
        section, _, key = name.partition(".")
        if (section, key) not in SCHEMA:
            raise ConfigError(f"unknown override {name}")
        dest, typ = SCHEMA[(section, key)]
        flat[dest] = _coerce(value, typ, name)

    cfg_kw = {d[4:]: v for d, v in flat.items() if d.startswith("cfg.")}
    w_kw = {d[2:]: v for d, v in flat.items() if d.startswith("w.")}
    data_kw = dict(DATA_DEFAULTS)
    data_kw.update({d[5:]: v for d, v in flat.items() if d.startswith("data.")})
    run_kw = {d[4:]: v for d, v in flat.items() if d.startswith("run.")}

    try:
        weights = LossWeights(**w_kw)
    except ValueError as exc:
        raise ConfigError(f"[loss] {exc}") from exc
    try:
        config = ExperimentConfig(weights=weights, **cfg_kw)
    except ValueError as exc:
        raise ConfigError(_name_keys(str(exc))) from exc

    data = _data_source(data_kw, path)
    seeds = run_kw.get("seeds", [0, 1, 2])
    if not seeds:
        raise ConfigError("run.seeds must list at least one seed")
    out = run_kw.get("out") or _default_out(path, config)
    return RunSpec(config, data, Path(out), [int(s) for s in seeds])


def _name_keys(message: str) -> str:
    # phrase validation errors in terms of config-file keys
    names = {dest[4:]: key for dest, key in _KEY_OF.items() if dest.startswith("cfg.")}
    return re.sub(r"(?<![\w.])(\w+)(?=[= ])",
                  lambda m: names.get(m.group(1), m.group(1)), message)


def _data_source(d: dict, config_path) -> DataSource:
    if d["source"] == "blobs":
        try:
            spec = BlobSpec(num_classes=d["num_classes"], samples_per_class=d["samples_per_class"],
                            shape=tuple(d["shape"]), seed=d["seed"],
                            test_per_class=d["test_per_class"], std=d["std"],
                            center_scale=d["center_scale"])
        except TypeError as exc:
            raise ConfigError(f"[data] {exc}") from exc
        if spec.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        return DataSource("blobs", blobs=spec)
    if d["source"] == "idx":
        keys = ("train_images", "train_labels", "test_images", "test_labels")
        missing = [k for k in keys if not d[k]]
        if missing:
            raise ConfigError(f"data.source = 'idx' needs {', '.join('data.' + k for k in missing)}")
        base = Path(config_path).parent if config_path else Path(".")
        return DataSource("idx", idx_paths={k: str((base / d[k]) if not Path(d[k]).is_absolute()
                                                   else Path(d[k])) for k in keys})
    raise ConfigError(f"data.source must be 'blobs' or 'idx', got {d['source']!r}")


def _default_out(config_path, config: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stem = Path(config_path).stem if config_path else "default"
    return root / f"{stem}-{config.baseline}"
