"""TOML/JSON run configuration and the manifest written beside every output."""

from __future__ import annotations

import json
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numba
import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .model import ModelSpec
from .simgen import Scenario
from .stagetwo import PriorConfig


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def model_spec(cfg: Mapping) -> ModelSpec:
    """``[model]`` block, or the default spec of a ``[scenario]`` block."""
    if "model" in cfg:
        return ModelSpec.from_dict(cfg["model"])
    if "scenario" in cfg:
        return scenario(cfg).spec
    raise ConfigError("config needs a [model] or [scenario] block")


def scenario(cfg: Mapping, seed: int | None = None) -> Scenario:
    if "scenario" not in cfg:
        raise ConfigError("config needs a [scenario] block")
    block = dict(cfg["scenario"])
    if seed is not None:
        block["seed"] = seed
    elif "seed" in cfg and "seed" not in block:
        block["seed"] = int(cfg["seed"])
    return Scenario.from_dict(block)


def priors(cfg: Mapping, spec: ModelSpec) -> PriorConfig:
    return PriorConfig.from_dict(cfg.get("priors", {}), spec.psi_labels, spec.blip_intercepts)


@dataclass(frozen=True)
class McmcSettings:
    chains: int = 2
    warmup: int = 1000
    kept: int = 1000

    @classmethod
    def from_config(cls, cfg: Mapping) -> "McmcSettings":
        m = cfg.get("mcmc", {})
        unknown = set(m) - {"chains", "warmup", "kept"}
        if unknown:
            raise ConfigError(f"unknown [mcmc] keys: {sorted(unknown)}")
        return cls(int(m.get("chains", 2)), int(m.get("warmup", 1000)), int(m.get("kept", 1000)))


def resolve_seed(cfg: Mapping, flag: int | None) -> int:
    if flag is not None:
        return int(flag)
    return int(cfg.get("seed", 0))


def _jsonable(x: Any):
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def write_manifest(out_dir: str | Path, command: str, cfg: Mapping, seed: int,
                   extra: Mapping | None = None) -> Path:
    """Config echo, seed and software versions next to a command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": _jsonable(cfg),
        "seed": seed,
        "versions": {"blipmeta": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__},
        "argv": sys.argv[1:],
    }
    if extra:
        doc["extra"] = _jsonable(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
