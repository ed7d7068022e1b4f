"""Flat INI experiment configuration with strict key checking.

Every key has a default; unknown sections or keys are rejected rather than
silently ignored, and the fully resolved configuration is echoed into the
output directory before any run so results are reproducible from the echo
alone.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .tasks import LASSO, MIXTURE, NORMAL, QUADRATIC, ROSENBROCK_INIT, TaskDistribution
from .train import MetaConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config"]


class ConfigError(Exception):
    """Malformed, unknown or ill-typed configuration input."""


def _parse_float_list(text: str):
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(float(p) for p in items)


# section -> key -> (default string, parser)
_SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "meta": {
        "seed": ("1", "int"),
        "hidden": ("20", "int"),
        "feature_dim": ("2", "int"),
        "unroll_len": ("20", "int"),
        "epochs": ("5000", "int"),
        "epochs_per_task": ("20", "int"),
        "alpha": ("1e-5", "float"),
        "outer": ("adam", "str"),
        "outer_lr": ("1e-4", "float"),
        "sgd_beta": ("0.1", "float"),
        "sgd_mu": ("1.0", "float"),
        "grad_mode": ("fd_hvp_meta", "str"),
        "fd_epsilon": ("", "optfloat"),
        "tasks_per_update": ("1", "int"),
        "curriculum": ("fixed", "str"),
        "curriculum_threshold": ("0.05", "float"),
    },
    "train": {
        "family": ("lasso", "str"),
        "dist": ("mixture", "str"),
        "sigma": ("1.0", "float"),
        "dim": ("10", "int"),
        "lam": ("0.005", "float"),
    },
    "adapt": {
        "family": ("lasso", "str"),
        "dist": ("normal", "str"),
        "sigma": ("100", "float"),
        "dim": ("10", "int"),
        "lam": ("0.005", "float"),
        "steps": ("5", "int"),
        "alpha": ("", "optfloat"),
        "fresh_task_per_step": ("true", "bool"),
    },
    "test": {
        "family": ("lasso", "str"),
        "dist": ("normal", "str"),
        "sigma": ("100", "float"),
        "dim": ("10", "int"),
        "lam": ("0.005", "float"),
        "horizon": ("200", "int"),
    },
    "eval": {
        "n_seeds": ("10", "int"),
        "n_tasks": ("1", "int"),
        "sigmas": ("10,25,50,100,200", "floatlist"),
        "adapt_sigmas": ("10,25,50,100", "floatlist"),
        "test_sigma": ("100", "float"),
        "interp_alphas": ("0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", "floatlist"),
        "jobs": ("0", "int"),
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": lambda s: s.strip(),
    "bool": lambda s: {"true": True, "false": False, "1": True, "0": False}[s.strip().lower()],
    "floatlist": _parse_float_list,
    "optfloat": lambda s: None if not s.strip() else float(s),
}


@dataclass
class ExperimentConfig:
    """Resolved experiment: training knobs, distributions and eval settings."""

    meta: MetaConfig
    dist_train: TaskDistribution
    dist_adapt: TaskDistribution
    dist_test: TaskDistribution
    adapt_alpha: float
    adapt_fresh_per_step: bool
    horizon: int
    n_seeds: int
    n_tasks: int
    sigmas: tuple[float, ...]
    adapt_sigmas: tuple[float, ...]
    test_sigma: float
    interp_alphas: tuple[float, ...]
    jobs: int
    raw: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def resolved_text(self) -> str:
        lines = []
        for section in sorted(self.raw):
            lines.append(f"[{section}]")
            for key in sorted(self.raw[section]):
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def echo(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "config.resolved.ini")
        with open(path, "w") as fh:
            fh.write(self.resolved_text())
        return path


def _dist_from(section: dict, name: str) -> TaskDistribution:
    kind = section["dist"]
    if kind not in (MIXTURE, NORMAL, ROSENBROCK_INIT):
        raise ConfigError(
            f"[{name}] dist must be mixture, normal or rosenbrock, got {kind!r}"
        )
    family = section["family"]
    if kind == ROSENBROCK_INIT:
        return TaskDistribution(kind=kind)
    if family not in (LASSO, QUADRATIC):
        raise ConfigError(
            f"[{name}] family must be lasso or quadratic, got {family!r}"
        )
    try:
        return TaskDistribution(
            kind=kind,
            family=family,
            dim=section["dim"],
            lam=section["lam"],
            sigma=section["sigma"],
        )
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    """Parse, validate and resolve an INI experiment file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh, source=path)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    values: dict[str, dict] = {}
    raw: dict[str, dict] = {}
    explicit: set = set()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}] in {path}; "
                f"known sections: {', '.join(sorted(_SCHEMA))}"
            )
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}] of {path}; "
                    f"known keys: {', '.join(sorted(_SCHEMA[section]))}"
                )
            explicit.add((section, key))

    for section, keys in _SCHEMA.items():
        values[section] = {}
        raw[section] = {}
        for key, (default, typ) in keys.items():
            text = parser.get(section, key, fallback=default)
            try:
                values[section][key] = _PARSERS[typ](text)
            except (ValueError, KeyError) as exc:
                raise ConfigError(
                    f"bad value for [{section}] {key} = {text!r}: expected {typ}"
                ) from exc
            raw[section][key] = text.strip()

    m = values["meta"]
    try:
        meta = MetaConfig(
            seed=m["seed"],
            hidden=m["hidden"],
            feature_dim=m["feature_dim"],
            unroll_len=m["unroll_len"],
            epochs=m["epochs"],
            epochs_per_task=m["epochs_per_task"],
            alpha=m["alpha"],
            outer_rule=m["outer"],
            outer_lr=m["outer_lr"],
            sgd_beta=m["sgd_beta"],
            sgd_mu=m["sgd_mu"],
            adapt_steps=values["adapt"]["steps"],
            grad_mode=m["grad_mode"],
            fd_epsilon=m["fd_epsilon"],
            tasks_per_update=m["tasks_per_update"],
            curriculum=m["curriculum"],
            curriculum_threshold=m["curriculum_threshold"],
        )
    except ValueError as exc:
        raise ConfigError(f"[meta] {exc}") from exc

    adapt_alpha = values["adapt"]["alpha"]
    if adapt_alpha is None:
        adapt_alpha = meta.alpha
    ev = values["eval"]
    cfg = ExperimentConfig(
        meta=meta,
        dist_train=_dist_from(values["train"], "train"),
        dist_adapt=_dist_from(values["adapt"], "adapt"),
        dist_test=_dist_from(values["test"], "test"),
        adapt_alpha=adapt_alpha,
        adapt_fresh_per_step=values["adapt"]["fresh_task_per_step"],
        horizon=values["test"]["horizon"],
        n_seeds=ev["n_seeds"],
        n_tasks=ev["n_tasks"],
        sigmas=ev["sigmas"],
        adapt_sigmas=ev["adapt_sigmas"],
        test_sigma=ev["test_sigma"],
        interp_alphas=ev["interp_alphas"],
        jobs=ev["jobs"] if ev["jobs"] > 0 else (os.cpu_count() or 1),
        raw=raw,
        explicit=explicit,
    )
    if cfg.horizon < 1:
        raise ConfigError(f"[test] horizon must be >= 1, got {cfg.horizon}")
    if cfg.n_seeds < 2:
        raise ConfigError(f"[eval] n_seeds must be >= 2, got {cfg.n_seeds}")
    if cfg.n_tasks < 1:
        raise ConfigError(f"[eval] n_tasks must be >= 1, got {cfg.n_tasks}")
    return cfg
