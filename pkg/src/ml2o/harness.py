"""Paired evaluation of trained optimizers against the transfer baselines.

For each evaluation seed the four methods are built from the same draws:

* ``vanilla``: fresh random weights, adapted a few steps on adaptation tasks
* ``tl``:      trained on the training distribution, then adapted
* ``dt``:      trained on the training distribution, no adaptation
* ``ml2o``:    meta-adaptively trained, then adapted

All four see bit-identical adaptation draws and bit-identical test draws for
that seed, so differences come from the weights alone.  The headline metric
is the minimum over the evaluation horizon of the log objective, with exact
zeros clamped at a floor of -40.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.stats

from .cell import OptimizerParams, init_params, load_checkpoint, save_checkpoint
from .numeric import RngStream
from .tasks import NORMAL, TaskDistribution, sample_task, sample_theta0
from .train import DivergenceError, MetaConfig, adapt, train_ml2o, train_plain_l2o
from .unroll import unroll

__all__ = [
    "VANILLA",
    "ML2O",
    "DT",
    "TL",
    "METHOD_ORDER",
    "LOG_FLOOR",
    "RunRecord",
    "ComparisonCell",
    "ComparisonTable",
    "TrainingCache",
    "min_log_loss",
    "confidence_interval",
    "evaluate",
    "compare_methods",
    "adapt_sweep",
    "interpolate_eval",
    "seed_config",
    "read_comparison_json",
]

VANILLA = "vanilla"
ML2O = "ml2o"
DT = "dt"
TL = "tl"
METHOD_ORDER = (VANILLA, ML2O, DT, TL)

# Log losses are clamped from below here so exact zeros stay well-defined.
LOG_FLOOR = -40.0


def min_log_loss(losses: np.ndarray) -> float:
    """Minimum over the curve of ln(loss), floored at LOG_FLOOR."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return math.inf
    return float(np.min(np.log(np.maximum(losses, math.exp(LOG_FLOOR)))))


def confidence_interval(samples) -> tuple[float, float]:
    """Student-t mean estimate: (mean, 95% half-width)."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if n < 2:
        raise ValueError(f"confidence interval needs at least 2 samples, got {n}")
    mean = float(samples.mean())
    s = float(samples.std(ddof=1))
    half = float(scipy.stats.t.ppf(0.975, n - 1) * s / math.sqrt(n))
    return mean, half


@dataclass
class RunRecord:
    """One evaluation trajectory of one optimizer on one test task."""

    method: str
    key: str  # table column: sigma value or distribution label
    seed: int
    task_index: int
    losses: np.ndarray
    min_log_loss: float
    task_digest: str
    theta0_digest: str
    params_digest: str
    truncated_at: int | None = None
    diverged: bool = False


@dataclass
class ComparisonCell:
    method: str
    key: str
    mean: float
    half_width: float
    n: int
    n_diverged: int = 0


@dataclass
class ComparisonTable:
    cells: list[ComparisonCell]
    records: list[RunRecord] = field(default_factory=list)

    def cell(self, method: str, key) -> ComparisonCell:
        key = _column_key(key)
        for c in self.cells:
            if c.method == method and c.key == key:
                return c
        raise KeyError(f"no cell for method={method!r}, key={key!r}")

    def seed_values(self, method: str, key) -> dict[int, float]:
        """Per-seed metric (averaged over that seed's test tasks)."""
        key = _column_key(key)
        per_seed: dict[int, list[float]] = {}
        for r in self.records:
            if r.method == method and r.key == key and not r.diverged:
                per_seed.setdefault(r.seed, []).append(r.min_log_loss)
        return {s: float(np.mean(v)) for s, v in sorted(per_seed.items())}

    def to_json_dict(self) -> dict:
        return {
            "methods": sorted({c.method for c in self.cells}),
            "columns": sorted({c.key for c in self.cells}),
            "cells": [
                {
                    "method": c.method,
                    "key": c.key,
                    "mean": c.mean,
                    "half_width": c.half_width,
                    "n": c.n,
                    "n_diverged": c.n_diverged,
                }
                for c in self.cells
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_records_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("method,key,seed,task,min_log_loss,truncated_at,diverged\n")
            for r in self.records:
                trunc = "" if r.truncated_at is None else str(r.truncated_at)
                fh.write(
                    f"{r.method},{r.key},{r.seed},{r.task_index},"
                    f"{r.min_log_loss:.17g},{trunc},{int(r.diverged)}\n"
                )

    def write_curves(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for r in self.records:
            name = f"curve_{r.method}_key{r.key}_seed{r.seed}_task{r.task_index}.csv"
            with open(os.path.join(directory, name), "w") as fh:
                fh.write("step,loss\n")
                for t, loss in enumerate(r.losses):
                    fh.write(f"{t},{loss:.17g}\n")


def read_comparison_json(path) -> ComparisonTable:
    with open(path) as fh:
        doc = json.load(fh)
    cells = [
        ComparisonCell(
            method=c["method"],
            key=c["key"],
            mean=c["mean"],
            half_width=c["half_width"],
            n=c["n"],
            n_diverged=c["n_diverged"],
        )
        for c in doc["cells"]
    ]
    return ComparisonTable(cells=cells)


def _column_key(value) -> str:
    if isinstance(value, str):
        return value
    return f"{value:g}"


def _aggregate(records: list[RunRecord]) -> ComparisonTable:
    records = sorted(
        records, key=lambda r: (r.method, r.key, r.seed, r.task_index)
    )
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.key), []).append(r)
    cells = []
    for (method, key), group in sorted(groups.items()):
        per_seed: dict[int, list[float]] = {}
        n_diverged = 0
        for r in group:
            if r.diverged or not math.isfinite(r.min_log_loss):
                n_diverged += 1
                continue
            per_seed.setdefault(r.seed, []).append(r.min_log_loss)
        values = [float(np.mean(v)) for _, v in sorted(per_seed.items())]
        if len(values) >= 2:
            mean, half = confidence_interval(values)
        elif len(values) == 1:
            mean, half = values[0], math.nan
        else:
            mean, half = math.nan, math.nan
        cells.append(
            ComparisonCell(
                method=method,
                key=key,
                mean=mean,
                half_width=half,
                n=len(values),
                n_diverged=n_diverged,
            )
        )
    return ComparisonTable(cells=cells, records=records)


def evaluate(
    params: OptimizerParams,
    dist_test: TaskDistribution,
    horizon: int,
    n_tasks: int,
    rng: RngStream,
    method: str = "",
    key: str = "",
    seed: int = 0,
) -> list[RunRecord]:
    """Unroll frozen weights on fresh test tasks and record the loss curves.

    A non-finite loss truncates the curve at that step instead of aborting.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if n_tasks < 1:
        raise ValueError(f"n_tasks must be >= 1, got {n_tasks}")
    records = []
    pdigest = params.digest()
    for j in range(n_tasks):
        task = sample_task(dist_test, rng)
        theta0 = sample_theta0(dist_test, rng)
        res = unroll(params, task, theta0, horizon, truncate_nonfinite=True)
        records.append(
            RunRecord(
                method=method,
                key=_column_key(key),
                seed=seed,
                task_index=j,
                losses=res.losses,
                min_log_loss=min_log_loss(res.losses),
                task_digest=task.digest(),
                theta0_digest=hashlib.blake2b(
                    np.ascontiguousarray(theta0).tobytes(), digest_size=16
                ).hexdigest(),
                params_digest=pdigest,
                truncated_at=res.truncated_at,
            )
        )
    return records


class TrainingCache:
    """Deterministic memo for trained weights, optionally backed by a directory.

    Training is a pure function of (trainer, config, distribution); caching
    never changes results, it only avoids repeating identical runs.
    """

    def __init__(self, directory: str | None = None):
        self.directory = directory
        if directory is not None:
            os.makedirs(directory, exist_ok=True)
        self._memo: dict[str, OptimizerParams] = {}

    @staticmethod
    def _key(trainer: str, cfg: MetaConfig, dist: TaskDistribution) -> str:
        fields = {k: getattr(cfg, k) for k in sorted(vars(cfg))}
        if trainer != ML2O:
            # the plain trainer never reads the inner-step knobs
            fields.pop("alpha", None)
            fields.pop("fd_epsilon", None)
        doc = {
            "trainer": trainer,
            "cfg": fields,
            "dist": {k: getattr(dist, k) for k in sorted(vars(dist))},
        }
        blob = json.dumps(doc, sort_keys=True, default=str)
        return hashlib.blake2b(blob.encode(), digest_size=16).hexdigest()

    def get_or_train(
        self, trainer: str, cfg: MetaConfig, dist: TaskDistribution
    ) -> OptimizerParams:
        key = self._key(trainer, cfg, dist)
        if key in self._memo:
            return self._memo[key]
        path = None
        if self.directory is not None:
            path = os.path.join(self.directory, f"{trainer}-{key}.ckpt")
            if os.path.exists(path):
                params = load_checkpoint(path)
                self._memo[key] = params
                return params
        train_fn = train_ml2o if trainer == ML2O else train_plain_l2o
        params, _ = train_fn(cfg, dist)
        self._memo[key] = params
        if path is not None:
            tmp = path + ".tmp"
            save_checkpoint(params, tmp, metadata=f"trainer={trainer} key={key}")
            os.replace(tmp, path)
        return params


def seed_config(cfg: MetaConfig, seed_index: int) -> MetaConfig:
    """Per-repeat config: same knobs, seed derived from the root seed."""
    return replace(cfg, seed=RngStream(cfg.seed).derive_seed(f"seed/{seed_index}"))


def _adapt_or_mark(params, dist_adapt, cfg: MetaConfig, adapt_alpha, fresh_per_step):
    """Run adaptation; on divergence return (None, reason)."""
    rng = RngStream(cfg.seed).child("adapt")
    try:
        adapted = adapt(
            params,
            dist_adapt,
            cfg.adapt_steps,
            adapt_alpha,
            cfg.unroll_len,
            rng,
            grad_mode=cfg.grad_mode,
            fresh_task_per_step=fresh_per_step,
        )
        return adapted, None
    except DivergenceError as exc:
        return None, str(exc)


def _eval_methods(
    variants: dict[str, OptimizerParams | None],
    dist_test: TaskDistribution,
    cfg: MetaConfig,
    horizon: int,
    n_tasks: int,
    key: str,
    seed_index: int,
) -> list[RunRecord]:
    records = []
    for method, params in variants.items():
        if params is None:
            records.append(
                RunRecord(
                    method=method,
                    key=key,
                    seed=seed_index,
                    task_index=0,
                    losses=np.empty(0),
                    min_log_loss=math.nan,
                    task_digest="",
                    theta0_digest="",
                    params_digest="",
                    diverged=True,
                )
            )
            continue
        records.extend(
            evaluate(
                params,
                dist_test,
                horizon,
                n_tasks,
                RngStream(cfg.seed).child("test"),
                method=method,
                key=key,
                seed=seed_index,
            )
        )
    return records


def _comparison_seed_records(
    meta: MetaConfig,
    dist_train: TaskDistribution,
    dist_adapt: TaskDistribution,
    dist_test: TaskDistribution,
    horizon: int,
    n_tasks: int,
    seed_index: int,
    sigma_list,
    adapt_alpha: float,
    fresh_per_step: bool,
    cache: TrainingCache,
    methods: tuple[str, ...] = METHOD_ORDER,
) -> list[RunRecord]:
    cfg = seed_config(meta, seed_index)
    plain = cache.get_or_train("plain", cfg, dist_train) if ({DT, TL} & set(methods)) else None
    trained = cache.get_or_train(ML2O, cfg, dist_train) if ML2O in methods else None

    records = []
    columns = sigma_list if sigma_list is not None else [None]
    for sigma in columns:
        if sigma is None:
            da, dt_ = dist_adapt, dist_test
            key = dist_test.label()
        else:
            da = replace(dist_adapt, sigma=float(sigma))
            dt_ = replace(dist_test, sigma=float(sigma))
            key = _column_key(float(sigma))
        variants: dict[str, OptimizerParams | None] = {}
        for method in methods:
            if method == VANILLA:
                fresh = init_params(
                    cfg.hidden, cfg.feature_dim, RngStream(cfg.seed).child("vanilla-init")
                )
                variants[method], _ = _adapt_or_mark(
                    fresh, da, cfg, adapt_alpha, fresh_per_step
                )
            elif method == TL:
                variants[method], _ = _adapt_or_mark(
                    plain, da, cfg, adapt_alpha, fresh_per_step
                )
            elif method == ML2O:
                variants[method], _ = _adapt_or_mark(
                    trained, da, cfg, adapt_alpha, fresh_per_step
                )
            else:  # direct transfer: no adaptation
                variants[method] = plain
        records.extend(
            _eval_methods(variants, dt_, cfg, horizon, n_tasks, key, seed_index)
        )
    return records


def _comparison_worker(args) -> list[RunRecord]:
    (
        meta,
        dist_train,
        dist_adapt,
        dist_test,
        horizon,
        n_tasks,
        seed_index,
        sigma_list,
        alpha,
        fresh_per_step,
        cache_dir,
        methods,
    ) = args
    return _comparison_seed_records(
        meta,
        dist_train,
        dist_adapt,
        dist_test,
        horizon,
        n_tasks,
        seed_index,
        sigma_list,
        alpha,
        fresh_per_step,
        TrainingCache(cache_dir),
        methods,
    )


def compare_methods(
    meta: MetaConfig,
    dist_train: TaskDistribution,
    dist_adapt: TaskDistribution,
    dist_test: TaskDistribution,
    sigma_list=None,
    n_seeds: int = 10,
    horizon: int = 200,
    n_tasks: int = 1,
    adapt_alpha: float | None = None,
    fresh_per_step: bool = True,
    cache: TrainingCache | None = None,
    jobs: int = 1,
) -> ComparisonTable:
    """Four-method comparison, optionally sweeping the test/adapt sigma.

    When `sigma_list` is given, both the adaptation and test distributions
    are evaluated at each sigma (they must be normal-coefficient families);
    otherwise the configured distributions are used as-is, in one column.
    Seeds are independent, so `jobs > 1` fans them out across processes
    without changing any result.
    """
    if n_seeds < 2:
        raise ValueError(f"n_seeds must be >= 2, got {n_seeds}")
    if sigma_list is not None and (dist_adapt.kind != NORMAL or dist_test.kind != NORMAL):
        raise ValueError("sigma sweeps need normal adapt/test distributions")
    cache = cache or TrainingCache()
    alpha = meta.alpha if adapt_alpha is None else adapt_alpha
    records = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        work = [
            (
                meta,
                dist_train,
                dist_adapt,
                dist_test,
                horizon,
                n_tasks,
                seed_index,
                sigma_list,
                alpha,
                fresh_per_step,
                cache.directory,
                METHOD_ORDER,
            )
            for seed_index in range(n_seeds)
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(_comparison_worker, work):
                records.extend(chunk)
    else:
        for seed_index in range(n_seeds):
            records.extend(
                _comparison_seed_records(
                    meta,
                    dist_train,
                    dist_adapt,
                    dist_test,
                    horizon,
                    n_tasks,
                    seed_index,
                    sigma_list,
                    alpha,
                    fresh_per_step,
                    cache,
                )
            )
    return _aggregate(records)


def _sweep_seed_records(
    meta: MetaConfig,
    dist_train: TaskDistribution,
    dist_adapt: TaskDistribution,
    dist_test_fixed: TaskDistribution,
    adapt_sigmas,
    horizon: int,
    n_tasks: int,
    seed_index: int,
    alpha: float,
    fresh_per_step: bool,
    cache: TrainingCache,
) -> list[RunRecord]:
    cfg = seed_config(meta, seed_index)
    plain = cache.get_or_train("plain", cfg, dist_train)
    trained = cache.get_or_train(ML2O, cfg, dist_train)
    records = []
    for sig in adapt_sigmas:
        da = replace(dist_adapt, sigma=float(sig))
        variants = {
            TL: _adapt_or_mark(plain, da, cfg, alpha, fresh_per_step)[0],
            ML2O: _adapt_or_mark(trained, da, cfg, alpha, fresh_per_step)[0],
        }
        records.extend(
            _eval_methods(
                variants,
                dist_test_fixed,
                cfg,
                horizon,
                n_tasks,
                _column_key(float(sig)),
                seed_index,
            )
        )
    return records


def _sweep_worker(args) -> list[RunRecord]:
    (
        meta,
        dist_train,
        dist_adapt,
        dist_test_fixed,
        adapt_sigmas,
        horizon,
        n_tasks,
        seed_index,
        alpha,
        fresh_per_step,
        cache_dir,
    ) = args
    return _sweep_seed_records(
        meta,
        dist_train,
        dist_adapt,
        dist_test_fixed,
        adapt_sigmas,
        horizon,
        n_tasks,
        seed_index,
        alpha,
        fresh_per_step,
        TrainingCache(cache_dir),
    )


def adapt_sweep(
    meta: MetaConfig,
    dist_train: TaskDistribution,
    dist_adapt: TaskDistribution,
    dist_test: TaskDistribution,
    adapt_sigmas,
    test_sigma: float,
    n_seeds: int = 10,
    horizon: int = 200,
    n_tasks: int = 1,
    adapt_alpha: float | None = None,
    fresh_per_step: bool = True,
    cache: TrainingCache | None = None,
    jobs: int = 1,
) -> ComparisonTable:
    """Vary the adaptation distribution's sigma at a fixed test sigma.

    Only the two adapted transfer methods are reported; columns are keyed by
    the adaptation sigma.  With adapt sigma equal to the test sigma this
    reproduces the corresponding `compare_methods` numbers exactly.
    """
    if n_seeds < 2:
        raise ValueError(f"n_seeds must be >= 2, got {n_seeds}")
    if dist_adapt.kind != NORMAL or dist_test.kind != NORMAL:
        raise ValueError("the adaptation sweep needs normal adapt/test distributions")
    cache = cache or TrainingCache()
    alpha = meta.alpha if adapt_alpha is None else adapt_alpha
    dist_test_fixed = replace(dist_test, sigma=float(test_sigma))
    records = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        work = [
            (
                meta,
                dist_train,
                dist_adapt,
                dist_test_fixed,
                tuple(adapt_sigmas),
                horizon,
                n_tasks,
                seed_index,
                alpha,
                fresh_per_step,
                cache.directory,
            )
            for seed_index in range(n_seeds)
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(_sweep_worker, work):
                records.extend(chunk)
    else:
        for seed_index in range(n_seeds):
            records.extend(
                _sweep_seed_records(
                    meta,
                    dist_train,
                    dist_adapt,
                    dist_test_fixed,
                    adapt_sigmas,
                    horizon,
                    n_tasks,
                    seed_index,
                    alpha,
                    fresh_per_step,
                    cache,
                )
            )
    return _aggregate(records)


def blend_params(
    w1: OptimizerParams, w2: OptimizerParams, alpha: float
) -> OptimizerParams:
    """alpha*w1 + (1-alpha)*w2 elementwise; endpoints return the exact input."""
    if (w1.hidden, w1.feature_dim) != (w2.hidden, w2.feature_dim):
        raise ValueError(
            f"shape mismatch: (hidden={w1.hidden}, feature_dim={w1.feature_dim}) vs "
            f"(hidden={w2.hidden}, feature_dim={w2.feature_dim})"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"interpolation weight must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return w1
    if alpha == 0.0:
        return w2
    return w1.with_flat(alpha * w1.to_flat() + (1.0 - alpha) * w2.to_flat())


def interpolate_eval(
    w1: OptimizerParams,
    w2: OptimizerParams,
    alpha_grid,
    dist_test: TaskDistribution,
    horizon: int,
    n_seeds: int,
    root_seed: int = 0,
    n_tasks: int = 1,
) -> dict[str, list[RunRecord]]:
    """Evaluate linear blends of two weight vectors on shared test draws.

    Every blend sees exactly the same test tasks and starting iterates, so
    the curves are comparable point by point across the grid.
    """
    out: dict[str, list[RunRecord]] = {}
    root = RngStream(root_seed)
    for alpha in alpha_grid:
        params = blend_params(w1, w2, float(alpha))
        key = f"{float(alpha):g}"
        records = []
        for seed_index in range(n_seeds):
            rng = RngStream(root.derive_seed(f"seed/{seed_index}")).child("test")
            records.extend(
                evaluate(
                    params,
                    dist_test,
                    horizon,
                    n_tasks,
                    rng,
                    method="blend",
                    key=key,
                    seed=seed_index,
                )
            )
        out[key] = records
    return out
