"""Meta-training loops and test-time adaptation for the learned optimizer.

Two trainers share one loop skeleton.  The plain trainer updates the weights
with the gradient of the unrolled loss; the meta-adaptive trainer first takes
one virtual inner step on the same task and differentiates the loss at the
stepped weights, so training favors initializations that improve quickly
under adaptation.  With an inner step of zero the two are the same algorithm,
bit for bit, which the tests pin down.

Within a block of `S` epochs the optimizee iterate continues where the last
epoch's unroll ended; at block boundaries a fresh task and a fresh random
iterate are drawn.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .cell import OptimizerParams, init_params
from .numeric import RngStream
from .tasks import TaskDistribution, sample_task, sample_theta0
from .unroll import (
    FD_HVP_META,
    FULL_SECOND_ORDER,
    GRAD_MODES,
    NonFiniteGradientError,
    UnrollDivergedError,
    _maml_parts,
    inner_mode,
    meta_grad,
    meta_grad_with_result,
    meta_mode,
)

__all__ = [
    "MetaConfig",
    "TrainLog",
    "DivergenceError",
    "train_ml2o",
    "train_plain_l2o",
    "adapt",
    "sgd_schedule_lr",
]

ADAM = "adam"
SGD_SCHEDULE = "sgd_schedule"
CURRICULUM_FIXED = "fixed"
CURRICULUM_DOUBLING = "doubling"


class DivergenceError(RuntimeError):
    """Training or adaptation produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, last_params: OptimizerParams, cause: str):
        super().__init__(
            f"diverged at epoch {epoch}: {cause}; last finite weights attached"
        )
        self.epoch = epoch
        self.last_params = last_params


@dataclass
class MetaConfig:
    """Every knob of a training run; defaults follow the reference setup."""

    seed: int = 0
    hidden: int = 20
    feature_dim: int = 2
    unroll_len: int = 20  # steps per inner unroll
    epochs: int = 5000  # total meta-updates
    epochs_per_task: int = 20  # block length before a fresh task is drawn
    alpha: float = 1e-5  # inner/adaptation step size on the weights
    outer_rule: str = ADAM
    outer_lr: float = 1e-4
    sgd_beta: float = 0.1
    sgd_mu: float = 1.0
    adapt_steps: int = 5
    grad_mode: str = FD_HVP_META
    fd_epsilon: float | None = None
    tasks_per_update: int = 1
    curriculum: str = CURRICULUM_FIXED
    curriculum_threshold: float = 0.05

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.epochs_per_task < 1:
            raise ValueError(
                f"epochs_per_task must be >= 1, got {self.epochs_per_task}"
            )
        if self.unroll_len < 1:
            raise ValueError(f"unroll_len must be >= 1, got {self.unroll_len}")
        if self.adapt_steps < 0:
            raise ValueError(f"adapt_steps must be >= 0, got {self.adapt_steps}")
        if self.tasks_per_update < 1:
            raise ValueError(
                f"tasks_per_update must be >= 1, got {self.tasks_per_update}"
            )
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(
                f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}"
            )
        if self.outer_rule not in (ADAM, SGD_SCHEDULE):
            raise ValueError(f"unknown outer rule {self.outer_rule!r}")
        if self.curriculum not in (CURRICULUM_FIXED, CURRICULUM_DOUBLING):
            raise ValueError(f"unknown curriculum {self.curriculum!r}")


def _digest(arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class TrainLog:
    """One row per epoch plus block bookkeeping."""

    meta_losses: list[float] = field(default_factory=list)
    task_ids: list[int] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    task_switch_epochs: list[int] = field(default_factory=list)
    theta0_digests: list[str] = field(default_factory=list)
    theta_final_digests: list[str] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,meta_loss,task_id,wall_ms\n")
            for k, (loss, tid, ms) in enumerate(
                zip(self.meta_losses, self.task_ids, self.wall_ms)
            ):
                fh.write(f"{k},{loss:.17g},{tid},{ms:.3f}\n")


def sgd_schedule_lr(k: int, beta: float, mu: float) -> float:
    """Decaying outer step size: min(beta, 8 / (mu * (k + 1)))."""
    return min(beta, 8.0 / (mu * (k + 1)))


class _AdamOuter:
    def __init__(self, n: int, lr: float):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def update(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        m_hat = self.m / (1.0 - 0.9**self.t)
        v_hat = self.v / (1.0 - 0.999**self.t)
        return flat - self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


class _SgdScheduleOuter:
    def __init__(self, beta: float, mu: float):
        self.beta = beta
        self.mu = mu
        self.k = 0

    def update(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        lr = sgd_schedule_lr(self.k, self.beta, self.mu)
        self.k += 1
        return flat - lr * grad


def _make_outer(cfg: MetaConfig, n: int):
    if cfg.outer_rule == ADAM:
        return _AdamOuter(n, cfg.outer_lr)
    return _SgdScheduleOuter(cfg.sgd_beta, cfg.sgd_mu)


def _train(cfg: MetaConfig, dist: TaskDistribution, meta_adaptive: bool):
    rng = RngStream(cfg.seed)
    params = init_params(cfg.hidden, cfg.feature_dim, rng.child("optimizer-init"))
    task_rng = rng.child("train-tasks")
    theta_rng = rng.child("train-theta0")
    outer = _make_outer(cfg, params.n_params)
    log = TrainLog()

    n_tasks = cfg.tasks_per_update
    block_len = cfg.epochs_per_task
    epochs_in_block = block_len  # force a draw at epoch 0
    block_id = -1
    block_first_loss = None
    last_loss = None
    tasks = [None] * n_tasks
    theta0s = [None] * n_tasks

    for k in range(cfg.epochs):
        t_start = time.perf_counter()
        if epochs_in_block >= block_len:
            if (
                cfg.curriculum == CURRICULUM_DOUBLING
                and block_first_loss is not None
                and last_loss is not None
            ):
                gain = (block_first_loss - last_loss) / max(abs(block_first_loss), 1e-12)
                if gain < cfg.curriculum_threshold:
                    block_len *= 2
            tasks = [sample_task(dist, task_rng) for _ in range(n_tasks)]
            theta0s = [sample_theta0(dist, theta_rng) for _ in range(n_tasks)]
            epochs_in_block = 0
            block_id += 1
            block_first_loss = None
            log.task_switch_epochs.append(k)
        log.theta0_digests.append(_digest(theta0s))

        grads = np.zeros(params.n_params)
        loss_sum = 0.0
        next_theta0s = []
        try:
            for task, theta0 in zip(tasks, theta0s):
                if meta_adaptive:
                    g, res0, value = _maml_parts(
                        params,
                        task,
                        theta0,
                        cfg.unroll_len,
                        cfg.alpha,
                        meta_mode(cfg.grad_mode),
                        cfg.fd_epsilon,
                    )
                else:
                    g, res0 = meta_grad_with_result(
                        params,
                        task,
                        theta0,
                        cfg.unroll_len,
                        inner_mode(cfg.grad_mode),
                    )
                    value = res0.final_loss
                grads += g
                loss_sum += value
                next_theta0s.append(res0.theta_final)
        except (UnrollDivergedError, NonFiniteGradientError) as exc:
            raise DivergenceError(k, params, str(exc)) from exc

        grads /= n_tasks
        loss = loss_sum / n_tasks
        if not np.isfinite(loss):
            raise DivergenceError(k, params, f"meta-loss {loss!r}")
        new_flat = outer.update(params.to_flat(), grads)
        if not np.all(np.isfinite(new_flat)):
            raise DivergenceError(
                k, params, "non-finite optimizer weights after the outer update"
            )
        params = params.with_flat(new_flat)

        theta0s = next_theta0s
        epochs_in_block += 1
        if block_first_loss is None:
            block_first_loss = loss
        last_loss = loss
        log.meta_losses.append(loss)
        log.task_ids.append(block_id)
        log.theta_final_digests.append(_digest(next_theta0s))
        log.wall_ms.append((time.perf_counter() - t_start) * 1e3)

    return params, log


def train_ml2o(cfg: MetaConfig, dist: TaskDistribution):
    """Meta-adaptive training; returns the learned weights and the log."""
    return _train(cfg, dist, meta_adaptive=True)


def train_plain_l2o(cfg: MetaConfig, dist: TaskDistribution):
    """Plain learned-optimizer training on the unrolled loss."""
    return _train(cfg, dist, meta_adaptive=False)


def adapt(
    params: OptimizerParams,
    dist_adapt: TaskDistribution,
    steps: int,
    alpha: float,
    unroll_len: int,
    rng: RngStream,
    grad_mode: str = FULL_SECOND_ORDER,
    fresh_task_per_step: bool = True,
) -> OptimizerParams:
    """A few plain gradient steps on the unrolled loss over adaptation tasks.

    By default every step draws a fresh task (and a fresh starting iterate)
    from the adaptation distribution; with `fresh_task_per_step=False` a
    single task is drawn once and reused.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    mode = inner_mode(grad_mode)
    task = None
    for s in range(steps):
        if fresh_task_per_step or task is None:
            task = sample_task(dist_adapt, rng)
        theta0 = sample_theta0(dist_adapt, rng)
        try:
            g = meta_grad(params, task, theta0, unroll_len, mode)
        except (UnrollDivergedError, NonFiniteGradientError) as exc:
            raise DivergenceError(s, params, str(exc)) from exc
        new_flat = params.to_flat() - alpha * g
        if not np.all(np.isfinite(new_flat)):
            raise DivergenceError(
                s, params, "non-finite optimizer weights after an adaptation step"
            )
        params = params.with_flat(new_flat)
    return params
