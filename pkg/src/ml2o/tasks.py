"""Synthetic optimization tasks and the distributions they are drawn from.

Three task families are supported:

* ``lasso``:     0.5 * ||A x - b||^2 + lam * ||x||_1
* ``quadratic``: 0.5 * ||A x - b||^2
* ``rosenbrock``: (x - 1)^2 + 100 * (y - x^2)^2, always 2-dimensional

A task instance is a frozen snapshot of its coefficients, so runs can be
replayed exactly from the JSON serialization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .numeric import RngStream, gauss_sample, uniform_mixture_sample

__all__ = [
    "LASSO",
    "QUADRATIC",
    "ROSENBROCK",
    "MIXTURE",
    "NORMAL",
    "ROSENBROCK_INIT",
    "TRAIN_MIXTURE_RANGES",
    "OptimizeeTask",
    "TaskDistribution",
    "lasso_eval",
    "quadratic_eval",
    "rosenbrock_eval",
    "task_hvp",
    "sample_task",
    "sample_theta0",
]

LASSO = "lasso"
QUADRATIC = "quadratic"
ROSENBROCK = "rosenbrock"
_FAMILIES = (LASSO, QUADRATIC, ROSENBROCK)

# Mixture the coefficient matrices are drawn from during training:
# each entry picks one of the three uniform ranges at random.
TRAIN_MIXTURE_RANGES = ((0.0, 0.1), (0.0, 0.5), (0.0, 1.0))


@dataclass(frozen=True)
class OptimizeeTask:
    """One concrete task instance; immutable after construction."""

    kind: str
    dim: int
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    lam: float = 0.0
    provenance: str = ""

    def __post_init__(self):
        if self.kind not in _FAMILIES:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == ROSENBROCK:
            if self.dim != 2:
                raise ValueError("rosenbrock tasks are 2-dimensional")
        else:
            if self.a is None or self.b is None:
                raise ValueError(f"{self.kind} task needs coefficients a and b")
            a = np.ascontiguousarray(self.a, dtype=np.float64)
            b = np.ascontiguousarray(self.b, dtype=np.float64)
            if a.shape != (self.dim, self.dim):
                raise ValueError(f"a has shape {a.shape}, expected {(self.dim, self.dim)}")
            if b.shape != (self.dim,):
                raise ValueError(f"b has shape {b.shape}, expected {(self.dim,)}")
            a.setflags(write=False)
            b.setflags(write=False)
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    def _check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(
                f"theta has shape {theta.shape}, expected {(self.dim,)} for this task"
            )
        return theta

    def loss_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        if self.kind == LASSO:
            return lasso_eval(self, theta)
        if self.kind == QUADRATIC:
            return quadratic_eval(self, theta)
        return rosenbrock_eval(self, theta)

    def loss(self, theta: np.ndarray) -> float:
        return self.loss_grad(theta)[0]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.loss_grad(theta)[1]

    def hvp(self, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        return task_hvp(self, theta, v)

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        """Dense Hessian; constant A^T A for lasso/quadratic."""
        theta = self._check_theta(theta)
        if self.kind == ROSENBROCK:
            x, y = theta
            return np.array(
                [
                    [2.0 - 400.0 * y + 1200.0 * x * x, -400.0 * x],
                    [-400.0 * x, 200.0],
                ]
            )
        return self.a.T @ self.a

    def hessian_matmul(self, theta: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Hessian times a (dim, k) matrix, column by column in one shot."""
        if self.kind == ROSENBROCK:
            return self.hessian(theta) @ m
        return self.a.T @ (self.a @ m)

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "dim": self.dim,
            "lam": self.lam,
            "a": None if self.a is None else self.a.ravel().tolist(),
            "b": None if self.b is None else self.b.tolist(),
            "provenance": self.provenance,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OptimizeeTask":
        doc = json.loads(text)
        dim = int(doc["dim"])
        a = None if doc["a"] is None else np.array(doc["a"], dtype=np.float64).reshape(dim, dim)
        b = None if doc["b"] is None else np.array(doc["b"], dtype=np.float64)
        return cls(
            kind=doc["kind"],
            dim=dim,
            a=a,
            b=b,
            lam=float(doc["lam"]),
            provenance=doc.get("provenance", ""),
        )

    def digest(self) -> str:
        """Stable content hash, used to assert paired draws across methods."""
        return hashlib.blake2b(self.to_json().encode(), digest_size=16).hexdigest()


def lasso_eval(task: OptimizeeTask, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and subgradient of 0.5*||A x - b||^2 + lam*||x||_1 (sign(0)=0)."""
    if task.kind != LASSO:
        raise ValueError(f"lasso_eval called on a {task.kind} task")
    theta = task._check_theta(theta)
    r = task.a @ theta - task.b
    loss = 0.5 * float(r @ r) + task.lam * float(np.sum(np.abs(theta)))
    grad = task.a.T @ r + task.lam * np.sign(theta)
    return loss, grad


def quadratic_eval(task: OptimizeeTask, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and gradient of 0.5*||A x - b||^2."""
    if task.kind != QUADRATIC:
        raise ValueError(f"quadratic_eval called on a {task.kind} task")
    theta = task._check_theta(theta)
    r = task.a @ theta - task.b
    loss = 0.5 * float(r @ r)
    grad = task.a.T @ r
    return loss, grad


def rosenbrock_eval(task: OptimizeeTask, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and gradient of the two-dimensional banana function."""
    if task.kind != ROSENBROCK:
        raise ValueError(f"rosenbrock_eval called on a {task.kind} task")
    theta = task._check_theta(theta)
    x, y = theta
    gap = y - x * x
    loss = (x - 1.0) ** 2 + 100.0 * gap * gap
    grad = np.array([2.0 * (x - 1.0) - 400.0 * x * gap, 200.0 * gap])
    return float(loss), grad


def task_hvp(task: OptimizeeTask, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product; the l1 term contributes zero almost everywhere."""
    theta = task._check_theta(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (task.dim,):
        raise ValueError(f"v has shape {v.shape}, expected {(task.dim,)}")
    if task.kind == ROSENBROCK:
        return task.hessian(theta) @ v
    return task.a.T @ (task.a @ v)


MIXTURE = "mixture"
NORMAL = "normal"
ROSENBROCK_INIT = "rosenbrock"
_DIST_KINDS = (MIXTURE, NORMAL, ROSENBROCK_INIT)


@dataclass(frozen=True)
class TaskDistribution:
    """A family of tasks plus the law of their coefficients.

    ``mixture`` draws A entries from the fixed three-range uniform mixture,
    ``normal`` draws them from N(0, sigma^2), and ``rosenbrock`` yields the
    fixed banana task (randomness enters through the initial point only).
    b entries are always N(0, 1): only the coefficient matrix shifts between
    distributions.
    """

    kind: str
    family: str = LASSO
    dim: int = 10
    lam: float = 0.005
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in _DIST_KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == NORMAL and not self.sigma > 0:
            raise ValueError(f"normal distribution requires sigma > 0, got {self.sigma}")
        if self.kind == ROSENBROCK_INIT:
            if self.family != ROSENBROCK:
                object.__setattr__(self, "family", ROSENBROCK)
            object.__setattr__(self, "dim", 2)
        else:
            if self.family not in (LASSO, QUADRATIC):
                raise ValueError(
                    f"{self.kind} distribution supports lasso/quadratic, got {self.family!r}"
                )
            if self.dim < 1:
                raise ValueError(f"dim must be positive, got {self.dim}")

    def label(self) -> str:
        if self.kind == NORMAL:
            return f"{self.family}-normal(sigma={self.sigma:g})"
        if self.kind == MIXTURE:
            return f"{self.family}-mixture"
        return "rosenbrock"


def sample_task(dist: TaskDistribution, rng: RngStream) -> OptimizeeTask:
    """Draw one task. Order of draws: all of A (row-major), then all of b."""
    if dist.kind == ROSENBROCK_INIT:
        return OptimizeeTask(kind=ROSENBROCK, dim=2, provenance="rosenbrock")
    d = dist.dim
    if dist.kind == MIXTURE:
        entries = uniform_mixture_sample(rng, d * d, TRAIN_MIXTURE_RANGES)
    else:
        entries = gauss_sample(rng, d * d, 0.0, dist.sigma)
    a = entries.reshape(d, d)
    b = gauss_sample(rng, d, 0.0, 1.0)
    lam = dist.lam if dist.family == LASSO else 0.0
    return OptimizeeTask(
        kind=dist.family, dim=d, a=a, b=b, lam=lam, provenance=dist.label()
    )


def sample_theta0(dist: TaskDistribution, rng: RngStream) -> np.ndarray:
    """Standard-normal initial iterate of the distribution's dimension."""
    return gauss_sample(rng, dist.dim, 0.0, 1.0)
