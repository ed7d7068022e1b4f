"""Unrolled inner optimization and its gradients with respect to optimizer weights.

`unroll` runs T update-rule steps on one task and reports the loss curve.
`meta_grad` backpropagates the final loss through the whole trajectory by
hand-written reverse mode.  In ``full_second_order`` mode the path through
the feature inputs (the task gradient and its momentum statistics, which
themselves depend on the iterate) is kept alive via Hessian-vector products;
``detached_input`` cuts that path, which is the cheaper convention much of
the practical literature trains with.

`jacobian_recursive` is an intentionally separate implementation of the same
derivative: it accumulates the dense trajectory Jacobian d(theta_T)/d(weights)
forward in time via the step-to-step recursion, using the cell's analytic
input- and parameter-Jacobians.  The two routes share no differentiation code,
so agreement between them is a real check, not a tautology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import (
    BETA1,
    BETA2,
    EPS,
    OptimizerParams,
    ParamLayout,
    UnrollState,
    cell_forward,
    flatten_param_grads,
    moment_update,
    predict_update,
)
from .tasks import OptimizeeTask

__all__ = [
    "FULL_SECOND_ORDER",
    "DETACHED_INPUT",
    "FIRST_ORDER_META",
    "FD_HVP_META",
    "GRAD_MODES",
    "UnrollResult",
    "UnrollDivergedError",
    "NonFiniteGradientError",
    "unroll",
    "meta_grad",
    "meta_grad_with_result",
    "maml_objective",
    "maml_grad",
    "jacobian_recursive",
]

FULL_SECOND_ORDER = "full_second_order"
DETACHED_INPUT = "detached_input"
FIRST_ORDER_META = "first_order_meta"
FD_HVP_META = "fd_hvp_meta"
GRAD_MODES = (FULL_SECOND_ORDER, DETACHED_INPUT, FIRST_ORDER_META, FD_HVP_META)

TRAJECTORY_MODES = (FULL_SECOND_ORDER, DETACHED_INPUT)
META_MODES = (FIRST_ORDER_META, FD_HVP_META)

# Refuse dense trajectory Jacobians beyond this many entries per state row.
JACOBIAN_SIZE_LIMIT = 15_000


class UnrollDivergedError(RuntimeError):
    """A non-finite loss appeared during an unroll."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at unroll step {step}")
        self.step = step


class NonFiniteGradientError(RuntimeError):
    """A non-finite entry appeared in the weight gradient."""

    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block}")
        self.block = block


@dataclass
class UnrollResult:
    """Trajectory summary: final iterate, loss curve and final state."""

    theta_final: np.ndarray
    losses: np.ndarray  # loss at theta_0 .. theta_T, so T+1 entries
    final_loss: float
    state: UnrollState
    truncated_at: int | None = None


def inner_mode(mode: str) -> str:
    """Trajectory-gradient mode implied by a configured mode string."""
    if mode in TRAJECTORY_MODES:
        return mode
    if mode in META_MODES:
        return FULL_SECOND_ORDER
    raise ValueError(f"unknown gradient mode {mode!r}; expected one of {GRAD_MODES}")


def meta_mode(mode: str) -> str:
    """Meta-update mode implied by a configured mode string."""
    if mode in META_MODES:
        return mode
    if mode in TRAJECTORY_MODES:
        return FD_HVP_META
    raise ValueError(f"unknown gradient mode {mode!r}; expected one of {GRAD_MODES}")


def _forward(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    keep_tape: bool,
    truncate_nonfinite: bool = False,
):
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta0.shape != (task.dim,):
        raise ValueError(
            f"theta0 has shape {theta0.shape}, expected {(task.dim,)}"
        )
    if horizon < 0:
        raise ValueError(f"horizon must be nonnegative, got {horizon}")
    state = UnrollState.fresh(theta0, params.hidden)
    losses = np.empty(horizon + 1)
    tape = [] if keep_tape else None
    truncated_at = None

    theta, h, c, m, v = state.theta, state.h, state.c, state.m, state.v
    for t in range(horizon + 1):
        loss, grad = task.loss_grad(theta)
        if not np.isfinite(loss):
            if truncate_nonfinite:
                losses = losses[:t]
                truncated_at = t
                break
            raise UnrollDivergedError(t, loss)
        losses[t] = loss
        if t == horizon:
            break
        m2, v2, nm = moment_update(m, v, grad)
        z = np.stack([grad, nm], axis=1)
        h2, c2, cache = cell_forward(params, z, h, c)
        update = predict_update(params, h2)
        if keep_tape:
            tape.append((theta, grad, m2, v2, cache, h2))
        theta = theta + update
        h, c, m, v = h2, c2, m2, v2

    final_state = UnrollState(theta=theta, h=h, c=c, m=m, v=v, t=min(horizon, len(losses) - 1))
    result = UnrollResult(
        theta_final=theta,
        losses=losses,
        final_loss=float(losses[-1]) if len(losses) else float("nan"),
        state=final_state,
        truncated_at=truncated_at,
    )
    return result, tape


def unroll(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    truncate_nonfinite: bool = False,
) -> UnrollResult:
    """Run `horizon` update steps from theta0 under frozen optimizer weights."""
    result, _ = _forward(
        params, task, theta0, horizon, keep_tape=False,
        truncate_nonfinite=truncate_nonfinite,
    )
    return result


def _grad_block_name(index: int, layout: ParamLayout) -> str:
    names = ("W_input", "W_forget", "W_out_gate", "W_cand")
    g = layout.gate_block
    if index < 4 * g:
        return names[index // g]
    index -= 4 * g
    if index < 4 * layout.hidden:
        return ("b_input", "b_forget", "b_out_gate", "b_cand")[index // layout.hidden]
    index -= 4 * layout.hidden
    return "w_proj" if index < layout.hidden else "b_proj"


def meta_grad_with_result(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    mode: str = FULL_SECOND_ORDER,
) -> tuple[np.ndarray, UnrollResult]:
    """Reverse-mode gradient of the final unrolled loss, plus the trajectory."""
    if mode not in TRAJECTORY_MODES:
        raise ValueError(
            f"meta_grad mode must be one of {TRAJECTORY_MODES}, got {mode!r}"
        )
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1 for gradients, got {horizon}")
    result, tape = _forward(params, task, theta0, horizon, keep_tape=True)

    hid = params.hidden
    fdim = params.feature_dim
    w = params.w
    w_proj = params.w_proj
    scale = params.output_scale
    second_order = mode == FULL_SECOND_ORDER

    dW = np.zeros_like(w)
    db = np.zeros(4 * hid)
    dw_proj = np.zeros(hid)
    db_proj = 0.0

    dtheta = task.grad(result.theta_final)
    dh = np.zeros((task.dim, hid))
    dc = np.zeros((task.dim, hid))
    dm = np.zeros(task.dim)
    dv = np.zeros(task.dim)

    for t in range(horizon - 1, -1, -1):
        theta_t, g_t, m2, v2, cache, h2 = tape[t]
        x, gi, gf, go, gq, c_prev, tau = cache

        # update projection: u = scale * (h2 @ w_proj + b_proj)
        dw_proj += scale * (h2.T @ dtheta)
        db_proj += scale * float(dtheta.sum())
        dh_full = dh + scale * dtheta[:, None] * w_proj[None, :]

        # cell
        dgo = dh_full * tau
        dtau = dh_full * go
        dc_full = dc + dtau * (1.0 - tau * tau)
        dgf = dc_full * c_prev
        dgi = dc_full * gq
        dgq = dc_full * gi
        dc = dc_full * gf

        da = np.concatenate(
            [
                dgi * gi * (1.0 - gi),
                dgf * gf * (1.0 - gf),
                dgo * go * (1.0 - go),
                dgq * (1.0 - gq * gq),
            ],
            axis=1,
        )
        dW += x.T @ da
        db += da.sum(axis=0)
        dx = da @ w.T
        dh = dx[:, fdim:]

        if second_order:
            dz = dx[:, :fdim]
            dg = dz[:, 0].copy()
            dnm = dz[:, 1]
            s = np.sqrt(v2)
            denom = s + EPS
            dm_full = dm + dnm / denom
            pos = v2 > 0.0
            safe_s = np.where(pos, s, 1.0)
            dv_full = dv + np.where(
                pos, -dnm * m2 / (denom * denom * 2.0 * safe_s), 0.0
            )
            dg += dm_full * (1.0 - BETA1) + dv_full * 2.0 * g_t * (1.0 - BETA2)
            dm = dm_full * BETA1
            dv = dv_full * BETA2
            dtheta = dtheta + task.hvp(theta_t, dg)
        # theta identity path: dtheta carries over unchanged otherwise

    flat = flatten_param_grads(dW, db, dw_proj, db_proj, hid)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise NonFiniteGradientError(
            _grad_block_name(bad, ParamLayout(hid, fdim))
        )
    return flat, result


def meta_grad(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    mode: str = FULL_SECOND_ORDER,
) -> np.ndarray:
    """Gradient of the final unrolled loss with respect to all optimizer weights."""
    grad, _ = meta_grad_with_result(params, task, theta0, horizon, mode)
    return grad


def maml_objective(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    alpha: float,
) -> float:
    """Unrolled loss after one inner weight-adaptation step of size alpha.

    The inner step and the re-unroll use the same task and the same theta0.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    g, res = meta_grad_with_result(params, task, theta0, horizon, FULL_SECOND_ORDER)
    if alpha == 0.0:
        return res.final_loss
    adapted = params.with_flat(params.to_flat() - alpha * g)
    return unroll(adapted, task, theta0, horizon).final_loss


def _maml_parts(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    alpha: float,
    mode: str,
    fd_epsilon: float | None,
):
    """Shared meta-gradient plumbing: returns (grad, pre-step result, post-step loss)."""
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    if mode not in META_MODES:
        raise ValueError(
            f"maml_grad mode must be one of {META_MODES}, got {mode!r}"
        )
    g0, res0 = meta_grad_with_result(params, task, theta0, horizon, FULL_SECOND_ORDER)
    if alpha == 0.0:
        return g0, res0, res0.final_loss
    flat = params.to_flat()
    adapted = params.with_flat(flat - alpha * g0)
    v, res1 = meta_grad_with_result(adapted, task, theta0, horizon, FULL_SECOND_ORDER)
    if mode == FIRST_ORDER_META:
        return v, res0, res1.final_loss
    eps = fd_epsilon if fd_epsilon is not None else 1e-4 * (1.0 + float(np.max(np.abs(flat))))
    gp = meta_grad(params.with_flat(flat + eps * v), task, theta0, horizon, FULL_SECOND_ORDER)
    gm = meta_grad(params.with_flat(flat - eps * v), task, theta0, horizon, FULL_SECOND_ORDER)
    hv = (gp - gm) / (2.0 * eps)
    return v - alpha * hv, res0, res1.final_loss


def maml_grad(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
    alpha: float,
    mode: str = FD_HVP_META,
    fd_epsilon: float | None = None,
) -> np.ndarray:
    """Approximate gradient of the one-inner-step objective.

    ``first_order_meta`` returns the gradient at the adapted weights and drops
    the curvature factor; ``fd_hvp_meta`` restores it with a central-difference
    Hessian-vector product, never materializing the Hessian.  At alpha=0 both
    reduce to the plain trajectory gradient.
    """
    grad, _, _ = _maml_parts(params, task, theta0, horizon, alpha, mode, fd_epsilon)
    return grad


def jacobian_recursive(
    params: OptimizerParams,
    task: OptimizeeTask,
    theta0: np.ndarray,
    horizon: int,
) -> np.ndarray:
    """Dense d(theta_T)/d(weights) accumulated forward step by step.

    Each step applies the recursion J' = (identity + input-path) J + direct
    parameter path, with the input path running through the task Hessian and
    the cell's analytic Jacobians, and the recurrent/momentum state carried
    alongside.  theta0 is treated as independent of the weights, so the
    recursion starts from a zero Jacobian.  Intended for small instances only.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    d = task.dim
    hid = params.hidden
    fdim = params.feature_dim
    layout = ParamLayout(hid, fdim)
    p = layout.size
    if d * p > JACOBIAN_SIZE_LIMIT:
        raise ValueError(
            f"instance too large for the dense trajectory Jacobian: "
            f"dim*|weights| = {d * p} > {JACOBIAN_SIZE_LIMIT}"
        )
    if horizon < 0:
        raise ValueError(f"horizon must be nonnegative, got {horizon}")

    w = params.w
    w_proj = params.w_proj
    scale = params.output_scale
    rows = layout.rows
    g_block = layout.gate_block
    ar = np.arange(hid)

    theta = theta0.copy()
    h = np.zeros((d, hid))
    c = np.zeros((d, hid))
    m = np.zeros(d)
    v = np.zeros(d)

    j_theta = np.zeros((d, p))
    j_h = np.zeros((d, hid, p))
    j_c = np.zeros((d, hid, p))
    j_m = np.zeros((d, p))
    j_v = np.zeros((d, p))

    for _ in range(horizon):
        grad = task.grad(theta)
        j_g = task.hessian_matmul(theta, j_theta)

        m2, v2, nm = moment_update(m, v, grad)
        j_m2 = BETA1 * j_m + (1.0 - BETA1) * j_g
        j_v2 = BETA2 * j_v + (1.0 - BETA2) * 2.0 * grad[:, None] * j_g
        s = np.sqrt(v2)
        denom = s + EPS
        pos = v2 > 0.0
        safe_s = np.where(pos, s, 1.0)
        coef = np.where(pos, m2 / (denom * denom * 2.0 * safe_s), 0.0)
        j_nm = j_m2 / denom[:, None] - coef[:, None] * j_v2

        z = np.stack([grad, nm], axis=1)
        x = np.concatenate([z, h], axis=1)
        j_x = np.concatenate(
            [j_g[:, None, :], j_nm[:, None, :], j_h], axis=1
        )  # (d, rows, p)

        h2, c2, cache = cell_forward(params, z, h, c)
        _, gi, gf, go, gq, c_prev, tau = cache

        j_act = []
        for gate in range(4):
            w_gate = w[:, gate * hid : (gate + 1) * hid]
            ja = np.einsum("drp,rk->dkp", j_x, w_gate)
            base = gate * g_block
            for r in range(rows):
                ja[:, ar, base + r * hid + ar] += x[:, r][:, None]
            ja[:, ar, layout.bias_base + gate * hid + ar] += 1.0
            j_act.append(ja)

        j_gi = (gi * (1.0 - gi))[:, :, None] * j_act[0]
        j_gf = (gf * (1.0 - gf))[:, :, None] * j_act[1]
        j_go = (go * (1.0 - go))[:, :, None] * j_act[2]
        j_gq = (1.0 - gq * gq)[:, :, None] * j_act[3]

        j_c2 = (
            gf[:, :, None] * j_c
            + c_prev[:, :, None] * j_gf
            + gi[:, :, None] * j_gq
            + gq[:, :, None] * j_gi
        )
        j_tau = (1.0 - tau * tau)[:, :, None] * j_c2
        j_h2 = go[:, :, None] * j_tau + tau[:, :, None] * j_go

        j_u = scale * np.einsum("dkp,k->dp", j_h2, w_proj)
        j_u[:, layout.proj_base : layout.proj_base + hid] += scale * h2
        j_u[:, layout.b_proj_index] += scale

        update = predict_update(params, h2)
        theta = theta + update
        j_theta = j_theta + j_u
        h, c, m, v = h2, c2, m2, v2
        j_h, j_c, j_m, j_v = j_h2, j_c2, j_m2, j_v2

    return j_theta
