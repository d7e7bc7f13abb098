"""Exact 1-Wasserstein distances between finite distributions.

The solver returns the optimal coupling together with a feasible, tight
dual certificate (potentials u, v with u_i + v_j <= cost_ij and
u.mu + v.nu equal to the optimum), which the stability arguments consume
directly.  A batched entry point solves many independent problems in one
block-diagonal LP; the fixed-point metric iteration relies on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

__all__ = [
    "TransportProblem",
    "TransportSolution",
    "solve_transport",
    "kr_lower_bound",
    "BatchedTransport",
]

MARGINAL_TOL = 1e-9
DUAL_TOL = 1e-9


@dataclass(frozen=True)
class TransportProblem:
    """Marginals mu (length m), nu (length n) and an m-by-n cost matrix."""

    mu: np.ndarray
    nu: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        nu = np.array(self.nu, dtype=float)
        cost = np.array(self.cost, dtype=float)
        for a in (mu, nu, cost):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "cost", cost)
        if cost.shape != (len(mu), len(nu)):
            raise ValueError(f"cost shape {cost.shape} does not match marginals "
                             f"({len(mu)}, {len(nu)})")
        if np.any(mu < 0) or np.any(nu < 0):
            raise ValueError("marginals must be nonnegative")
        if abs(mu.sum() - 1.0) > MARGINAL_TOL or abs(nu.sum() - 1.0) > MARGINAL_TOL:
            raise ValueError(
                f"marginals must each sum to 1 (got {mu.sum()!r}, {nu.sum()!r})")
        if not np.all(np.isfinite(cost)) or np.any(cost < 0):
            raise ValueError("cost entries must be finite and nonnegative")

    def to_document(self):
        return {"mu": self.mu.tolist(), "nu": self.nu.tolist(),
                "cost": self.cost.tolist()}


@dataclass(frozen=True)
class TransportSolution:
    """Optimal value, a coupling attaining it, and dual potentials."""

    value: float
    plan: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray


def _transport_lp(mu, nu, cost):
    """Solve one dense transportation LP, returning (value, plan, u, v)."""
    m, n = len(mu), len(nu)
    row_i = np.repeat(np.arange(m), n)
    col_j = np.tile(np.arange(n), m)
    var = np.arange(m * n)
    A = sp.csc_matrix(
        (np.ones(2 * m * n),
         (np.concatenate([row_i, m + col_j]), np.concatenate([var, var]))),
        shape=(m + n, m * n))
    res = linprog(cost.ravel(), A_eq=A, b_eq=np.concatenate([mu, nu]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(m, n)
    duals = np.asarray(res.eqlin.marginals)
    value = float(cost.ravel() @ res.x)
    return value, plan, duals[:m], duals[m:]


def solve_transport(problem: TransportProblem) -> TransportSolution:
    """Exact optimal transport between the problem's marginals.

    Zero-weight support points are dropped before the solve and reinstated
    as zero rows/columns of the plan; their potentials are filled in so the
    dual certificate stays feasible over the full support.
    """
    mu, nu, cost = problem.mu, problem.nu, problem.cost
    keep_i = np.nonzero(mu > 0)[0]
    keep_j = np.nonzero(nu > 0)[0]
    sub_cost = cost[np.ix_(keep_i, keep_j)]

    if len(keep_i) == 1:
        # Point mass on the left: the coupling is forced.
        value = float(sub_cost[0] @ nu[keep_j])
        sub_plan = nu[keep_j][None, :].copy()
        u = np.zeros(1)
        v = sub_cost[0].copy()
    elif len(keep_j) == 1:
        value = float(mu[keep_i] @ sub_cost[:, 0])
        sub_plan = mu[keep_i][:, None].copy()
        u = sub_cost[:, 0].copy()
        v = np.zeros(1)
    else:
        value, sub_plan, u, v = _transport_lp(mu[keep_i], nu[keep_j], sub_cost)

    plan = np.zeros_like(cost)
    plan[np.ix_(keep_i, keep_j)] = sub_plan
    dual_u = np.empty(len(mu))
    dual_v = np.empty(len(nu))
    dual_u[keep_i] = u
    dual_v[keep_j] = v
    # Reinstated points carry the largest feasible potentials: first u over
    # the solved v's, then v over every u, which keeps u_i + v_j <= cost_ij
    # for all pairs including dropped-dropped ones.
    drop_i = np.nonzero(mu <= 0)[0]
    drop_j = np.nonzero(nu <= 0)[0]
    for i in drop_i:
        dual_u[i] = np.min(cost[i, keep_j] - dual_v[keep_j])
    for j in drop_j:
        dual_v[j] = np.min(cost[:, j] - dual_u)
    return TransportSolution(value, plan, dual_u, dual_v)


def kr_lower_bound(problem: TransportProblem, f_left, f_right) -> float:
    """Weak-duality lower bound sum(f_left*mu) - sum(f_right*nu).

    The potential pair must satisfy f_left_i - f_right_j <= cost_ij for all
    (i, j); violations are rejected naming the worst offending pair.  The
    returned value never exceeds the optimal transport cost.  A solver
    certificate (u, v) satisfies u_i + v_j <= cost_ij, so it enters here as
    (u, -v), where it reproduces the optimum exactly.
    """
    f_left = np.asarray(f_left, dtype=float)
    f_right = np.asarray(f_right, dtype=float)
    if f_left.shape != problem.mu.shape or f_right.shape != problem.nu.shape:
        raise ValueError("potential lengths must match the marginals")
    slack = problem.cost - (f_left[:, None] - f_right[None, :])
    if slack.min() < -DUAL_TOL:
        i, j = np.unravel_index(np.argmin(slack), slack.shape)
        raise ValueError(
            f"infeasible potentials: f_left[{i}] - f_right[{j}] exceeds "
            f"cost[{i},{j}] by {-slack[i, j]!r}")
    return float(f_left @ problem.mu - f_right @ problem.nu)


class BatchedTransport:
    """Many transportation problems with fixed marginals and varying costs.

    Built once from a list of (mu, nu) support pairs; each call to
    :meth:`values` assembles a single block-diagonal LP over the problems
    that need one (point-mass and identical-marginal blocks short-circuit)
    and returns all optimal values.  Used by the metric fixed point, where
    the marginals are transition rows and the cost is the current iterate.
    """

    def __init__(self, pairs):
        # pairs: list of (mu, nu) 1-d weight arrays (no zero trimming here;
        # callers pass trimmed supports alongside index arrays).
        self.pairs = [(np.asarray(mu, float), np.asarray(nu, float))
                      for mu, nu in pairs]

    def values(self, costs) -> np.ndarray:
        """Optimal values for this batch under per-problem cost matrices."""
        out = np.empty(len(self.pairs))
        lp_idx, blocks = [], []
        for k, ((mu, nu), cost) in enumerate(zip(self.pairs, costs)):
            m, n = len(mu), len(nu)
            if m == 1:
                out[k] = cost[0] @ nu
            elif n == 1:
                out[k] = mu @ cost[:, 0]
            elif m == n and mu.shape == nu.shape and np.array_equal(mu, nu) \
                    and float(np.abs(np.diagonal(cost)) @ mu) == 0.0:
                # Identical marginals with a free diagonal: optimum is 0
                # because costs are nonnegative.
                out[k] = 0.0
            else:
                lp_idx.append(k)
                blocks.append((mu, nu, cost))
        if blocks:
            for k, val in zip(lp_idx, _solve_blocks(blocks)):
                out[k] = val
        return out


def _solve_blocks(blocks):
    """One block-diagonal LP for independent transportation problems."""
    rows, cols, cvec, bvec = [], [], [], []
    row0 = col0 = 0
    spans = []
    for mu, nu, cost in blocks:
        m, n = len(mu), len(nu)
        var = col0 + np.arange(m * n)
        rows.append(row0 + np.repeat(np.arange(m), n))
        rows.append(row0 + m + np.tile(np.arange(n), m))
        cols.append(var)
        cols.append(var)
        cvec.append(np.asarray(cost, float).ravel())
        bvec.append(mu)
        bvec.append(nu)
        spans.append((col0, m * n))
        row0 += m + n
        col0 += m * n
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    A = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(row0, col0))
    c = np.concatenate(cvec)
    res = linprog(c, A_eq=A, b_eq=np.concatenate(bvec), bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"batched transport LP failed: {res.message}")
    x = res.x
    return [float(c[o:o + size] @ x[o:o + size]) for o, size in spans]
