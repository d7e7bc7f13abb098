"""Behavioral pseudometrics between MDP states and whole MDPs.

The central object is a cross-MDP state metric computed as the fixed point
of a contraction: the distance between two states is the worst action's
combination of immediate-reward gap (weight c_R) and Wasserstein distance
between next-state distributions (weight c_T < 1), the latter measured in
the current metric itself.  On top of it sit the symmetric Hausdorff
distance between MDPs, reward-scale alignment, isolation tests and
quotienting by (near-)equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .mdp import MdpSpec
from .transport import BatchedTransport

__all__ = [
    "NonConvergence",
    "BisimConfig",
    "CrossMetric",
    "AlignmentResult",
    "IsolationResult",
    "QuotientResult",
    "metric_update",
    "cross_bisim_metric",
    "hausdorff_distance",
    "align_reward_scale",
    "isolation_check",
    "bisim_quotient",
    "iteration_bound",
]


class NonConvergence(RuntimeError):
    """An iterative computation stopped before reaching its tolerance."""


@dataclass(frozen=True)
class BisimConfig:
    """Coefficients and stopping data for the metric fixed point.

    c_R weights immediate-reward gaps, c_T the recursive transport term;
    c_T must stay below 1 for the update to contract.  Iteration stops once
    the sweep residual drops below tolerance*(1 - c_T), which bounds the
    sup-norm distance to the true fixed point by ``tolerance``.
    """

    c_R: float
    c_T: float
    tolerance: float = 1e-6
    max_iterations: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.c_T < 1.0:
            raise ValueError(f"c_T must lie in (0,1), got {self.c_T}")
        if self.c_R <= 0:
            raise ValueError("c_R must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")

    @classmethod
    def for_discount(cls, gamma, tolerance=1e-6, max_iterations=10_000):
        """The conventional choice c_T = gamma, c_R = 1 - gamma."""
        return cls(c_R=1.0 - gamma, c_T=gamma, tolerance=tolerance,
                   max_iterations=max_iterations)

    @property
    def residual_target(self):
        return self.tolerance * (1.0 - self.c_T)


@dataclass(frozen=True)
class CrossMetric:
    """Converged (or partial) |S1| x |S2| state distance matrix."""

    dist: np.ndarray
    config: BisimConfig
    iterations_used: int
    residual: float

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "dist", d)

    @property
    def converged(self):
        return self.residual < self.config.residual_target

    def to_document(self):
        return {
            "dist": self.dist.tolist(),
            "c_R": self.config.c_R,
            "c_T": self.config.c_T,
            "iterations": self.iterations_used,
            "residual": self.residual,
        }


class _PairSweep:
    """Precomputed structure for sweeping the metric update over one MDP pair.

    Supports of all transition rows and the per-action reward gaps never
    change between sweeps, so they are extracted once; each sweep only
    re-slices the current distance matrix into block costs.
    """

    def __init__(self, m1: MdpSpec, m2: MdpSpec, config: BisimConfig):
        if m1.action_ids != m2.action_ids:
            raise ValueError("MDPs must share the same action set, in order")
        self.shape = (m1.n_states, m2.n_states)
        self.n_actions = m1.n_actions
        self.config = config
        r1, r2 = m1.reward, m2.reward
        self.reward_term = config.c_R * np.abs(r1[:, None, :] - r2[None, :, :])

        def supports(mdp):
            rows = []
            for s in range(mdp.n_states):
                for a in range(mdp.n_actions):
                    idx = np.nonzero(mdp.transition[s, a] > 0)[0]
                    rows.append((idx, mdp.transition[s, a, idx]))
            return rows

        sup1, sup2 = supports(m1), supports(m2)
        # (kind, payload) per (s1, s2, a); kinds: 0 point-mass left,
        # 1 point-mass right, 2 general LP block.
        self.cells = []
        pairs = []
        for s1 in range(m1.n_states):
            for s2 in range(m2.n_states):
                for a in range(self.n_actions):
                    I, mu = sup1[s1 * self.n_actions + a]
                    J, nu = sup2[s2 * self.n_actions + a]
                    if len(I) == 1:
                        self.cells.append((0, (int(I[0]), J, nu)))
                    elif len(J) == 1:
                        self.cells.append((1, (I, mu, int(J[0]))))
                    else:
                        self.cells.append((2, (I, J, len(pairs))))
                        pairs.append((mu, nu))
        self.batch = BatchedTransport(pairs)

    def apply(self, dist: np.ndarray) -> np.ndarray:
        """One application of the metric update operator to ``dist``."""
        w = np.empty(len(self.cells))
        costs = [None] * len(self.batch.pairs)
        lp_cells = []
        for k, (kind, payload) in enumerate(self.cells):
            if kind == 0:
                i0, J, nu = payload
                w[k] = dist[i0, J] @ nu
            elif kind == 1:
                I, mu, j0 = payload
                w[k] = mu @ dist[I, j0]
            else:
                I, J, b = payload
                costs[b] = dist[np.ix_(I, J)]
                lp_cells.append((k, b))
        if lp_cells:
            vals = self.batch.values(costs)
            for k, b in lp_cells:
                w[k] = vals[b]
        w = w.reshape(self.shape + (self.n_actions,))
        return (self.reward_term + self.config.c_T * w).max(axis=2)


def metric_update(m1: MdpSpec, m2: MdpSpec, config: BisimConfig,
                  dist: np.ndarray) -> np.ndarray:
    """Apply the metric update operator once to an arbitrary nonnegative
    cost matrix.  Exposed so the contraction property is directly testable."""
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (m1.n_states, m2.n_states):
        raise ValueError("distance matrix shape mismatch")
    if np.any(dist < 0):
        raise ValueError("distance matrix must be nonnegative")
    return _PairSweep(m1, m2, config).apply(dist)


def cross_bisim_metric(m1: MdpSpec, m2: MdpSpec,
                       config: BisimConfig) -> CrossMetric:
    """Fixed point of the metric update between two MDPs sharing actions.

    Starts from the zero matrix (iterates are then monotone nondecreasing)
    and sweeps until the residual certifies a sup-norm error below
    ``config.tolerance``.  If the iteration budget runs out the partial
    matrix is returned with ``converged`` False.
    """
    sweep = _PairSweep(m1, m2, config)
    dist = np.zeros(sweep.shape)
    residual = math.inf
    iterations = 0
    while iterations < config.max_iterations:
        new = sweep.apply(dist)
        residual = float(np.max(np.abs(new - dist)))
        dist = new
        iterations += 1
        if residual < config.residual_target:
            break
    return CrossMetric(dist, config, iterations, residual)


def iteration_bound(first_step_norm: float, config: BisimConfig) -> int:
    """Geometric sweep-count bound for a contraction started at zero."""
    if first_step_norm <= config.residual_target:
        return 1
    return math.ceil(math.log(config.residual_target / first_step_norm)
                     / math.log(config.c_T)) + 1


def hausdorff_distance(metric: CrossMetric) -> float:
    """Symmetric max-min aggregation of a converged cross metric."""
    if not metric.converged:
        raise NonConvergence(
            f"metric residual {metric.residual!r} above target "
            f"{metric.config.residual_target!r}")
    d = metric.dist
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


@dataclass(frozen=True)
class AlignmentResult:
    """Grid minimizer of the reward-scale alignment objective."""

    h_star: float
    aligned_distance: float
    profile: tuple              # ((h, objective), ...)
    boundary: bool              # minimizer hit the first or last grid point


def align_reward_scale(m1: MdpSpec, m2: MdpSpec, config: BisimConfig,
                       grid: int = 101) -> AlignmentResult:
    """Search the relative reward scale h in (0,1) that best aligns two MDPs.

    Each grid point re-solves the full cross metric with rewards scaled by
    h and 1-h and scores it by the Hausdorff objective.  A minimizer on the
    first or last grid point is flagged: it indicates one reward function
    looks more like zero reward than like the other, which this alignment
    cannot meaningfully compare.
    """
    if grid < 3:
        raise ValueError("grid must have at least 3 points")
    hs = (np.arange(grid) + 1.0) / (grid + 1.0)
    profile = []
    for h in hs:
        scaled1 = m1.with_rewards(h * m1.reward)
        scaled2 = m2.with_rewards((1.0 - h) * m2.reward)
        metric = cross_bisim_metric(scaled1, scaled2, config)
        profile.append((float(h), hausdorff_distance(metric)))
    best = min(range(grid), key=lambda k: profile[k][1])
    return AlignmentResult(
        h_star=profile[best][0],
        aligned_distance=profile[best][1],
        profile=tuple(profile),
        boundary=best in (0, grid - 1),
    )


@dataclass(frozen=True)
class IsolationResult:
    """Outcome of a state-subset isolation test (usable as a bool)."""

    isolated: bool
    min_cross_distance: float
    vacuous: bool = False

    def __bool__(self):
        return self.isolated


def isolation_check(mdp: MdpSpec, subset, delta: float, config: BisimConfig,
                    metric: CrossMetric | None = None) -> IsolationResult:
    """True iff every state outside ``subset`` is farther than ``delta``
    from every state inside, in the within-MDP metric.

    An empty or full subset is vacuously isolated and flagged as such.  A
    precomputed within-MDP metric may be supplied to avoid re-solving.
    """
    subset = frozenset(int(s) for s in subset)
    outside = [s for s in range(mdp.n_states) if s not in subset]
    if not subset or not outside:
        return IsolationResult(True, math.inf, vacuous=True)
    if metric is None:
        metric = cross_bisim_metric(mdp, mdp, config)
    if not metric.converged:
        raise NonConvergence("within-MDP metric did not converge")
    sub = metric.dist[np.ix_(sorted(subset), outside)]
    closest = float(sub.min())
    return IsolationResult(closest > delta, closest)


@dataclass(frozen=True)
class QuotientResult:
    """Bisimulation quotient: the partition, the collapsed MDP, and the
    map from original state index to class index."""

    partition: tuple            # tuple of tuples of original state indices
    quotient: MdpSpec
    lift: np.ndarray = field(repr=False)

    def __post_init__(self):
        lift = np.asarray(self.lift, dtype=int)
        lift.setflags(write=False)
        object.__setattr__(self, "lift", lift)


def bisim_quotient(mdp: MdpSpec, merge_tol: float = 1e-9,
                   config: BisimConfig | None = None) -> QuotientResult:
    """Collapse states whose within-MDP distance is at most ``merge_tol``.

    Classes are connected components of the thresholded distance graph.
    The collapsed transition rows are class-sums from one representative;
    every other member must agree with them (and with the representative's
    rewards) within merge_tol, otherwise the partition is not a valid
    bisimulation at this tolerance and the call is rejected.
    """
    if config is None:
        config = BisimConfig.for_discount(mdp.discount,
                                          tolerance=merge_tol / 4.0)
    if config.tolerance > merge_tol / 4.0:
        raise ValueError("config.tolerance must be at most merge_tol/4 so "
                         "metric error cannot blur the merge decision")
    metric = cross_bisim_metric(mdp, mdp, config)
    if not metric.converged:
        raise NonConvergence("within-MDP metric did not converge")
    close = sp.csr_matrix(metric.dist <= merge_tol)
    n_classes, labels = connected_components(close, directed=False)
    classes = [tuple(np.nonzero(labels == c)[0]) for c in range(n_classes)]
    classes.sort(key=lambda members: members[0])
    lift = np.empty(mdp.n_states, dtype=int)
    for c, members in enumerate(classes):
        for s in members:
            lift[s] = c
        for i in members:
            for j in members:
                if metric.dist[i, j] > merge_tol:
                    raise ValueError(
                        f"states {i} and {j} land in one class by chaining "
                        f"but are {metric.dist[i, j]!r} apart")

    P, r = mdp.transition, mdp.reward
    n_a = mdp.n_actions
    P_q = np.zeros((n_classes, n_a, n_classes))
    r_q = np.zeros((n_classes, n_a))
    for c, members in enumerate(classes):
        rep = members[0]
        for m in range(n_classes):
            cols = np.asarray(classes[m])
            P_q[c, :, m] = P[rep][:, cols].sum(axis=1)
        r_q[c] = r[rep]
        for other in members[1:]:
            for m in range(n_classes):
                cols = np.asarray(classes[m])
                gap = np.abs(P[other][:, cols].sum(axis=1) - P_q[c, :, m]).max()
                if gap > merge_tol:
                    raise ValueError(
                        f"state {other} disagrees with representative {rep} "
                        f"on class-summed transitions by {gap!r}")
            rgap = np.abs(r[other] - r_q[c]).max()
            if rgap > merge_tol:
                raise ValueError(
                    f"state {other} disagrees with representative {rep} "
                    f"on rewards by {rgap!r}")

    safe_q = frozenset(int(lift[s]) for s in mdp.safe_set)
    ids = tuple("+".join(mdp.state_ids[s] for s in members)
                for members in classes)
    quotient = MdpSpec(ids, mdp.action_ids, P_q, r_q, mdp.discount, safe_q)
    from .mdp import validate
    report = validate(quotient)
    if not report.ok:
        raise ValueError(f"quotient is not a valid MDP (mixed safe/non-safe "
                         f"classes?): {report}")
    return QuotientResult(tuple(classes), quotient, lift)
