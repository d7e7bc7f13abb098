"""Finite MDPs with an absorbing safe set, plus the standard solvers.

Everything downstream (metrics, safety certificates, on-policy analysis)
consumes the types defined here.  All values are immutable after
construction; every operation is a pure function of its inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PROB_TOL",
    "MdpSpec",
    "Policy",
    "ValueFunction",
    "InducedChain",
    "ValidationReport",
    "Violation",
    "validate",
    "induce_chain",
    "value_iteration",
    "policy_evaluation",
    "greedy_policy",
    "load_mdp",
    "mdp_to_document",
    "dump_mdp",
]

# Probability bookkeeping tolerance.  Fixed; callers may only loosen it.
PROB_TOL = 1e-12


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MdpSpec:
    """A finite MDP (states, actions, transitions, rewards, discount)
    together with an absorbing set of safe (shutdown) states.

    Rewards are stored per state-action pair r[s, a].  Use
    :meth:`from_sas_rewards` when rewards depend on the destination state.
    State and action order is the file/list order; all matrices are indexed
    accordingly.
    """

    state_ids: tuple
    action_ids: tuple
    transition: np.ndarray  # (S, A, S), rows P[s, a, :] are distributions
    reward: np.ndarray      # (S, A)
    discount: float
    safe_set: frozenset

    def __post_init__(self):
        # Deliberately permissive: structural problems are reported by
        # validate(), not rejected here, so broken documents can be examined.
        object.__setattr__(self, "state_ids", tuple(self.state_ids))
        object.__setattr__(self, "action_ids", tuple(self.action_ids))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "safe_set", frozenset(int(s) for s in self.safe_set))

    @classmethod
    def from_sas_rewards(cls, state_ids, action_ids, transition, reward_sas,
                         discount, safe_set):
        """Build a spec from destination-dependent rewards R(s, a, s') by
        taking the transition expectation r[s, a] = sum_s' P[s,a,s'] R(s,a,s')."""
        transition = np.asarray(transition, dtype=float)
        reward_sas = np.asarray(reward_sas, dtype=float)
        if reward_sas.shape != transition.shape:
            raise ValueError(
                f"rewards_sas shape {reward_sas.shape} does not match "
                f"transition shape {transition.shape}")
        reward = np.einsum("sat,sat->sa", transition, reward_sas)
        return cls(state_ids, action_ids, transition, reward, discount, safe_set)

    @property
    def n_states(self):
        return len(self.state_ids)

    @property
    def n_actions(self):
        return len(self.action_ids)

    @property
    def safe_indices(self):
        return np.array(sorted(self.safe_set), dtype=int)

    @property
    def nonsafe_indices(self):
        return np.array([s for s in range(self.n_states) if s not in self.safe_set],
                        dtype=int)

    def state_index(self, state_id):
        return self.state_ids.index(state_id)

    def with_rewards(self, reward) -> "MdpSpec":
        """Copy with a replaced reward table (used by reward-scale alignment)."""
        return MdpSpec(self.state_ids, self.action_ids, self.transition,
                       reward, self.discount, self.safe_set)


@dataclass(frozen=True)
class Policy:
    """Stationary policy, deterministic (per-state action index) or
    stochastic (per-state probability row over actions)."""

    kind: str                 # "deterministic" | "stochastic"
    table: np.ndarray

    def __post_init__(self):
        if self.kind not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        dtype = int if self.kind == "deterministic" else float
        object.__setattr__(self, "table", _frozen(self.table, dtype=dtype))
        if self.kind == "deterministic":
            if self.table.ndim != 1:
                raise ValueError("deterministic policy table must be 1-d")
            if np.any(self.table < 0):
                raise ValueError("negative action index")
        else:
            if self.table.ndim != 2:
                raise ValueError("stochastic policy table must be 2-d")
            rows = self.table.sum(axis=1)
            if np.any(np.abs(rows - 1.0) > PROB_TOL) or np.any(self.table < 0):
                raise ValueError("stochastic policy rows must be distributions")

    @classmethod
    def deterministic(cls, actions):
        return cls("deterministic", np.asarray(actions, dtype=int))

    @classmethod
    def stochastic(cls, table):
        return cls("stochastic", np.asarray(table, dtype=float))

    def matrix(self, n_actions) -> np.ndarray:
        """Per-state action-probability rows, regardless of kind."""
        if self.kind == "stochastic":
            if self.table.shape[1] != n_actions:
                raise ValueError("policy/action dimension mismatch")
            return np.asarray(self.table)
        if np.any(self.table >= n_actions):
            raise ValueError("action index out of range")
        rows = np.zeros((len(self.table), n_actions))
        rows[np.arange(len(self.table)), self.table] = 1.0
        return rows


@dataclass(frozen=True)
class ValueFunction:
    """Per-state values with the solver's residual.

    kind is "optimal" (from value iteration) or "policy" (from exact policy
    evaluation); residual is the sup-norm of the last iteration step or of
    the linear-system defect respectively.
    """

    values: np.ndarray
    kind: str
    residual: float

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")


@dataclass(frozen=True)
class InducedChain:
    """Markov chain over non-safe states induced by fixing a policy.

    Q[i, j] is the one-step probability between non-safe states, absorb[i]
    the one-step probability of entering the safe set; index_map[i] is the
    MDP state index of chain state i.
    """

    Q: np.ndarray
    absorb: np.ndarray
    index_map: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", _frozen(self.Q))
        object.__setattr__(self, "absorb", _frozen(self.absorb))
        object.__setattr__(self, "index_map", _frozen(self.index_map, dtype=int))
        rows = self.Q.sum(axis=1) + self.absorb
        if self.Q.size and np.max(np.abs(rows - 1.0)) > PROB_TOL:
            raise ValueError("chain rows + absorption must sum to 1")

    @property
    def n_states(self):
        return len(self.index_map)


@dataclass(frozen=True)
class Violation:
    code: str
    location: tuple
    detail: str

    def __str__(self):
        where = ",".join(str(x) for x in self.location)
        return f"{self.code}@({where}): {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = field(default_factory=tuple)

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        if self.ok:
            return "ok"
        return "; ".join(str(v) for v in self.violations)


def validate(mdp: MdpSpec, tol: float = PROB_TOL) -> ValidationReport:
    """Check every structural invariant of an MDP spec.

    Returns a report listing each violation with its location; the report is
    empty iff the MDP is valid.  ``tol`` may only be loosened, never
    tightened below the package default.
    """
    tol = max(tol, PROB_TOL)
    found = []
    n_s, n_a = len(mdp.state_ids), len(mdp.action_ids)
    if len(set(mdp.state_ids)) != n_s:
        found.append(Violation("duplicate-state-ids", (), "state ids repeat"))
    if len(set(mdp.action_ids)) != n_a:
        found.append(Violation("duplicate-action-ids", (), "action ids repeat"))
    P, r = np.asarray(mdp.transition), np.asarray(mdp.reward)
    if P.shape != (n_s, n_a, n_s):
        found.append(Violation("transition-shape", P.shape,
                               f"expected {(n_s, n_a, n_s)}"))
        return ValidationReport(tuple(found))
    if r.shape != (n_s, n_a):
        found.append(Violation("reward-shape", r.shape, f"expected {(n_s, n_a)}"))
    if not 0.0 < mdp.discount < 1.0:
        found.append(Violation("discount", (), f"{mdp.discount} not in (0,1)"))
    bad = np.argwhere((P < 0) | (P > 1))
    for s, a, t in bad[:20]:
        found.append(Violation("probability-range", (int(s), int(a), int(t)),
                               f"entry {P[s, a, t]!r} outside [0,1]"))
    rows = P.sum(axis=2)
    off = np.argwhere(np.abs(rows - 1.0) > tol)
    for s, a in off:
        found.append(Violation("row-sum", (int(s), int(a)),
                               f"sums to {rows[s, a]!r}"))
    safe = sorted(mdp.safe_set)
    if any(s < 0 or s >= n_s for s in safe):
        found.append(Violation("safe-range", tuple(safe), "index out of range"))
    else:
        for s in safe:
            inside = P[s][:, safe].sum(axis=1)  # per action, mass staying safe
            for a in np.nonzero(np.abs(inside - 1.0) > tol)[0]:
                found.append(Violation(
                    "safe-not-absorbing", (int(s), int(a)),
                    f"leaks {1.0 - inside[a]!r} outside the safe set"))
    return ValidationReport(tuple(found))


def induce_chain(mdp: MdpSpec, policy: Policy) -> InducedChain:
    """Fix a policy and restrict the resulting Markov chain to non-safe
    states, recording the per-state one-step absorption probability."""
    pi = policy.matrix(mdp.n_actions)
    if pi.shape[0] != mdp.n_states:
        raise ValueError("policy/state dimension mismatch")
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    keep = mdp.nonsafe_indices
    safe = mdp.safe_indices
    Q = P_pi[np.ix_(keep, keep)]
    absorb = P_pi[np.ix_(keep, safe)].sum(axis=1) if len(safe) else np.zeros(len(keep))
    return InducedChain(Q, absorb, keep)


def value_iteration(mdp: MdpSpec, tol: float = 1e-10,
                    max_iterations: int = 1_000_000) -> ValueFunction:
    """Optimal values V* by value iteration.

    Stops when a sweep changes the values by less than tol*(1-g)/(2g), which
    guarantees a sup-norm error below ``tol``.
    """
    if not 0.0 < mdp.discount < 1.0:
        raise ValueError("value iteration requires discount in (0,1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = mdp.discount
    threshold = tol * (1.0 - g) / (2.0 * g)
    v = np.zeros(mdp.n_states)
    P, r = mdp.transition, mdp.reward
    change = math.inf
    for _ in range(max_iterations):
        q = r + g * np.einsum("sat,t->sa", P, v)
        v_new = q.max(axis=1)
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        if change < threshold:
            break
    return ValueFunction(v, "optimal", change)


def policy_evaluation(mdp: MdpSpec, policy: Policy) -> ValueFunction:
    """Exact V^pi from the linear system (I - g P_pi) V = r_pi."""
    if not 0.0 < mdp.discount < 1.0:
        raise ValueError("policy evaluation requires discount in (0,1)")
    pi = policy.matrix(mdp.n_actions)
    if pi.shape[0] != mdp.n_states:
        raise ValueError("policy/state dimension mismatch")
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    A = np.eye(mdp.n_states) - mdp.discount * P_pi
    try:
        v = np.linalg.solve(A, r_pi)
    except np.linalg.LinAlgError as exc:  # cannot occur for discount < 1
        raise ValueError(f"policy evaluation solve failed: {exc}") from exc
    residual = float(np.max(np.abs(A @ v - r_pi)))
    return ValueFunction(v, "policy", residual)


def greedy_policy(mdp: MdpSpec, values: ValueFunction) -> Policy:
    """Deterministic policy that is greedy with respect to the given values."""
    q = mdp.reward + mdp.discount * np.einsum("sat,t->sa", mdp.transition,
                                              values.values)
    return Policy.deterministic(q.argmax(axis=1))


# -- JSON document interface -------------------------------------------------

def load_mdp(source) -> MdpSpec:
    """Read the JSON MDP document (path, file object, or parsed dict).

    Schema: {"states": [...], "actions": [...], "transitions": [[[...]]],
    "rewards": [[...]] or "rewards_sas": [[[...]]] (mutually exclusive),
    "discount": g, "safe": [state ids]}.  The document must validate.
    """
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    for key in ("states", "actions", "transitions", "discount", "safe"):
        if key not in doc:
            raise ValueError(f"MDP document missing {key!r}")
    if ("rewards" in doc) == ("rewards_sas" in doc):
        raise ValueError("exactly one of 'rewards'/'rewards_sas' is required")
    states, actions = doc["states"], doc["actions"]
    for s in doc["safe"]:
        if s not in states:
            raise ValueError(f"safe state {s!r} not among states")
    safe = frozenset(states.index(s) for s in doc["safe"])
    if "rewards" in doc:
        mdp = MdpSpec(states, actions, doc["transitions"], doc["rewards"],
                      float(doc["discount"]), safe)
    else:
        mdp = MdpSpec.from_sas_rewards(states, actions, doc["transitions"],
                                       doc["rewards_sas"],
                                       float(doc["discount"]), safe)
    report = validate(mdp)
    if not report.ok:
        raise ValueError(f"MDP document fails validation: {report}")
    return mdp


def mdp_to_document(mdp: MdpSpec) -> dict:
    return {
        "states": list(mdp.state_ids),
        "actions": list(mdp.action_ids),
        "transitions": mdp.transition.tolist(),
        "rewards": mdp.reward.tolist(),
        "discount": mdp.discount,
        "safe": [mdp.state_ids[i] for i in sorted(mdp.safe_set)],
    }


def dump_mdp(mdp: MdpSpec, target) -> None:
    """Write the JSON MDP document to a path or file object."""
    doc = mdp_to_document(mdp)
    if hasattr(target, "write"):
        json.dump(doc, target, indent=2)
    else:
        with open(target, "w") as fh:
            json.dump(doc, fh, indent=2)
