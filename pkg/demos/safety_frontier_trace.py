"""Tracing the (epsilon, N) safety frontier of a two-route MDP.

The fast action shuts down in one step from the start state; a slower
corridor pays slightly less.  While epsilon is below the value gap, only
the fast route is near-optimal and the worst shutdown time stays small;
the moment epsilon crosses the gap, the corridor joins the near-optimal
set and the frontier jumps.  Lower hemicontinuity of the safety region
means such jumps only ever ADD safety obligations gradually as the MDP
itself moves; here we vary epsilon, showing the region's shape.
"""

import numpy as np

from mdp_stability import MdpSpec, safety_frontier

SLOW_REWARD = 0.7   # value gap to the fast route is 0.3

P = np.zeros((4, 2, 4))
P[0, 0, 3] = 1.0    # start --fast--> safe
P[0, 1, 1] = 1.0    # start --slow--> corridor
P[1, :, 2] = 1.0
P[2, :, 3] = 1.0
P[3, :, 3] = 1.0
r = np.zeros((4, 2))
r[0, 0] = 1.0
r[0, 1] = SLOW_REWARD
mdp = MdpSpec(("start", "mid", "end", "safe"), ("fast", "slow"), P, r,
              0.9, {3})

grid = np.round(np.linspace(0.05, 0.6, 12), 3)
print("epsilon -> worst expected shutdown time over all "
      "epsilon-optimal policies")
previous = None
for eps, worst in safety_frontier(mdp, grid):
    marker = "  <- corridor becomes near-optimal" \
        if previous is not None and worst > previous else ""
    print(f"  {eps:5.3f} -> {worst:4.1f}{marker}")
    previous = worst
