"""How conservative are the multiplier bounds behind the automatic penalty weight?

Draws single-constraint instances with unit boxes and compares the certified
bound with the multipliers of the exact solution.
"""

import numpy as np

from clusterlag.oracle import solve_boxed_qp
from clusterlag.penalty import gamma_auto, mu_bound_single
from clusterlag.scenarios import table1

rows = []
for seed in range(20):
    prob = table1(seed)
    mu = solve_boxed_qp(prob).mu_max
    bound = mu_bound_single(prob).value
    rows.append((seed, mu, bound))
    print(f"seed {seed:2d}: mu_max {mu:7.4f}  bound {bound:8.4f}  weight {gamma_auto(prob.N, bound):8.2f}")
ratios = [b / m for _, m, b in rows if m > 0]
print(f"median bound / mu_max = {np.median(ratios):.1f}")
