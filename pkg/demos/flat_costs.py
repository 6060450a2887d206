"""Two agents with flat-bottomed costs: the augmentation term decides convergence.

Without it (rho = 0) the primal-dual flow keeps circling; with rho = 1 it
settles on a minimizer of the constrained problem.
"""

import numpy as np

from clusterlag.dynamics import DistributedSystem, StopCriterion, build_layouts, init_state, integrate
from clusterlag.model import GainConfig
from clusterlag.scenarios import appendix_b

prob = appendix_b()
layouts = build_layouts(prob)
for rho in (1.0, 0.0):
    sys_ = DistributedSystem(prob, layouts, GainConfig.uniform(prob, rho=rho))
    rec = integrate(sys_, init_state(prob, layouts), 1e-3, 500.0, sample_every=100, stop=StopCriterion(1e-6))
    viol = np.abs(rec.x().sum(axis=1) - 2.0)
    late = viol[rec.times >= rec.times[-1] / 2]
    status = f"stopped at t = {rec.stop_time}" if rec.converged else "still moving at t = 500"
    print(f"rho = {rho:g}: {status}; x = {np.round(rec.x()[-1], 4)}, "
          f"late |x1 + x2 - 2| up to {late.max():.3f}")
