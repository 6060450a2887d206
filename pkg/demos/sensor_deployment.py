"""Sensors and relays on a line, solved over per-constraint clusters and over the whole graph.

The event targets move at t = 100.  Cluster layouts keep every agent's
communication to at most two dual copies and settle sooner than the layout
in which every cluster spans the full line.  Takes about two minutes.
"""

from clusterlag import diagnostics as dg
from clusterlag.dynamics import (DistributedSystem, StopCriterion, build_layouts, communication_counts,
                                 init_state, integrate)
from clusterlag.model import GainConfig
from clusterlag.penalty import PenaltyConfig
from clusterlag.scenarios import example2, example2_phases

prob = example2(0)
for full in (False, True):
    layouts = build_layouts(prob, full_graph=full)
    sys_ = DistributedSystem(prob, layouts, GainConfig.uniform(prob), True, PenaltyConfig(0.01, 200.0))
    rec = integrate(sys_, init_state(prob, layouts), 5e-5, 1000.0, sample_every=2000,
                    stop=StopCriterion(1e-6, min_time=100.0), phases=example2_phases(), check_every=2000)
    x = rec.x()[-1]
    positions = [round(float(x[prob.slice_of(i)][0]), 3) for i in range(1, 6)]
    label = "full graph" if full else "clusters"
    print(f"{label}: copies {list(communication_counts(prob, layouts).values())}, "
          f"stopped at t = {rec.stop_time}, positions {positions}")
    print(f"  time to 1e-6: {dg.time_to_tolerance(rec, 1e-6)}")
