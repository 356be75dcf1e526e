"""Certify the one-dimensional toy and sample from the result.

The generator is G(z) = z and the requirement is s > 0, so every certified
box must sit on the positive half-line.  Run with ``python3 demos/toy_walkthrough.py``.
"""

import numpy as np

from certiplan.certify import ExpansionConfig, PivotSearchConfig, certify, expand_box
from certiplan.generators import reward_graph
from certiplan.pipeline import identity_model
from certiplan.stl import Atomic, Component, batch_boolean
from certiplan.verify import verify_box

phi = Atomic(Component(0))
model = identity_model()
reward = reward_graph(model.graph(), phi, 0, 1, 1)

# a single expansion around z = 2 stops one grid step short of zero
region = expand_box(reward, [2.0], [], ExpansionConfig(eps0=0.01, delta=0.005))
print(f"pivot 2.0 -> eps {region.eps[0]}, box [{region.box.lower[0]:.3f}, {region.box.upper[0]:.3f}]")
print("verifier bounds on that box:", verify_box(reward, region.box).rob_lower)

# full search: several pivots, disjoint boxes
found = certify(reward, pivot_cfg=PivotSearchConfig(restarts=5), seed=0)
for r in found.regions:
    print(f"  box [{r.box.lower[0]:7.3f}, {r.box.upper[0]:7.3f}]  p = {np.exp(r.log_prob):.4f}")
print(f"total certified mass {np.exp(found.log_total):.4f}")

rng = np.random.default_rng(1)
z = found.mixture().sample(rng, 100_000)
traj = model.generate(z).reshape(-1, 1, 1)
print("violations in 1e5 certified draws:", int(np.sum(~batch_boolean(phi, traj))))
naive = rng.standard_normal((100_000, 1)).reshape(-1, 1, 1)
print(f"plain N(0,1) acceptance: {batch_boolean(phi, naive).mean():.3f}")
