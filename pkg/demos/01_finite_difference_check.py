"""
Checking every gradient against finite differences
===================================================

Every backward formula in the library is hand-derived, so the first thing
worth demonstrating is the audit: perturb one coordinate at a time, fit a
central-difference slope, and compare against the analytic gradient.
"""

import numpy as np

from patchreg import network, regularizer

# a small two-level backbone: conv/relu/pool, conv/relu/pool, two affines
graph = network.build_backbone("c3k3p1-c4k3p0-f16", num_classes=10)
params = network.init_params(graph, seed=0)

# biases start at zero, which parks relu inputs exactly on the kink where
# a two-sided slope is meaningless; nudge them to a differentiable point
rng = np.random.default_rng(1)
for k, v in params.items():
    if k.endswith("bias"):
        params.assign(k, v + rng.uniform(0.02, 0.1, size=v.shape))

batch = rng.uniform(0.0, 1.0, size=(4, 1, 28, 28))
labels = rng.integers(0, 10, size=4)

# 1) the plain classification loss, every parameter tensor
errors = network.finite_diff_check(graph, params, batch, labels,
                                   eps=1e-5, max_coords_per_tensor=40, coord_seed=2)
print("plain cross-entropy loss, max relative error per tensor")
for name, err in errors.items():
    print(f"  {name:16s} {err:.3e}")

# 2) the adversarial objective: backbone + side classifier together.
# The check also verifies the sign structure: the delta gradient must be
# main minus lambda * patch pull, phi must be plus lambda * its gradient.
spec = regularizer.SideClassifierSpec(kind="conv3", lam=1.0, num_classes=10)
phi = regularizer.init_side_params(spec, graph.level_shape(1)[0], seed=3)
for k in phi:
    if k.endswith("bias"):
        phi[k] = phi[k] + rng.uniform(0.02, 0.1, size=phi[k].shape)

errors = regularizer.par_finite_diff_check(graph, params, phi, spec, batch, labels,
                                           eps=1e-5, max_coords_per_tensor=40, coord_seed=4)
print("adversarial objective, max relative error per tensor")
for name, err in errors.items():
    print(f"  {name:16s} {err:.3e}")

worst = max(errors.values())
print(f"worst relative error {worst:.3e} (the acceptance bar is 1e-4)")
