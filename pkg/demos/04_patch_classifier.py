"""
The patch-wise side classifier and its objective
================================================

A side classifier reads one spatial fiber of an early feature map at a
time and tries to name the image's label from it. Its mean cross-entropy
over all locations is the patch loss; the training objective subtracts
lambda times that loss from the backbone's gradient while the side
parameters descend it.
"""

import numpy as np

from patchreg import network, regularizer

graph = network.build_backbone("c3k3p1-c4k3p0-f16", num_classes=10)
params = network.init_params(graph, seed=0)
rng = np.random.default_rng(0)
batch = rng.uniform(0.0, 1.0, size=(4, 1, 28, 28))
labels = rng.integers(0, 10, size=4)

# the tap: level-1 feature map, one 3-channel fiber per location
_, tap = network.forward(graph, params, batch)
print("tap shape (batch, channels, rows, cols):", tap.shape)

# an untrained side classifier is maximally uncertain: loss = ln 10
spec = regularizer.SideClassifierSpec(kind="linear", lam=1.0, num_classes=10)
phi = {k: np.zeros(s) for k, s in regularizer.side_param_shapes(spec, tap.shape[1]).items()}
side = regularizer.side_logits(tap, spec, phi)
print(f"patch loss at zero init {regularizer.patch_loss(side, labels):.6f}"
      f" vs ln(10) = {np.log(10.0):.6f}")

# the combined objective returns both gradient sets in one reverse pass
phi = regularizer.init_side_params(spec, tap.shape[1], seed=1)
res = regularizer.par_objective(graph, params, phi, spec, batch, labels)
print(f"main loss {res.main_loss:.4f}, side loss {res.side_loss:.4f}")

# sign structure: delta (below the tap) carries main MINUS lambda * patch,
# theta (above) carries main only, phi carries PLUS lambda * patch
_, g_main = network.backward(graph, params, batch, labels)
delta, theta = graph.partition()
k = delta[0]
pull = g_main[k] - res.net_grads[k]  # lambda * patch component
print(f"{k}: adversarial pull norm {np.linalg.norm(pull):.2e}")
k = theta[-1]
print(f"{k}: identical to the plain gradient:",
      np.array_equal(res.net_grads[k], g_main[k]))

# the per-variant zoo: 1x1 conv, 3x3 conv, per-fiber MLP, level-2 branch
for kind, level in (("linear", 1), ("conv3", 1), ("mlp3", 1), ("linear", 2)):
    s = regularizer.SideClassifierSpec(kind=kind, attach_level=level, lam=1.0,
                                       num_classes=10, mlp_hidden=32)
    p = regularizer.init_side_params(s, graph.level_shape(level)[0], seed=2)
    g2 = network.build_backbone("c3k3p1-c4k3p0-f16", 10, attach_level=level)
    r = regularizer.par_objective(g2, params, p, s, batch, labels)
    print(f"variant {kind} at level {level}: side loss {r.side_loss:.4f}")
