"""
The gradient reversal trick
===========================

Adversarial feature learning needs one parameter set to descend a loss
that another parameter set ascends. Reversal does this inside a single
backward pass: the layer is the identity on the way forward and multiplies
by -lambda on the way back.
"""

import numpy as np

from patchreg import network

# forward: inserting the layer changes nothing, bit for bit
graph = network.build_backbone("c3k3p1-f12", num_classes=10)
params = network.init_params(graph, seed=0)
rng = np.random.default_rng(0)
batch = rng.uniform(0.0, 1.0, size=(8, 1, 28, 28))

plain, _ = network.forward(graph, params, batch)
layers = list(graph.layers)
layers.insert(2, network.GradReverse(scale=3.0))
wrapped = network.LayerGraph(layers, graph.input_shape, attach_level=graph.attach_level)
reversed_logits, _ = network.forward(wrapped, params, batch)
print("logits identical with GradReverse inserted:",
      np.array_equal(plain, reversed_logits))

# backward: the vjp is multiplication by minus the scale
upstream = rng.standard_normal((2, 3))
print("upstream ", upstream[0])
print("reversed ", network.grad_reverse_vjp(upstream, 3.0)[0])

# the same mechanism drives the adversarial objective: pushing the side
# classifier's loss DOWN through phi while pushing it UP through the
# backbone. A one-parameter caricature: feature w, side probe v, side
# loss (w*v - 1)^2. The feature's escape rate scales with the probe's
# weight, so against a confident probe the reversed player runs away
# faster than the probe can adapt.
w, v = 0.2, 1.0
lr = 0.1
print(f"start: side loss {(w * v - 1) ** 2:.3f}")
for step in range(40):
    g_v = 2 * (w * v - 1) * w
    g_w = 2 * (w * v - 1) * v
    v -= lr * g_v          # side probe descends
    w -= lr * (-1.0) * g_w  # feature ascends via reversal
print(f"after 40 adversarial steps: side loss {(w * v - 1) ** 2:.3f}, "
      f"w*v = {w * v:.3f} (driven away from 1)")
