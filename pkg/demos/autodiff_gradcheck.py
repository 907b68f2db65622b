"""
Reverse-mode gradients, checked against finite differences
==========================================================

Build a tiny graph, pull gradients back through it, then compare every
entry with central differences.
"""

import numpy as np

from twostage_clip import tensor as T
from twostage_clip.gradcheck import check_gradients
from twostage_clip.tensor import Tensor, backward

# a layer-normed projection followed by a softmax
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
gain, bias = Tensor(np.ones(5), requires_grad=True), Tensor(np.zeros(5), requires_grad=True)
target = rng.normal(size=(3, 4))

loss = (T.softmax(T.layer_norm(x, gain, bias) @ w) * target).sum()
backward(loss)
print("dloss/dw:\n", np.round(w.grad, 4))


###############################################################################
# The same graph as a builder, so the checker can rebuild it after each nudge.

def build(rng):
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    target = rng.normal(size=(3, 4))
    return {"x": x, "w": w}, lambda: (T.softmax(x @ w) * target).sum()


report = check_gradients(build, epsilon=1e-5, tolerance=1e-4, seed=1)
print("relative errors:", report.errors, "passed:", report.passed)
