"""
The three adaptation losses on tiny matrices
============================================

Feature matrices here are small and written out explicitly, so every
number can be checked with pencil arithmetic.  Rows are items, columns are
learned attributes.
"""

import math

import numpy as np

from esam import tensor as T
from esam.losses import LossConfig, loss_a2c, loss_center_clustering, loss_self_training

# Attribute-correlation alignment compares the Gram matrices of the
# attribute columns.  Two domains with the same column correlations score 0
# even when their rows differ.
Ds = np.array([[1.0, 0.0], [0.0, 1.0]])
Dt = np.array([[0.0, 1.0], [1.0, 0.0]])
print("a2c, permuted rows:", loss_a2c(T.Tensor(Ds), T.Tensor(Dt)).item())

# Scaling one domain changes the Gram matrix by the square of the factor.
print("a2c, target doubled:", loss_a2c(T.Tensor(Ds), T.Tensor(2 * Ds)).item())

# The gradient flows into both domains.
a, b = T.parameter(Ds), T.parameter(2 * Ds)
loss_a2c(a, b).backward()
print("d/dDs:\n", a.grad, "\nd/dDt:\n", b.grad)

# Center-wise clustering works on L2-normalized rows.  Clicked and
# non-clicked items each get a center; rows are pulled to their own center
# (hinge m1) and the two centers pushed apart (hinge m2).
cfg = LossConfig(m1=0.2, m2=0.7)
tight = np.array([[1.0, 0.05], [1.0, -0.05], [-1.0, 0.05], [-1.0, -0.05]])
labels = np.array([1, 1, 0, 0])
print("center loss, separated classes:", loss_center_clustering(T.Tensor(tight), labels, cfg).item())
mixed = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.1], [-1.0, 0.1]])
print("center loss, interleaved classes:", loss_center_clustering(T.Tensor(mixed), labels, cfg).item())

# Self-training only looks at confident target scores (below p1 or above
# p2) and lowers their entropy -p ln p.  Middle scores are ignored.
probs = T.parameter([[0.05], [0.5], [0.95]])
loss_self_training(probs, LossConfig(p1=0.2, p2=0.8)).backward()
print("entropy gradient per score:", probs.grad.ravel())

# Gradient descent on -p ln p has its maximum at 1/e, so scores below it
# slide to 0 and scores above it slide to 1.
for p0 in (0.1, 1 / math.e, 0.9):
    p = p0
    for _ in range(200):
        x = T.parameter(p)
        T.sum(-(x * T.log(x))).backward()
        p = float(np.clip(p - 0.01 * x.grad[0, 0], 1e-7, 1 - 1e-7))
    print(f"start {p0:.3f} -> {p:.4f}")
