"""
Scaling rules for learning rate and batch size
==============================================

Optimal learning rates measured at several batch sizes and horizons are
regressed jointly in log2 space. The optimal batch size per horizon follows
a power law, and substituting it gives the horizon exponent of the optimal
learning rate.
"""

import numpy as np

from normscale.analysis import composed_lr_exponent, fit_power_law, regress_lr_bs_horizon
from normscale.linalg import make_rng

rng = make_rng(2)
B = np.repeat([8, 16, 32, 64], 4)
D = np.tile([2**20, 2**21, 2**22, 2**23], 4)
eta = 2.0 ** (0.6 * np.log2(B) - 0.5 * np.log2(D) + 4.0) * (1 + rng.normal(0, 0.05, B.size))

reg = regress_lr_bs_horizon(eta, B, D)
alpha, beta, gamma = reg.coeffs
print(f"log2 eta* = {alpha:.3f} log2 B {beta:+.3f} log2 D {gamma:+.3f}")
print(f"stderr     {reg.stderr[0]:.3f}          {reg.stderr[1]:.3f}          {reg.stderr[2]:.3f}")

horizons = 2.0 ** np.arange(20, 29)
b_star = 0.01 * horizons**0.45 * (1 + rng.normal(0, 0.1, horizons.size))
law = fit_power_law(horizons, b_star)
print(f"B*(D) = {law.coeffs[0]:.4f} D^{law.coeffs[1]:.3f}")
print(f"eta*(D) exponent at B = B*(D): {composed_lr_exponent(alpha, beta, law.coeffs[1]):.3f}")
