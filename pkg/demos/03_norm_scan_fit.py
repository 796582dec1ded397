"""
Finding the optimal norm from a learning-rate scan
==================================================

A scan over learning rates gives (output norm, loss) pairs. A quadratic
in log-log space through the points around the minimum locates the optimal
norm; six re-analyses of the same scan give an error bar.
"""

import math

import numpy as np

from normscale.analysis import NormScanPoint, fit_loss_vs_norm, fit_variant_ensemble
from normscale.linalg import make_rng

rng = make_rng(4)
init_loss = 5.55
a, vertex = 0.08, 3.0
b = -2 * a * vertex

points = []
for i, log2_eta in enumerate(np.arange(-6, 0.5, 0.5)):
    x = 1.0 + 0.4 * i                  # ln(norm) grows with the learning rate
    y = a * x * x + b * x + math.log(init_loss) + rng.normal(0, 0.003)
    points.append(NormScanPoint(eta=2.0**log2_eta, norm=math.exp(x), loss=math.exp(y)))

fit = fit_loss_vs_norm(points, init_loss, constrain=True)
print(f"constrained fit: a={fit.coeffs[0]:.4f} b={fit.coeffs[1]:.4f} c={fit.coeffs[2]:.4f}")
print(f"optimal norm 2^{fit.log2_norm:.2f} (planted 2^{vertex / math.log(2):.2f}), "
      f"loss {fit.loss:.4f}, nearest eta 2^{fit.log2_eta:.1f}")

ens = fit_variant_ensemble(points, init_loss)
for v in ens.variants:
    print(f"  {v.variant:<24} log2 norm {v.log2_norm:6.3f}")
print("spread:", {k: round(v, 4) for k, v in ens.spread.items()})
