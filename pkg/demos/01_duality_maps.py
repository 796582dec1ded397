"""
Operator norms and their duality maps
=====================================

Each layer group gets a norm; the optimizer steps along the unit-norm
direction that is most aligned with the gradient under that norm.
"""

import numpy as np

from normscale import NormKind, dual, make_rng, newton_schulz, op_norm, svd_oracle
from normscale.lmo import dual_rms_to_rms

rng = make_rng(0)
G = rng.standard_normal((8, 6))

# every map returns a unit-norm direction in its own geometry; Newton-Schulz
# only approximates it, so rms_to_rms lands near 1 rather than on it
for kind in NormKind:
    U = dual(G, kind)
    print(f"{kind.value:>10}: norm of dual = {op_norm(U, kind, max_iter=10_000):.6f}, "
          f"<G, U> = {np.sum(G * U):.3f}")

# hidden layers use Newton-Schulz instead of an exact SVD
S_in = svd_oracle(G)[1]
S_ns = svd_oracle(newton_schulz(G))[1]
print("input singular values  ", np.round(S_in, 3))
print("after Newton-Schulz    ", np.round(S_ns, 3))

# the exact polar factor puts every singular value at sqrt(d_out / d_in)
print("exact dual singular values", np.round(svd_oracle(dual_rms_to_rms(G, exact=True))[1], 6))
