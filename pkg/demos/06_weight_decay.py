"""
Weight decay as a norm constraint
=================================

With decoupled weight decay lambda, a stream of gradients pointing the same
way drives the layer's assigned norm to 1 / lambda.
"""

from normscale import make_rng, op_norm, scion_step
from normscale.scion import DEFAULT_NORMS, LayerGroup, ParamGroup, ScionState

rng = make_rng(0)
G = rng.standard_normal((16, 12))
for lg in (LayerGroup.OUTPUT, LayerGroup.INPUT):
    kind = DEFAULT_NORMS[lg]
    for wd in (0.1, 0.05):
        W = {"w": 0.1 * rng.standard_normal(G.shape)}
        groups = {"w": ParamGroup("w", lg, kind)}
        state = ScionState(lr=0.0625, weight_decay=wd)
        trace = []
        for t in range(2001):
            if t % 500 == 0:
                trace.append(op_norm(W["w"], kind))
            W = scion_step(W, {"w": (0.5 + rng.random()) * G}, state, groups, state.lr)
        print(f"{lg.value:>6} lambda={wd}: norm", " -> ".join(f"{n:.2f}" for n in trace), f"(1/lambda = {1 / wd:g})")
