"""
Distributed optimizer steps on simulated ranks
==============================================

Ranks are threads exchanging serialized frames. The replicated mode gives
each rank ownership of some parameters and all-gathers the updates; the
sharded mode rebuilds each matrix on its owner with all-to-all. Both
reproduce the single-process step.
"""

import math

import numpy as np

from normscale.disco import DiscoSimulator
from normscale.linalg import make_rng
from normscale.model import ModelConfig, build_model, loss_and_grads, param_groups
from normscale.norms import NormKind
from normscale.scion import ScionState, scion_step

cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, n_kv_heads=2, d_head=8, vocab_size=31, context_len=8)
params = build_model(cfg, make_rng(0))
groups = param_groups(params)
tokens = make_rng(1).integers(0, cfg.vocab_size, size=(10, 4, cfg.context_len))


def make_state():
    return ScionState(lr=0.05, momentum=0.9)


ref, state = params, make_state()
for t in range(10):
    ref = scion_step(ref, loss_and_grads(ref, cfg, tokens[t])[1], state, groups, 0.05)

P = len(params)
P_hidden = sum(g.norm is NormKind.RMS_TO_RMS for g in groups.values())
for mode in ("ddp", "fsdp"):
    for M in (2, 3, 8):
        sim = DiscoSimulator(M, mode, make_state, groups)
        p = params
        for t in range(10):
            p = sim.step(p, loss_and_grads(p, cfg, tokens[t])[1], 0.05)
        err = max(np.abs(p[k] - ref[k]).max() for k in ref)
        # the replicated mode also runs a cheap replica-consistency check, counted separately
        op, expected = ("all_gather", math.ceil(P / M)) if mode == "ddp" else ("all_to_all", 2 * math.ceil(P_hidden / M))
        print(f"{mode:>4} M={M}: max |diff| = {err:.1e}, {op} per step = {sim.counts[op] // 10} (expected {expected})")
