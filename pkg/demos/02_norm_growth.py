"""
Output-layer norm during training
=================================

Trains the desk transformer at three learning rates on a synthetic byte
corpus and prints how the output layer's RMS->inf norm grows with tokens.
Larger learning rates reach larger norms.
"""

import math
import tempfile
from pathlib import Path

from normscale.harness import config_from_dict, run_training
from normscale.harness.config import with_run
from normscale.harness.data import write_synthetic_corpus

tmp = Path(tempfile.mkdtemp())
corpus = write_synthetic_corpus(tmp / "corpus.txt", 200_000, seed=0)

cfg = config_from_dict({
    "model": {"d_model": 32, "n_layers": 2, "n_heads": 2, "n_kv_heads": 2, "d_head": 16},
    "data": {"corpus": str(corpus), "context": 64},
    "train": {"batch_size": 8, "seed": 30, "max_tokens": 2**15},
    "logging": {"eval_every": 2**12},
})

for eta in (2.0**-4, 2.0**-3, 2.0**-2):
    res = run_training(with_run(cfg, eta=eta), f"eta{eta}")
    norms = [ln.norms["unembed"]["rms_to_inf"] for ln in res.lines]
    print(f"eta = 2^{math.log2(eta):.0f}: loss {res.lines[0].raw_loss:.3f} -> {res.lines[-1].raw_loss:.3f}")
    print("   output norm", " ".join(f"{n:6.2f}" for n in norms))
