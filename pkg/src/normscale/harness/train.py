"""Single training run: constant (or tail-decayed) LR Scion on the desk model."""

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..linalg import ConvergenceError, make_rng
from ..model import (build_model, forward_loss, load_checkpoint, loss_and_grads, param_groups,
                     save_checkpoint)
from ..norms import NormKind, op_norm
from ..scion import LayerGroup, lr_at, scion_step
from .config import RunConfig
from .data import ingest_corpus
from .logs import LogLine, serialize_line, write_meta


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_checkpoint):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainingResult:
    lines: list
    checkpoint: Path | None
    params: dict


TRACKED_NORMS = {
    "embed": (NormKind.ONE_TO_RMS, NormKind.RMS_TO_RMS),
    "unembed": (NormKind.RMS_TO_INF, NormKind.RMS_TO_RMS),
}


def measure_norms(params) -> dict:
    """Assigned operator norm of every parameter, plus alternatives for the embeddings."""
    out = {}
    for name, W in params.items():
        kinds = TRACKED_NORMS.get(name, (NormKind.RMS_TO_RMS,))
        entry = {}
        for kind in kinds:
            kwargs = {"max_iter": 1000} if kind is NormKind.RMS_TO_RMS else {}
            try:
                entry[kind.value] = op_norm(W, kind, **kwargs)
            except ConvergenceError as exc:
                entry[kind.value] = exc.estimate
        out[name] = entry
    return out


def eval_points(cfg: RunConfig, tokens_per_step: int, extra=()) -> list:
    """Token counts at which to log; evaluation happens at the first step reaching each."""
    T = cfg.train.max_tokens
    if cfg.logging.eval_every:
        pts = set(range(cfg.logging.eval_every, T + 1, cfg.logging.eval_every))
    else:
        pts = {2**k for k in range(int(math.log2(tokens_per_step)), int(math.log2(T)) + 1)}
    pts |= {int(x) for x in extra if 0 < x <= T}
    pts.add(T)
    return sorted(p for p in pts if p >= tokens_per_step)


def group_lrs(cfg: RunConfig, lr: float) -> dict:
    scales = cfg.optimizer.lr_scales
    return {g.value: lr * scales.get(g.value, 1.0) for g in LayerGroup}


def run_training(cfg: RunConfig, run_id: str, out_dir=None, resume=None, extra_evals=()) -> TrainingResult:
    """Train one model and log loss, operator norms and LR at each eval point.

    Logs go to ``out_dir/<run_id>.jsonl`` (when ``out_dir`` is given). An
    initial record at zero tokens captures the loss and norms at
    initialization. ``resume`` names a checkpoint whose parameters, momentum
    buffers and token counter seed the run, e.g. for a decay leg.
    """
    B, T = cfg.train.batch_size, cfg.data.context
    tokens_per_step = B * T
    windows = ingest_corpus(cfg.data.corpus, T, cfg.data.shuffle_seed)
    windows.require(cfg.train.max_tokens)
    schedule = cfg.optimizer.schedule_spec()
    if schedule.total_horizon is not None and cfg.train.max_tokens > schedule.total_horizon:
        raise ValueError("train.max_tokens exceeds the schedule's total horizon")

    params = build_model(cfg.model, make_rng(cfg.train.seed))
    state = cfg.optimizer.make_state()
    groups = param_groups(params, cfg.optimizer.lr_scales)
    step = tokens = 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        dtype = np.dtype(cfg.model.dtype)
        params = {k: tensors["param/" + k].astype(dtype) for k in params}
        state.buffers = {k[len("momentum/"):]: v.astype(dtype) for k, v in tensors.items()
                         if k.startswith("momentum/")}
        step, tokens = meta["step"], meta["tokens"]

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_meta(out / f"{run_id}.json", {
            "run_id": run_id, "eta": cfg.optimizer.base_lr, "batch_size": B,
            "seed": cfg.train.seed, "lr_scales": dict(cfg.optimizer.lr_scales),
            "context": T, "vocab_size": cfg.model.vocab_size, "status": "running",
            "resumed_from": str(resume) if resume else None,
        })
        log_file = open(out / f"{run_id}.jsonl", "w")

    def save(tag_tokens=None):
        if out is None:
            return None
        name = f"{run_id}.ckpt" if tag_tokens is None else f"{run_id}@{tag_tokens}.ckpt"
        tensors = {"param/" + k: v for k, v in params.items()}
        tensors.update({"momentum/" + k: v for k, v in state.buffers.items()})
        save_checkpoint(out / name, tensors, {"run_id": run_id, "step": step, "tokens": tokens})
        return out / name

    lines = []

    def emit(loss, lr, wall_ms):
        line = LogLine(run_id, step, tokens, float(loss), measure_norms(params), group_lrs(cfg, lr), wall_ms)
        lines.append(line)
        if log_file:
            log_file.write(serialize_line(line) + "\n")
            log_file.flush()

    evals = [p for p in eval_points(cfg, tokens_per_step, extra_evals) if p > tokens]
    ckpt_at = sorted(int(x) for x in cfg.logging.checkpoint_at if x > tokens)
    last_ckpt = Path(resume) if resume else None
    t0 = time.perf_counter()
    status = "failed"
    try:
        if step == 0:
            init_loss, _ = forward_loss(params, cfg.model, windows.batch(0, B))
            emit(init_loss, lr_at(schedule, 0, cfg.optimizer.base_lr), 0.0)
        while tokens < cfg.train.max_tokens:
            loss, grads = loss_and_grads(params, cfg.model, windows.batch(step, B))
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"{run_id}: non-finite loss at step {step}; last good checkpoint: {last_ckpt}",
                    last_ckpt,
                )
            lr = lr_at(schedule, tokens, cfg.optimizer.base_lr)
            try:
                params = scion_step(params, grads, state, groups, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{run_id}: {exc}; last good checkpoint: {last_ckpt}", last_ckpt) from None
            step += 1
            tokens += tokens_per_step
            if evals and tokens >= evals[0]:
                while evals and tokens >= evals[0]:
                    evals.pop(0)
                emit(loss, lr, (time.perf_counter() - t0) * 1000.0)
            if ckpt_at and tokens >= ckpt_at[0]:
                while ckpt_at and tokens >= ckpt_at[0]:
                    ckpt_at.pop(0)
                last_ckpt = save(tokens)
        final = save()
        status = "done"
    except TrainingDiverged:
        status = "diverged"
        raise
    finally:
        if log_file:
            log_file.close()
            meta_path = out / f"{run_id}.json"
            meta = json.loads(meta_path.read_text())
            meta["status"] = status
            write_meta(meta_path, meta)
    return TrainingResult(lines, final, params)
