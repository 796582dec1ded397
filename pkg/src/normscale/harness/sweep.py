"""Grid sweeps over (eta, B, seed, layout) with a per-horizon summary table.

Every grid point is one constant-LR run to the largest horizon; shorter
horizons are read off the same run at their evaluation points. Runs log to
``<out>/runs`` and the summary lands in ``<out>/summary.csv``.
"""

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, config_to_dict, with_run
from .logs import read_log
from .train import run_training

SUMMARY_FIXED = ("run_id", "layout", "eta", "batch_size", "seed", "lr_input", "lr_hidden", "lr_output",
                 "horizon", "status", "step", "tokens", "raw_loss")


@dataclass(frozen=True)
class SweepPoint:
    run_id: str
    eta: float
    batch_size: int
    seed: int
    layout: int
    lr_scales: dict


def default_seed_policy(cfg: RunConfig, eta: float, batch_size: int, index: int):
    """Seeds to run at one (eta, B) grid point; every point gets ``sweep.seeds``."""
    return cfg.sweep.seeds


def run_id_for(eta: float, batch_size: int, seed: int, layout: int) -> str:
    return f"L{layout}_B{batch_size}_eta{math.log2(eta):+.2f}_s{seed}"


def sweep_points(cfg: RunConfig, seed_policy=default_seed_policy) -> list:
    points = []
    grid = itertools.product(enumerate(cfg.sweep.layouts), cfg.sweep.batch_sizes, sorted(cfg.sweep.etas))
    for index, ((li, scales), B, eta) in enumerate(grid):
        for seed in seed_policy(cfg, eta, B, index):
            points.append(SweepPoint(run_id_for(eta, B, seed, li), eta, B, seed, li, dict(scales)))
    ids = [p.run_id for p in points]
    if len(set(ids)) != len(ids):
        raise ValueError("seed policy produced duplicate runs")
    return points


def _run_one(cfg: RunConfig, point: SweepPoint, runs_dir: str):
    run_cfg = with_run(cfg, eta=point.eta, batch_size=point.batch_size, seed=point.seed,
                       lr_scales=point.lr_scales, max_tokens=max(cfg.sweep.horizons))
    try:
        run_training(run_cfg, point.run_id, runs_dir, extra_evals=cfg.sweep.horizons)
        return point.run_id, None
    except Exception as exc:  # recorded, the sweep carries on
        return point.run_id, f"{type(exc).__name__}: {exc}"


def _summary_rows(cfg: RunConfig, points, runs_dir: Path, failures: dict):
    norm_cols = None
    rows = []
    for p in points:
        log_path = runs_dir / f"{p.run_id}.jsonl"
        lines = read_log(log_path) if log_path.exists() else []
        if norm_cols is None and lines:
            norm_cols = sorted(f"norm:{name}:{kind}" for name, d in lines[0].norms.items() for kind in d)
        for D in sorted(cfg.sweep.horizons):
            hit = next((ln for ln in lines if ln.tokens >= D), None)
            row = {
                "run_id": p.run_id, "layout": p.layout, "eta": repr(p.eta), "batch_size": p.batch_size,
                "seed": p.seed, "lr_input": repr(float(p.lr_scales["input"])),
                "lr_hidden": repr(float(p.lr_scales["hidden"])), "lr_output": repr(float(p.lr_scales["output"])),
                "horizon": D, "status": "failed" if p.run_id in failures else "done",
                "step": "", "tokens": "", "raw_loss": "",
            }
            if hit is not None:
                row.update(step=hit.step, tokens=hit.tokens, raw_loss=repr(hit.raw_loss))
                for name, d in hit.norms.items():
                    for kind, v in d.items():
                        row[f"norm:{name}:{kind}"] = repr(v)
            rows.append(row)
    return rows, norm_cols or []


def write_summary(path, rows, norm_cols):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(SUMMARY_FIXED) + norm_cols, restval="", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


@dataclass
class SweepResult:
    out_dir: Path
    runs_dir: Path
    summary: Path
    run_ids: list
    failures: dict


def run_sweep(cfg: RunConfig, out_dir, workers: int | None = None, seed_policy=default_seed_policy) -> SweepResult:
    """Run the full grid and write ``summary.csv`` with one row per (run, horizon).

    ``workers > 1`` runs grid points in separate processes. Failed runs are
    recorded in the summary and in ``sweep.json``; they do not stop the sweep.
    Wall-clock times stay in the JSONL logs only, so the summary is
    byte-identical across reruns.
    """
    out = Path(out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    points = sweep_points(cfg, seed_policy)
    workers = workers or cfg.sweep.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, itertools.repeat(cfg), points, itertools.repeat(str(runs_dir))))
    else:
        results = [_run_one(cfg, p, str(runs_dir)) for p in points]
    failures = {rid: err for rid, err in results if err is not None}

    rows, norm_cols = _summary_rows(cfg, points, runs_dir, failures)
    summary = out / "summary.csv"
    write_summary(summary, rows, norm_cols)
    manifest = {
        "config": config_to_dict(cfg),
        "horizons": sorted(cfg.sweep.horizons),
        "runs": [p.run_id for p in points],
        "failures": failures,
    }
    (out / "sweep.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return SweepResult(out, runs_dir, summary, [p.run_id for p in points], failures)
