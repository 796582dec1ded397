"""Reports over completed run logs: CSV tables plus optional SVG plots.

Modes:

``norm-scan``
    For each (layout, B, D) cell, the loss-vs-output-norm scan across
    learning rates, the six-variant fit ensemble and its spread.
``lr-bs``
    Joint regression of the optimal learning rate on batch size and
    horizon, plus the set of runs that reach a target norm band.
``power-law``
    Optimal batch size per horizon and its power-law fit.
``layout``
    Runs ranked by final loss with the top decile flagged.
"""

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..analysis import (DEFAULT_BAND, HEURISTIC_SLOPES, FitError, NormScanPoint, NormTrajectory,
                        fit_power_law, fit_variant_ensemble, norm_reach_set, regress_lr_bs_horizon,
                        smooth_losses, smoothing_gate)
from .logs import LogSchemaError, read_runs

MODES = ("norm-scan", "lr-bs", "power-law", "layout")
TRACKED = ("unembed", "rms_to_inf")
# default gate (B <= 128, D >= 2^33) with the horizon scaled down by 2^15 for desk-size runs
DESK_GATE = (128, 2**18)

NORM_SCAN_COLUMNS = ("layout", "batch_size", "horizon", "variant", "ok", "a", "b", "c", "log2_norm", "loss",
                     "eta", "log2_eta", "n_used", "n_points", "init_loss")
LR_BS_COLUMNS = ("fit", "term", "value", "stderr", "n_points", "note")
REACH_COLUMNS = ("run_id", "eta", "batch_size", "d_first", "excluded_reason")
POWER_LAW_COLUMNS = ("layout", "horizon", "b_star", "loss_star", "note")
LAYOUT_COLUMNS = ("rank", "run_id", "eta", "batch_size", "seed", "lr_input", "lr_hidden", "lr_output",
                  "horizon", "loss", "top_decile")


@dataclass
class Run:
    meta: dict
    lines: list

    @property
    def layout(self) -> str:
        s = self.meta["lr_scales"]
        return f"{s['input']:g}:{s['hidden']:g}:{s['output']:g}"

    @property
    def init_loss(self) -> float | None:
        first = self.lines[0] if self.lines else None
        return first.raw_loss if first is not None and first.tokens == 0 else None

    def evals(self):
        return [ln for ln in self.lines if ln.tokens > 0]


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def load_runs(logs_dir) -> list:
    runs = [Run(meta, lines) for meta, lines in read_runs(logs_dir)]
    if not any(r.lines for r in runs):
        raise LogSchemaError(f"{logs_dir}: runs have no log lines")
    return runs


def default_horizons(logs_dir, runs) -> list:
    """Horizons from the sweep manifest next to the logs, else powers of two logged by every run."""
    manifest = Path(logs_dir).parent / "sweep.json"
    if manifest.exists():
        return json.loads(manifest.read_text())["horizons"]
    common = None
    for r in runs:
        toks = {ln.tokens for ln in r.evals()}
        common = toks if common is None else common & toks
    return sorted(t for t in common or () if t & (t - 1) == 0)


def scan_points(runs, horizon, gate=DESK_GATE, tracked=TRACKED) -> list:
    """One ``NormScanPoint`` per run at the first evaluation reaching ``horizon``."""
    points = []
    for r in runs:
        ev = r.evals()
        idx = next((i for i, ln in enumerate(ev) if ln.tokens >= horizon), None)
        if idx is None:
            continue
        ln = ev[idx]
        norm = ln.norms[tracked[0]][tracked[1]]
        if not (math.isfinite(ln.raw_loss) and norm > 0):
            continue
        sm = se = None
        if len(ev) >= 3 and smoothing_gate(r.meta["batch_size"], horizon, *gate):
            mean, stderr = smooth_losses([x.raw_loss for x in ev])
            sm, se = float(mean[idx]), float(stderr[idx])
        points.append(NormScanPoint(r.meta["eta"], norm, ln.raw_loss, sm, se))
    return points


def _cells(runs):
    cells = defaultdict(list)
    for r in runs:
        cells[(r.layout, r.meta["batch_size"])].append(r)
    return dict(sorted(cells.items()))


def norm_scan(runs, horizons, gate=DESK_GATE, n_points=7):
    """Ensemble fits for every (layout, B, D) cell; returns ``(rows, cells)``."""
    rows, cells = [], []
    for (layout, B), group in _cells(runs).items():
        inits = [r.init_loss for r in group if r.init_loss is not None]
        init_loss = float(np.mean(inits)) if inits else None
        for D in horizons:
            pts = scan_points(group, D, gate)
            base = {"layout": layout, "batch_size": B, "horizon": D, "n_points": len(pts), "init_loss": init_loss}
            if len(pts) < 3 or init_loss is None:
                rows.append({**base, "variant": "none", "ok": False})
                continue
            try:
                ens = fit_variant_ensemble(pts, init_loss, n_points)
            except FitError as exc:
                rows.append({**base, "variant": f"error: {exc}", "ok": False})
                continue
            cells.append((layout, B, D, pts, ens))
            for v in ens.variants:
                a, b, c = v.coeffs if v.coeffs else (None, None, None)
                rows.append({**base, "variant": v.variant, "ok": v.ok, "a": a, "b": b, "c": c,
                             "log2_norm": v.log2_norm if v.ok else None, "loss": v.loss if v.ok else None,
                             "eta": v.eta if v.ok else None, "log2_eta": v.log2_eta if v.ok else None,
                             "n_used": v.n_used})
            nom = ens.nominal
            rows.append({**base, "variant": "nominal:" + nom.variant, "ok": True, "log2_norm": nom.log2_norm,
                         "loss": nom.loss, "eta": nom.eta, "log2_eta": nom.log2_eta})
            rows.append({**base, "variant": "spread", "ok": True, "log2_norm": ens.spread["log2_norm"],
                         "loss": ens.spread["loss"], "log2_eta": ens.spread["log2_eta"]})
    return rows, cells


def lr_bs(runs, horizons, gate=DESK_GATE, band=DEFAULT_BAND, tracked=TRACKED):
    _, cells = norm_scan(runs, horizons, gate)
    rows = []
    optima = [(ens.nominal.eta, B, D) for _, B, D, _, ens in cells]
    for name, slopes in (("free", None), ("heuristic", HEURISTIC_SLOPES)):
        try:
            if not optima:
                raise FitError("no cell produced an optimum")
            eta, B, D = map(np.array, zip(*optima))
            reg = regress_lr_bs_horizon(eta, B, D, fixed_slopes=slopes)
        except FitError as exc:
            rows.append({"fit": name, "term": "", "n_points": len(optima), "note": str(exc)})
            continue
        for term, v, se in zip(("alpha", "beta", "gamma"), reg.coeffs, reg.stderr):
            rows.append({"fit": name, "term": term, "value": float(v), "stderr": float(se),
                         "n_points": len(optima), "note": "fixed" if slopes and term != "gamma" else ""})
    trajectories = [
        NormTrajectory(r.meta["run_id"], r.meta["eta"], r.meta["batch_size"],
                       np.array([ln.tokens for ln in r.evals()]),
                       np.array([ln.norms[tracked[0]][tracked[1]] for ln in r.evals()]))
        for r in runs if r.evals()
    ]
    reach = norm_reach_set(trajectories, band)
    excluded = dict(reach.excluded)
    kept = iter(reach.points)
    reach_rows = []
    for t in trajectories:
        if t.run_id in excluded:
            reach_rows.append({"run_id": t.run_id, "eta": t.eta, "batch_size": t.batch_size,
                               "excluded_reason": excluded[t.run_id]})
        else:
            reach_rows.append({"run_id": t.run_id, "eta": t.eta, "batch_size": t.batch_size,
                               "d_first": next(kept)[2]})
    return rows, reach_rows, cells


def power_law(runs, horizons, gate=DESK_GATE):
    _, cells = norm_scan(runs, horizons, gate)
    best = {}
    for layout, B, D, _, ens in cells:
        loss = ens.nominal.loss
        key = (layout, D)
        if key not in best or loss < best[key][1]:
            best[key] = (B, loss)
    rows = [{"layout": k[0], "horizon": k[1], "b_star": v[0], "loss_star": v[1]} for k, v in sorted(best.items())]
    fits = {}
    for layout in sorted({k[0] for k in best}):
        pts = sorted((D, b) for (lay, D), (b, _) in best.items() if lay == layout)
        try:
            reg = fit_power_law(*zip(*pts)) if len(pts) >= 3 else None
            if reg is None:
                raise FitError("need at least 3 horizons")
            fits[layout] = reg
            rows.append({"layout": layout, "horizon": "fit", "b_star": reg.coeffs[0], "loss_star": None,
                         "note": f"B* = a D^b; b={reg.coeffs[1]!r} stderr={reg.stderr[1]!r}"})
        except FitError as exc:
            rows.append({"layout": layout, "horizon": "fit", "note": str(exc)})
    return rows, best, fits


def layout_ranking(runs, horizon=None):
    """Rank runs by loss at ``horizon`` (default: each run's last evaluation) and flag the top decile."""
    scored = []
    for r in runs:
        ev = r.evals()
        hit = ev[-1] if horizon is None else next((ln for ln in ev if ln.tokens >= horizon), None)
        if hit is None or not math.isfinite(hit.raw_loss):
            continue
        scored.append((hit.raw_loss, r.meta["run_id"], r, hit))
    scored.sort(key=lambda t: (t[0], t[1]))
    n_top = math.ceil(0.1 * len(scored))
    rows = []
    for rank, (loss, rid, r, hit) in enumerate(scored, start=1):
        s = r.meta["lr_scales"]
        rows.append({"rank": rank, "run_id": rid, "eta": r.meta["eta"], "batch_size": r.meta["batch_size"],
                     "seed": r.meta["seed"], "lr_input": float(s["input"]), "lr_hidden": float(s["hidden"]),
                     "lr_output": float(s["output"]), "horizon": hit.tokens, "loss": loss,
                     "top_decile": rank <= n_top})
    return rows


# -- plotting ------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "normscale"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()


def _plot_norm_scan(cells, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for layout, B, D, pts, ens in cells:
        x = np.log2([p.norm for p in pts])
        y = [p.loss for p in pts]
        line, = ax.plot(x, y, "o", label=f"B={B} D=2^{math.log2(D):g} [{layout}]")
        fit = next(v for v in ens.variants if v.variant == "fit+constrained")
        if fit.ok:
            a, b, c = fit.coeffs
            xs = np.linspace(x.min() - 0.3, x.max() + 0.3, 100) * math.log(2)
            ax.plot(xs / math.log(2), np.exp(a * xs * xs + b * xs + c), "-", color=line.get_color(), lw=1)
    ax.set_xlabel("log2 ||W_out||  (RMS->inf)")
    ax.set_ylabel("train loss")
    ax.legend(fontsize=6)
    _save(fig, path)


def _plot_lr_bs(cells, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    by_b = defaultdict(list)
    for _, B, D, _, ens in cells:
        by_b[B].append((math.log2(D), ens.nominal.log2_eta))
    for B, pts in sorted(by_b.items()):
        pts.sort()
        ax.plot(*zip(*pts), "o-", label=f"B={B}")
    ax.set_xlabel("log2 D (tokens)")
    ax.set_ylabel("log2 eta*")
    ax.legend(fontsize=7)
    _save(fig, path)


def _plot_power_law(best, fits, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for layout in sorted({k[0] for k in best}):
        pts = sorted((D, b) for (lay, D), (b, _) in best.items() if lay == layout)
        D, Bs = map(np.array, zip(*pts))
        ax.plot(np.log2(D), np.log2(Bs), "o", label=f"[{layout}]")
        if layout in fits:
            a, b = fits[layout].coeffs
            ax.plot(np.log2(D), np.log2(a) + b * np.log2(D), "-", lw=1)
    ax.set_xlabel("log2 D (tokens)")
    ax.set_ylabel("log2 B*")
    ax.legend(fontsize=7)
    _save(fig, path)


def _plot_layout(rows, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = ["tab:red" if r["top_decile"] else "tab:gray" for r in rows]
    ax.scatter([r["rank"] for r in rows], [r["loss"] for r in rows], c=colors, s=12)
    ax.set_xlabel("rank")
    ax.set_ylabel("loss")
    _save(fig, path)


def emit_report(logs_dir, mode: str, out_dir, plots: bool = True, horizons=None,
                gate=DESK_GATE, band=DEFAULT_BAND) -> list:
    """Write the CSV (and SVG when ``plots``) for ``mode``; returns the written paths."""
    if mode not in MODES:
        raise ValueError(f"unknown report mode {mode!r}; choose from {MODES}")
    runs = load_runs(logs_dir)
    horizons = sorted(horizons or default_horizons(logs_dir, runs))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    stem = mode.replace("-", "_")
    if mode == "norm-scan":
        rows, cells = norm_scan(runs, horizons, gate)
        _write_csv(out / f"{stem}.csv", NORM_SCAN_COLUMNS, rows)
        written.append(out / f"{stem}.csv")
        if plots and cells:
            _plot_norm_scan(cells, out / f"{stem}.svg")
            written.append(out / f"{stem}.svg")
    elif mode == "lr-bs":
        rows, reach_rows, cells = lr_bs(runs, horizons, gate, band)
        _write_csv(out / f"{stem}.csv", LR_BS_COLUMNS, rows)
        _write_csv(out / "reach_set.csv", REACH_COLUMNS, reach_rows)
        written += [out / f"{stem}.csv", out / "reach_set.csv"]
        if plots and cells:
            _plot_lr_bs(cells, out / f"{stem}.svg")
            written.append(out / f"{stem}.svg")
    elif mode == "power-law":
        rows, best, fits = power_law(runs, horizons, gate)
        _write_csv(out / f"{stem}.csv", POWER_LAW_COLUMNS, rows)
        written.append(out / f"{stem}.csv")
        if plots and best:
            _plot_power_law(best, fits, out / f"{stem}.svg")
            written.append(out / f"{stem}.svg")
    else:
        rows = layout_ranking(runs, max(horizons) if horizons else None)
        _write_csv(out / f"{stem}.csv", LAYOUT_COLUMNS, rows)
        written.append(out / f"{stem}.csv")
        if plots and rows:
            _plot_layout(rows, out / f"{stem}.svg")
            written.append(out / f"{stem}.svg")
    return written
