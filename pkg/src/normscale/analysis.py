"""Loss-vs-norm fitting and hyperparameter scaling-law regressions.

Fits run in natural-log space; extracted norms and learning rates are also
reported in log2 units (``log2(x) = ln(x) / ln 2``).
"""

import math
from dataclasses import dataclass, field

import numpy as np

LN2 = math.log(2.0)
DEFAULT_BAND = (6.8, 7.2)
HEURISTIC_SLOPES = (1.5, -1.0)


class FitError(ValueError):
    pass


@dataclass
class RunRecord:
    run_id: str
    eta: float
    batch_size: int
    tokens: int
    seed: int
    loss: float
    norms: dict = field(default_factory=dict)
    layer: str = "unembed"

    def __post_init__(self):
        if not math.isfinite(self.loss):
            raise ValueError(f"{self.run_id}: non-finite loss")
        if any(v <= 0 for v in self.norms.values()):
            raise ValueError(f"{self.run_id}: norms must be positive")


@dataclass
class NormScanPoint:
    """One learning-rate run of a norm scan at fixed ``(B, D)``."""

    eta: float
    norm: float
    loss: float
    smoothed_loss: float | None = None
    stderr: float | None = None


@dataclass
class FitResult:
    coeffs: tuple
    ok: bool
    log_norm: float = math.nan
    loss: float = math.nan
    eta: float = math.nan
    cov: np.ndarray | None = None
    variant: str = "fit"
    n_used: int = 0

    @property
    def norm(self) -> float:
        return math.exp(self.log_norm)

    @property
    def log2_norm(self) -> float:
        return self.log_norm / LN2

    @property
    def log2_eta(self) -> float:
        return math.log2(self.eta) if self.eta > 0 else math.nan


# -- loss smoothing ------------------------------------------------------------

def smoothing_gate(batch_size, tokens, max_batch: int = 128, min_tokens: float = 2**33) -> bool:
    """Smooth only small-batch runs at long horizons, where loss is locally linear in D."""
    return batch_size <= max_batch and tokens >= min_tokens


def smooth_losses(losses):
    """Three-point neighbour average of an evaluated loss series.

    Returns ``(mean, stderr)`` arrays. Interior points get the mean of
    themselves and both neighbours with stderr ``std(ddof=1) / sqrt(3)``;
    endpoints keep their raw loss and borrow the stderr of the nearest
    interior point.
    """
    y = np.asarray(losses, dtype=np.float64)
    if y.ndim != 1 or len(y) < 3:
        raise FitError("loss smoothing needs at least 3 evaluated points")
    window = np.stack([y[:-2], y[1:-1], y[2:]])
    mean = y.copy()
    stderr = np.empty_like(y)
    mean[1:-1] = window.mean(axis=0)
    stderr[1:-1] = window.std(axis=0, ddof=1) / math.sqrt(3.0)
    stderr[0] = stderr[1]
    stderr[-1] = stderr[-2]
    return mean, stderr


# -- parabola fit in log-log ---------------------------------------------------------

def _window(n, center, width):
    half = width // 2
    lo = max(0, center - half)
    hi = min(n, center - half + width)
    return lo, hi


def fit_loss_vs_norm(points, init_loss: float | None = None, n_points: int = 7,
                     constrain: bool = False, smoothed: bool = False) -> FitResult:
    """Weighted quadratic fit ``ln(loss) = a ln(norm)^2 + b ln(norm) + c``.

    Only the ``n_points`` points nearest (by index, sorted by norm) to the
    empirical minimum enter the fit, truncated at the ends of the scan. With
    ``constrain`` the intercept is pinned to ``ln(init_loss)``, i.e. the
    curve passes through the initial loss at unit norm. Weights are inverse
    stderr when ``smoothed`` and stderrs are present, uniform otherwise.
    A nonpositive curvature yields ``ok=False`` and no vertex.
    """
    pts = sorted(points, key=lambda p: p.norm)
    if len(pts) < 3:
        raise FitError("need at least 3 points to fit a parabola")
    if any(p.norm <= 0 for p in pts):
        raise FitError("norms must be positive")
    if constrain and (init_loss is None or init_loss <= 0):
        raise FitError("constrained fit needs a positive init_loss")
    loss = np.array([_loss_of(p, smoothed) for p in pts])
    lo, hi = _window(len(pts), int(np.argmin(loss)), n_points)
    used = pts[lo:hi]
    x = np.log([p.norm for p in used])
    y = np.log(loss[lo:hi])
    if smoothed and all(p.stderr for p in used):
        # stderr of loss maps to stderr of log-loss through d ln(L) = dL / L
        w = loss[lo:hi] / np.array([p.stderr for p in used])
    else:
        w = np.ones_like(x)

    if constrain:
        c = math.log(init_loss)
        A = np.column_stack([x * x, x])
        rhs = y - c
    else:
        A = np.column_stack([x * x, x, np.ones_like(x)])
        rhs = y
    if len(used) < A.shape[1]:
        raise FitError(f"only {len(used)} points in the fit window for {A.shape[1]} coefficients")
    Aw = A * w[:, None]
    sol, _, rank, _ = np.linalg.lstsq(Aw, rhs * w, rcond=None)
    if rank < A.shape[1]:
        raise FitError("degenerate design: norms do not span a parabola")
    dof = len(used) - A.shape[1]
    resid = (rhs - A @ sol) * w
    scale = float(resid @ resid) / dof if dof > 0 else 1.0
    cov = np.linalg.inv(Aw.T @ Aw) * scale
    a, b = sol[0], sol[1]
    c = math.log(init_loss) if constrain else sol[2]
    variant = "fit" + ("+smooth" if smoothed else "") + ("+constrained" if constrain else "")
    result = FitResult(coeffs=(float(a), float(b), float(c)), ok=a > 0, cov=cov,
                       variant=variant, n_used=len(used))
    if a > 0:
        x_star = -b / (2 * a)
        result.log_norm = float(x_star)
        result.loss = float(math.exp(c - b * b / (4 * a)))
        nearest = min(pts, key=lambda p: abs(math.log(p.norm) - x_star))
        result.eta = nearest.eta
    return result


def _loss_of(p, smoothed):
    if smoothed and p.smoothed_loss is not None:
        return p.smoothed_loss
    return p.loss


def empirical_optimum(points, smoothed: bool = False) -> FitResult:
    """Lowest-loss point of the scan, without any fit."""
    if not points:
        raise FitError("empty norm scan")
    best = min(points, key=lambda p: _loss_of(p, smoothed))
    return FitResult(coeffs=(), ok=True, log_norm=math.log(best.norm),
                     loss=_loss_of(best, smoothed), eta=best.eta,
                     variant="argmin" + ("+smooth" if smoothed else ""), n_used=1)


@dataclass
class Ensemble:
    variants: list
    spread: dict

    @property
    def nominal(self) -> FitResult:
        """The smoothed, constrained fit when it has a vertex, else the first usable variant."""
        for v in self.variants:
            if v.variant == "fit+smooth+constrained" and v.ok:
                return v
        return next(v for v in self.variants if v.ok)


def fit_variant_ensemble(points, init_loss: float, n_points: int = 7) -> Ensemble:
    """Six re-analyses of one norm scan; their spread is the systematic error bar.

    Variants: parabola fit with smoothing on/off and constraint on/off (4),
    plus the empirical argmin with smoothing on/off (2). Spreads are
    ``max - min`` over variants that produced an optimum, for log2 norm,
    loss and log2 learning rate.
    """
    variants = []
    for smoothed in (False, True):
        for constrain in (False, True):
            variants.append(fit_loss_vs_norm(points, init_loss, n_points, constrain, smoothed))
    for smoothed in (False, True):
        variants.append(empirical_optimum(points, smoothed))
    good = [v for v in variants if v.ok]
    spread = {}
    for key in ("log2_norm", "loss", "log2_eta"):
        vals = [getattr(v, key) for v in good]
        spread[key] = max(vals) - min(vals)
    return Ensemble(variants, spread)


# -- scaling-law regressions -----------------------------------------------------------

@dataclass
class Regression:
    coeffs: tuple
    stderr: tuple
    residuals: np.ndarray


def _ols(X, y):
    sol, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise FitError("rank-deficient design matrix")
    resid = y - X @ sol
    dof = len(y) - X.shape[1]
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = np.linalg.inv(X.T @ X) * sigma2
    return sol, np.sqrt(np.diag(cov)), resid


def regress_lr_bs_horizon(eta, batch, horizon, fixed_slopes=None) -> Regression:
    """``log2 eta = alpha log2 B + beta log2 D + gamma`` by OLS.

    With ``fixed_slopes=(alpha, beta)`` only the intercept is fitted.
    """
    y = np.log2(np.asarray(eta, dtype=np.float64))
    xb = np.log2(np.asarray(batch, dtype=np.float64))
    xd = np.log2(np.asarray(horizon, dtype=np.float64))
    if fixed_slopes is not None:
        alpha, beta = fixed_slopes
        r = y - alpha * xb - beta * xd
        gamma = float(r.mean())
        se = float(r.std(ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
        return Regression((alpha, beta, gamma), (0.0, 0.0, se), r - gamma)
    if len(y) < 4:
        raise FitError("need at least 4 optima")
    if len(np.unique(xb)) < 2 or len(np.unique(xd)) < 2:
        raise FitError("need at least two distinct batch sizes and horizons")
    X = np.column_stack([xb, xd, np.ones_like(xb)])
    sol, se, resid = _ols(X, y)
    return Regression(tuple(float(s) for s in sol), tuple(float(s) for s in se), resid)


def fit_power_law(horizon, optimum) -> Regression:
    """``B* = a D^b`` by OLS on log-log; coefficients are ``(a, b)``."""
    D = np.asarray(horizon, dtype=np.float64)
    Bs = np.asarray(optimum, dtype=np.float64)
    if len(D) < 3:
        raise FitError("need at least 3 points")
    if np.any(D <= 0) or np.any(Bs <= 0):
        raise FitError("power-law fit needs positive values")
    X = np.column_stack([np.log2(D), np.ones_like(D)])
    (b, log2_a), (se_b, se_log2_a), resid = _ols(X, np.log2(Bs))
    a = 2.0 ** log2_a
    return Regression((float(a), float(b)), (float(a * LN2 * se_log2_a), float(se_b)), resid)


def composed_lr_exponent(alpha: float, beta: float, b: float) -> float:
    """Exponent of ``eta*(D)`` once ``B*(D) ~ D^b`` is substituted into the joint fit."""
    return alpha * b + beta


@dataclass
class NormTrajectory:
    run_id: str
    eta: float
    batch_size: int
    tokens: np.ndarray
    norms: np.ndarray


@dataclass
class ReachResult:
    points: list
    excluded: list
    free: Regression | None
    heuristic: Regression | None


def first_entry(tokens, norms, band=DEFAULT_BAND):
    """Earliest evaluated horizon whose log2 norm lies inside ``band``, or a reason it never does."""
    log2n = np.log2(np.asarray(norms, dtype=np.float64))
    inside = (log2n >= band[0]) & (log2n <= band[1])
    if inside.any():
        return int(np.asarray(tokens)[np.argmax(inside)]), None
    if np.all(log2n < band[0]):
        return None, "never reached band"
    return None, "jumped over band between evaluations"


def norm_reach_set(runs, band=DEFAULT_BAND) -> ReachResult:
    """``(eta, B, D_first)`` for runs whose tracked norm enters ``band``, with free and heuristic fits."""
    points, excluded = [], []
    for run in runs:
        d_first, reason = first_entry(run.tokens, run.norms, band)
        if d_first is None:
            excluded.append((run.run_id, reason))
        else:
            points.append((run.eta, run.batch_size, d_first))
    free = heuristic = None
    if points:
        eta, B, D = map(np.array, zip(*points))
        heuristic = regress_lr_bs_horizon(eta, B, D, fixed_slopes=HEURISTIC_SLOPES)
        try:
            free = regress_lr_bs_horizon(eta, B, D)
        except FitError:
            free = None
    return ReachResult(points, excluded, free, heuristic)
