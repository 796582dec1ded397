"""Duality maps (linear-minimization oracles) for the three Scion norms.

Each map sends a gradient ``G`` of shape ``(d_out, d_in)`` to the unit-norm
steepest-descent direction under its assigned operator norm. Rows or columns
whose RMS falls at or below ``eps`` map to zero instead of being divided.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import svd_oracle
from .norms import NormKind


@dataclass(frozen=True)
class NewtonSchulzConfig:
    n_iter: int = 5
    coeffs: tuple = (3.4445, -4.7750, 2.0315)
    eps: float = 1e-20

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        if len(self.coeffs) != 3:
            raise ValueError("coeffs must be a triple (a, b, c)")


DEFAULT_NS = NewtonSchulzConfig()


def dual_one_to_rms(G, eps: float = 1e-20):
    G = np.asarray(G)
    if G.size == 0:
        return G.copy()
    rms = np.sqrt(np.mean(G * G, axis=0, keepdims=True))
    safe = np.where(rms > eps, rms, 1.0)
    return np.where(rms > eps, G / safe, 0.0).astype(G.dtype, copy=False)


def dual_rms_to_inf(G, eps: float = 1e-20):
    G = np.asarray(G)
    if G.size == 0:
        return G.copy()
    d_in = G.shape[1]
    rms = np.sqrt(np.mean(G * G, axis=1, keepdims=True))
    safe = np.where(rms > eps, rms, 1.0)
    return np.where(rms > eps, G / (d_in * safe), 0.0).astype(G.dtype, copy=False)


def newton_schulz(G, cfg: NewtonSchulzConfig = DEFAULT_NS):
    """Approximate polar factor ``U V^T`` with the quintic Newton-Schulz map.

    The input is first scaled by ``1 / (||G||_F + eps)`` so every singular
    value lies in ``[0, 1]``; each iteration applies
    ``X <- a X + b (X X^T) X + c (X X^T)^2 X`` which acts on singular values as
    the scalar polynomial ``a s + b s^3 + c s^5``.
    """
    G = np.asarray(G)
    if not np.all(np.isfinite(G)):
        raise ValueError("newton_schulz received non-finite input")
    a, b, c = cfg.coeffs
    tall = G.shape[0] > G.shape[1]
    X = G.T if tall else G
    X = X / (np.linalg.norm(X) + cfg.eps)
    for _ in range(cfg.n_iter):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return X.T if tall else X


def dual_rms_to_rms(G, cfg: NewtonSchulzConfig = DEFAULT_NS, exact: bool = False):
    """``sqrt(d_out/d_in) * U V^T``; ``exact`` uses the Jacobi SVD instead of Newton-Schulz."""
    G = np.asarray(G)
    d_out, d_in = G.shape
    scale = np.sqrt(d_out / d_in)
    if exact:
        U, S, V = svd_oracle(G)
        keep = S > S.max() * 1e-12
        return (scale * (U[:, keep] @ V[:, keep].T)).astype(G.dtype, copy=False)
    return (scale * newton_schulz(G, cfg)).astype(G.dtype, copy=False)


def dual(G, kind: NormKind, cfg: NewtonSchulzConfig = DEFAULT_NS):
    kind = NormKind(kind)
    if kind is NormKind.ONE_TO_RMS:
        return dual_one_to_rms(G, cfg.eps)
    if kind is NormKind.RMS_TO_RMS:
        return dual_rms_to_rms(G, cfg)
    return dual_rms_to_inf(G, cfg.eps)


def batched_lmo(G, kind: NormKind, cfg: NewtonSchulzConfig = DEFAULT_NS, transpose_experts: bool = False):
    """Apply ``dual`` independently to each ``(d_out, d_in)`` slice of an expert batch.

    With ``transpose_experts`` the input is laid out ``(experts, d_in, d_out)``;
    each slice is transposed before the map and transposed back afterwards.
    """
    G = np.asarray(G)
    if G.ndim != 3:
        raise ValueError(f"batched_lmo expects a rank-3 tensor, got shape {G.shape}")
    out = np.empty_like(G)
    for k in range(G.shape[0]):
        g = G[k].T if transpose_experts else G[k]
        u = dual(g, kind, cfg)
        out[k] = u.T if transpose_experts else u
    return out
