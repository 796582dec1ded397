"""Induced operator norms assigned by Scion to input, hidden and output layers."""

import enum

import numpy as np

from .linalg import spectral_norm, svd_oracle


class NormKind(enum.Enum):
    ONE_TO_RMS = "one_to_rms"
    RMS_TO_RMS = "rms_to_rms"
    RMS_TO_INF = "rms_to_inf"


def _as_matrix(W):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ValueError(f"expected a nonempty 2-D matrix, got shape {W.shape}")
    return W


def op_norm_one_to_rms(W) -> float:
    """Largest column RMS norm."""
    W = _as_matrix(W)
    return float(np.sqrt(np.max(np.mean(W * W, axis=0))))


def op_norm_rms_to_rms(W, tol: float = 1e-6, max_iter: int = 100) -> float:
    W = _as_matrix(W)
    d_out, d_in = W.shape
    return float(np.sqrt(d_in / d_out) * spectral_norm(W, tol=tol, max_iter=max_iter))


def op_norm_rms_to_inf(W) -> float:
    """``d_in`` times the largest row RMS norm."""
    W = _as_matrix(W)
    return float(W.shape[1] * np.sqrt(np.max(np.mean(W * W, axis=1))))


def op_norm(W, kind: NormKind, **kwargs) -> float:
    kind = NormKind(kind)
    if kind is NormKind.ONE_TO_RMS:
        return op_norm_one_to_rms(W)
    if kind is NormKind.RMS_TO_RMS:
        return op_norm_rms_to_rms(W, **kwargs)
    return op_norm_rms_to_inf(W)


# Vector norms used by the brute-force oracle. "one" is the plain l1 norm.
def _vec_norm(x, space):
    d = x.shape[-1]
    if space == "one":
        return np.sum(np.abs(x), axis=-1)
    if space == "rms":
        return np.linalg.norm(x, axis=-1) / np.sqrt(d)
    if space == "inf":
        return np.max(np.abs(x), axis=-1)
    raise ValueError(f"unknown vector space {space!r}")


_SPACES = {
    NormKind.ONE_TO_RMS: ("one", "rms"),
    NormKind.RMS_TO_RMS: ("rms", "rms"),
    NormKind.RMS_TO_INF: ("rms", "inf"),
}


def induced_norm_bruteforce(W, alpha, beta=None, samples: int = 10_000, seed: int = 0) -> float:
    """Lower bound on ``max ||Wx||_beta / ||x||_alpha`` from explicit probes.

    ``alpha``/``beta`` are vector spaces (``"one"``, ``"rms"``, ``"inf"``); a
    ``NormKind`` may be passed as ``alpha`` to select both. Probes are random
    Gaussian and sign vectors plus structured candidates: signed basis vectors,
    the top right singular vector, and normalized rows. Test use only.
    """
    if isinstance(alpha, NormKind):
        alpha, beta = _SPACES[alpha]
    W = _as_matrix(W)
    d_out, d_in = W.shape
    if max(d_out, d_in) > 16:
        raise ValueError("brute-force oracle is restricted to 16x16")
    if samples < 10_000:
        raise ValueError("need at least 10^4 probes")
    rng = np.random.default_rng(seed)
    probes = [
        rng.standard_normal((samples // 2, d_in)),
        rng.choice([-1.0, 1.0], size=(samples - samples // 2, d_in)),
        np.eye(d_in),
        -np.eye(d_in),
        svd_oracle(W)[2][:, :1].T,
    ]
    nonzero_rows = W[np.any(W != 0, axis=1)]
    if len(nonzero_rows):
        probes.append(nonzero_rows / np.linalg.norm(nonzero_rows, axis=1, keepdims=True))
    X = np.concatenate(probes)
    X = X[_vec_norm(X, alpha) > 0]
    ratios = _vec_norm(X @ W.T, beta) / _vec_norm(X, alpha)
    return float(ratios.max())
