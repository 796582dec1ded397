"""Dense linear algebra helpers: RNG, initializers, RMS norm, spectral norm.

Matrices are plain ``numpy.ndarray`` objects laid out as ``(d_out, d_in)``.
"""

import numpy as np

# Counter-based generator, stable across platforms for a fixed numpy version.
RNG_ALGORITHM = "philox4x64-10"


class ConvergenceError(RuntimeError):
    """Raised when an iterative method fails to converge.

    The last iterate is kept on ``estimate`` so callers can still log it.
    """

    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def rms_vector_norm(x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("RMS norm of an empty vector is undefined")
    return float(np.linalg.norm(x) / np.sqrt(x.size))


def spectral_norm(W, tol: float = 1e-6, max_iter: int = 100) -> float:
    """Largest singular value of ``W`` by power iteration on ``W^T W``.

    Starts from the normalized all-ones vector so repeated calls (and norm
    logs) are reproducible. Convergence is declared when the relative change
    of the estimate drops below ``tol``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {W.shape}")
    if not np.any(W):
        raise ValueError("spectral norm power iteration needs a nonzero matrix")
    d_in = W.shape[1]
    v = np.full(d_in, 1.0 / np.sqrt(d_in))
    if not np.any(W @ v):
        # all-ones lies in the null space; restart from the heaviest column
        v = np.zeros(d_in)
        v[np.argmax(np.linalg.norm(W, axis=0))] = 1.0
    sigma = 0.0
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        nrm = np.linalg.norm(w)
        v = w / nrm
        new_sigma = float(np.linalg.norm(W @ v))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma
        sigma = new_sigma
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", sigma
    )


def svd_oracle(W, sweeps: int = 60, tol: float = 1e-15):
    """Thin SVD via one-sided Jacobi rotations, for test-scale matrices.

    Returns ``(U, S, V)`` with ``W = U @ diag(S) @ V.T`` and ``S`` sorted in
    decreasing order. ``U`` is ``(m, k)``, ``V`` is ``(n, k)``, ``k = min(m, n)``.
    Independent of LAPACK so it can serve as an oracle for other routines.
    Column pairs are visited in round-robin tournament order, so each round
    rotates disjoint pairs at once.
    """
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    if max(m, n) > 64:
        raise ValueError("svd_oracle is restricted to matrices up to 64x64")
    transposed = m < n
    A = W.T.copy() if transposed else W.copy()
    cols = A.shape[1]
    V = np.eye(cols)
    rounds = _tournament_rounds(cols)
    for _ in range(sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = A[:, p], A[:, q]
            A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    S = np.linalg.norm(A, axis=0)
    order = np.argsort(-S, kind="stable")
    S, A, V = S[order], A[:, order], V[:, order]
    U = np.zeros_like(A)
    big = S > S.max(initial=0.0) * 1e-14
    U[:, big] = A[:, big] / S[big]
    U = _complete_orthonormal(U, big)
    if transposed:
        U, V = V, U
    return U, S, V


def _tournament_rounds(n):
    """Round-robin schedule covering every column pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(U, filled):
    """Fill columns of ``U`` for zero singular values with an orthonormal complement."""
    if filled.all():
        return U
    basis = U[:, filled]
    for j in np.flatnonzero(~filled):
        for e in np.eye(U.shape[0]):
            cand = e - basis @ (basis.T @ e)
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                U[:, j] = cand / nrm
                basis = np.column_stack([basis, U[:, j]])
                break
    return U


def semi_orthogonal_init(d_out: int, d_in: int, gain: float, rng) -> np.ndarray:
    """Gaussian draw orthogonalized so every singular value equals ``gain``."""
    if d_out < 1 or d_in < 1:
        raise ValueError("dimensions must be positive")
    G = rng.standard_normal((d_out, d_in))
    U, _, Vt = np.linalg.svd(G, full_matrices=False)
    return gain * (U @ Vt)


def row_normalized_gaussian_init(d_out: int, d_in: int, target_row_rms: float, rng) -> np.ndarray:
    if d_in < 1:
        raise ValueError("d_in must be positive")
    W = rng.standard_normal((d_out, d_in))
    row_rms = np.sqrt(np.mean(W * W, axis=1, keepdims=True))
    return W * (target_row_rms / row_rms)
