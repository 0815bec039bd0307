"""
Truncated singular value decomposition of sparse interaction matrices.

The top of the spectrum is found with a thick-restart symmetric Lanczos
iteration on the Gram operator of the smaller side of the matrix, using
full (twice-applied) reorthogonalisation.  Dense LAPACK routines are used
only for the small projected problems and for the test oracles.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Callable

import numpy as np

from .sparse import InteractionMatrix, spmm

_log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps


class ConvergenceError(RuntimeError):
    "Raised by strict solvers that run out of iterations."

    def __init__(self, message, report: ConvergenceReport):
        super().__init__(message)
        self.report = report


@dataclass
class ConvergenceReport:
    converged: bool
    n_matvecs: int
    n_restarts: int
    #: Ritz residual norms relative to the operator norm estimate.
    residuals: np.ndarray


@dataclass(frozen=True)
class SolverConfig:
    """
    Eigensolver settings.

    ``max_iter`` counts operator applications and defaults to
    ``10 * f + 100``; ``ncv`` is the Lanczos basis size and defaults to
    ``2 * f + 20`` (clipped to the operator dimension).
    """

    tol: float = 1e-8
    max_iter: int | None = None
    seed: int = 0
    ncv: int | None = None
    strict: bool = False


@dataclass(frozen=True, eq=False)
class SpectralFactors:
    """
    Truncated SVD ``R~ ~ P~ diag(sigma) Q~^T`` with singular values in
    descending order.  ``alpha``, ``beta``, ``seed`` and ``tol`` record how
    the factors were produced.
    """

    p_tilde: np.ndarray
    q_tilde: np.ndarray
    sigma: np.ndarray
    alpha: float = 0.0
    beta: float = 0.0
    seed: int = 0
    tol: float = 0.0
    report: ConvergenceReport | None = field(default=None, compare=False, repr=False)

    @property
    def n_users(self) -> int:
        return self.p_tilde.shape[0]

    @property
    def n_items(self) -> int:
        return self.q_tilde.shape[0]

    @property
    def f(self) -> int:
        return len(self.sigma)

    def truncate(self, f: int) -> SpectralFactors:
        "Leading ``f`` triplets (the factorisation nests in ``f``)."
        if not 1 <= f <= self.f:
            raise ValueError(f"cannot truncate {self.f} factors to {f}")
        return replace(self, p_tilde=self.p_tilde[:, :f], q_tilde=self.q_tilde[:, :f], sigma=self.sigma[:f])


@dataclass(frozen=True, eq=False)
class EigResult:
    "Eigenpairs, values descending, vectors in columns."

    vectors: np.ndarray
    values: np.ndarray


def _orthogonalize(V: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    "Classical Gram-Schmidt applied twice; returns (coefficients, residual)."
    h = V.T @ w
    w = w - V @ h
    h2 = V.T @ w
    w = w - V @ h2
    return h + h2, w


def _random_orthogonal(rng: np.random.Generator, V: np.ndarray) -> np.ndarray | None:
    n = V.shape[0]
    for _ in range(5):
        v = rng.standard_normal(n)
        _, v = _orthogonalize(V, v)
        nrm = np.linalg.norm(v)
        if nrm > 1e-8:
            return v / nrm
    return None


def lanczos_largest(
    matvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    f: int,
    *,
    tol: float = 1e-8,
    max_iter: int | None = None,
    seed: int = 0,
    ncv: int | None = None,
) -> tuple[np.ndarray, np.ndarray, ConvergenceReport]:
    """
    Largest ``f`` eigenpairs of a symmetric operator of order ``n``.

    Thick-restart Lanczos: every cycle extends the basis to ``ncv`` vectors,
    solves the projected problem, keeps the leading Ritz vectors and
    continues from the residual.  The projected matrix is filled from full
    projections ``V^T A v_j``, so vectors injected after a breakdown (an
    exhausted Krylov space) fit in without special cases.

    Once all wanted pairs have converged, one more cycle is run from a fresh
    random vector orthogonal to them.  A single start vector cannot see
    more than one copy of a repeated eigenvalue; the extra cycle catches
    copies that belong in the wanted set.

    Returns
    -------
    values, vectors, report
        ``values`` descending, ``vectors`` of shape ``(n, f)``.
    """
    if not 1 <= f <= n:
        raise ValueError(f"need 1 <= f <= {n}, got {f}")
    if max_iter is None:
        max_iter = 10 * f + 100
    m = ncv if ncv is not None else 2 * f + 20
    m = min(n, max(m, f + 1))
    rng = np.random.default_rng(seed)

    V = np.zeros((n, m))
    T = np.zeros((m, m))
    V[:, 0] = rng.standard_normal(n)
    V[:, 0] /= np.linalg.norm(V[:, 0])

    k = 0
    matvecs = 0
    restarts = 0
    anorm = 0.0
    checked: np.ndarray | None = None
    theta = np.zeros(m)
    Y = np.eye(m)
    res = np.full(m, np.inf)
    converged = False

    while True:
        w = np.zeros(n)
        for j in range(k, m):
            w = np.asarray(matvec(V[:, j]), dtype=np.float64)
            matvecs += 1
            h, w = _orthogonalize(V[:, : j + 1], w)
            T[: j + 1, j] = h
            T[j, : j + 1] = h
            beta = np.linalg.norm(w)
            anorm = max(anorm, abs(h[j]), beta)
            if j + 1 < m:
                if beta <= 1e-12 * anorm:
                    v = _random_orthogonal(rng, V[:, : j + 1])
                    if v is None:
                        raise RuntimeError("could not extend Lanczos basis")
                    V[:, j + 1] = v
                else:
                    V[:, j + 1] = w / beta

        beta_m = np.linalg.norm(w)
        theta, Y = np.linalg.eigh(T)
        theta, Y = theta[::-1], Y[:, ::-1]
        anorm = max(anorm, float(np.abs(theta).max()))
        if m == n:
            # the basis spans the whole space
            res = np.zeros(m)
            converged = True
            break
        res = beta_m * np.abs(Y[m - 1, :])
        thresh = tol * anorm
        if np.all(res[:f] <= thresh):
            if checked is not None and np.all(np.abs(theta[:f] - checked) <= max(thresh, 1e-14 * anorm)):
                converged = True
                break
            if matvecs + (m - f) > max_iter:
                _log.debug("no budget left for the repeated-eigenvalue check")
                converged = True
                break
            checked = theta[:f].copy()
            k = f
            start = None
        else:
            checked = None
            k = min(f + (m - f) // 2, m - 1)
            start = w / beta_m if beta_m > 1e-12 * anorm else None

        if matvecs + (m - k) > max_iter:
            break

        V[:, :k] = V @ Y[:, :k]
        T[:] = 0.0
        T[:k, :k] = np.diag(theta[:k])
        if start is not None:
            _, start = _orthogonalize(V[:, :k], start)
            nrm = np.linalg.norm(start)
            start = start / nrm if nrm > 1e-8 else None
        if start is None:
            start = _random_orthogonal(rng, V[:, :k])
        V[:, k] = start
        restarts += 1

    vectors = V @ Y[:, :f]
    rel = res[:f] / anorm if anorm > 0 else np.zeros(f)
    report = ConvergenceReport(converged, matvecs, restarts, rel)
    return theta[:f].copy(), vectors, report


def _sign_fix(p: np.ndarray, q: np.ndarray) -> None:
    "Make the largest-magnitude entry of each q column positive (in place)."
    for j in range(q.shape[1]):
        ref = q[:, j] if np.any(q[:, j]) else p[:, j]
        if ref.size == 0:
            continue
        if ref[np.argmax(np.abs(ref))] < 0:
            q[:, j] *= -1
            p[:, j] *= -1


def _mgs_columns(X: np.ndarray, cols: np.ndarray) -> None:
    "Modified Gram-Schmidt over the selected columns, in order (in place)."
    done: list[int] = []
    for j in cols:
        x = X[:, j]
        for _ in range(2):
            for i in done:
                x -= (X[:, i] @ x) * X[:, i]
        x /= np.linalg.norm(x)
        done.append(j)


def truncated_svd(
    R_tilde: InteractionMatrix,
    f: int,
    tol: float = 1e-8,
    max_iter: int | None = None,
    seed: int = 0,
    *,
    ncv: int | None = None,
    strict: bool = False,
) -> SpectralFactors:
    """
    Leading ``f`` singular triplets of a sparse matrix.

    Lanczos runs on ``R~^T R~`` when there are no more items than users and
    on ``R~ R~^T`` otherwise.  Singular values are taken as the norms of the
    mapped vectors, the mapped side is re-orthonormalised, and signs are
    fixed so the largest-magnitude entry of each item-side vector is
    positive.  Directions beyond the numerical rank get ``sigma = 0`` and a
    zero vector on the mapped side.

    Non-convergence is logged and reported on ``factors.report`` (or raised
    as :class:`ConvergenceError` when ``strict``).
    """
    n_users, n_items = R_tilde.shape
    if not 1 <= f <= min(n_users, n_items):
        raise ValueError(f"f must be in [1, {min(n_users, n_items)}], got {f}")
    if tol <= 0:
        raise ValueError("tol must be positive")

    item_side = n_items <= n_users
    if item_side:
        n = n_items

        def gram(v):
            return spmm(R_tilde, spmm(R_tilde, v), transpose=True)

    else:
        n = n_users

        def gram(v):
            return spmm(R_tilde, spmm(R_tilde, v, transpose=True))

    theta, W, report = lanczos_largest(gram, n, f, tol=tol, max_iter=max_iter, seed=seed, ncv=ncv)
    if not report.converged:
        msg = f"Lanczos did not converge in {report.n_matvecs} steps (max residual {report.residuals.max():.2e})"
        if strict:
            raise ConvergenceError(msg, report)
        _log.warning(msg)
    else:
        _log.debug("Lanczos converged: %d steps, %d restarts", report.n_matvecs, report.n_restarts)

    mapped = spmm(R_tilde, W) if item_side else spmm(R_tilde, W, transpose=True)
    sigma = np.linalg.norm(mapped, axis=0)
    smax = sigma.max() if len(sigma) else 0.0
    # Gram-based iterations cannot resolve singular values below ~sqrt(eps) * smax
    live = sigma > max(smax * 1e-7, 1e-300)
    sigma = np.where(live, sigma, 0.0)
    mapped[:, ~live] = 0.0
    mapped[:, live] /= sigma[live]
    order = np.argsort(-sigma, kind="stable")
    sigma, W, mapped, live = sigma[order], W[:, order], mapped[:, order], live[order]
    _mgs_columns(mapped, np.flatnonzero(live))

    if item_side:
        p, q = mapped, W
    else:
        p, q = W, mapped
    p = np.ascontiguousarray(p)
    q = np.ascontiguousarray(q)
    _sign_fix(p, q)
    return SpectralFactors(p, q, sigma, seed=seed, tol=tol, report=report)


def dense_svd_oracle(M) -> SpectralFactors:
    """
    Full SVD of a small dense matrix (LAPACK), with the same ordering and
    sign convention as :func:`truncated_svd`.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("expected a matrix")
    if min(M.shape) > 500:
        raise ValueError("dense oracle limited to min(rows, cols) <= 500")
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    p, q = np.ascontiguousarray(u), np.ascontiguousarray(vt.T)
    _sign_fix(p, q)
    return SpectralFactors(p, q, s)


def adjacency_eigs_from_svd(factors: SpectralFactors) -> EigResult:
    """
    Eigenvectors ``[p_j; q_j] / sqrt(2)`` of the bipartite adjacency
    ``[[0, R~], [R~^T, 0]]`` with eigenvalues ``+sigma_j``.

    The mirrored family ``[p_j; -q_j] / sqrt(2)`` has eigenvalues
    ``-sigma_j`` and is not materialised.  For ``sigma_j = 0`` one side is
    zero and the stacked vector is renormalised; it lies in the null space.
    """
    X = np.vstack([factors.p_tilde, factors.q_tilde])
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    return EigResult(X / norms, factors.sigma.copy())


def dense_symmetric_eig(A) -> EigResult:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    if A.shape[0] > 2000:
        raise ValueError("dense eigensolver limited to n <= 2000")
    scale = max(1.0, float(np.abs(A).max())) if A.size else 1.0
    if A.size and np.abs(A - A.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((A + A.T) / 2)
    return EigResult(np.ascontiguousarray(vecs[:, ::-1]), vals[::-1].copy())


# Binary factor format, little-endian:
#   b"SPFX", version u8,
#   n_users u64, n_items u64, f u64, alpha f64, beta f64, seed i64, tol f64,
#   sigma[f] f64, P~[n_users, f] f64 row-major, Q~[n_items, f] f64 row-major
_FACTOR_MAGIC = b"SPFX"
_FACTOR_VERSION = 1
_FACTOR_HEADER = struct.Struct("<4sBQQQddqd")


def write_factors(out: BinaryIO, factors: SpectralFactors) -> None:
    out.write(
        _FACTOR_HEADER.pack(
            _FACTOR_MAGIC,
            _FACTOR_VERSION,
            factors.n_users,
            factors.n_items,
            factors.f,
            factors.alpha,
            factors.beta,
            factors.seed,
            factors.tol,
        )
    )
    for block in (factors.sigma, factors.p_tilde, factors.q_tilde):
        out.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_factors(src: BinaryIO) -> SpectralFactors:
    raw = src.read(_FACTOR_HEADER.size)
    if len(raw) != _FACTOR_HEADER.size:
        raise ValueError("truncated factor header")
    magic, version, nu, ni, f, alpha, beta, seed, tol = _FACTOR_HEADER.unpack(raw)
    if magic != _FACTOR_MAGIC:
        raise ValueError("not a factor file")
    if version != _FACTOR_VERSION:
        raise ValueError(f"unsupported factor format version {version}")

    def block(count, shape):
        buf = src.read(8 * count)
        if len(buf) != 8 * count:
            raise ValueError("truncated factor data")
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    sigma = block(f, (f,))
    p = block(nu * f, (nu, f))
    q = block(ni * f, (ni, f))
    return SpectralFactors(p, q, sigma, alpha, beta, seed, tol)


def save_factors(path: str | Path, factors: SpectralFactors) -> None:
    with open(path, "wb") as out:
        write_factors(out, factors)


def load_factors(path: str | Path) -> SpectralFactors:
    with open(path, "rb") as src:
        return read_factors(src)


def factors_to_bytes(factors: SpectralFactors) -> bytes:
    buf = io.BytesIO()
    write_factors(buf, factors)
    return buf.getvalue()
