"""
Spectral top-N recommenders and the trace-maximisation helpers behind them.

:class:`PsgeModel` scores with

    R^ = D_U^alpha  P~ diag(sigma) Q~^T  D_I^beta~

where ``P~, sigma, Q~`` is the truncated SVD of the propensity-normalised
training matrix ``D_U^-alpha R D_I^-beta``.  ``alpha = beta = 0`` is
PureSVD and ``alpha = beta = 0.5`` is the SGMC configuration.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Protocol

import numpy as np
import scipy.sparse as sps

from .sparse import DegreeVectors, InteractionMatrix, degrees, inverse_power, normalize_interactions, spmm
from .spectral import (
    SolverConfig,
    SpectralFactors,
    adjacency_eigs_from_svd,
    dense_symmetric_eig,
    read_factors,
    truncated_svd,
    write_factors,
)

_log = logging.getLogger(__name__)

EASE_MAX_ITEMS = 20_000


class ColdUserError(LookupError):
    "The user has no training interactions, so the model cannot score them."


class Recommender(Protocol):
    tag: str
    train_fingerprint: str

    @property
    def n_items(self) -> int: ...

    def hyperparameters(self) -> dict: ...

    def cold_users(self) -> np.ndarray: ...

    def score_users(self, users: np.ndarray) -> np.ndarray: ...


def _item_scaling(item_degrees: np.ndarray, exponent: float) -> np.ndarray:
    # cold items score 0 for every exponent, including 0
    out = np.zeros_like(item_degrees, dtype=np.float64)
    pos = item_degrees > 0
    out[pos] = item_degrees[pos] ** exponent
    return out


@dataclass(frozen=True, eq=False)
class PsgeModel:
    factors: SpectralFactors
    alpha: float
    beta: float
    degrees: DegreeVectors
    beta_tilde: float
    train_fingerprint: str = ""

    tag = "psge"

    @property
    def n_users(self) -> int:
        return self.factors.n_users

    @property
    def n_items(self) -> int:
        return self.factors.n_items

    @property
    def f(self) -> int:
        return self.factors.f

    def with_beta_tilde(self, beta_tilde: float) -> PsgeModel:
        "Same factorisation, different prediction-time item exponent."
        return replace(self, beta_tilde=float(beta_tilde))

    def truncate(self, f: int) -> PsgeModel:
        return replace(self, factors=self.factors.truncate(f))

    def hyperparameters(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "beta_tilde": self.beta_tilde, "f": self.f}

    def cold_users(self) -> np.ndarray:
        return self.degrees.user_degrees <= 0

    def score_users(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        f = self.factors
        left = f.p_tilde[users] * f.sigma
        left *= (self.degrees.user_degrees[users] ** self.alpha)[:, None]
        scale = _item_scaling(self.degrees.item_degrees, self.beta_tilde)
        return (left @ f.q_tilde.T) * scale


@dataclass(frozen=True, eq=False)
class PureSvdModel:
    """
    ``R^ = R Q Q^T`` with ``Q`` the leading right singular vectors of the
    raw training matrix.

    Because ``R Q = P diag(sigma)``, this equals the rank-``f`` SVD
    reconstruction and therefore :class:`PsgeModel` with
    ``alpha = beta = 0``; the two are computed by different routes.
    """

    q: np.ndarray
    train: InteractionMatrix
    train_fingerprint: str = ""

    tag = "puresvd"

    @property
    def f(self) -> int:
        return self.q.shape[1]

    @property
    def n_items(self) -> int:
        return self.q.shape[0]

    def truncate(self, f: int) -> PureSvdModel:
        return replace(self, q=self.q[:, :f])

    def hyperparameters(self) -> dict:
        return {"f": self.f}

    def cold_users(self) -> np.ndarray:
        return np.diff(self.train.row_ptr) == 0

    def score_users(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        rows = self.train.csr[users]
        return np.asarray(rows @ self.q) @ self.q.T


@dataclass(frozen=True, eq=False)
class EaseModel:
    b: np.ndarray
    lambda_reg: float
    train: InteractionMatrix
    train_fingerprint: str = ""

    tag = "ease"

    @property
    def n_items(self) -> int:
        return self.b.shape[0]

    def hyperparameters(self) -> dict:
        return {"lambda_reg": self.lambda_reg}

    def cold_users(self) -> np.ndarray:
        return np.diff(self.train.row_ptr) == 0

    def score_users(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        return np.asarray(self.train.csr[users] @ self.b)


def fit_psge_factors(
    R_train: InteractionMatrix, alpha: float, beta: float, f: int, solver_cfg: SolverConfig | None = None
) -> SpectralFactors:
    "Truncated SVD of the ``(alpha, beta)``-normalised training matrix."
    cfg = solver_cfg or SolverConfig()
    if R_train.nnz == 0:
        raise ValueError("training matrix is empty")
    R_tilde = normalize_interactions(R_train, alpha, beta)
    factors = truncated_svd(R_tilde, f, cfg.tol, cfg.max_iter, cfg.seed, ncv=cfg.ncv, strict=cfg.strict)
    return replace(factors, alpha=float(alpha), beta=float(beta))


def psge_from_factors(
    R_train: InteractionMatrix, factors: SpectralFactors, beta_tilde: float | None = None
) -> PsgeModel:
    beta_tilde = factors.beta if beta_tilde is None else beta_tilde
    return PsgeModel(
        factors,
        factors.alpha,
        factors.beta,
        degrees(R_train),
        float(beta_tilde),
        R_train.fingerprint(),
    )


def fit_psge(
    R_train: InteractionMatrix,
    alpha: float,
    beta: float,
    f: int,
    solver_cfg: SolverConfig | None = None,
    beta_tilde: float | None = None,
) -> PsgeModel:
    """
    Fit PSGE.  ``beta_tilde`` defaults to ``beta`` and can be changed later
    with :meth:`PsgeModel.with_beta_tilde` without refitting.
    """
    factors = fit_psge_factors(R_train, alpha, beta, f, solver_cfg)
    return psge_from_factors(R_train, factors, beta_tilde)


def fit_sgmc(R_train: InteractionMatrix, f: int, solver_cfg: SolverConfig | None = None) -> PsgeModel:
    return fit_psge(R_train, 0.5, 0.5, f, solver_cfg, beta_tilde=0.5)


def fit_pure_svd(R_train: InteractionMatrix, f: int, solver_cfg: SolverConfig | None = None) -> PureSvdModel:
    cfg = solver_cfg or SolverConfig()
    if R_train.nnz == 0:
        raise ValueError("training matrix is empty")
    factors = truncated_svd(R_train, f, cfg.tol, cfg.max_iter, cfg.seed, ncv=cfg.ncv, strict=cfg.strict)
    return PureSvdModel(factors.q_tilde, R_train, R_train.fingerprint())


def fit_ease(R_train: InteractionMatrix, lambda_reg: float) -> EaseModel:
    """
    Closed-form item-item autoencoder: ``P = (R^T R + lambda I)^-1`` and
    ``B_ij = -P_ij / P_jj`` off the diagonal, ``B_ii = 0``.
    """
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    n_items = R_train.n_items
    if n_items > EASE_MAX_ITEMS:
        raise ValueError(f"EASE needs a dense {n_items}x{n_items} matrix; limit is {EASE_MAX_ITEMS} items")
    G = (R_train.csc.T @ R_train.csr).toarray()
    G[np.diag_indices(n_items)] += lambda_reg
    try:
        P = np.linalg.inv(G)
    except np.linalg.LinAlgError as e:
        raise ValueError("Gram matrix is singular; increase lambda_reg") from e
    B = P / -np.diag(P)
    B[np.diag_indices(n_items)] = 0.0
    return EaseModel(B, float(lambda_reg), R_train, R_train.fingerprint())


def predict_scores(model: Recommender, user: int, candidate_items=None) -> np.ndarray:
    """
    Scores of one user for ``candidate_items`` (all items when ``None``).

    Raises
    ------
    ColdUserError
        if the user has no training interactions.
    """
    if model.cold_users()[user]:
        raise ColdUserError(f"user {user} has no training interactions")
    scores = model.score_users(np.array([user]))[0]
    if candidate_items is not None:
        scores = scores[np.asarray(candidate_items, dtype=np.int64)]
    return scores


def sgmc_form_scores(R_train: InteractionMatrix, q_tilde: np.ndarray, users=None, beta: float = 0.5) -> np.ndarray:
    """
    Item-space form of the prediction, ``R D_I^-beta Q~ Q~^T D_I^beta``,
    using only the item-side factor.
    """
    item_deg = degrees(R_train).item_degrees
    rows = R_train.csr if users is None else R_train.csr[np.asarray(users, dtype=np.int64)]
    left = np.asarray(rows @ (inverse_power(item_deg, beta)[:, None] * q_tilde))
    return (left @ q_tilde.T) * _item_scaling(item_deg, beta)


def quadratic_form_trace(A_norm, X, sigma_weights=None) -> float:
    """
    ``Tr(X^T A X diag(sigma_weights))``.

    ``A_norm`` is either a dense/sparse symmetric matrix or an
    :class:`InteractionMatrix` ``R~`` standing for the bipartite adjacency
    ``[[0, R~], [R~^T, 0]]``.  In the bipartite case ``X = [P; Q]`` and the
    trace is ``2 * sum over edges of w_ui * p_u . q_i``, computed from the
    edges only.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    w = np.ones(X.shape[1]) if sigma_weights is None else np.asarray(sigma_weights, dtype=np.float64)
    if w.shape != (X.shape[1],):
        raise ValueError("sigma_weights must have one entry per column of X")
    if isinstance(A_norm, InteractionMatrix):
        nu, ni = A_norm.shape
        if X.shape[0] != nu + ni:
            raise ValueError(f"X must have {nu + ni} rows, got {X.shape[0]}")
        P, Q = X[:nu], X[nu:]
        per_col = np.einsum("uc,uc->c", P, spmm(A_norm, Q))
        return float(2.0 * per_col @ w)
    n = A_norm.shape[0]
    if A_norm.shape != (n, n) or X.shape[0] != n:
        raise ValueError("dimension mismatch between A and X")
    AX = A_norm @ X
    AX = AX.toarray() if sps.issparse(AX) else np.asarray(AX)
    per_col = np.einsum("ic,ic->c", X, AX)
    return float(per_col @ w)


def rayleigh_ritz_optimum(A_norm, f: int, sigma_weights=None, solver_cfg: SolverConfig | None = None):
    """
    Orthonormal ``X`` (``n x f``) maximising ``Tr(X^T A X diag(sigma))``
    and the optimum value.

    Without weights the optimum is the sum of the ``f`` largest eigenvalues.
    With nonnegative weights, the ``r``-th largest weight is paired with the
    ``r``-th eigenvector and the value is ``sum lambda_r * sigma_(r)``.

    Returns
    -------
    (X, value)
    """
    if isinstance(A_norm, InteractionMatrix):
        cfg = solver_cfg or SolverConfig()
        factors = truncated_svd(A_norm, f, cfg.tol, cfg.max_iter, cfg.seed, ncv=cfg.ncv)
        eig = adjacency_eigs_from_svd(factors)
    else:
        A = A_norm.toarray() if sps.issparse(A_norm) else np.asarray(A_norm, dtype=np.float64)
        full = dense_symmetric_eig(A)
        if not 1 <= f <= len(full.values):
            raise ValueError(f"f must be in [1, {len(full.values)}]")
        eig = type(full)(full.vectors[:, :f], full.values[:f])
    if sigma_weights is None:
        return eig.vectors, float(eig.values.sum())
    w = np.asarray(sigma_weights, dtype=np.float64)
    if w.shape != (f,):
        raise ValueError("need one weight per column")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    order = np.argsort(-w, kind="stable")
    X = np.empty_like(eig.vectors)
    X[:, order] = eig.vectors
    return X, float(eig.values @ w[order])


# Model file format, little-endian:
#   b"SRMD", version u8, tag length u8, tag (ascii),
#   hyperparameter length u32, hyperparameters (UTF-8 JSON),
#   payload:
#     psge:    factor block (see spectral), user degrees f64[U], item degrees f64[I]
#     puresvd: n_items u64, f u64, Q f64[I, f], CSR block
#     ease:    n_items u64, B f64[I, I], CSR block
#   CSR block: n_rows u64, n_cols u64, nnz u64, row_ptr i64[n_rows+1], col_idx i64[nnz], values f64[nnz]
_MODEL_MAGIC = b"SRMD"
_MODEL_VERSION = 1


def _write_csr(out: BinaryIO, R: InteractionMatrix):
    out.write(struct.pack("<QQQ", R.n_users, R.n_items, R.nnz))
    out.write(R.row_ptr.astype("<i8").tobytes())
    out.write(R.col_idx.astype("<i8").tobytes())
    out.write(R.values.astype("<f8").tobytes())


def _read_exact(src: BinaryIO, n: int) -> bytes:
    buf = src.read(n)
    if len(buf) != n:
        raise ValueError("truncated model file")
    return buf


def _read_array(src: BinaryIO, dtype: str, count: int) -> np.ndarray:
    return np.frombuffer(_read_exact(src, 8 * count), dtype=dtype).astype(dtype[1:])


def _read_csr(src: BinaryIO) -> InteractionMatrix:
    nr, nc, nnz = struct.unpack("<QQQ", _read_exact(src, 24))
    rp = _read_array(src, "<i8", nr + 1)
    ci = _read_array(src, "<i8", nnz)
    vs = _read_array(src, "<f8", nnz)
    return InteractionMatrix(rp, ci, vs, (nr, nc))


def save_model(path: str | Path, model: Recommender) -> None:
    meta = dict(model.hyperparameters())
    meta["train_fingerprint"] = model.train_fingerprint
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tag = model.tag.encode("ascii")
    with open(path, "wb") as out:
        out.write(_MODEL_MAGIC + struct.pack("<BB", _MODEL_VERSION, len(tag)) + tag)
        out.write(struct.pack("<I", len(meta_raw)) + meta_raw)
        if isinstance(model, PsgeModel):
            write_factors(out, model.factors)
            out.write(model.degrees.user_degrees.astype("<f8").tobytes())
            out.write(model.degrees.item_degrees.astype("<f8").tobytes())
        elif isinstance(model, PureSvdModel):
            out.write(struct.pack("<QQ", model.n_items, model.f))
            out.write(np.ascontiguousarray(model.q, dtype="<f8").tobytes())
            _write_csr(out, model.train)
        elif isinstance(model, EaseModel):
            out.write(struct.pack("<Q", model.n_items))
            out.write(np.ascontiguousarray(model.b, dtype="<f8").tobytes())
            _write_csr(out, model.train)
        else:
            raise TypeError(f"cannot serialise {type(model).__name__}")


def load_model(path: str | Path) -> Recommender:
    with open(path, "rb") as src:
        magic = _read_exact(src, 4)
        if magic != _MODEL_MAGIC:
            raise ValueError("not a model file")
        version, tlen = struct.unpack("<BB", _read_exact(src, 2))
        if version != _MODEL_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        tag = _read_exact(src, tlen).decode("ascii")
        (mlen,) = struct.unpack("<I", _read_exact(src, 4))
        meta = json.loads(_read_exact(src, mlen).decode("utf-8"))
        fp = meta.get("train_fingerprint", "")
        if tag == "psge":
            factors = read_factors(src)
            ud = _read_array(src, "<f8", factors.n_users)
            idg = _read_array(src, "<f8", factors.n_items)
            return PsgeModel(
                factors, meta["alpha"], meta["beta"], DegreeVectors(ud, idg), meta["beta_tilde"], fp
            )
        if tag == "puresvd":
            ni, f = struct.unpack("<QQ", _read_exact(src, 16))
            q = _read_array(src, "<f8", ni * f).reshape(ni, f)
            return PureSvdModel(q, _read_csr(src), fp)
        if tag == "ease":
            (ni,) = struct.unpack("<Q", _read_exact(src, 8))
            b = _read_array(src, "<f8", ni * ni).reshape(ni, ni)
            return EaseModel(b, meta["lambda_reg"], _read_csr(src), fp)
        raise ValueError(f"unknown model type {tag!r}")
