"""
Sparse interaction storage and the handful of kernels the rest of the
package needs: degrees, propensity normalisation and sparse-dense products.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps

_log = logging.getLogger(__name__)


class InteractionMatrix:
    """
    Immutable ``n_users x n_items`` matrix of nonnegative interaction
    weights in compressed-row form.

    Dense blocks elsewhere in the package are plain 2-D float64
    :class:`numpy.ndarray` objects.

    Parameters
    ----------
    row_ptr, col_idx, values
        CSR arrays.  Column indices must be strictly increasing within each
        row and all values must be positive.
    shape
        ``(n_users, n_items)``.
    """

    def __init__(self, row_ptr, col_idx, values, shape: tuple[int, int], *, check: bool = True):
        n_users, n_items = (int(s) for s in shape)
        row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(col_idx, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if check:
            _validate_csr(row_ptr, col_idx, values, n_users, n_items)
        for a in (row_ptr, col_idx, values):
            a.flags.writeable = False
        self._csr = sps.csr_array((values, col_idx, row_ptr), shape=(n_users, n_items))

    @classmethod
    def from_coo(cls, users, items, shape: tuple[int, int], values=None) -> InteractionMatrix:
        """
        Build from coordinate lists.  Duplicate coordinates are an error;
        explicit zeros are dropped.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if values is None:
            values = np.ones(len(users))
        values = np.asarray(values, dtype=np.float64)
        keep = values != 0
        users, items, values = users[keep], items[keep], values[keep]
        n_users, n_items = shape
        if len(users) and (users.min() < 0 or users.max() >= n_users):
            raise ValueError("user index out of range")
        if len(items) and (items.min() < 0 or items.max() >= n_items):
            raise ValueError("item index out of range")
        order = np.lexsort((items, users))
        users, items, values = users[order], items[order], values[order]
        if len(users) > 1:
            dup = (np.diff(users) == 0) & (np.diff(items) == 0)
            if dup.any():
                raise ValueError("duplicate (user, item) coordinates")
        row_ptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(users, minlength=n_users), out=row_ptr[1:])
        return cls(row_ptr, items, values, shape)

    @classmethod
    def from_scipy(cls, m) -> InteractionMatrix:
        m = sps.csr_array(m, dtype=np.float64, copy=True)
        m.eliminate_zeros()
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape)

    @classmethod
    def from_dense(cls, a) -> InteractionMatrix:
        return cls.from_scipy(sps.csr_array(np.asarray(a, dtype=np.float64)))

    @property
    def shape(self) -> tuple[int, int]:
        return self._csr.shape

    @property
    def n_users(self) -> int:
        return self._csr.shape[0]

    @property
    def n_items(self) -> int:
        return self._csr.shape[1]

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    @property
    def row_ptr(self) -> np.ndarray:
        return self._csr.indptr

    @property
    def col_idx(self) -> np.ndarray:
        return self._csr.indices

    @property
    def values(self) -> np.ndarray:
        return self._csr.data

    @property
    def csr(self) -> sps.csr_array:
        "The underlying SciPy CSR array (shared, do not mutate)."
        return self._csr

    @cached_property
    def csc(self) -> sps.csc_array:
        "Column-access view."
        return self._csr.tocsc()

    def row(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        "Column indices and values of row ``u``."
        sp, ep = self.row_ptr[u], self.row_ptr[u + 1]
        return self.col_idx[sp:ep], self.values[sp:ep]

    def row_items(self, u: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[u] : self.row_ptr[u + 1]]

    def coo(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        "``(users, items, values)`` in row-major order."
        users = np.repeat(np.arange(self.n_users, dtype=np.int64), np.diff(self.row_ptr))
        return users, self.col_idx.copy(), self.values.copy()

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def with_values(self, values) -> InteractionMatrix:
        "Same sparsity pattern, new values."
        return InteractionMatrix(self.row_ptr, self.col_idx, values, self.shape)

    def fingerprint(self) -> str:
        "Short content hash, used to tie a fitted model to its training data."
        h = hashlib.sha256()
        h.update(np.asarray(self.shape, dtype="<i8").tobytes())
        h.update(self.row_ptr.astype("<i8").tobytes())
        h.update(self.col_idx.astype("<i8").tobytes())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self):
        return f"<InteractionMatrix {self.n_users}x{self.n_items}, nnz={self.nnz}>"


def _validate_csr(row_ptr, col_idx, values, n_users, n_items):
    if row_ptr.shape != (n_users + 1,):
        raise ValueError(f"row_ptr must have length {n_users + 1}")
    if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
        raise ValueError("row_ptr must start at 0 and be nondecreasing")
    nnz = row_ptr[-1]
    if len(col_idx) != nnz or len(values) != nnz:
        raise ValueError("col_idx/values length does not match row_ptr")
    if nnz:
        if col_idx.min() < 0 or col_idx.max() >= n_items:
            raise ValueError("column index out of range")
        if not np.all(values > 0) or not np.all(np.isfinite(values)):
            raise ValueError("stored values must be finite and positive")
        # strictly increasing inside rows; row boundaries may drop
        step = np.diff(col_idx)
        boundary = np.zeros(nnz - 1, dtype=bool) if nnz > 1 else np.zeros(0, dtype=bool)
        starts = row_ptr[1:-1]
        starts = starts[(starts > 0) & (starts < nnz)]
        boundary[starts - 1] = True
        if np.any((step <= 0) & ~boundary):
            raise ValueError("column indices must be strictly increasing within each row")


@dataclass(frozen=True, eq=False)
class DegreeVectors:
    "Weighted user and item degrees of an interaction matrix."

    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def total(self) -> float:
        return float(self.user_degrees.sum())


def degrees(R: InteractionMatrix) -> DegreeVectors:
    users = np.repeat(np.arange(R.n_users), np.diff(R.row_ptr))
    ud = np.bincount(users, weights=R.values, minlength=R.n_users)
    idg = np.bincount(R.col_idx, weights=R.values, minlength=R.n_items).astype(np.float64)
    return DegreeVectors(ud.astype(np.float64), idg)


def inverse_power(d: np.ndarray, exponent: float) -> np.ndarray:
    """
    Entrywise ``d ** -exponent`` with zero degrees mapped to zero.
    """
    d = np.asarray(d, dtype=np.float64)
    out = np.zeros_like(d)
    pos = d > 0
    out[pos] = d[pos] ** (-exponent)
    return out


def normalize_interactions(R: InteractionMatrix, alpha: float, beta: float) -> InteractionMatrix:
    """
    Propensity-normalise interactions: ``r_ui * d_u^-alpha * d_i^-beta``.

    The sparsity pattern is preserved.  ``alpha = beta = 0`` returns an
    equal matrix; ``alpha = beta = 0.5`` gives the symmetric degree
    normalisation used by light graph convolution.
    """
    for name, v in (("alpha", alpha), ("beta", beta)):
        if not 0.0 <= v <= 1.0:
            _log.warning("%s=%g is outside [0, 1]", name, v)
    if alpha == 0 and beta == 0:
        return R
    deg = degrees(R)
    uw = inverse_power(deg.user_degrees, alpha)
    iw = inverse_power(deg.item_degrees, beta)
    users = np.repeat(np.arange(R.n_users), np.diff(R.row_ptr))
    return R.with_values(R.values * uw[users] * iw[R.col_idx])


def spmm(R: InteractionMatrix, X, transpose: bool = False) -> np.ndarray:
    """
    Sparse-dense product ``R @ X`` (or ``R.T @ X`` with ``transpose``).

    Accumulation is serial within each output row, so results are
    bit-stable from run to run.
    """
    X = np.asarray(X, dtype=np.float64)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    inner = R.n_users if transpose else R.n_items
    if X.shape[0] != inner:
        op = "R^T" if transpose else "R"
        raise ValueError(f"dimension mismatch: {op} has {inner} columns, X has {X.shape[0]} rows")
    out = (R.csc.T @ X) if transpose else (R.csr @ X)
    out = np.asarray(out)
    return out[:, 0] if vec else out
