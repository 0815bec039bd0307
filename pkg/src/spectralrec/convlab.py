"""
Light graph convolution on the user-item graph and its spectral view.

Propagation with the symmetric normalised adjacency ``S = D^-1/2 A D^-1/2``
and uniform layer weights multiplies every spectral coefficient of a signal
by ``g(lam) = (1 + lam + ... + lam^k) / (k + 1)``, which is increasing on
``[0, 1]`` with ``g(1) = 1``.  Components along eigenvectors of ``S`` with
eigenvalues near 1 pass unchanged and the rest are damped, more strongly as
``k`` grows.  The helpers here compute both sides so they can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .sparse import InteractionMatrix, degrees, inverse_power, spmm
from .spectral import EigResult, dense_symmetric_eig

DENSE_LIMIT = 2000


@dataclass(frozen=True)
class LayerWeights:
    alphas: tuple[float, ...]

    @classmethod
    def uniform(cls, k: int) -> LayerWeights:
        if k < 0:
            raise ValueError("k must be nonnegative")
        return cls((1.0 / (k + 1),) * (k + 1))

    @property
    def k(self) -> int:
        return len(self.alphas) - 1


class BipartiteGraph:
    """
    User-item graph of an interaction matrix.  ``S`` is applied through
    ``R`` and the degree vectors; it is only densified on request.
    Node order is users first, then items.
    """

    def __init__(self, R: InteractionMatrix):
        self.R = R
        deg = degrees(R)
        self.user_scale = inverse_power(deg.user_degrees, 0.5)
        self.item_scale = inverse_power(deg.item_degrees, 0.5)

    @property
    def n_users(self) -> int:
        return self.R.n_users

    @property
    def n_nodes(self) -> int:
        return self.R.n_users + self.R.n_items

    def apply_s(self, X) -> np.ndarray:
        "``S @ X`` for ``X`` of shape ``(U + I,)`` or ``(U + I, f)``."
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.n_nodes:
            raise ValueError(f"signal must have {self.n_nodes} rows, got {X.shape[0]}")
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        nu = self.n_users
        us, its = self.user_scale[:, None], self.item_scale[:, None]
        top = us * spmm(self.R, its * X[nu:])
        bottom = its * spmm(self.R, us * X[:nu], transpose=True)
        out = np.vstack([top, bottom])
        return out[:, 0] if vec else out

    def dense_s(self) -> np.ndarray:
        if self.n_nodes > DENSE_LIMIT:
            raise ValueError(f"graph has {self.n_nodes} nodes; dense limit is {DENSE_LIMIT}")
        Rn = self.user_scale[:, None] * self.R.to_dense() * self.item_scale[None, :]
        nu = self.n_users
        S = np.zeros((self.n_nodes, self.n_nodes))
        S[:nu, nu:] = Rn
        S[nu:, :nu] = Rn.T
        return S

    @cached_property
    def spectrum(self) -> EigResult:
        "Dense eigendecomposition of ``S`` (small graphs only)."
        return dense_symmetric_eig(self.dense_s())


def propagate(g: BipartiteGraph, X0, weights: LayerWeights) -> np.ndarray:
    "``sum_i alpha_i S^i X0``, by repeated sparse application of ``S``."
    X = np.asarray(X0, dtype=np.float64)
    if X.shape[0] != g.n_nodes:
        raise ValueError(f"signal must have {g.n_nodes} rows, got {X.shape[0]}")
    out = weights.alphas[0] * X
    for a in weights.alphas[1:]:
        X = g.apply_s(X)
        out = out + a * X
    return out


def filter_response(lam, k: int):
    """
    Spectral gain of ``k`` uniform propagation layers.

    ``(1 - lam^(k+1)) / ((k + 1)(1 - lam))`` for ``lam < 1`` and 1 at
    ``lam = 1``.  Close to 1 the explicit polynomial is summed instead, to
    avoid cancellation.  Accepts scalars or arrays.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < -1) or np.any(lam_arr > 1) or np.any(np.isnan(lam_arr)):
        raise ValueError("lambda must lie in [-1, 1]")
    near = np.abs(1.0 - lam_arr) < 1e-4
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = (1.0 - lam_arr ** (k + 1)) / ((k + 1) * (1.0 - lam_arr))
    if np.any(near):
        ln = np.where(near, lam_arr, 0.0)
        poly = np.zeros_like(lam_arr)
        for _ in range(k + 1):
            poly = poly * ln + 1.0
        closed = np.where(near, poly / (k + 1), closed)
    out = np.where(lam_arr == 1.0, 1.0, closed)
    return float(out) if np.ndim(lam) == 0 else out


def apply_spectral_filter(g: BipartiteGraph, x, k: int) -> np.ndarray:
    "``U diag(g(lam)) U^T x`` using the dense eigenbasis of ``S``."
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.n_nodes:
        raise ValueError(f"signal must have {g.n_nodes} rows, got {x.shape[0]}")
    eig = g.spectrum
    gains = filter_response(np.clip(eig.values, -1.0, 1.0), k)
    coef = eig.vectors.T @ x
    coef = gains[:, None] * coef if coef.ndim == 2 else gains * coef
    return eig.vectors @ coef


def spectral_energy_profile(g: BipartiteGraph, x, top_fraction: float, k: int = 4) -> tuple[float, float]:
    """
    Share of the squared norm of ``x`` lying in the span of the top
    ``ceil(top_fraction * n)`` eigenvectors of ``S``, before and after
    ``k`` uniform propagation layers.
    """
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    eig = g.spectrum
    m = max(1, math.ceil(top_fraction * g.n_nodes))
    top = eig.vectors[:, :m]

    def share(v):
        total = float(np.sum(v**2))
        if total == 0:
            return 0.0
        return float(np.sum((top.T @ v) ** 2)) / total

    return share(x), share(propagate(g, x, LayerWeights.uniform(k)))
