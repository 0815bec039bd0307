"""
Acceptance suite: one test per criterion, each tagged with
``@pytest.mark.criterion``.  The terminal summary prints one PASS / FAIL /
SKIP line per criterion.

Dataset-scale criteria read raw files from environment variables
``SPECTRALREC_ML1M``, ``SPECTRALREC_AMAZON`` and ``SPECTRALREC_GOWALLA``
(a raw data file, or an ``.ini`` experiment config whose ``[data]``
section describes it) and are skipped when those are absent.  The dataset-scale
benchmark also needs ``SPECTRALREC_RUN_SLOW=1``.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from pytest import approx
from scipy.linalg import subspace_angles

from spectralrec import cli
from spectralrec.convlab import BipartiteGraph, LayerWeights, apply_spectral_filter, filter_response, propagate
from spectralrec.evaluation import evaluate, ndcg_at, phase_matrices, rank_top_n, recall_at
from spectralrec.ingest import CsvSpec, k_core_filter, load_triplets, split_per_user
from spectralrec.models import (
    fit_psge,
    fit_psge_factors,
    fit_pure_svd,
    fit_sgmc,
    predict_scores,
    psge_from_factors,
    quadratic_form_trace,
    rayleigh_ritz_optimum,
    sgmc_form_scores,
)
from spectralrec.sparse import normalize_interactions
from spectralrec.spectral import dense_svd_oracle, truncated_svd

from conftest import dataset_path, random_interactions

criterion = pytest.mark.criterion

BETA_GRID = [round(0.1 * n, 10) for n in range(11)]

# (users, items, interactions) after the 10-core
DATASET_STATS = {
    "ml1m": (5949, 2810, 571531),
    "amazon": (9279, 6065, 158979),
    "gowalla": (29858, 40988, 1027464),
}

# default layouts of the public raw files
RAW_SPECS = {
    "ml1m": CsvSpec(delimiter="::", weight_col=2, timestamp_col=3),
    "amazon": CsvSpec(delimiter=",", weight_col=2, timestamp_col=3),
    "gowalla": CsvSpec(delimiter="\t", user_col=0, item_col=4, weight_col=None, timestamp_col=1),
}


def load_dataset(name):
    path = dataset_path(name)
    if path is None:
        pytest.skip(f"SPECTRALREC_{name.upper()} not set")
    if path.endswith(".ini"):
        cfg = cli.ExperimentConfig(cli.load_config(path))
        return cli.build_split(cfg)
    raw = load_triplets(path, RAW_SPECS[name])
    return split_per_user(k_core_filter(raw, 10), seed=0, k_core=10)


def random_orthonormal(rng, n, f):
    q, r = np.linalg.qr(rng.standard_normal((n, f)))
    return q * np.sign(np.diag(r))


def direct_polynomial(lam, k):
    total = 0.0
    for i in range(k + 1):
        total += lam**i
    return total / (k + 1)


@criterion("AC1", "filter closed form equals the direct polynomial sum (1e-12, <1s)")
def test_ac1_filter_formula():
    grid = np.linspace(-1.0, 1.0, 1000)
    start = time.perf_counter()
    responses = {k: filter_response(grid, k) for k in range(1, 11)}
    elapsed = time.perf_counter() - start
    for k, resp in responses.items():
        expected = np.array([direct_polynomial(float(x), k) for x in grid])
        assert np.abs(resp - expected).max() <= 1e-12, f"k={k}"
    assert elapsed < 1.0


@criterion("AC2", "propagation equals the spectral filter on 50 graphs (1e-8, <30s)")
def test_ac2_convolution_equals_filter():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    for _ in range(50):
        nu = int(rng.integers(2, 120))
        ni = int(rng.integers(2, 200 - nu + 1))
        R = random_interactions(rng, nu, ni, float(rng.uniform(0.02, 0.4)))
        g = BipartiteGraph(R)
        x = rng.standard_normal((g.n_nodes, 3))
        for k in (1, 2, 4, 8):
            conv = propagate(g, x, LayerWeights.uniform(k))
            spec = apply_spectral_filter(g, x, k)
            assert np.abs(conv - spec).max() <= 1e-8
    assert time.perf_counter() - start < 30.0


def _cluster_blocks(sigma, f, gap):
    "Runs of singular values among the top f whose boundaries have a gap above ``gap``."
    bounds = [0] + [j for j in range(1, f) if sigma[j - 1] - sigma[j] > gap]
    closed = f >= len(sigma) or sigma[f - 1] - sigma[f] > gap
    ends = bounds[1:] + ([f] if closed else [])
    return list(zip(bounds, ends))


@criterion("AC3", "truncated SVD matches the dense oracle on 100 matrices (1e-6, angles <1e-5, <2min)")
def test_ac3_eigensolver_oracle():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_sigma = worst_angle = 0.0
    for _ in range(100):
        nu, ni = (int(x) for x in rng.integers(5, 501, 2))
        R = random_interactions(rng, nu, ni, float(rng.uniform(0.01, 0.3)))
        f = int(rng.integers(1, min(nu, ni, 30) + 1))
        oracle = dense_svd_oracle(R.to_dense())
        fac = truncated_svd(R, f)
        worst_sigma = max(worst_sigma, float(np.abs(fac.sigma - oracle.sigma[:f]).max()))
        for lo, hi in _cluster_blocks(oracle.sigma, f, 1e-6):
            for mine, ref in ((fac.q_tilde, oracle.q_tilde), (fac.p_tilde, oracle.p_tilde)):
                worst_angle = max(worst_angle, float(subspace_angles(mine[:, lo:hi], ref[:, lo:hi]).max()))
    assert worst_sigma <= 1e-6
    assert worst_angle < 1e-5
    assert time.perf_counter() - start < 120.0


@criterion("AC4", "Rayleigh-Ritz optimum of the trace, plain and weighted (1e-8, 1000 random X)")
def test_ac4_trace_maximisation():
    rng = np.random.default_rng(4)
    for case in range(12):
        if case % 3 == 2:
            nu, ni = int(rng.integers(5, 50)), int(rng.integers(5, 50))
            A = normalize_interactions(random_interactions(rng, nu, ni, 0.3), 0.5, 0.5)
            D = A.to_dense()
            dense = np.block([[np.zeros((nu, nu)), D], [D.T, np.zeros((ni, ni))]])
            f = int(rng.integers(1, min(nu, ni, 8) + 1))
        else:
            n = int(rng.integers(3, 101))
            M = rng.standard_normal((n, n))
            A = dense = (M + M.T) / 2
            f = int(rng.integers(1, min(n, 10) + 1))
        n = dense.shape[0]
        eigs = np.linalg.eigvalsh(dense)[::-1][:f]
        X, value = rayleigh_ritz_optimum(A, f)
        assert X.T @ X == approx(np.eye(f), abs=1e-8)
        assert value == approx(eigs.sum(), abs=1e-8)
        assert quadratic_form_trace(A, X) == approx(eigs.sum(), abs=1e-8)
        for _ in range(1000):
            assert quadratic_form_trace(A, random_orthonormal(rng, n, f)) < value
        w = np.sort(rng.uniform(0.0, 3.0, f))[::-1]
        Xw, vw = rayleigh_ritz_optimum(A, f, sigma_weights=w)
        assert vw == approx(float(eigs @ w), abs=1e-8)
        assert quadratic_form_trace(A, Xw, w) == approx(float(eigs @ w), abs=1e-8)


def _sorts_within_ties(order, scores, rel_tol=1e-9):
    "True when ``order`` sorts ``scores`` descending, up to near-exact ties."
    s = scores[order]
    tol = rel_tol * max(1.0, float(np.abs(scores).max()))
    return bool(np.all(np.diff(s) <= tol))


@criterion("AC5", "PSGE(0.5, 0.5, 0.5) reproduces the SGMC-form scorer on the fixture")
def test_ac5_psge_equals_sgmc(fixture_split):
    R = fixture_split.train
    users = np.arange(R.n_users)
    full = min(R.shape)
    for f in (4, 8, 16, 32, 64, full):
        model = fit_sgmc(R, f)
        a = model.score_users(users)
        b = sgmc_form_scores(R, model.factors.q_tilde)
        assert np.abs(a - b).max() <= 1e-8
        for u in users:
            mask = R.row_items(u)
            if f == full:
                # Q~ Q~^T = I here, so both scorers reproduce R exactly and
                # unobserved items tie; each ranking must sort the other
                # scorer's values up to those ties
                ra = rank_top_n(a[u], mask, R.n_items)
                rb = rank_top_n(b[u], mask, R.n_items)
                assert _sorts_within_ties(rb, a[u]) and _sorts_within_ties(ra, b[u])
            else:
                assert np.array_equal(rank_top_n(a[u], mask, R.n_items), rank_top_n(b[u], mask, R.n_items))


@criterion("AC6", "rankings invariant to sigma rescaling and the user degree factor (100 fixtures)")
def test_ac6_ranking_invariances():
    rng = np.random.default_rng(6)
    for _ in range(100):
        nu, ni = int(rng.integers(10, 60)), int(rng.integers(10, 60))
        R = random_interactions(rng, nu, ni, float(rng.uniform(0.1, 0.4)), binary=bool(rng.integers(2)))
        alpha, beta, bt = (float(x) for x in rng.uniform(0, 1, 3))
        f = int(rng.integers(1, min(nu, ni) + 1))
        # at f = rank(R) the prediction reproduces R D^(bt - beta) up to the
        # user factor, so unobserved items tie exactly and only rounding
        # noise orders them
        full_rank = f >= np.linalg.matrix_rank(R.to_dense())
        model = fit_psge(R, alpha, beta, f, beta_tilde=bt)
        c = float(rng.uniform(0.01, 100.0))
        scaled = replace(model, factors=replace(model.factors, sigma=model.factors.sigma * c))
        no_user_factor = replace(model, alpha=0.0)
        for u in np.flatnonzero(~model.cold_users()):
            scores = predict_scores(model, u)
            base = np.argsort(-scores, kind="stable")
            for other in (scaled, no_user_factor):
                order = np.argsort(-predict_scores(other, u), kind="stable")
                if full_rank:
                    assert _sorts_within_ties(order, scores)
                else:
                    assert np.array_equal(base, order)


def _sweep_popularity(split, alpha, beta, f, phase="test", cutoff=20):
    fit_m, _, _ = phase_matrices(split, phase)
    model = fit_psge(fit_m, alpha, beta, f)
    return [evaluate(model.with_beta_tilde(bt), split, phase, [cutoff]).avg_popularity[cutoff] for bt in BETA_GRID]


def _assert_monotone(pops):
    steps = np.diff(pops)
    assert steps.min() >= -1e-9, f"largest decrease {steps.min():.3g}"


@criterion("AC7", "average recommended popularity is non-decreasing in beta_tilde")
def test_ac7_beta_sweep_monotone(fixture_split):
    for alpha in (0.0, 0.3, 0.5, 1.0):
        for beta in (0.0, 0.4, 1.0):
            for f in (8, 32):
                _assert_monotone(_sweep_popularity(fixture_split, alpha, beta, f))


@pytest.mark.external_data
@pytest.mark.parametrize("name", sorted(DATASET_STATS))
def test_ac7_beta_sweep_monotone_real_data(name):
    split = load_dataset(name)
    _assert_monotone(_sweep_popularity(split, 0.5, 0.5, 64))


@pytest.mark.external_data
@criterion("AC8", "10-core statistics of MovieLens-1M, Amazon Electronics and Gowalla")
def test_ac8_pipeline_statistics():
    missing = [n for n in DATASET_STATS if dataset_path(n) is None]
    for name, expected in DATASET_STATS.items():
        if name in missing:
            continue
        st = load_dataset(name).stats()
        assert (st["n_users"], st["n_items"], st["n_interactions"]) == expected, name
    # datasets that were provided have been checked; the criterion is only
    # met once all three are
    if missing:
        pytest.skip("raw data not provided: " + ", ".join(missing))


def _best_on_validation(split, grid_ab, fs, fit):
    best = (-1.0, None)
    for ab in grid_ab:
        full = fit(split.train, ab, max(fs))
        for f in fs:
            rep = evaluate(full.truncate(f), split, "validation", [20])
            if rep.ndcg[20] > best[0]:
                best = (rep.ndcg[20], (ab, f))
    return best[1]


def _benchmark_scores(split):
    fs = [64, 128, 256, 512]
    grid = [(a, b) for a in BETA_GRID for b in BETA_GRID]

    def fit_p(R, ab, f):
        return psge_from_factors(R, fit_psge_factors(R, ab[0], ab[1], min(f, min(R.shape))))

    def fit_s(R, ab, f):
        return fit_pure_svd(R, min(f, min(R.shape)))

    test_fit, _, _ = phase_matrices(split, "test")
    (a, b), f = _best_on_validation(split, grid, fs, fit_p)
    psge = evaluate(fit_psge(test_fit, a, b, f), split, "test", [5, 20])
    _, fsvd = _best_on_validation(split, [None], fs, fit_s)
    svd = evaluate(fit_pure_svd(test_fit, fsvd), split, "test", [5, 20])
    return psge, svd


@pytest.mark.slow
@pytest.mark.external_data
@criterion("AC9", "benchmark scale: ML-1M NDCG@20 and Recall@20 within 0.015; PSGE beats PureSVD")
def test_ac9_benchmark_scores():
    if os.environ.get("SPECTRALREC_RUN_SLOW") != "1":
        pytest.skip("set SPECTRALREC_RUN_SLOW=1 to run")
    missing = [n for n in DATASET_STATS if dataset_path(n) is None]
    if missing:
        pytest.skip("raw data not provided: " + ", ".join(missing))
    for name in DATASET_STATS:
        psge, svd = _benchmark_scores(load_dataset(name))
        if name == "ml1m":
            assert psge.ndcg[20] == approx(0.2951, abs=0.015)
            assert psge.recall[20] == approx(0.3230, abs=0.015)
        assert psge.ndcg[20] > svd.ndcg[20], name


def brute_ndcg(recs, rel, n):
    if not rel:
        return 0.0
    dcg = 0.0
    for rank, item in enumerate(recs[:n], start=1):
        if item in rel:
            dcg += 1.0 / math.log2(rank + 1)
    idcg = 0.0
    for rank in range(1, min(n, len(rel)) + 1):
        idcg += 1.0 / math.log2(rank + 1)
    return dcg / idcg


def brute_recall(recs, rel, n):
    if not rel:
        return 0.0
    return len([i for i in recs[:n] if i in rel]) / len(rel)


@criterion("AC10", "ndcg_at and recall_at equal a brute-force oracle on 10,000 instances")
def test_ac10_metric_oracle():
    rng = np.random.default_rng(10)
    for _ in range(10_000):
        n_items = int(rng.integers(1, 80))
        recs = rng.permutation(n_items)[: int(rng.integers(0, n_items + 1))].tolist()
        rel = set(rng.choice(n_items, size=int(rng.integers(0, n_items + 1)), replace=False).tolist())
        n = int(rng.integers(1, 60))
        assert ndcg_at(recs, rel, n) == brute_ndcg(recs, rel, n)
        assert recall_at(recs, rel, n) == brute_recall(recs, rel, n)
