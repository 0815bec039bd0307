"""
Top-N ranking metrics and the evaluation protocol.

Validation-phase runs score a model fitted on the training split against
the validation items, masking training items.  Test-phase runs score a
model fitted on train + validation against the test items, masking both.
Per-user metrics are macro-averaged in user-id order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ingest import SplitDataset, merge_train_val
from .sparse import DegreeVectors, InteractionMatrix, degrees

_log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (5, 20)


def rank_top_n(scores, mask, n: int) -> np.ndarray:
    """
    Ids of the ``n`` best unmasked items, by descending score with ties
    broken by ascending id.  Returns fewer than ``n`` ids when not enough
    items are unmasked.
    """
    if n < 1:
        raise ValueError("n must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    allowed = np.ones(len(scores), dtype=bool)
    if mask is not None:
        m = np.fromiter(mask, dtype=np.int64) if not isinstance(mask, np.ndarray) else mask
        allowed[m] = False
    cand = np.flatnonzero(allowed)
    if len(cand) > n:
        neg = -scores[cand]
        kth = np.partition(neg, n - 1)[n - 1]
        cand = cand[neg <= kth]
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:n]]


def dcg_discounts(n: int) -> np.ndarray:
    "``1 / log2(rank + 1)`` for ranks ``1..n``, via scalar libm ``log2``."
    return np.array([1.0 / math.log2(r + 1) for r in range(1, n + 1)])


def ndcg_at(recommended, relevant, n: int) -> float:
    """
    Binary-relevance NDCG with ``1 / log2(rank + 1)`` discounts; the ideal
    DCG counts ``min(n, |relevant|)`` hits.  0 when ``relevant`` is empty.
    """
    rel = set(relevant) if not isinstance(relevant, (set, frozenset)) else relevant
    if not rel:
        return 0.0
    top = list(recommended)[:n]
    disc = dcg_discounts(n)
    # plain left-to-right sums, so the result does not depend on numpy's
    # pairwise summation blocking
    dcg = sum(float(disc[r]) for r, i in enumerate(top) if i in rel)
    idcg = sum(float(d) for d in disc[: min(n, len(rel))])
    return dcg / idcg


def recall_at(recommended, relevant, n: int) -> float:
    rel = set(relevant) if not isinstance(relevant, (set, frozenset)) else relevant
    if not rel:
        return 0.0
    hits = sum(1 for i in list(recommended)[:n] if i in rel)
    return hits / len(rel)


def avg_recommendation_popularity(
    recommendations: Iterable[Sequence[int]], degrees: DegreeVectors | np.ndarray, n_users_total: int
) -> float:
    "Mean of ``d_i / U`` over every recommended slot."
    item_deg = degrees.item_degrees if isinstance(degrees, DegreeVectors) else np.asarray(degrees)
    total = 0.0
    count = 0
    for recs in recommendations:
        recs = np.asarray(recs, dtype=np.int64)
        total += float(item_deg[recs].sum())
        count += len(recs)
    if count == 0:
        return 0.0
    return total / count / n_users_total


@dataclass
class EvalReport:
    ndcg: dict[int, float]
    recall: dict[int, float]
    avg_popularity: dict[int, float]
    n_users_evaluated: int
    n_users_skipped: int = 0
    n_short_lists: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("ndcg", "recall", "avg_popularity"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        for key in ("ndcg", "recall", "avg_popularity"):
            d[key] = {int(k): float(v) for k, v in d[key].items()}
        return cls(**d)

    def table_row(self) -> dict[str, float]:
        "The headline numbers: NDCG@20, Recall@5 and Recall@20."
        return {"NDCG@20": self.ndcg[20], "Recall@5": self.recall[5], "Recall@20": self.recall[20]}

    def to_csv(self) -> str:
        row = self.table_row()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *row.keys()])
        w.writerow([self.metadata.get("model", ""), *(repr(float(v)) for v in row.values())])
        return buf.getvalue()


def phase_matrices(split: SplitDataset, phase: str) -> tuple[InteractionMatrix, InteractionMatrix, InteractionMatrix]:
    """
    ``(fit, mask, target)`` matrices for a phase: the matrix the model must
    be fitted on, the items to mask, and the held-out items.
    """
    if phase == "validation":
        return split.train, split.train, split.validation
    if phase == "test":
        merged = merge_train_val(split)
        return merged, merged, split.test
    raise ValueError(f"unknown phase {phase!r}")


def evaluate(
    model,
    split: SplitDataset,
    phase: str = "test",
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    *,
    batch_size: int = 512,
    metadata: dict | None = None,
    check_fit: bool = True,
) -> EvalReport:
    """
    Evaluate a fitted model on the validation or test items of a split.

    The model must have been fitted on the phase's training matrix; a
    mismatching training fingerprint raises :class:`ValueError`.  Users with
    no held-out items are not evaluated; cold users are skipped and
    counted.
    """
    fit_m, mask_m, target = phase_matrices(split, phase)
    if check_fit:
        fp = getattr(model, "train_fingerprint", "")
        if fp and fp != fit_m.fingerprint():
            raise ValueError(f"model was not fitted on the {phase}-phase training matrix")
    cutoffs = sorted(set(int(c) for c in cutoffs))
    nmax = cutoffs[-1]
    item_deg = degrees(fit_m).item_degrees
    disc = dcg_discounts(nmax)

    users = np.flatnonzero(np.diff(target.row_ptr) > 0)
    cold = model.cold_users()[users]
    skipped = int(cold.sum())
    users = users[~cold]

    ndcg_sum = {c: 0.0 for c in cutoffs}
    rec_sum = {c: 0.0 for c in cutoffs}
    pop_sum = {c: 0.0 for c in cutoffs}
    slots = {c: 0 for c in cutoffs}
    short = 0
    for start in range(0, len(users), batch_size):
        block = users[start : start + batch_size]
        scores = model.score_users(block)
        for row, u in enumerate(block):
            recs = rank_top_n(scores[row], mask_m.row_items(u), nmax)
            if len(recs) < nmax:
                short += 1
            rel = target.row_items(u)
            hits = np.isin(recs, rel)
            n_rel = len(rel)
            for c in cutoffs:
                h = hits[:c]
                idcg = disc[: min(c, n_rel)].sum()
                ndcg_sum[c] += float(disc[: len(h)][h].sum() / idcg)
                rec_sum[c] += float(h.sum()) / n_rel
                pop_sum[c] += float(item_deg[recs[:c]].sum())
                slots[c] += min(c, len(recs))
    n_eval = len(users)
    if skipped:
        _log.info("skipped %d cold users", skipped)
    if short:
        _log.warning("%d users had fewer than %d unmasked items", short, nmax)
    n_total = split.n_users
    meta = {"phase": phase, "model": getattr(model, "tag", type(model).__name__)}
    if hasattr(model, "hyperparameters"):
        meta["hyperparameters"] = model.hyperparameters()
    meta["seed"] = split.seed
    meta.update(metadata or {})
    return EvalReport(
        ndcg={c: ndcg_sum[c] / n_eval if n_eval else 0.0 for c in cutoffs},
        recall={c: rec_sum[c] / n_eval if n_eval else 0.0 for c in cutoffs},
        avg_popularity={c: pop_sum[c] / slots[c] / n_total if slots[c] else 0.0 for c in cutoffs},
        n_users_evaluated=n_eval,
        n_users_skipped=skipped,
        n_short_lists=short,
        metadata=meta,
    )
