"""
Loading raw interaction logs, k-core pruning and per-user random splits.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from .sparse import InteractionMatrix

_log = logging.getLogger(__name__)

SPLIT_FORMAT_VERSION = 1
_PARTS = ("train", "validation", "test")


class MalformedRowError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class EmptyCoreWarning(UserWarning):
    "k-core pruning removed every interaction."


@dataclass(frozen=True)
class CsvSpec:
    """
    How to read an interaction file.

    ``layout="triplets"`` reads one interaction per line from the given
    columns.  ``layout="lists"`` reads ``user item item ...`` lines (as in
    pre-split graph recommendation datasets), with unit weights.
    """

    delimiter: str = ","
    user_col: int = 0
    item_col: int = 1
    weight_col: int | None = 2
    timestamp_col: int | None = None
    header: bool = False
    min_rating: float | None = None
    layout: Literal["triplets", "lists"] = "triplets"
    encoding: str = "utf-8"


@dataclass
class RawInteractions:
    """
    Interaction records with string tokens.  ``frame`` has columns
    ``user``, ``item``, ``weight`` and ``timestamp`` (nullable integer).
    """

    frame: pd.DataFrame = field(default_factory=lambda: _frame([], [], [], []))

    @classmethod
    def from_records(cls, records) -> RawInteractions:
        records = list(records)
        users = [str(r[0]) for r in records]
        items = [str(r[1]) for r in records]
        weights = [float(r[2]) if len(r) > 2 else 1.0 for r in records]
        ts = [r[3] if len(r) > 3 else None for r in records]
        return cls(_frame(users, items, weights, ts))

    def records(self) -> list[tuple[str, str, float, int | None]]:
        ts = [None if pd.isna(t) else int(t) for t in self.frame["timestamp"]]
        return list(zip(self.frame["user"], self.frame["item"], self.frame["weight"].astype(float), ts))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n_users(self) -> int:
        return self.frame["user"].nunique()

    @property
    def n_items(self) -> int:
        return self.frame["item"].nunique()

    def pairs(self) -> set[tuple[str, str]]:
        return set(zip(self.frame["user"], self.frame["item"]))


def _frame(users, items, weights, ts) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "user": pd.Series(users, dtype=object),
            "item": pd.Series(items, dtype=object),
            "weight": pd.Series(weights, dtype=np.float64),
            "timestamp": pd.Series(ts, dtype="Int64"),
        }
    )


def _parse_time(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        pass
    t = datetime.fromisoformat(text.replace("Z", "+00:00"))
    return int(t.timestamp())


def load_triplets(path: str | Path, format: CsvSpec | None = None) -> RawInteractions:
    """
    Read an interaction file.

    Duplicate ``(user, item)`` pairs keep the record with the latest
    timestamp (the later line on ties), or the first occurrence when there
    are no timestamps.  ``min_rating`` is applied after de-duplication.

    Raises
    ------
    MalformedRowError
        with the 1-based line number of the offending line.
    """
    spec = format or CsvSpec()
    users: list[str] = []
    items: list[str] = []
    weights: list[float] = []
    stamps: list[int | None] = []
    delim = spec.delimiter
    with open(path, encoding=spec.encoding, newline="") as f:
        for line_no, line in enumerate(f, start=1):
            if spec.header and line_no == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(delim) if delim != " " else line.split()
            if spec.layout == "lists":
                u = fields[0].strip()
                if not u:
                    raise MalformedRowError(path, line_no, "missing user")
                for it in fields[1:]:
                    it = it.strip()
                    if it:
                        users.append(u)
                        items.append(it)
                        weights.append(1.0)
                        stamps.append(None)
                continue
            need = max(c for c in (spec.user_col, spec.item_col, spec.weight_col, spec.timestamp_col) if c is not None)
            if len(fields) <= need:
                raise MalformedRowError(path, line_no, f"expected at least {need + 1} fields, got {len(fields)}")
            u = fields[spec.user_col].strip()
            it = fields[spec.item_col].strip()
            if not u or not it:
                raise MalformedRowError(path, line_no, "empty user or item")
            w = 1.0
            if spec.weight_col is not None:
                try:
                    w = float(fields[spec.weight_col])
                except ValueError:
                    raise MalformedRowError(path, line_no, f"bad weight {fields[spec.weight_col]!r}") from None
                if not w >= 0:
                    raise MalformedRowError(path, line_no, "negative weight")
            ts = None
            if spec.timestamp_col is not None:
                try:
                    ts = _parse_time(fields[spec.timestamp_col].strip())
                except ValueError:
                    raise MalformedRowError(path, line_no, f"bad timestamp {fields[spec.timestamp_col]!r}") from None
            users.append(u)
            items.append(it)
            weights.append(w)
            stamps.append(ts)

    df = _frame(users, items, weights, stamps)
    _log.info("read %d records from %s", len(df), path)
    df = deduplicate(df)
    if spec.min_rating is not None:
        df = df[df["weight"] >= spec.min_rating].reset_index(drop=True)
    return RawInteractions(df)


def deduplicate(df: pd.DataFrame) -> pd.DataFrame:
    if df.empty:
        return df.reset_index(drop=True)
    df = df.reset_index(drop=True)
    if df["timestamp"].notna().any():
        order = df.assign(_ts=df["timestamp"].fillna(np.iinfo(np.int64).min)).sort_values("_ts", kind="stable")
        kept = order.drop_duplicates(["user", "item"], keep="last").drop(columns="_ts")
    else:
        kept = df.drop_duplicates(["user", "item"], keep="first")
    return kept.sort_index().reset_index(drop=True)


def k_core_filter(raw: RawInteractions, k: int) -> RawInteractions:
    """
    Largest subgraph where every user and every item has at least ``k``
    interactions, found by alternately pruning users and items until
    nothing changes.  Output rows are sorted by ``(user, item)``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    df = raw.frame.drop_duplicates(["user", "item"], keep="first")
    rounds = 0
    while True:
        rounds += 1
        before = len(df)
        ucount = df.groupby("user")["item"].transform("size")
        df = df[ucount >= k]
        icount = df.groupby("item")["user"].transform("size")
        df = df[icount >= k]
        if len(df) == before:
            break
    df = df.sort_values(["user", "item"], kind="stable").reset_index(drop=True)
    _log.info("%d-core after %d rounds: %d interactions", k, rounds, len(df))
    if df.empty:
        warnings.warn(f"{k}-core is empty", EmptyCoreWarning, stacklevel=2)
    return RawInteractions(df)


def _token_order(tokens) -> list[str]:
    uniq = sorted(set(tokens))
    if all(t.lstrip("-").isdigit() for t in uniq):
        uniq.sort(key=int)
    return uniq


def _token_key(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass
class SplitDataset:
    train: InteractionMatrix
    validation: InteractionMatrix
    test: InteractionMatrix
    user_index: list[str]
    item_index: list[str]
    seed: int
    k_core: int | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    @property
    def n_interactions(self) -> int:
        return self.train.nnz + self.validation.nnz + self.test.nnz

    def stats(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_interactions": self.n_interactions,
            "n_train": self.train.nnz,
            "n_validation": self.validation.nnz,
            "n_test": self.test.nnz,
        }


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    "``(n_train, n_val, n_test)`` for a profile of ``n`` interactions."
    _, r_val, r_test = ratios
    n_test = math.floor(r_test * n + 1e-9)
    n_val = math.floor(r_val * n + 1e-9)
    while n - n_val - n_test < 1 and (n_val or n_test):
        if n_val >= n_test:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def split_per_user(raw: RawInteractions, ratios=(0.8, 0.1, 0.1), seed: int = 0, *, k_core: int | None = None) -> SplitDataset:
    """
    Randomly split each user's interactions into train/validation/test.

    Each profile (items in id order) is shuffled by a generator seeded with
    ``(seed, hash(user token))``, so a user's split does not depend on which
    other users are present.  Validation and test sizes are rounded down.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    df = raw.frame.drop_duplicates(["user", "item"], keep="first")
    user_index = _token_order(df["user"])
    item_index = _token_order(df["item"])
    uid = pd.Series(np.arange(len(user_index)), index=user_index)
    iid = pd.Series(np.arange(len(item_index)), index=item_index)
    u = uid.loc[df["user"].to_numpy()].to_numpy() if len(df) else np.zeros(0, dtype=np.int64)
    i = iid.loc[df["item"].to_numpy()].to_numpy() if len(df) else np.zeros(0, dtype=np.int64)
    order = np.lexsort((i, u))
    u, i = u[order], i[order]
    bounds = np.flatnonzero(np.diff(u)) + 1
    starts = np.concatenate([[0], bounds]) if len(u) else np.zeros(0, dtype=np.int64)
    ends = np.concatenate([bounds, [len(u)]]) if len(u) else np.zeros(0, dtype=np.int64)

    part = np.zeros(len(u), dtype=np.int8)
    for sp, ep in zip(starts, ends):
        n = ep - sp
        _, n_val, n_test = split_counts(n, ratios)
        rng = np.random.default_rng([seed, _token_key(user_index[u[sp]])])
        perm = rng.permutation(n)
        part[sp + perm[:n_test]] = 2
        part[sp + perm[n_test : n_test + n_val]] = 1

    shape = (len(user_index), len(item_index))
    mats = [InteractionMatrix.from_coo(u[part == p], i[part == p], shape) for p in range(3)]
    return SplitDataset(*mats, user_index=user_index, item_index=item_index, seed=seed, k_core=k_core)


def merge_train_val(ds: SplitDataset) -> InteractionMatrix:
    "Union of the training and validation interactions."
    return InteractionMatrix.from_scipy(ds.train.csr + ds.validation.csr)


def _part_lines(m: InteractionMatrix) -> str:
    users, items, _ = m.coo()
    lines = ["user_id\titem_id\n"]
    lines.extend(f"{a}\t{b}\n" for a, b in zip(users.tolist(), items.tolist()))
    return "".join(lines)


def save_split(ds: SplitDataset, directory: str | Path) -> Path:
    """
    Write a split as ``train.tsv``, ``validation.tsv``, ``test.tsv``
    (``user_id<TAB>item_id`` with a header), ``index.tsv``
    (``kind<TAB>id<TAB>token``) and ``meta.json``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, m in zip(_PARTS, (ds.train, ds.validation, ds.test)):
        (d / f"{name}.tsv").write_text(_part_lines(m), encoding="utf-8")
    lines = ["kind\tid\ttoken\n"]
    for kind, index in (("user", ds.user_index), ("item", ds.item_index)):
        for n, tok in enumerate(index):
            if any(c in tok for c in "\t\r\n"):
                raise ValueError(f"token {tok!r} cannot be written to a TSV index")
            lines.append(f"{kind}\t{n}\t{tok}\n")
    (d / "index.tsv").write_text("".join(lines), encoding="utf-8")
    meta = {"format_version": SPLIT_FORMAT_VERSION, "seed": ds.seed, "k_core": ds.k_core, **ds.stats()}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_split(directory: str | Path) -> SplitDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != SPLIT_FORMAT_VERSION:
        raise ValueError(f"unsupported split format {meta.get('format_version')}")
    index = pd.read_csv(d / "index.tsv", sep="\t", dtype={"token": str}, keep_default_na=False)
    user_index = index.loc[index["kind"] == "user"].sort_values("id")["token"].tolist()
    item_index = index.loc[index["kind"] == "item"].sort_values("id")["token"].tolist()
    shape = (len(user_index), len(item_index))
    mats = []
    for name in _PARTS:
        part = pd.read_csv(d / f"{name}.tsv", sep="\t", dtype=np.int64)
        mats.append(InteractionMatrix.from_coo(part["user_id"].to_numpy(), part["item_id"].to_numpy(), shape))
    return SplitDataset(*mats, user_index=user_index, item_index=item_index, seed=meta["seed"], k_core=meta.get("k_core"))


def split_digest(ds: SplitDataset) -> str:
    "SHA-256 over the persisted representation of a split."
    h = hashlib.sha256()
    for m in (ds.train, ds.validation, ds.test):
        h.update(_part_lines(m).encode("utf-8"))
    for index in (ds.user_index, ds.item_index):
        h.update("\n".join(index).encode("utf-8"))
        h.update(b"\0")
    h.update(str(ds.seed).encode())
    return h.hexdigest()
