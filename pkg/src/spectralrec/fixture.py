"""
Tiny synthetic interaction log bundled for tests and smoke runs.

Users belong to a few taste groups, items have Zipf-like popularity, and
each user samples items from a mixture of their group's catalogue and the
global popularity distribution.  The committed ``data/fixture.csv`` was
produced by :func:`generate_fixture` with the defaults.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .ingest import CsvSpec

FIXTURE_SPEC = CsvSpec(delimiter=",", user_col=0, item_col=1, weight_col=2, timestamp_col=3, header=True)


def fixture_path() -> Path:
    return Path(str(resources.files("spectralrec") / "data" / "fixture.csv"))


def generate_fixture(
    n_users: int = 150, n_items: int = 90, n_groups: int = 4, seed: int = 20240501
) -> list[tuple[str, str, int, int]]:
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, n_items + 1) ** 1.1
    rng.shuffle(pop)
    item_group = rng.integers(0, n_groups, n_items)
    rows = []
    t = 1_000_000
    for u in range(n_users):
        g = u % n_groups
        taste = pop * np.where(item_group == g, 6.0, 1.0)
        taste /= taste.sum()
        n = int(rng.integers(6, 36))
        items = rng.choice(n_items, size=n, replace=False, p=taste)
        for i in items:
            t += int(rng.integers(1, 500))
            rows.append((f"u{u:03d}", f"i{int(i):03d}", int(rng.integers(1, 6)), t))
    return rows


def write_fixture(path: str | Path, rows=None) -> None:
    rows = generate_fixture() if rows is None else rows
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("user,item,rating,timestamp\n")
        for r in rows:
            f.write(",".join(str(x) for x in r) + "\n")
