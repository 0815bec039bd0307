import os
from pathlib import Path

import numpy as np
import scipy.sparse as sps
from pytest import fixture

from spectralrec.fixture import FIXTURE_SPEC, fixture_path
from spectralrec.ingest import k_core_filter, load_triplets, split_per_user
from spectralrec.sparse import InteractionMatrix

GOLDEN = Path(__file__).parent / "golden"
FIXTURE_SEED = 7
FIXTURE_K = 10

_criteria: dict[str, tuple[str, str, str]] = {}


def random_interactions(rng, n_users, n_items, density, binary=True) -> InteractionMatrix:
    m = sps.random(n_users, n_items, density=density, random_state=rng, format="csr")
    if binary:
        m.data[:] = 1.0
    else:
        m.data = rng.uniform(0.05, 1.0, m.nnz)
    return InteractionMatrix.from_scipy(m)


@fixture(scope="session")
def fixture_raw():
    return k_core_filter(load_triplets(fixture_path(), FIXTURE_SPEC), FIXTURE_K)


@fixture(scope="session")
def fixture_split(fixture_raw):
    return split_per_user(fixture_raw, seed=FIXTURE_SEED, k_core=FIXTURE_K)


@fixture
def rng():
    return np.random.default_rng(42)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    cid, title = mark.args
    if call.when == "setup" and call.excinfo is not None:
        if call.excinfo.errisinstance(BaseException) and call.excinfo.typename == "Skipped":
            _criteria[cid] = ("SKIP", title, str(call.excinfo.value))
        else:
            _criteria[cid] = ("FAIL", title, "setup error")
    elif call.when == "call":
        if call.excinfo is None:
            _criteria.setdefault(cid, ("PASS", title, ""))
        elif call.excinfo.typename == "Skipped":
            _criteria[cid] = ("SKIP", title, str(call.excinfo.value))
        else:
            _criteria[cid] = ("FAIL", title, call.excinfo.typename)


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        _criteria.pop(mark.args[0], None)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[2:])):
        status, title, note = _criteria[cid]
        line = f"{cid:5s} {status:4s}  {title}"
        if note:
            line += f"  [{note}]"
        terminalreporter.write_line(line)


def dataset_path(name: str) -> str | None:
    p = os.environ.get(f"SPECTRALREC_{name.upper()}")
    return p if p and Path(p).exists() else None
