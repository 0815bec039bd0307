import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectralrec.ingest import (
    CsvSpec,
    EmptyCoreWarning,
    MalformedRowError,
    RawInteractions,
    k_core_filter,
    load_split,
    load_triplets,
    merge_train_val,
    save_split,
    split_counts,
    split_digest,
    split_per_user,
)

TAB = CsvSpec(delimiter="\t", timestamp_col=3)


def write(tmp_path, text, name="data.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def brute_k_core(pairs, k):
    "Set-based fixed point, one node at a time."
    pairs = set(pairs)
    changed = True
    while changed:
        changed = False
        ucount, icount = {}, {}
        for u, i in pairs:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        for u, i in list(pairs):
            if ucount[u] < k or icount[i] < k:
                pairs.discard((u, i))
                changed = True
    return pairs


def test_duplicate_keeps_latest(tmp_path):
    p = write(tmp_path, "u1\ti1\t3\t100\nu1\ti2\t1\t50\nu1\ti1\t5\t200\n")
    raw = load_triplets(p, TAB)
    recs = sorted(raw.records())
    assert recs == [("u1", "i1", 5.0, 200), ("u1", "i2", 1.0, 50)]


def test_duplicate_tie_keeps_later_line(tmp_path):
    p = write(tmp_path, "u\ti\t1\t7\nu\ti\t4\t7\n")
    assert load_triplets(p, TAB).records() == [("u", "i", 4.0, 7)]


def test_duplicate_without_timestamps_keeps_first(tmp_path):
    p = write(tmp_path, "a,x,2\na,x,5\n", "d.csv")
    assert load_triplets(p, CsvSpec()).records()[0][2] == 2.0


def test_malformed_row_reports_line(tmp_path):
    p = write(tmp_path, "u1\ti1\t3\t100\nu2\ti1\n")
    with pytest.raises(MalformedRowError) as e:
        load_triplets(p, TAB)
    assert e.value.line_no == 2


def test_bad_weight_reports_line(tmp_path):
    p = write(tmp_path, "u1\ti1\t3\t1\nu2\ti1\t3\t2\nu3\ti2\tx\t3\n")
    with pytest.raises(MalformedRowError) as e:
        load_triplets(p, TAB)
    assert e.value.line_no == 3


def test_empty_file(tmp_path):
    raw = load_triplets(write(tmp_path, ""), TAB)
    assert len(raw) == 0
    assert raw.n_users == 0


def test_iso_timestamps(tmp_path):
    p = write(tmp_path, "u\ti\t1\t2020-01-01T00:00:00Z\nu\ti\t2\t2019-01-01T00:00:00Z\n")
    assert load_triplets(p, TAB).records()[0][2] == 1.0


def test_min_rating_after_dedup(tmp_path):
    p = write(tmp_path, "u\ti\t5\t1\nu\ti\t1\t2\nu\tj\t4\t1\n")
    raw = load_triplets(p, CsvSpec(delimiter="\t", timestamp_col=3, min_rating=4))
    assert raw.pairs() == {("u", "j")}


def test_list_layout(tmp_path):
    p = write(tmp_path, "7 1 2 3\n8 2\n")
    raw = load_triplets(p, CsvSpec(delimiter=" ", layout="lists", weight_col=None))
    assert raw.pairs() == {("7", "1"), ("7", "2"), ("7", "3"), ("8", "2")}


def test_k_core_chain_collapses():
    recs = [(f"u{n}", f"i{n}", 1.0, None) for n in range(5)] + [(f"u{n}", f"i{n + 1}", 1.0, None) for n in range(4)]
    raw = RawInteractions.from_records(recs)
    with pytest.warns(EmptyCoreWarning):
        core = k_core_filter(raw, 2)
    assert len(core) == 0


def test_k_core_full_block_survives():
    recs = [(f"u{a}", f"i{b}", 1.0, None) for a in range(3) for b in range(3)]
    core = k_core_filter(RawInteractions.from_records(recs), 3)
    assert len(core) == 9


pair_lists = st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), max_size=80, unique=True)


@settings(max_examples=60, deadline=None)
@given(pair_lists, st.integers(1, 4), st.randoms(use_true_random=False))
def test_k_core_matches_brute_force_and_order(pairs, k, shuffler):
    pairs = [(f"u{a}", f"i{b}") for a, b in pairs]
    expected = brute_k_core(pairs, k)
    shuffled = list(pairs)
    shuffler.shuffle(shuffled)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCoreWarning)
        a = k_core_filter(RawInteractions.from_records([(u, i, 1.0, None) for u, i in pairs]), k)
        b = k_core_filter(RawInteractions.from_records([(u, i, 1.0, None) for u, i in shuffled]), k)
    assert a.pairs() == expected
    assert a.records() == b.records()
    for u, i in a.pairs():
        assert sum(1 for x in a.pairs() if x[0] == u) >= k
        assert sum(1 for x in a.pairs() if x[1] == i) >= k


@pytest.mark.parametrize("n, expected", [(10, (8, 1, 1)), (19, (17, 1, 1)), (20, (16, 2, 2)), (5, (5, 0, 0)), (1, (1, 0, 0))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def _raw_profiles(sizes):
    recs = []
    for u, n in enumerate(sizes):
        recs.extend((f"u{u}", f"i{j}", 1.0, None) for j in range(n))
    return RawInteractions.from_records(recs)


def test_split_sizes_per_user():
    ds = split_per_user(_raw_profiles([10, 19]), seed=3)
    assert np.diff(ds.train.row_ptr).tolist() == [8, 17]
    assert np.diff(ds.validation.row_ptr).tolist() == [1, 1]
    assert np.diff(ds.test.row_ptr).tolist() == [1, 1]


def test_split_deterministic_and_seed_dependent():
    raw = _raw_profiles([30, 40, 25])
    a = split_per_user(raw, seed=11)
    b = split_per_user(raw, seed=11)
    c = split_per_user(raw, seed=12)
    assert split_digest(a) == split_digest(b)
    assert split_digest(a) != split_digest(c)


def test_split_of_user_independent_of_other_users():
    a = split_per_user(_raw_profiles([30, 40]), seed=5)
    b = split_per_user(_raw_profiles([30, 40, 12]), seed=5)
    assert a.test.row_items(1).tolist() == b.test.row_items(1).tolist()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=12), st.integers(0, 2**32 - 1))
def test_split_partition_property(sizes, seed):
    raw = _raw_profiles(sizes)
    ds = split_per_user(raw, seed=seed)
    parts = [m.to_dense() for m in (ds.train, ds.validation, ds.test)]
    total = sum(parts)
    assert total.max() == 1
    assert total.sum() == sum(sizes)
    for u, n in enumerate(sizes):
        row = ds.user_index.index(f"u{u}")
        counts = tuple(int(p[row].sum()) for p in parts)
        assert counts == split_counts(n)
        assert counts[0] >= 1
    merged = merge_train_val(ds).to_dense()
    assert np.array_equal(merged, parts[0] + parts[1])


def test_numeric_tokens_sort_numerically():
    raw = RawInteractions.from_records([("10", "2", 1.0, None), ("9", "10", 1.0, None)])
    ds = split_per_user(raw)
    assert ds.user_index == ["9", "10"]
    assert ds.item_index == ["2", "10"]


def test_save_load_round_trip(tmp_path, fixture_split):
    save_split(fixture_split, tmp_path / "s")
    back = load_split(tmp_path / "s")
    assert back.train == fixture_split.train
    assert back.validation == fixture_split.validation
    assert back.test == fixture_split.test
    assert back.user_index == fixture_split.user_index
    assert back.item_index == fixture_split.item_index
    assert split_digest(back) == split_digest(fixture_split)


def test_fixture_core_stats(fixture_split):
    s = fixture_split.stats()
    assert (s["n_users"], s["n_items"], s["n_interactions"]) == (126, 86, 2930)
