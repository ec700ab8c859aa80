from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfbpath.dataset import (
    augment_flip,
    balance_classes,
    balance_indices,
    random_flips,
    read_folds,
    split_folds,
    write_folds,
)
from dfbpath.tiling import PatchRecord, PatchRect


def test_282_slide_fold_sizes():
    ids = [f"w{i}" for i in range(282)]
    splits = split_folds(ids, 5, seed=0)
    assert sorted(len(s.test_wsis) for s in splits) == [56, 56, 56, 57, 57]
    for s in splits:
        n = len(s.train_wsis) + len(s.val_wsis)
        assert len(s.val_wsis) == round(0.2 * n)


def test_one_slide_per_fold():
    splits = split_folds(list("abcde"), 5, seed=1)
    assert all(len(s.test_wsis) == 1 for s in splits)
    assert all(len(s.val_wsis) == 1 for s in splits)


def test_split_deterministic():
    ids = [f"w{i}" for i in range(30)]
    assert split_folds(ids, 5, 7) == split_folds(ids, 5, 7)
    assert split_folds(ids, 5, 7) != split_folds(ids, 5, 8)


@pytest.mark.parametrize("n,k", [(3, 5), (5, 1)])
def test_split_errors(n, k):
    with pytest.raises(ValueError):
        split_folds([str(i) for i in range(n)], k)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 40), st.integers(0, 1000))
def test_split_disjoint_and_covering(k, extra, seed):
    ids = [f"s{i}" for i in range(k + extra)]
    splits = split_folds(ids, k, seed)
    tests = Counter(w for s in splits for w in s.test_wsis)
    assert set(tests) == set(ids) and set(tests.values()) == {1}
    sizes = [len(s.test_wsis) for s in splits]
    assert max(sizes) - min(sizes) <= 1
    for s in splits:
        parts = [set(s.train_wsis), set(s.val_wsis), set(s.test_wsis)]
        assert sum(map(len, parts)) == len(ids)
        assert set().union(*parts) == set(ids)
        assert len(s.val_wsis) >= 1


def test_folds_csv_round_trip(tmp_path):
    splits = split_folds([f"w{i}" for i in range(12)], 3, 0)
    write_folds(tmp_path / "f.csv", splits)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "wsi_id,fold,role"
    back = read_folds(tmp_path / "f.csv")
    assert [set(b.test_wsis) for b in back] == [set(s.test_wsis) for s in splits]
    assert [set(b.val_wsis) for b in back] == [set(s.val_wsis) for s in splits]


def _records(counts):
    out = []
    for label, n in enumerate(counts):
        out += [PatchRecord(f"w{label}", PatchRect(i, 0, 1), float(i), label) for i in range(n)]
    return out


@pytest.mark.parametrize(
    "counts,expect", [((100, 50, 10), 50), ((20, 20, 20), 20), ((4, 4, 100), 4)]
)
def test_balance_to_median(counts, expect):
    recs = _records(counts)
    out = balance_classes(recs, seed=0)
    assert Counter(r.label for r in out) == {0: expect, 1: expect, 2: expect}


def test_balanced_input_is_permutation():
    recs = _records((20, 20, 20))
    out = balance_classes(recs, seed=3)
    assert sorted(map(id, out)) == sorted(map(id, recs))


def test_balance_missing_class():
    with pytest.raises(ValueError):
        balance_indices([0, 0, 1], seed=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=3, max_size=3), st.integers(0, 1000))
def test_balance_properties(counts, seed):
    labels = np.repeat([0, 1, 2], counts)
    idx = balance_indices(labels, seed)
    target = int(np.floor(np.median(counts) + 0.5))
    for c in range(3):
        picked = idx[labels[idx] == c]
        assert picked.size == target
        if counts[c] >= target:
            assert len(set(picked.tolist())) == picked.size
        else:
            assert set(np.flatnonzero(labels == c)) <= set(picked.tolist())
    assert np.array_equal(balance_indices(labels, seed), idx)


def test_flip_identity_and_involution():
    tile = np.random.default_rng(0).integers(0, 256, (5, 5, 3))
    assert np.array_equal(augment_flip(tile, (0, 0)), tile)
    assert np.array_equal(augment_flip(augment_flip(tile, (1, 1)), (1, 1)), tile)


def test_horizontal_flip_swaps_left_right():
    tile = np.zeros((4, 4), int)
    tile[0, 0], tile[0, 3], tile[3, 0], tile[3, 3] = 1, 2, 3, 4
    out = augment_flip(tile, (1, 0))
    assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (2, 1, 4, 3)
    out = augment_flip(tile, (0, 1))
    assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (3, 4, 1, 2)


def test_flip_rejects_non_square():
    with pytest.raises(ValueError):
        augment_flip(np.zeros((3, 4, 3)), (1, 0))


def test_random_flips_preserve_content():
    tiles = np.random.default_rng(1).integers(0, 256, (50, 6, 6, 3))
    out = random_flips(tiles, np.random.default_rng(2))
    for a, b in zip(tiles, out):
        assert any(np.array_equal(augment_flip(a, bits), b) for bits in [(0, 0), (1, 0), (0, 1), (1, 1)])
    assert not np.array_equal(out, tiles)
