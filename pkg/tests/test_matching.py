import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semicp.cloud import PointCloud
from semicp.errors import MissingLabelIndex
from semicp.matching import build_index, match

from conftest import random_cloud


def brute_force(src, tgt, semantic=True):
    idx, d2 = [], []
    for p, lab in zip(src.points, src.labels):
        cand = np.flatnonzero(tgt.labels == lab) if semantic else np.arange(len(tgt))
        dist = ((tgt.points[cand] - p) ** 2).sum(axis=1)
        j = np.flatnonzero(dist == dist.min())[0]  # lowest index among ties
        idx.append(cand[j])
        d2.append(dist[j])
    return np.array(idx), np.array(d2)


def test_label_constraint_beats_proximity():
    src = PointCloud([[0, 0, 0]], [1])
    tgt = PointCloud([[1, 0, 0], [0.5, 0, 0]], [1, 2])
    corr = match(build_index(tgt), src)
    assert corr.target_index[0] == 0 and corr.sq_dist[0] == 1.0
    assert match(build_index(tgt, semantic=False), src).target_index[0] == 1


def test_index_partition(rng):
    tgt = random_cloud(rng, 100)
    index = build_index(tgt)
    assert sum(len(s.members) for s in index.per_label.values()) == len(tgt)
    assert np.array_equal(np.sort(np.concatenate([s.members for s in index.per_label.values()])), np.arange(100))
    assert len(build_index(tgt, semantic=False).per_label) == 0
    hits, _ = index.query(rng.uniform(-50, 50, (50, 3)), 1)
    assert np.all(tgt.labels[hits] == 1)


def test_self_match(rng):
    c = random_cloud(rng, 150)
    corr = match(build_index(c), c)
    assert np.array_equal(corr.target_index, np.arange(150))
    assert np.all(corr.sq_dist == 0)


@pytest.mark.parametrize("semantic", [True, False])
def test_matches_brute_force(rng, semantic):
    src, tgt = random_cloud(rng, 300), random_cloud(rng, 300)
    corr = match(build_index(tgt, semantic), src)
    idx, d2 = brute_force(src, tgt, semantic)
    assert np.array_equal(corr.target_index, idx)
    assert np.array_equal(corr.sq_dist, d2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 40))
def test_exact_on_integer_lattices_with_ties(seed, n, m):
    # small integer coordinates force many equidistant candidates
    r = np.random.default_rng(seed)
    src = PointCloud(r.integers(-2, 3, (n, 3)), r.integers(0, 2, n))
    tl = r.integers(0, 2, m)
    tl[:2] = [0, 1] if m >= 2 else tl[:2]
    tgt = PointCloud(r.integers(-2, 3, (m, 3)), tl)
    semantic = set(src.label_set) <= set(tgt.label_set)
    corr = match(build_index(tgt, semantic), src)
    idx, d2 = brute_force(src, tgt, semantic)
    assert np.array_equal(corr.target_index, idx)
    assert np.array_equal(corr.sq_dist, d2)


def test_missing_label_index_and_fallback():
    src = PointCloud([[0, 0, 0], [1, 1, 1]], [1, 3])
    tgt = PointCloud([[0, 0, 0], [5, 5, 5]], [1, 2])
    with pytest.raises(MissingLabelIndex):
        match(build_index(tgt), src)
    corr = match(build_index(tgt), src, fallback_global=True)
    assert list(corr.target_index) == [0, 0]
