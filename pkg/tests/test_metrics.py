import numpy as np
import pytest

from semicp.cloud import NormalizationMap, PointCloud
from semicp.deform import ControlGrid, interpolate
from semicp.errors import AllCellsFolded, EmptyCloud, LengthMismatch
from semicp.metrics import MetricsReport, evaluate, hd95, msd, sdlogj, tre
from semicp.rigid import RigidTransform

from conftest import random_cloud


def brute_nn(p, q):
    d = np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=-1))
    return d.min(axis=1)


def brute_percentile(x, pct):
    # linear interpolation between closest ranks, written out
    s = np.sort(x)
    pos = pct / 100 * (len(s) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def test_trivial_values():
    a = np.zeros((1, 3))
    assert msd(a, [[1.0, 0, 0]]) == 1.0
    assert hd95(a, [[7.0, 0, 0]]) == 7.0
    c = np.random.default_rng(0).standard_normal((30, 3))
    assert hd95(c, c) == 0.0 and msd(c, c) == 0.0 and tre(c, c) == 0.0
    assert tre(c + [3.0, 4.0, 0.0], c) == pytest.approx(5.0, abs=1e-12)


def test_percentile_rule():
    # nearest distances 1..100 mm along a line
    p = np.column_stack([np.arange(1, 101, dtype=float), np.zeros(100), np.zeros(100)])
    assert hd95(p, np.zeros((1, 3))) == pytest.approx(95.05, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_distance_metrics_equal_brute_force(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(-10, 10, (r.integers(1, 301), 3))
    q = r.uniform(-10, 10, (r.integers(1, 301), 3))
    d = brute_nn(p, q)
    assert msd(p, q) == d.mean()
    assert hd95(p, q) == brute_percentile(d, 95)
    q2 = r.uniform(-10, 10, p.shape)
    assert tre(p, q2) == np.sqrt(((p - q2) ** 2).sum(axis=1)).mean()


def test_directed_not_symmetric():
    p = np.array([[0.0, 0, 0]])
    q = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    assert msd(p, q) == 0.0 and msd(q, p) == 5.0
    assert hd95(p, q) != hd95(q, p)


def test_rigid_invariance(rng):
    p, q = rng.uniform(-50, 50, (100, 3)), rng.uniform(-50, 50, (80, 3))
    T = RigidTransform(rng.uniform(-1, 1, 3), rng.uniform(-20, 20, 3))
    assert abs(msd(T.apply(p), T.apply(q)) - msd(p, q)) < 1e-9
    assert abs(hd95(T.apply(p), T.apply(q)) - hd95(p, q)) < 1e-9


def test_errors():
    with pytest.raises(EmptyCloud):
        msd(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(LengthMismatch):
        tre(np.zeros((2, 3)), np.zeros((3, 3)))


def _dense_oracle(grid, h=1e-3):
    """Central differences of the mm-space map x -> x + d(x) at every cell centre."""
    norm = grid.normalization
    G = grid.size
    centres = -1.0 + grid.step * (np.arange(G - 1) + 0.5)
    logs = []
    folded = 0
    for c in np.stack(np.meshgrid(centres, centres, centres, indexing="ij"), -1).reshape(-1, 3):
        x = norm.inverse(c)
        J = np.empty((3, 3))
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fp = (x + e) + interpolate(grid, norm.forward(x + e)[None])[0] / norm.scale
            fm = (x - e) + interpolate(grid, norm.forward(x - e)[None])[0] / norm.scale
            J[:, a] = (fp - fm) / (2 * h)
        det = np.linalg.det(J)
        if det > 0:
            logs.append(np.log(det))
        else:
            folded += 1
    return float(np.std(logs)), folded / (G - 1) ** 3


@pytest.mark.parametrize("seed", range(5))
def test_sdlogj_matches_dense_oracle(seed):
    r = np.random.default_rng(seed)
    norm = NormalizationMap(r.uniform(-20, 20, 3), 1.0 / r.uniform(40, 120, 3))
    grid = ControlGrid(4, r.normal(0, 0.08, (4, 4, 4, 3)), norm)
    s, f = sdlogj(grid)
    so, fo = _dense_oracle(grid)
    assert abs(s - so) < 1e-6 and f == fo


def test_sdlogj_trivial_fields():
    norm = NormalizationMap([0, 0, 0], [0.01, 0.02, 0.04])
    assert sdlogj(ControlGrid.zeros(5, norm)) == (0.0, 0.0)
    g = ControlGrid.zeros(5, norm)
    g.displacements = 0.05 * g.node_positions()
    s, f = sdlogj(g)
    assert s < 1e-12 and f == 0.0
    r = np.random.default_rng(3)
    g.displacements = r.normal(0, 0.05, g.displacements.shape)
    shifted = ControlGrid(5, g.displacements + [0.2, -0.1, 0.3], norm)
    assert abs(sdlogj(g)[0] - sdlogj(shifted)[0]) < 1e-12


def test_all_folded():
    g = ControlGrid.zeros(3)
    g.displacements = -2.0 * g.node_positions()  # x -> -x, det = -1
    with pytest.raises(AllCellsFolded):
        sdlogj(g)


def test_report_average_and_text_roundtrip(rng):
    src, tgt = random_cloud(rng, 100, labels=(1, 2, 3)), random_cloud(rng, 100, labels=(1, 2, 3))
    rep = evaluate(src, tgt, truth=tgt.points)
    for key in ("hd95", "msd", "tre"):
        assert rep.average[key] == np.mean([m[key] for m in rep.per_label.values()])
    rep.sdlogj, rep.folded_cell_fraction, rep.runtime_s = 0.1, 0.0, 1.5
    back = MetricsReport.from_text(rep.to_text())
    assert back.per_label == rep.per_label and back.sdlogj == 0.1 and back.runtime_s == 1.5


def test_evaluate_identical_is_zero(rng):
    c = random_cloud(rng, 100)
    rep = evaluate(c, c)
    assert all(v == 0.0 for m in rep.per_label.values() for v in m.values())


def test_evaluate_uses_shared_labels_only():
    a = PointCloud([[0, 0, 0], [1, 1, 1]], [1, 5])
    b = PointCloud([[0, 0, 1], [9, 9, 9]], [1, 2])
    assert list(evaluate(a, b).per_label) == [1]
