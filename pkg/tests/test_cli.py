import json

import numpy as np
import pytest

from semicp.cli import main
from semicp.cloud import PointCloud
from semicp.deform import ControlGrid, ElasticParams, GridMeta, RegWeights, load_grid, save_grid
from semicp.metrics import MetricsReport
from semicp.pipeline import RunConfig, rigid_from_json, rigid_to_json
from semicp.plyio import read_ply, write_ply
from semicp.rigid import RigidTransform
from pydantic import ValidationError

FAST = {"rigid": {"max_iter": 150}, "nonrigid": {"max_iter": 40, "grid": 9}}


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = {"warp": {"max_disp_mm": 3.0}, "perturbation": {"theta_max_deg": 5.0, "noise_mm": 0.0}}
    (root / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", str(root / "spec.json"), str(root / "cases")]) == 0
    (root / "fast.json").write_text(json.dumps(FAST))
    return root


def _register(case, out, *extra):
    c = case / "cases" / "case_0"
    return main([*extra, "register", str(c / "source.ply"), str(c / "target.ply"), str(out),
                 "--config", str(case / "fast.json"), "--gt", str(c / "gt.json")])


def test_config_defaults_and_strictness():
    cfg = RunConfig()
    assert cfg.rigid.lr == 1e-3 and cfg.rigid.max_iter == 500 and cfg.rigid.downsample == 1000
    assert cfg.nonrigid.lr == 0.01 and cfg.nonrigid.max_iter == 300 and cfg.nonrigid.grid == 25
    assert cfg.elasticity.E_pa == 1000 and cfg.elasticity.nu == 0.499 and cfg.elasticity.form == "squared"
    assert cfg.convergence.rel_tol == 1e-5 and cfg.convergence.patience == 20
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"rigid": {"learning_rate": 0.1}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"elasticity": {"nu": 0.5}})
    assert RunConfig.model_validate_json(cfg.dump()) == cfg


def test_rigid_json_roundtrip_is_exact(rng):
    T = RigidTransform(rng.uniform(-1, 1, 3), rng.uniform(-9, 9, 3))
    back = rigid_from_json(rigid_to_json(T))
    assert np.array_equal(back.euler_xyz, T.euler_xyz) and np.array_equal(back.translation, T.translation)


def test_register_outputs_and_determinism(case, tmp_path, capsys):
    assert _register(case, tmp_path / "a") == 0
    assert _register(case, tmp_path / "b") == 0
    out = tmp_path / "a"
    for name in ("deformed_source.ply", "rigid.json", "field.grid", "metrics_before.txt", "metrics_after.txt",
                 "trace_rigid.csv", "trace_nonrigid.csv", "config.json"):
        assert (out / name).exists(), name
    for name in ("field.grid", "rigid.json"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    M = np.array(json.loads((out / "rigid.json").read_text())["matrix"])
    assert M.shape == (4, 4) and np.allclose(M[3], [0, 0, 0, 1])
    before = MetricsReport.from_text((out / "metrics_before.txt").read_text())
    after = MetricsReport.from_text((out / "metrics_after.txt").read_text())
    assert after.average["tre"] < 1.0 < before.average["tre"]
    assert after.sdlogj is not None
    echoed = RunConfig.load(out / "config.json")
    assert echoed.rigid.max_iter == 150 and echoed.nonrigid.grid == 9


def test_warp_reproduces_deformed_source(case, tmp_path):
    assert _register(case, tmp_path / "r") == 0
    r = tmp_path / "r"
    src = case / "cases" / "case_0" / "source.ply"
    assert main(["warp", str(src), str(r / "rigid.json"), str(r / "field.grid"), str(tmp_path / "w.ply")]) == 0
    a, b = read_ply(tmp_path / "w.ply"), read_ply(r / "deformed_source.ply")
    assert np.array_equal(a.points, b.points)


def test_no_semantic_flag(case, tmp_path):
    assert _register(case, tmp_path / "n", "--seed", "3") == 0
    c = case / "cases" / "case_0"
    assert main(["register", str(c / "source.ply"), str(c / "target.ply"), str(tmp_path / "m"),
                 "--config", str(case / "fast.json"), "--no-semantic"]) == 0
    assert RunConfig.load(tmp_path / "m" / "config.json").semantic is False
    assert RunConfig.load(tmp_path / "n" / "config.json").seed == 3


def test_register_rejects_missing_label(tmp_path, capsys):
    from plyfile import PlyData, PlyElement

    v = np.zeros(20, dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    PlyData([PlyElement.describe(v, "vertex")]).write(str(tmp_path / "n.ply"))
    assert main(["register", str(tmp_path / "n.ply"), str(tmp_path / "n.ply"), str(tmp_path / "o")]) == 2
    assert "'label'" in capsys.readouterr().err


def test_register_rejects_unknown_config_key(case, tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"rigid": {"lrr": 1}}')
    c = case / "cases" / "case_0"
    rc = main(["register", str(c / "source.ply"), str(c / "target.ply"), str(tmp_path / "o"),
               "--config", str(tmp_path / "bad.json")])
    assert rc == 2 and "lrr" in capsys.readouterr().err


def test_register_numerical_failure_exit_code(case, tmp_path, monkeypatch):
    import semicp.pipeline as pipeline
    from semicp.errors import NonFiniteGradient

    def boom(*a, **k):
        raise NonFiniteGradient("gradient contains NaN or inf")

    monkeypatch.setattr(pipeline, "register_nonrigid", boom)
    assert _register(case, tmp_path / "f") == 3
    assert (tmp_path / "f" / "rigid.json").exists() and (tmp_path / "f" / "trace_rigid.csv").exists()


def _zero_artifacts(tmp_path, cloud):
    from semicp.cloud import fit_normalization

    grid = ControlGrid.zeros(5, fit_normalization(cloud, cloud))
    save_grid(tmp_path / "z.grid", grid, GridMeta(ElasticParams(), RegWeights()))
    (tmp_path / "id.json").write_text(rigid_to_json(RigidTransform()))


def test_warp_identity_and_out_of_grid(tmp_path, rng, capsys):
    c = PointCloud(rng.uniform(-20, 20, (50, 3)), np.repeat([1, 2], 25))
    write_ply(tmp_path / "c.ply", c)
    _zero_artifacts(tmp_path, c)
    args = [str(tmp_path / "id.json"), str(tmp_path / "z.grid")]
    assert main(["warp", str(tmp_path / "c.ply"), *args, str(tmp_path / "o.ply")]) == 0
    assert np.array_equal(read_ply(tmp_path / "o.ply").points, c.points)
    far = PointCloud(np.vstack([c.points, [[500.0, 0, 0]]]), np.append(c.labels, 1))
    write_ply(tmp_path / "far.ply", far)
    assert main(["warp", str(tmp_path / "far.ply"), *args, str(tmp_path / "o.ply")]) == 2
    assert "point 50" in capsys.readouterr().err
    assert main(["warp", str(tmp_path / "far.ply"), *args, str(tmp_path / "o.ply"), "--clamp"]) == 0


def test_warp_version_mismatch(tmp_path, rng, capsys):
    c = PointCloud(rng.uniform(-20, 20, (50, 3)), np.repeat([1, 2], 25))
    write_ply(tmp_path / "c.ply", c)
    _zero_artifacts(tmp_path, c)
    doc = json.loads((tmp_path / "id.json").read_text())
    doc["version"] = 2
    (tmp_path / "v.json").write_text(json.dumps(doc))
    assert main(["warp", str(tmp_path / "c.ply"), str(tmp_path / "v.json"), str(tmp_path / "z.grid"),
                 str(tmp_path / "o.ply")]) == 2
    raw = bytearray((tmp_path / "z.grid").read_bytes())
    raw[8] = 7
    (tmp_path / "v.grid").write_bytes(bytes(raw))
    assert main(["warp", str(tmp_path / "c.ply"), str(tmp_path / "id.json"), str(tmp_path / "v.grid"),
                 str(tmp_path / "o.ply")]) == 2
    assert "version" in capsys.readouterr().err


def test_eval_identical_files(tmp_path, rng, capsys):
    c = PointCloud(rng.uniform(-20, 20, (50, 3)), np.repeat([1, 2], 25))
    write_ply(tmp_path / "c.ply", c)
    assert main(["eval", str(tmp_path / "c.ply"), str(tmp_path / "c.ply")]) == 0
    rep = MetricsReport.from_text(capsys.readouterr().out)
    assert all(v == 0.0 for m in rep.per_label.values() for v in m.values())


def test_synth_layout_and_bad_spec(tmp_path):
    (tmp_path / "s.json").write_text('{"replicas": 2, "perturbation": {"visible_ratio": 0.5}}')
    assert main(["synth", str(tmp_path / "s.json"), str(tmp_path / "out")]) == 0
    for i in range(2):
        names = {p.name for p in (tmp_path / "out" / f"case_{i}").iterdir()}
        assert names == {"source.ply", "target.ply", "gt.json"}
    assert len(read_ply(tmp_path / "out" / "case_0" / "source.ply")) == 4000
    (tmp_path / "b.json").write_text('{"replica": 2}')
    assert main(["synth", str(tmp_path / "b.json"), str(tmp_path / "out")]) == 2


def test_bench_rigid_rows(tmp_path):
    proto = {"kind": "rigid", "seeds": 2, "visibility": [0.25], "rotation_deg": [5.0],
             "config": {"rigid": {"max_iter": 100}}}
    (tmp_path / "p.json").write_text(json.dumps(proto))
    assert main(["bench", str(tmp_path / "p.json"), str(tmp_path / "b")]) == 0
    lines = (tmp_path / "b" / "bench_rigid.csv").read_text().splitlines()
    assert len(lines) == 3 and "tre_mean" in lines[0] and "tre_std" in lines[0]
    assert [l.split(",")[2] for l in lines[1:]] == ["semantic", "no-semantic"]


def test_bench_regularizer_rows(tmp_path):
    proto = {"kind": "regularizer", "seeds": 1, "config": {"nonrigid": {"grid": 9, "max_iter": 60}}}
    (tmp_path / "p.json").write_text(json.dumps(proto))
    assert main(["bench", str(tmp_path / "p.json"), str(tmp_path / "b")]) == 0
    lines = (tmp_path / "b" / "bench_regularizer.csv").read_text().splitlines()
    head = lines[0].split(",")
    assert len(lines) == 6 and "sdlogj_mean" in head
    rows = {l.split(",")[0]: float(l.split(",")[head.index("sdlogj_mean")]) for l in lines[1:]}
    assert set(rows) == {"els", "mag", "grad", "all", "none"}
    assert rows["none"] == max(rows.values())


def test_bench_malformed_protocol(tmp_path):
    (tmp_path / "p.json").write_text('{"kind": "rigidd"}')
    assert main(["bench", str(tmp_path / "p.json"), str(tmp_path / "b")]) == 2
