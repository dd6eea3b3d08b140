import hashlib
import json

import pytest

from ahho.cli import (ConfigError, RunConfig, load_config, main, run,
                      serialize_config)


def write_config(tmp_path, **kwargs):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(kwargs))
    return path


def test_minimal_config_defaults(tmp_path):
    path = write_config(tmp_path, benchmark="manufactured-affine", k=0)
    cfg = load_config(path)
    assert cfg.theta == 0.5
    assert cfg.eps == "auto"
    assert cfg.resolved_eps() == 0.01
    assert cfg.mode == "adaptive"
    assert cfg.variant == "rt"


def test_eps_range_rejected(tmp_path):
    path = write_config(tmp_path, benchmark="manufactured-affine", k=0,
                        eps=5.0)
    with pytest.raises(ConfigError, match="eps"):
        load_config(path)


def test_stabilized_eps_range(tmp_path):
    # p-Laplace p=4: stabilized limit is (k+1)/(p-1) = 1/3 for k=0
    path = write_config(tmp_path, benchmark="p-laplace-lshape", k=0,
                        variant="stabilized", eps=0.5)
    with pytest.raises(ConfigError):
        load_config(path)
    path = write_config(tmp_path, benchmark="p-laplace-lshape", k=0,
                        variant="stabilized", eps=0.3)
    cfg = load_config(path)
    assert cfg.resolved_eps() == 0.3


def test_unknown_benchmark_named(tmp_path):
    path = write_config(tmp_path, benchmark="nonexistent")
    with pytest.raises(ConfigError, match="unknown benchmark"):
        load_config(path)


def test_unknown_keys_rejected(tmp_path):
    path = write_config(tmp_path, benchmark="manufactured-affine",
                        bogus=True)
    with pytest.raises(ConfigError, match="unknown config keys"):
        load_config(path)


def test_invalid_values_named(tmp_path):
    for bad in ({"theta": 1.5}, {"mode": "magic"}, {"variant": "x"},
                {"k": -1}, {"grad_tol": 0.0}, {"method": "cg"}):
        path = write_config(tmp_path, benchmark="manufactured-affine", **bad)
        with pytest.raises(ConfigError):
            load_config(path)


def test_config_roundtrip(tmp_path):
    path = write_config(tmp_path, benchmark="odp-lshape", k=1, theta=0.4,
                        eps=0.25, max_ndof=500, mode="uniform")
    cfg = load_config(path)
    out = tmp_path / "echo.json"
    serialize_config(cfg, out)
    cfg2 = load_config(out)
    assert cfg == cfg2


def test_run_manufactured_single_level(tmp_path):
    cfg = RunConfig(benchmark="manufactured-affine", k=0,
                    out=str(tmp_path / "out"))
    code = run(cfg)
    assert code == 0
    csv = (tmp_path / "out" / "convergence.csv").read_text().splitlines()
    header = csv[0].split(",")
    assert header == ["level", "ndof", "ntriangles", "energy", "estimator",
                      "stab", "err_energy", "err_grad_Lp",
                      "err_stress_Lpprime", "err_vol_L2", "leb", "rhs",
                      "seconds"]
    assert len(csv) == 2
    row = dict(zip(header, csv[1].split(",")))
    assert float(row["err_grad_Lp"]) < 1e-10
    assert float(row["err_energy"]) < 1e-10
    assert float(row["estimator"]) < 1e-10
    assert row["stab"] == ""      # RT variant: no stabilization column
    assert row["seconds"] == ""   # timing off by default
    assert (tmp_path / "out" / "level_000.mesh").exists()
    assert (tmp_path / "out" / "run.json").exists()


def test_rerun_byte_identical(tmp_path):
    def one(outdir):
        cfg = RunConfig(benchmark="p-laplace-lshape", k=0, mode="uniform",
                        max_ndof=300, out=str(outdir))
        assert run(cfg) == 0
        return hashlib.sha256(
            (outdir / "convergence.csv").read_bytes()).hexdigest()

    h1 = one(tmp_path / "a")
    h2 = one(tmp_path / "b")
    assert h1 == h2


def test_run_plaplace_energy_errors_decrease(tmp_path):
    cfg = RunConfig(benchmark="p-laplace-lshape", k=0, mode="uniform",
                    max_ndof=1200, out=str(tmp_path / "out"))
    assert run(cfg) == 0
    csv = (tmp_path / "out" / "convergence.csv").read_text().splitlines()
    header = csv[0].split(",")
    errs = [float(dict(zip(header, line.split(",")))["err_energy"])
            for line in csv[1:]]
    assert len(errs) >= 3
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # mesh files written per level
    for lvl in range(len(errs)):
        assert (tmp_path / "out" / f"level_{lvl:03d}.mesh").exists()


def test_cli_main_override_flags(tmp_path):
    code = main(["run", "--benchmark", "manufactured-affine", "--degree",
                 "1", "--out", str(tmp_path / "cli_out")])
    assert code == 0
    assert (tmp_path / "cli_out" / "convergence.csv").exists()


def test_cli_main_rejects_bad_eps(tmp_path, capsys):
    code = main(["run", "--benchmark", "manufactured-affine", "--eps",
                 "7.0", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "eps" in capsys.readouterr().err


def test_adaptive_run_outputs_and_determinism(tmp_path):
    """Adaptive two-well run: stab/LEB columns present where defined, mesh
    files read back conforming, run.json reloadable, rerun identical."""
    def one(outdir):
        cfg = RunConfig(benchmark="two-well-rect", k=0, mode="adaptive",
                        max_ndof=800, max_levels=12, out=str(outdir))
        assert run(cfg) == 0
        return (outdir / "convergence.csv").read_bytes()

    blob = one(tmp_path / "a")
    assert blob == one(tmp_path / "b")
    csv = blob.decode().splitlines()
    header = csv[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in csv[1:]]
    assert len(rows) >= 3
    ndofs = [int(r["ndof"]) for r in rows]
    assert all(b > a for a, b in zip(ndofs, ndofs[1:]))
    for r in rows:
        assert r["rhs"] == ""            # no conjugate for the two-well
        assert float(r["leb"]) <= 0.1078147674 + 1e-8
    # mesh readback: conforming, matching triangle counts
    from ahho.mesh import read_mesh
    for i, r in enumerate(rows):
        mesh = read_mesh(tmp_path / "a" / f"level_{i:03d}.mesh")
        assert mesh.num_triangles == int(r["ntriangles"])
    cfg2 = load_config(tmp_path / "a" / "run.json")
    assert cfg2.benchmark == "two-well-rect"


def test_stabilized_run_writes_stab_column(tmp_path):
    cfg = RunConfig(benchmark="odp-lshape", k=0, mode="uniform",
                    variant="stabilized", max_ndof=300,
                    out=str(tmp_path / "st"))
    assert run(cfg) == 0
    csv = (tmp_path / "st" / "convergence.csv").read_text().splitlines()
    header = csv[0].split(",")
    vals = [float(dict(zip(header, line.split(",")))["stab"])
            for line in csv[1:]]
    assert len(vals) >= 2
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_solver_failure_nonzero_exit_partial_csv(tmp_path):
    cfg = RunConfig(benchmark="p-laplace-lshape", k=0, mode="uniform",
                    max_ndof=500, max_iter=2, method="lbfgs",
                    out=str(tmp_path / "fail"))
    code = run(cfg)
    assert code == 1
    csv = (tmp_path / "fail" / "convergence.csv").read_text().splitlines()
    assert len(csv) == 2  # header + the single flagged level
