import json
import subprocess
import sys

import numpy as np
import pytest

from latopt.artifacts import (read_csv, read_field_csv, read_json, read_pgm, write_field_csv, write_grid_csv,
                              write_json, write_pgm)
from latopt.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from latopt.config import SMOKE_CONFIG, PipelineConfig, config_from_mapping, load_config, parse_config
from latopt.exceptions import ConfigError
from latopt.pipeline import MANIFEST_SCHEMA, build_macro_problem

from _helpers import random_spd


class TestConfig:
    def test_defaults_valid(self):
        assert PipelineConfig().validate().macro.nx == 48

    def test_dotted_toml(self):
        cfg = parse_config('macro.nx = 10\nmicro.template = "selfsupport10"\npost.connect = false\n')
        assert cfg.macro.nx == 10 and cfg.micro.template == "selfsupport10" and not cfg.post.connect

    def test_nested_json_matches_toml(self):
        a = parse_config(json.dumps({"macro": {"nx": 10, "K_clusters": 3}, "micro": {"lambda_B": 0.4}}))
        b = parse_config("[macro]\nnx = 10\nK_clusters = 3\n[micro]\nlambda_B = 0.4\n")
        assert a == b

    def test_int_accepted_for_float(self):
        cfg = parse_config("micro.P_lower = 2\n")
        assert cfg.micro.P_lower == 2.0 and isinstance(cfg.micro.P_lower, float)

    @pytest.mark.parametrize("text", [
        "macro.nxx = 3\n",
        "solver.tol = 1\n",
        "macro = 3\n",
        'macro.nx = "ten"\n',
        "macro.nx = 10.5\n",
        "macro.nx = true\n",
        "post.connect = 1\n",
        "micro.V_star = 1.5\n",
        'micro.template = "kagome"\n',
        'macro.problem = "custom"\n',
        "macro.K_clusters = 0\n",
        "macro.nx = \n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_load_config(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text('{"macro.nx": 6}')
        assert load_config(p).macro.nx == 6
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.toml")

    def test_round_trip(self):
        cfg = parse_config(SMOKE_CONFIG)
        assert config_from_mapping(cfg.to_dict()) == cfg


class TestArtifacts:
    def test_field_round_trip_exact(self, tmp_path, rng):
        field = np.stack([random_spd(rng) for _ in range(5)])
        write_field_csv(tmp_path / "f.csv", field)
        assert np.array_equal(read_field_csv(tmp_path / "f.csv"), field)
        assert b"\r" not in (tmp_path / "f.csv").read_bytes()

    def test_grid_csv(self, tmp_path):
        g = np.arange(6.0).reshape(2, 3) / 7
        write_grid_csv(tmp_path / "g.csv", g)
        _, back = read_csv(tmp_path / "g.csv", header=False)
        assert np.array_equal(back, g)

    def test_pgm(self, tmp_path):
        g = np.array([[0.0, 0.5], [1.0, 0.2]])
        write_pgm(tmp_path / "g.pgm", g)
        raw = (tmp_path / "g.pgm").read_bytes()
        assert raw.startswith(b"P5")
        assert read_pgm(tmp_path / "g.pgm").tolist() == [[0, 128], [255, 51]]

    def test_json_numpy(self, tmp_path):
        write_json(tmp_path / "a.json", {"a": np.arange(3), "b": np.float64(0.5), "c": np.bool_(True)})
        assert read_json(tmp_path / "a.json") == {"a": [0, 1, 2], "b": 0.5, "c": True}


class TestBridge:
    def test_counts_and_load(self):
        prob = build_macro_problem(PipelineConfig())
        mesh = prob.mesh
        assert mesh.n_elems == 1152
        assert mesh.n_dofs == 2 * 49 * 25
        nz = np.flatnonzero(mesh.loads)
        assert nz.tolist() == [2 * mesh.node(24, 24) + 1]
        assert mesh.loads[nz[0]] == pytest.approx(-0.1)
        assert mesh.fixed_dofs.tolist() == [0, 1, 2 * 48 + 1]

    def test_custom_problem(self):
        cfg = parse_config('macro.problem = "custom"\nmacro.nx = 4\nmacro.ny = 2\nmacro.K_clusters = 2\n'
                           'macro.supports = ["0,0,xy", "4,0,y"]\nmacro.loads = ["2,2,0,-1"]\n')
        mesh = build_macro_problem(cfg).mesh
        assert mesh.fixed_dofs.tolist() == [0, 1, 9]
        assert mesh.loads[2 * mesh.node(2, 2) + 1] == -1.0


@pytest.fixture(scope="module")
def smoke_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    p = d / "smoke.toml"
    p.write_text(SMOKE_CONFIG)
    return p


@pytest.fixture(scope="module")
def smoke_run(smoke_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(smoke_cfg), "--out", str(out), "--threads", "1"]) == EXIT_OK
    return out


class TestCli:
    def test_outputs(self, smoke_run):
        for name in ("macro_field.csv", "clustered_field.csv", "labels.csv", "cluster_loads.csv",
                     "unit_0.json", "unit_1_density.csv", "unit_0.pgm", "structure.pgm", "connectors.json",
                     "units_summary.csv", "manifest.json"):
            assert (smoke_run / name).is_file(), name

    def test_manifest(self, smoke_run):
        m = read_json(smoke_run / "manifest.json")
        assert m["schema"] == MANIFEST_SCHEMA
        assert set(m["stages"]) == {"macro", "micro", "assemble"}
        assert m["config"]["macro"]["nx"] == 12
        assert m["resolved_defaults"]["T_high"] == pytest.approx(2 / 0.91 + 1 / 1.3)
        assert m["supports"]["point_load"] == [6, 6]
        assert m["stages"]["macro"]["compliance_clustered"] >= m["stages"]["macro"]["compliance_free"]
        assert m["stages"]["assemble"]["components"] == 1

    def test_stagewise_matches_run(self, smoke_cfg, smoke_run, tmp_path):
        for verb in ("macro", "micro", "assemble"):
            assert main([verb, "--config", str(smoke_cfg), "--out", str(tmp_path), "--threads", "1"]) == EXIT_OK
        for name in ("macro_field.csv", "unit_0_density.csv", "unit_1_density.csv", "labels.csv"):
            assert (tmp_path / name).read_bytes() == (smoke_run / name).read_bytes()

    def test_config_error(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("macro.bogus = 1\n")
        assert main(["macro", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["macro", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_macro_artifacts(self, smoke_cfg, tmp_path):
        assert main(["micro", "--config", str(smoke_cfg), "--out", str(tmp_path / "empty")]) == EXIT_CONFIG

    def test_solver_error(self, tmp_path):
        p = tmp_path / "singular.toml"
        p.write_text('macro.problem = "custom"\nmacro.nx = 4\nmacro.ny = 2\nmacro.K_clusters = 2\n'
                     'macro.supports = ["0,0,x"]\nmacro.loads = ["4,2,0,-1"]\n')
        assert main(["macro", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_SOLVER

    def test_module_entry_point(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("macro.nx = 1\n")
        r = subprocess.run([sys.executable, "-m", "latopt.cli", "macro", "--config", str(p), "--out",
                            str(tmp_path)], capture_output=True, text=True)
        assert r.returncode == EXIT_CONFIG
        assert "config error" in r.stderr
