import json

import numpy as np
import pytest

from featureflow.cli import main
from featureflow.config_io import read_results
from featureflow.experiments import (AUDIT_CATALOGUE, STUDIES, StudyReport, check, cli_audit, cli_degeneracy,
                                     cli_eps1, cli_gram, cli_refine, default_config, run_study)


def small(study, family="dnn", **tol):
    cfg = default_config(study, family)
    return cfg.replace(tolerances={**cfg.tolerances, **tol})


class TestCheck:
    def test_inside_and_outside(self):
        assert check(0.5, 0, 1)["passed"]
        assert not check(1.5, 0, 1)["passed"]
        assert check(1.0, 0, 1)["passed"]

    def test_missing_fails(self):
        assert not check(None, 0, 1)["passed"]
        assert not check(float("nan"))["passed"]

    def test_verdict_is_pure(self):
        rep = StudyReport("x", [], {}, {"a": check(0.5, 0, 1), "b": check(2.0, hi=1)})
        assert rep.verdict is False and rep.verdict is False
        assert StudyReport("x", [], {}, {}).verdict is False


class TestDefaults:
    @pytest.mark.parametrize("study", STUDIES)
    def test_valid(self, study):
        cfg = default_config(study)
        cfg.validate()
        assert cfg.tolerances

    def test_unknown(self):
        with pytest.raises(ValueError):
            default_config("nope")
        with pytest.raises(ValueError):
            run_study("nope", default_config("gram"))


class TestStudies:
    def test_audit(self):
        rep = cli_audit(default_config("audit"))
        assert rep.verdict
        assert len(rep.points) == len(AUDIT_CATALOGUE) and set(rep.checks) == set(AUDIT_CATALOGUE)

    def test_gram_small(self):
        cfg = small("gram", replicates=1).replace(m_grid=[64, 256, 1024])
        rep = cli_gram(cfg)
        assert [p["m"] for p in rep.points] == [64, 256, 1024]
        assert rep.points[-1]["error"] < rep.points[0]["error"]

    def test_single_point_has_no_slope(self):
        rep = cli_gram(small("gram", replicates=1).replace(m_grid=[128]))
        assert rep.slope is None and not rep.verdict
        assert any("no slope" in n for n in rep.notes)

    def test_eps1_small(self):
        cfg = small("eps1", replicates=1).replace(m_grid=[32, 64])
        rep = cli_eps1(cfg, "dnn")
        assert all(p["eps1"] > 0 for p in rep.points)
        with pytest.raises(ValueError):
            cli_eps1(cfg, "cnn")

    def test_eps1_resnet_small(self):
        cfg = small("eps1", "resnet", replicates=1, M_ref=5000).replace(m_grid=[32, 64])
        rep = cli_eps1(cfg, "resnet")
        assert rep.study == "eps1_resnet" and "alpha2" in rep.points[0]

    def test_degeneracy_small(self):
        rep = cli_degeneracy(default_config("degeneracy").replace(m_grid=[16, 64], steps=5))
        assert all(p["delta_fixed"] > 0 and p["delta_regression"] > 0 for p in rep.points)

    def test_refine_small(self):
        cfg = small("refine", replicates=1, m_ref=64, width_grid=[16, 32], T=0.5)
        rep = cli_refine(cfg)
        assert 1.4 <= rep.measurements["step_ratio"] <= 2.8

    def test_deterministic(self):
        cfg = small("gram", replicates=2).replace(m_grid=[64, 128])
        assert cli_gram(cfg).points == cli_gram(cfg).points

    def test_workers_match_serial(self):
        cfg = small("gram", replicates=1).replace(m_grid=[64, 128, 256])
        assert cli_gram(cfg, workers=3).points == cli_gram(cfg).points


class TestReportFiles:
    def test_write(self, tmp_path):
        rep = cli_gram(small("gram", replicates=1).replace(m_grid=[64, 128]))
        points, summary = rep.write(tmp_path)
        rows = read_results(points)
        assert [int(r["m"]) for r in rows] == [64, 128]
        data = json.loads(summary.read_text())
        assert data["verdict"] == rep.verdict and data["study"] == "gram"


class TestCli:
    def test_audit_exit_zero(self, tmp_path):
        assert main(["audit", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "audit_report.json").exists()

    def test_failing_verdict_exit_one(self, tmp_path):
        cfg = small("gram", replicates=1, slope=[5.0, 6.0]).replace(m_grid=[64, 128])
        path = tmp_path / "cfg.json"
        cfg.dump(path)
        assert main(["gram", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_bad_config_exit_two(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 0, "depth": 0}))
        assert main(["gram", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert main(["gram", "--config", str(tmp_path / "missing.json")]) == 2

    def test_seed_override(self, tmp_path):
        cfg = small("gram", replicates=1).replace(m_grid=[64, 128])
        path = tmp_path / "cfg.json"
        cfg.dump(path)
        main(["gram", "--config", str(path), "--out", str(tmp_path / "a"), "--seed", "7"])
        main(["gram", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "7"])
        main(["gram", "--config", str(path), "--out", str(tmp_path / "c"), "--seed", "8"])
        a, b, c = (read_results(tmp_path / x / "gram_points.csv") for x in "abc")
        assert a == b and a != c

    def test_seed_range(self):
        with pytest.raises(SystemExit):
            main(["gram", "--seed", str(2 ** 64)])
