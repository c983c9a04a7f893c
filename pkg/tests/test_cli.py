import csv
import json

import pytest

from kpzlab.cli import main
from kpzlab.config import ConfigError, ExperimentConfig

SMALL_ENSEMBLE = {"kind": "ensemble", "dx": 0.1, "dt": 0.005, "t": 0.1, "replicas": 300,
                  "probes": [0, 1, -1, 3, -3]}
QUICK_TINY = {"kind": "verify-tiny", "orders": [12, 16], "schemes": ["exponential"], "derivative_points": 5}


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj), encoding="utf-8")
    return p


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestExitCodes:
    def test_verify_tiny_passes(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", QUICK_TINY)
        assert main(["verify-tiny", "--config", str(cfg), "--out", str(tmp_path / "v")]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        summary = json.loads((tmp_path / "v" / "verify_tiny.summary.json").read_text())
        assert summary["pass"] is True

    def test_corrupted_derivative_fails(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", QUICK_TINY)
        code = main(["verify-tiny", "--config", str(cfg), "--out", str(tmp_path / "v"), "--corrupt-derivative"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    @pytest.mark.parametrize("bad,field", [({"dx": "wide"}, "dx"), ({"replicas": -3}, "replicas"),
                                           ({"colour": 1}, "colour"), ({"dt": 0.05}, "dt"),
                                           ({"scheme": "implicit"}, "scheme"),
                                           ({"phi1": {"shape": "hat"}}, "phi1")])
    def test_malformed_config(self, tmp_path, capsys, bad, field):
        cfg = write(tmp_path, "c.json", {**SMALL_ENSEMBLE, **bad})
        assert main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2
        assert f"'{field}'" in capsys.readouterr().err
        assert not (tmp_path / "e").exists()

    def test_unreadable_config(self, tmp_path):
        assert main(["ensemble", "--config", str(tmp_path / "missing.json")]) == 2
        (tmp_path / "broken.json").write_text("{", encoding="utf-8")
        assert main(["ensemble", "--config", str(tmp_path / "broken.json")]) == 2

    def test_kind_mismatch(self, tmp_path):
        cfg = write(tmp_path, "c.json", QUICK_TINY)
        assert main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2

    def test_bad_arguments(self):
        assert main(["ensemble", "--replicas", "many"]) == 2
        assert main([]) == 2

    def test_wasserstein_size_cap(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", {"kind": "wasserstein", "replicas": 5000})
        assert main(["wasserstein", "--config", str(cfg), "--out", str(tmp_path / "w")]) == 2
        assert "'replicas'" in capsys.readouterr().err

    def test_time_zero_ensemble(self, tmp_path):
        cfg = write(tmp_path, "c.json", {**SMALL_ENSEMBLE, "t": 0.0, "half_width": 30, "sigma": 0.0, "replicas": 20})
        assert main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
        with (tmp_path / "e" / "residuals.csv").open() as f:
            rows = [r for r in csv.DictReader(f) if r["quantity"] == "slope_cdf_residual"]
        assert rows and all(float(r["value"]) == 0.0 for r in rows)


class TestOutputs:
    def test_layout_and_schema(self, tmp_path):
        cfg = write(tmp_path, "c.json", SMALL_ENSEMBLE)
        out = tmp_path / "e"
        main(["ensemble", "--config", str(cfg), "--out", str(out)])
        names = {p.name for p in out.iterdir()}
        assert {"manifest.json", "g.csv", "cdf.csv", "residuals.csv", "ensemble.summary.json"} <= names
        m = json.loads((out / "manifest.json").read_text())
        with (out / "g.csv").open() as f:
            reader = csv.DictReader(f)
            assert reader.fieldnames == ["quantity", "x_or_y", "value", "std_error", "n", "manifest_hash"]
            assert {r["manifest_hash"] for r in reader} == {m["manifest_hash"]}

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write(tmp_path, "c.json", SMALL_ENSEMBLE)
        main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "b")])
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_workers_byte_identical(self, tmp_path):
        cfg = write(tmp_path, "c.json", SMALL_ENSEMBLE)
        main(["ensemble", "--config", str(cfg), "--workers", "1", "--out", str(tmp_path / "a")])
        main(["ensemble", "--config", str(cfg), "--workers", "2", "--out", str(tmp_path / "b")])
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_seed_changes_hash(self, tmp_path):
        cfg = write(tmp_path, "c.json", SMALL_ENSEMBLE)
        main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["ensemble", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "b")])
        ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["manifest_hash"]
        hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["manifest_hash"]
        assert ha != hb


class TestReport:
    def test_empty_directory(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 2
        assert main(["report", str(tmp_path / "nope")]) == 2

    def test_single_and_separate_runs(self, tmp_path, capsys):
        cfg = write(tmp_path, "c.json", SMALL_ENSEMBLE)
        runs = tmp_path / "runs"
        main(["ensemble", "--config", str(cfg), "--out", str(runs / "a")])
        assert main(["report", str(runs)]) == 0
        index = json.loads((runs / "index.json").read_text())
        assert len(index) == 1
        main(["ensemble", "--config", str(cfg), "--seed", "4", "--out", str(runs / "b")])
        capsys.readouterr()
        assert main(["report", str(runs)]) == 0
        index = json.loads((runs / "index.json").read_text())
        assert len(index) == 2
        assert sorted(d for v in index.values() for d in v["dirs"]) == ["a", "b"]
        with (runs / "plot_data.csv").open() as f:
            hashes = {r["manifest_hash"] for r in csv.DictReader(f)}
        assert hashes == set(index)

    def test_refuses_mixed_hashes(self, tmp_path):
        cfg = write(tmp_path, "c.json", SMALL_ENSEMBLE)
        main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "a")])
        s = tmp_path / "a" / "ensemble.summary.json"
        obj = json.loads(s.read_text())
        obj["manifest_hash"] = "0" * 16
        s.write_text(json.dumps(obj))
        assert main(["report", str(tmp_path / "a")]) == 2


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(SMALL_ENSEMBLE)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_kind_defaults(self):
        w = ExperimentConfig.from_dict({"kind": "wasserstein"})
        assert w.dt == 0.0025 and w.replicas == 2000
        assert ExperimentConfig.from_dict({"kind": "wasserstein", "dt": 0.005}).dt == 0.005

    def test_workers_not_in_manifest(self):
        a = ExperimentConfig.from_dict({**SMALL_ENSEMBLE, "workers": 1})
        b = ExperimentConfig.from_dict({**SMALL_ENSEMBLE, "workers": 3})
        assert a.manifest() == b.manifest()

    def test_probe_outside_lattice(self):
        with pytest.raises(ConfigError, match="probes"):
            ExperimentConfig.from_dict({**SMALL_ENSEMBLE, "probes": [500]})
