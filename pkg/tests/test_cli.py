import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from vphype.cli import main
from vphype.config import load_run_config, parse_run_config
from vphype.errors import ConfigError


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workspace(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--classes", "3", "--bands", "4", "--height", "16", "--width", "16"]) == 0
    capsys.readouterr()
    doc = json.loads((tmp_path / "run.json").read_text())
    doc["model"].update(base_dim=8, depths=[1, 1, 1, 1])
    doc["train"] = {"epochs": 2, "batch_size": 8, "val_size": 16}
    doc["split"] = {"train_fraction": 0.1}
    doc["data"]["patch_size"] = 7
    (tmp_path / "run.json").write_text(json.dumps(doc))
    return tmp_path


class TestErrors:
    def test_missing_config(self, capsys):
        code, _, err = run_cli(["train", "--config", "/no/such.json"], capsys)
        assert code == 2
        assert err.strip() == "config: not found: /no/such.json"

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"trian": {}}))
        code, _, err = run_cli(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)], capsys)
        assert code == 2
        assert err.startswith("config: ") and len(err.strip().splitlines()) == 1

    def test_usage_error_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        code, _, err = run_cli(["eval", "--checkpoint", str(tmp_path / "x"), "--scene", str(tmp_path)], capsys)
        assert code == 1
        assert err.startswith("checkpoint: ")


class TestPipeline:
    def test_synth_train_eval(self, workspace, capsys):
        out_dir = workspace / "out"
        code, stdout, err = run_cli(["train", "--config", str(workspace / "run.json"), "--out", str(out_dir)], capsys)
        assert code == 0, err
        assert err.startswith("# effective-config ")
        assert {p.name for p in out_dir.iterdir()} == {"checkpoint.vpck", "config.json", "metrics.jsonl"}
        log = [json.loads(line) for line in (out_dir / "metrics.jsonl").read_text().splitlines()]
        assert len(log) == 2
        for line in (out_dir / "metrics.jsonl").read_text().splitlines():
            assert line == json.dumps(json.loads(line), sort_keys=True)

        code, stdout, err = run_cli(
            ["eval", "--checkpoint", str(out_dir / "checkpoint.vpck"), "--scene", str(workspace / "scene"), "--split-seed", "0"],
            capsys,
        )
        assert code == 0, err
        report = json.loads(stdout)
        assert abs(report["overall"]["OA"] - log[-1]["test"]["OA"]) <= 1e-12
        assert report["per_class"]

        # the echoed config reproduces the run bit-exactly
        echoed = workspace / "echo.json"
        echoed.write_text((out_dir / "config.json").read_text())
        code, _, _ = run_cli(["train", "--config", str(echoed), "--out", str(workspace / "out2")], capsys)
        assert code == 0
        assert (workspace / "out2" / "metrics.jsonl").read_text() == (out_dir / "metrics.jsonl").read_text()

    def test_no_prompt_arm_echo(self, workspace, capsys):
        doc = json.loads((workspace / "run.json").read_text())
        doc["train"]["epochs"] = 1
        (workspace / "run.json").write_text(json.dumps(doc))
        code, _, err = run_cli(["train", "--config", str(workspace / "run.json"), "--arm", "no_prompt", "--out", str(workspace / "np")], capsys)
        assert code == 0
        echo = json.loads(err.splitlines()[0].split(" ", 2)[2])
        assert echo["prompts"]["enabled"] is False
        saved = json.loads((workspace / "np" / "config.json").read_text())
        assert saved["prompts"]["enabled"] is False

    def test_eval_band_mismatch(self, workspace, capsys, tmp_path_factory):
        out_dir = workspace / "out"
        doc = json.loads((workspace / "run.json").read_text())
        doc["train"]["epochs"] = 1
        (workspace / "run.json").write_text(json.dumps(doc))
        assert main(["train", "--config", str(workspace / "run.json"), "--out", str(out_dir)]) == 0
        other = tmp_path_factory.mktemp("other")
        assert main(["synth", "--out", str(other), "--classes", "3", "--bands", "5", "--height", "16", "--width", "16"]) == 0
        capsys.readouterr()
        code, _, err = run_cli(["eval", "--checkpoint", str(out_dir / "checkpoint.vpck"), "--scene", str(other / "scene")], capsys)
        assert code == 1
        assert "config mismatch" in err and "in_bands" in err


class TestInspect:
    def test_tiny_deterministic(self, capsys):
        _, a, _ = run_cli(["inspect", "--preset", "tiny", "--bands", "32", "--classes", "6"], capsys)
        _, b, _ = run_cli(["inspect", "--preset", "tiny", "--bands", "32", "--classes", "6"], capsys)
        assert a == b
        doc = json.loads(a)
        assert doc["total"] == doc["backbone"] + doc["prompts"] + doc["head"]

    def test_default_tens_of_millions(self, capsys):
        code, out, _ = run_cli(["inspect", "--preset", "default"], capsys)
        assert code == 0
        assert 1e7 <= json.loads(out)["total"] < 1e8


class TestBenchAndGradcheck:
    def test_bench_csv(self, capsys):
        code, out, _ = run_cli(["bench", "--dims", "8", "--lengths", "16,32,64,256", "--repeats", "1"], capsys)
        assert code == 0
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0] == ["mixer", "L", "flops", "median_ns", "slope"]
        assert len(rows) == 9
        flops = {(r[0], int(r[1])): int(r[2]) for r in rows[1:]}
        assert flops[("scan", 32)] == 2 * flops[("scan", 16)]
        assert flops[("attention", 32)] == 4 * flops[("attention", 16)]

    def test_bench_rejects_narrow_span(self, capsys):
        code, _, err = run_cli(["bench", "--lengths", "16,32,64,128"], capsys)
        assert code == 2
        assert err.strip().splitlines()[-1].startswith("config: bench: lengths must span")

    def test_gradcheck_primitives(self, capsys):
        code, out, _ = run_cli(["gradcheck", "--primitives-only", "--max-coords", "2"], capsys)
        assert code == 0
        assert all(line.startswith("PASS ") for line in out.strip().splitlines())


class TestRunConfig:
    def test_defaults_materialised(self):
        cfg = parse_run_config({})
        doc = cfg.to_dict()
        assert doc["train"]["lr"] == 1e-3
        assert doc["split"]["train_fraction"] == 0.02
        assert doc["model"]["preset"] == "tiny"

    def test_round_trip(self, tmp_path):
        cfg = parse_run_config({"model": {"in_bands": 3, "num_classes": 2}, "train": {"epochs": 3}})
        (tmp_path / "c.json").write_text(cfg.to_json())
        again = load_run_config(tmp_path / "c.json")
        assert again.to_dict() == cfg.to_dict()

    @pytest.mark.parametrize("doc", [{"model": {"preset": "huge"}}, {"data": {"patch_size": 4}}, {"split": {"frac": 1}}, {"x": 1}])
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            parse_run_config(doc)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vphype", "inspect", "--bands", "4", "--classes", "2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["total"] > 0
