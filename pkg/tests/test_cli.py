"""End-to-end command-line checks: exit codes, artifacts, error lines."""

import json

import pytest

from ctxseg.cli import main
from ctxseg.scm import example_confounded_scm

TINY_CONFIG = {
    "seed": 13,
    "scene": {"n_images": 20, "seed": 13},
    "run": {
        "rounds": 1,
        "walk_iters": 8,
        "classifier": {"epochs": 6, "batch_size": 8},
        "segmenter": {"epochs": 6, "batch_size": 8},
    },
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    """One tiny gen+run shared by the read-only command tests."""
    out = tmp_path_factory.mktemp("cliout")
    config = out / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    assert main(["gen", "--config", str(config), "--out", str(out)]) == 0
    assert main(["run", "--config", str(config), "--out", str(out)]) == 0
    return out


class TestGen:
    def test_generates_dataset(self, tiny_config, tmp_path, capsys):
        code = main(["gen", "--config", tiny_config, "--out", str(tmp_path / "o")])
        assert code == 0
        out = capsys.readouterr().out
        assert "train records: 16" in out
        assert (tmp_path / "o" / "dataset" / "manifest_train.jsonl").exists()

    def test_invalid_confound_strength_is_config_error(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"scene": {"confound_strength": 1.5}}))
        code = main(["gen", "--config", str(config), "--out", str(tmp_path)])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR[config]:")

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"scene": {"n_clases": 4}}))
        assert main(["gen", "--config", str(config), "--out", str(tmp_path)]) == 2


class TestRun:
    def test_missing_dataset_is_config_error(self, tiny_config, tmp_path, capsys):
        code = main(["run", "--config", tiny_config, "--out", str(tmp_path / "x")])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("ERROR[config]:") and "ctxseg gen" in err

    def test_report_written(self, finished_run):
        report_path = finished_run / "run" / "report.json"
        report = json.loads(report_path.read_text())
        assert [e["round"] for e in report["history"]] == [0, 1]
        assert (finished_run / "run" / "config.json").exists()

    def test_lock_blocks_concurrent_run(self, finished_run, capsys):
        lock = finished_run / "run" / ".lock"
        lock.write_text("999999")
        try:
            code = main(["run", "--config", str(finished_run / "config.json"),
                         "--out", str(finished_run)])
            assert code == 3
            assert "locked" in capsys.readouterr().err
        finally:
            lock.unlink()


class TestRenderAndEval:
    def test_render_overlay_and_plot(self, finished_run, capsys):
        run_dir = finished_run / "run"
        manifest = (finished_run / "dataset" / "manifest_train.jsonl").read_text()
        image_id = json.loads(manifest.splitlines()[0])["id"]
        code = main(["render", "--run", str(run_dir), "--image-id", image_id])
        assert code == 0
        assert (run_dir / "render" / f"{image_id}_round1.png").exists()
        assert (run_dir / "render" / "miou.png").exists()

    def test_render_unknown_id_fails_cleanly(self, finished_run, capsys):
        code = main(["render", "--run", str(finished_run / "run"),
                     "--image-id", "no_such_image"])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR[config]:")

    def test_render_deterministic_bytes(self, finished_run, tmp_path):
        run_dir = finished_run / "run"
        manifest = (finished_run / "dataset" / "manifest_train.jsonl").read_text()
        image_id = json.loads(manifest.splitlines()[0])["id"]
        outs = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            assert main(["render", "--run", str(run_dir), "--image-id", image_id,
                         "--out", str(out)]) == 0
            outs.append((out / f"{image_id}_round1.png").read_bytes()
                        + (out / "miou.png").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_matches_run_history(self, finished_run, capsys):
        run_dir = finished_run / "run"
        assert main(["eval", "--run", str(run_dir)]) == 0
        rescored = json.loads(capsys.readouterr().out)["history"]
        report = json.loads((run_dir / "report.json").read_text())
        for offline, online in zip(rescored, report["history"]):
            for key in ("cam_miou", "pseudo_miou", "seg_miou"):
                assert offline[key] == online[key]


class TestVerify:
    def test_fresh_suite_passes(self, capsys):
        assert main(["verify"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["pass"] is True
        assert doc["backdoor"]["max_abs_gap"] <= 1e-10
        assert doc["confounding"]["tv_gap"] >= 0.1

    def test_valid_scm_file_accepted(self, tmp_path, capsys):
        path = tmp_path / "demo.json"
        example_confounded_scm().to_json(path)
        assert main(["verify", "--scm", str(path)]) == 0

    def test_corrupted_scm_file_named_in_failure(self, tmp_path, capsys):
        doc = example_confounded_scm().to_dict()
        doc["p_c"] = [0.9, 0.4]
        path = tmp_path / "broken.json"
        path.write_text(json.dumps(doc))
        code = main(["verify", "--scm", str(path)])
        captured = capsys.readouterr()
        assert code == 3
        assert "broken.json" in captured.err
        parsed = json.loads(captured.out)
        assert parsed["files"][0]["pass"] is False


class TestAblateSmoke:
    def test_q1_axis_grid(self, finished_run, capsys):
        code = main(["ablate", "--axis", "q1",
                     "--config", str(finished_run / "config.json"),
                     "--out", str(finished_run)])
        assert code == 0
        grid_path = finished_run / "ablate_q1" / "grid.json"
        grid = json.loads(grid_path.read_text())
        assert grid["axis"] == "q1"
        assert grid["baseline"]["pseudo_miou"] is not None
        assert [row["arm"] for row in grid["rows"]] == ["seg-mask-context"]
        out = capsys.readouterr().out
        assert "baseline" in out

    def test_unknown_axis_rejected(self, finished_run, capsys):
        with pytest.raises(SystemExit):
            main(["ablate", "--axis", "bogus",
                  "--config", str(finished_run / "config.json")])
