import json

import pytest

from reverb_doa_lab import cli, storage


def run(*args):
    return cli.main([str(a) for a in args])


class TestExitCodes:
    def test_missing_dataset_is_io_error(self, tmp_path, capsys):
        assert run("features", "--preset", "design", "--out", tmp_path) == cli.EXIT_IO
        assert "I/O error" in capsys.readouterr().err

    @pytest.mark.parametrize("extra", [
        ["--preset", "atrium"],
        ["--J", "20", "--method", "cnn"],
        ["--jobs", "1", "--preset", "nowhere"],
    ])
    def test_config_errors(self, tmp_path, extra):
        cmd = "train" if "--J" in extra else "simulate"
        assert run(cmd, "--out", tmp_path, *extra) == cli.EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 0.1}))
        assert run("simulate", "--config", cfg, "--out", tmp_path) == cli.EXIT_CONFIG

    def test_config_not_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("lr=3")
        assert run("simulate", "--config", cfg) == cli.EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run("simulate", "--config", tmp_path / "absent.json") == cli.EXIT_IO

    def test_missing_checkpoint(self, tmp_path):
        assert run("evaluate", "--method", "cnn", "--checkpoint", tmp_path / "m.ckpt",
                   "--out", tmp_path) == cli.EXIT_IO

    def test_unknown_method_rejected_by_parser(self):
        with pytest.raises(SystemExit) as info:
            run("train", "--method", "mlp")
        assert info.value.code == 2


class TestOptions:
    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 4, "lr": 0.01, "jobs": 2}))
        ns = cli.build_parser().parse_args(["train", "--config", str(cfg), "--seed", "9"])
        opts = cli.resolve_options(ns)
        assert (opts["seed"], opts["lr"], opts["jobs"]) == (9, 0.01, 2)
        assert opts["method"] == "vae-ssl"

    def test_defaults(self):
        opts = cli.resolve_options(cli.build_parser().parse_args(["report"]))
        assert opts["seed"] == 1 and opts["P"] == 32 and opts["full"] is False


class TestSimulate:
    def test_byte_identical_per_seed(self, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        for out, seed in ((a, 5), (b, 5), (c, 6)):
            assert run("simulate", "--preset", "desk-anechoic", "--seed", seed, "--out", out) == 0
        sig_a = (a / "signals" / "desk-anechoic_5.sig").read_bytes()
        assert sig_a == (b / "signals" / "desk-anechoic_5.sig").read_bytes()
        assert sig_a != (c / "signals" / "desk-anechoic_6.sig").read_bytes()
        meta = json.loads((a / "signals" / "desk-anechoic_5.json").read_text())
        assert meta["recordings"] == 38 and meta["seed"] == 5


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("ws")
    assert run("features", "--preset", "validation", "--out", out, "--auto") == 0
    assert run("train", "--method", "cnn", "--J", 19, "--epochs", 2, "--out", out) == 0
    assert run("evaluate", "--method", "cnn", "--J", 19, "--preset", "design", "--out", out) == 0
    assert run("evaluate", "--method", "srp-phat", "--preset", "design", "--out", out) == 0
    assert run("report", "--out", out) == 0
    return out


class TestPipeline:
    def test_feature_metadata(self, workspace):
        meta = storage.read_json(workspace / "features" / "desk_1.json")
        assert meta["rtf_frames"] == 19 * 2 * 124
        assert meta["frames_per_recording"] == 124
        assert meta["N"] == 147 and meta["labeled_windows"] == 114
        val = storage.read_json(workspace / "features" / "desk-validation_1.json")
        assert (val["norm_min"], val["norm_max"]) == (meta["norm_min"], meta["norm_max"])

    def test_checkpoint_and_loss_log(self, workspace):
        models = workspace / "models"
        ck = storage.read_json(models / "cnn_J19_a100_s1.json")
        assert ck["J"] == 19 and len(ck["labeled_windows"]) == 19 and ck["epoch"] in (1, 2)
        lines = (models / "cnn_J19_a100_s1_loss.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,") and len(lines) == 3

    def test_evaluation_skips_training_labels(self, workspace):
        res = storage.read_json(workspace / "results" / "cnn_desk_19.json")
        srp = storage.read_json(workspace / "results" / "srp-phat_desk_0.json")
        assert res["evaluated"] == 114 - 19 and srp["evaluated"] == 114

    def test_report(self, workspace):
        text = (workspace / "results_desk.csv").read_text().splitlines()
        assert text[0] == "preset,J,method,mae_deg,accuracy_pct"
        assert {row.split(",")[2] for row in text[1:]} == {"cnn", "srp-phat"}
        assert (workspace / "results_desk.txt").exists()

    def test_manifest(self, workspace):
        runs = storage.read_json(workspace / "manifest.json")["runs"]
        stages = {r["stage"] for r in runs.values()}
        assert stages == {"simulate", "features", "train", "evaluate"}
        assert all(len(r["config_digest"]) == 16 for r in runs.values())

    def test_histogram_rows_normalized(self, workspace):
        rows = (workspace / "results" / "hist_srp-phat_desk_0.csv").read_text().splitlines()[1:]
        for row in rows:
            vals = [float(v) for v in row.split(",")[1:]]
            assert sum(vals) == pytest.approx(1.0, abs=1e-9) or sum(vals) == 0.0
