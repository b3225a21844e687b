"""End-to-end command-line workflow: exit codes, outputs, determinism."""

import os

import numpy as np
import pytest

from hpgn.cli import main

TINY_CFG = """\
[model]
backbone_channels = 8,12,16
embed_dim = 16

[schedule]
epochs = 2

[data]
p = 4
k = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset, tiny config file, and trained checkpoints."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    assert main(["synth", "--ids", "8", "--imgs", "4", "--out", str(data)]) == 0
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CFG)
    runs = {}
    for variant in ("baseline", "hpgn"):
        out = root / f"run-{variant}"
        rc = main(["train", "--config", str(cfg), "--data", str(data),
                   "--out", str(out), "--variant", variant, "--seed", "0"])
        assert rc == 0
        runs[variant] = out
    return {"root": root, "data": data, "cfg": cfg, "runs": runs}


class TestHelp:
    @pytest.mark.parametrize("cmd", ["train", "eval", "gradcheck", "graph",
                                     "significance", "synth"])
    def test_subcommand_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        assert "--" in capsys.readouterr().out


class TestSynth:
    def test_counts(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["synth", "--ids", "6", "--imgs", "3", "--out", str(out)]) == 0
        lines = (out / "manifest.csv").read_text().strip().splitlines()
        assert len(lines) == 19  # header + 18 rows
        assert "18 images" in capsys.readouterr().out

    def test_bad_spec(self, tmp_path, capsys):
        rc = main(["synth", "--ids", "1", "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_outputs_present(self, workspace):
        out = workspace["runs"]["baseline"]
        assert (out / "final.hpgn").exists()
        assert (out / "config_resolved.ini").exists()
        log = (out / "metric_log.csv").read_text().strip().splitlines()
        assert log[0].startswith("epoch,lr,total")
        assert len(log) == 3  # header + 2 epochs
        assert (out / "loss_curves.png").exists()

    def test_config_echo_contains_overrides(self, workspace):
        echo = (workspace["runs"]["hpgn"] / "config_resolved.ini").read_text()
        assert "variant = hpgn" in echo
        assert "backbone_channels = 8,12,16" in echo
        assert "epochs = 2" in echo

    def test_unknown_variant_lists_valid(self, workspace, tmp_path, capsys):
        rc = main(["train", "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "o"), "--variant", "resnet"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "baseline" in err and "hpgn-ng" in err

    def test_missing_data_dir(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nothing"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "data error" in capsys.readouterr().err

    def test_unknown_config_section(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[optimizer]\nlr = 3\n")
        rc = main(["train", "--config", str(bad), "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "unknown config section" in capsys.readouterr().err

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[model]\ndropout = 0.5\n")
        rc = main(["train", "--config", str(bad), "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "dropout" in capsys.readouterr().err

    def test_deterministic_repeat_identical_logs(self, workspace, tmp_path):
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(["train", "--config", str(workspace["cfg"]),
                       "--data", str(workspace["data"]), "--out", str(out),
                       "--variant", "baseline", "--seed", "5", "--deterministic"])
            assert rc == 0
            logs.append((out / "metric_log.csv").read_text())
        assert logs[0] == logs[1]


class TestEval:
    def test_crosscam_outputs(self, workspace, tmp_path, capsys):
        out = tmp_path / "ev"
        rc = main(["eval", "--checkpoint", str(workspace["runs"]["baseline"] / "final.hpgn"),
                   "--data", str(workspace["data"]), "--out", str(out)])
        assert rc == 0
        assert (out / "report.csv").exists()
        assert (out / "summary.txt").exists()
        assert (out / "cmc_curve.png").exists()
        assert "rank-1" in capsys.readouterr().out

    def test_repeated_protocol_per_repeat(self, workspace, tmp_path):
        out = tmp_path / "ev"
        rc = main(["eval", "--checkpoint", str(workspace["runs"]["baseline"] / "final.hpgn"),
                   "--data", str(workspace["data"]), "--out", str(out),
                   "--protocol", "repeated", "--repeats", "3", "--per-repeat"])
        assert rc == 0
        lines = (out / "per_repeat.csv").read_text().strip().splitlines()
        assert len(lines) == 4

    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", str(tmp_path / "no.hpgn"),
                   "--data", str(workspace["data"]), "--out", str(tmp_path)])
        assert rc == 2
        assert "checkpoint error" in capsys.readouterr().err

    def test_single_camera_data_warns(self, workspace, tmp_path, capsys):
        data = tmp_path / "onecam"
        assert main(["synth", "--ids", "8", "--imgs", "3", "--cams", "1",
                     "--out", str(data)]) == 0
        out = tmp_path / "ev"
        rc = main(["eval", "--checkpoint", str(workspace["runs"]["baseline"] / "final.hpgn"),
                   "--data", str(data), "--out", str(out)])
        assert rc == 0
        captured = capsys.readouterr().out
        assert "warning" in captured
        report = (out / "report.csv").read_text()
        assert "rank1,0.000000" in report and "mAP,0.000000" in report


class TestGradcheckCommand:
    def test_scope_sg_passes(self, capsys):
        assert main(["gradcheck", "--scope", "sg"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_zero_tolerance_fails(self, capsys):
        assert main(["gradcheck", "--scope", "graph", "--tol", "0"]) == 4
        assert "FAIL" in capsys.readouterr().out


class TestGraphCommand:
    def test_two_by_two_dump(self, tmp_path):
        out = tmp_path / "g.txt"
        assert main(["graph", "--height", "2", "--width", "2",
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "2 2"
        assert len(lines) == 9  # header + 8 triplets

    def test_bad_dims(self, tmp_path, capsys):
        rc = main(["graph", "--height", "0", "--width", "2",
                   "--out", str(tmp_path / "g.txt")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestSignificanceCommand:
    def test_baseline_warns_and_exits_zero(self, workspace, tmp_path, capsys):
        out = tmp_path / "sig"
        rc = main(["significance",
                   "--checkpoint", str(workspace["runs"]["baseline"] / "final.hpgn"),
                   "--out", str(out)])
        assert rc == 0
        assert "warning" in capsys.readouterr().out

    def test_graph_model_exports_heatmaps(self, workspace, tmp_path, capsys):
        out = tmp_path / "sig"
        rc = main(["significance",
                   "--checkpoint", str(workspace["runs"]["hpgn"] / "final.hpgn"),
                   "--out", str(out)])
        assert rc == 0
        names = os.listdir(out)
        # desk base 8x8: 3 scales x depth 3, text matrix + graymap each
        assert len([n for n in names if n.endswith(".txt")]) == 9
        assert len([n for n in names if n.endswith(".pgm")]) == 9
        sample = sorted(n for n in names if n.endswith(".txt"))[0]
        header = (out / sample).read_text().splitlines()[0]
        assert len(header.split()) == 2

    def test_outputs_confined_to_out_dir(self, workspace, tmp_path):
        out = tmp_path / "confined"
        before = set(os.listdir(tmp_path))
        rc = main(["significance",
                   "--checkpoint", str(workspace["runs"]["hpgn"] / "final.hpgn"),
                   "--out", str(out)])
        assert rc == 0
        after = set(os.listdir(tmp_path))
        assert after - before == {"confined"}
