import pytest

from tatrack.ablation import VARIANTS, AblationRow, format_table, run_ablation
from tatrack.cli import main
from tatrack.data import load_dataset
from tatrack.errors import ConfigError

TRAIN = ["--epochs", "2", "--samples-per-epoch", "8", "--batch-size", "4", "--lr-drop-epoch", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synthgen", "--out", str(root / "data"), "--suite", "2", "--frames", "30",
                 "--height", "96", "--seed", "3"]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--out", str(root / "base"), *TRAIN]) == 0
    cfg = root / "ft.txt"
    cfg.write_text("variant = full\nepochs = 5\n")
    assert main(["finetune", "--config", str(cfg), "--base", str(root / "base"), "--data", str(root / "data"),
                 "--out", str(root / "full"), *TRAIN]) == 0
    return root


def test_synthgen_single_sequence_flags(tmp_path):
    assert main(["synthgen", "--out", str(tmp_path / "s"), "--frames", "12", "--height", "48", "--width", "64",
                 "--rgb-blackout", "2:5,8:10", "--seed", "1"]) == 0
    seq = load_dataset(tmp_path)[0]
    assert len(seq) == 12 and seq.frame(0)[0].shape == (48, 64, 3)
    assert seq.attribute_mask("LI").sum() == 5


def test_finetune_flags_override_config_file(workspace):
    log = (workspace / "full.log.jsonl").read_text().splitlines()
    assert len(log) == 2 * 2  # two epochs of two steps, not five epochs


def test_track_and_eval(workspace, capsys):
    seq = workspace / "data" / "seq_000"
    out = workspace / "res" / "seq_000.txt"
    assert main(["track", "--checkpoint", str(workspace / "full"), "--sequence", str(seq), "--out", str(out),
                 "--update-interval", "10", "--emit-overlays", str(workspace / "ov")]) == 0
    assert "updates at [9, 19]" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 30
    assert len(list((workspace / "ov").glob("*.png"))) == 30
    out2 = workspace / "res" / "seq_001.txt"
    assert main(["track", "--checkpoint", str(workspace / "base"), "--sequence", str(workspace / "data" / "seq_001"),
                 "--out", str(out2), "--update-interval", "inf"]) == 0
    assert main(["eval", "--results", str(workspace / "res"), "--data", str(workspace / "data"),
                 "--report", str(workspace / "report.txt"), "--metrics-out", str(workspace / "m.txt"),
                 "--plot", str(workspace / "curves.png")]) == 0
    kv = dict(line.split("=", 1) for line in (workspace / "m.txt").read_text().splitlines())
    assert 0.0 <= float(kv["SR"]) <= 1.0 and kv["frames"] == "60"
    assert kv["TC"] == "absent" and "LI.SR" in kv
    assert "success rate" in (workspace / "report.txt").read_text()


def test_ablate_reports_absent_rows(workspace, capsys):
    assert main(["ablate", "--data", str(workspace / "data"), "--rgb", str(workspace / "base"),
                 "--full", str(workspace / "full"), "--mcp", str(workspace / "nowhere"), "--max-frames", "8",
                 "--out", str(workspace / "table.txt")]) == 0
    lines = (workspace / "table.txt").read_text().splitlines()
    assert len(lines) == 1 + len(VARIANTS)
    by_label = {line.split()[0]: line for line in lines[1:]}
    assert by_label["(2)"].endswith("absent") and by_label["(4)"].endswith("absent")
    assert not by_label["TATrack"].endswith("absent") and not by_label["(3)"].endswith("absent")


def test_ablation_rejects_wrong_checkpoint(workspace):
    data = load_dataset(workspace / "data")
    with pytest.raises(ConfigError):
        run_ablation({"mcp": workspace / "full"}, data, max_frames=4)
    assert "absent" in format_table([AblationRow(VARIANTS[0], None)])


def test_errors_exit_with_status_2(tmp_path, capsys):
    assert main(["track", "--checkpoint", str(tmp_path / "missing"), "--sequence", str(tmp_path),
                 "--out", str(tmp_path / "o.txt")]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["pretrain", "--out", str(tmp_path / "x")]) == 2
