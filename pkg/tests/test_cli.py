import csv
import json

import pytest

from scatsimclr.cli import build_parser, main, render_reference
from scatsimclr.featurefile import read_header
from scatsimclr.images import write_image
from scatsimclr.scattering import channel_count

SMALL_MODEL = ["--image-size", "16", "--scales", "2", "--orientations", "4", "--blocks", "1",
               "--hidden-dim", "8", "--repr-dim", "8", "--proj-dim", "4", "--batch-size", "4",
               "--lambda-warmup", "0", "-q"]


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "pretrain" in capsys.readouterr().out


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "COMMAND" in capsys.readouterr().out


def test_pretrain_requires_data(capsys):
    assert main(["pretrain", "-q"]) == 1
    assert "--data is required" in capsys.readouterr().err


def test_unknown_flag_suggests_a_close_match(capsys):
    assert main(["pretrain", "--epohcs", "3"]) == 1
    assert "did you mean --epochs?" in capsys.readouterr().err


def test_bad_config_value_is_a_usage_error(capsys):
    assert main(["pretrain", "--data", "synth:noise:4", "--pretext", "colorize", "-q"]) == 1
    assert "pretext" in capsys.readouterr().err


def test_missing_dataset_is_a_runtime_error(tmp_path, capsys):
    code = main(["pretrain", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "run"), "-q"])
    assert code == 2
    assert "does not exist" in capsys.readouterr().err


def test_report_params(capsys):
    assert main(["pretrain", "--report-params", "--scales", "2", "--orientations", "16"]) == 0
    out = capsys.readouterr().out
    assert f"Scattering channels per image: {3 * channel_count(2, 16)}" in out
    for blocks in (8, 12, 16, 30):
        assert f"{blocks:>3} blocks" in out


def test_config_file_and_flags(tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"epochs": 7, "L": 8}))
    assert main(["pretrain", "--config", str(cfg_file), "--orientations", "4", "--report-params"]) == 0
    assert "L=4" in capsys.readouterr().out
    cfg_file.write_text(json.dumps({"epoch": 7}))
    assert main(["pretrain", "--config", str(cfg_file), "--report-params"]) == 1


def test_pretrain_resume_and_linear_eval(tmp_path, capsys):
    run = tmp_path / "run"
    args = ["pretrain", "--data", "synth:oriented-textures:8", "--out", str(run), "--epochs", "1"] + SMALL_MODEL
    assert main(args) == 0
    for name in ("final.ckpt", "last.ckpt", "metrics.csv", "resolved_config.json"):
        assert (run / name).exists(), name
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["data"] == "synth:oriented-textures:8"
    assert resolved["L"] == 4

    resumed = ["pretrain", "--data", "synth:oriented-textures:8", "--out", str(run), "--resume",
               str(run / "last.ckpt"), "--epochs", "2", "-q"]
    assert main(resumed) == 0
    with open(run / "metrics.csv", newline="") as f:
        assert len(list(csv.reader(f))) == 3

    probe_csv = tmp_path / "eval" / "probe.csv"
    features = tmp_path / "eval" / "features.bin"
    code = main(["linear-eval", "--checkpoint", str(run / "final.ckpt"), "--data", "synth:two-blob-separable:20",
                 "--steps", "20", "--runs", "2", "--out", str(probe_csv), "--features", str(features), "-q"])
    assert code == 0
    with open(probe_csv, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["run", "accuracy"] and rows[-1][0] == "top1"
    assert read_header(features) == (20, 8, 1, 1)
    assert (tmp_path / "eval" / "resolved_config.json").exists()
    assert "Top-1 accuracy over 2 runs" in capsys.readouterr().out


def test_corrupted_checkpoint_is_a_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code = main(["linear-eval", "--checkpoint", str(bad), "--data", "synth:noise:2", "--out",
                 str(tmp_path / "p.csv"), "-q"])
    assert code == 2
    assert "truncated" in capsys.readouterr().err


def test_sweep_without_data(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--scales", "1,2", "--orientations", "4,8", "--out", str(out), "-q"]) == 0
    with open(out, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert [(r["J"], r["L"]) for r in rows] == [("1", "4"), ("1", "8"), ("2", "4"), ("2", "8")]
    assert int(rows[3]["channels"]) == 3 * channel_count(2, 8)
    assert all(r["probe_top1"] == "" for r in rows)


def test_sweep_bad_list(capsys):
    assert main(["sweep", "--scales", "1,x"]) == 1


def test_filters_dump(tmp_path, capsys):
    out = tmp_path / "filters"
    report = tmp_path / "filters.pdf"
    code = main(["filters-dump", "--scales", "2", "--orientations", "4", "--size", "16", "--out", str(out),
                 "--mosaic", "--report", str(report), "-q"])
    assert code == 0
    assert (out / "mosaic.png").exists() and (out / "manifest.txt").exists()
    assert len(list(out.glob("psi_*.png"))) == 2 * 2 * 4
    assert report.read_bytes().startswith(b"%PDF")
    assert "Wrote 17 filter images" in capsys.readouterr().out


def test_filters_dump_rejects_bad_size(tmp_path, capsys):
    assert main(["filters-dump", "--size", "12", "--out", str(tmp_path), "-q"]) == 1


def test_augment_preview(tmp_path, rng):
    image = write_image(rng.uniform(size=(20, 24, 3)), tmp_path / "input.png")
    out = tmp_path / "preview"
    assert main(["augment-preview", "--input", str(image), "--out", str(out), "--pretext", "jigsaw",
                 "--seed", "3", "-q"]) == 0
    for name in ("view1.png", "view2.png", "pretext.png", "params.txt", "resolved_config.json"):
        assert (out / name).exists(), name


def test_augment_preview_unknown_policy(tmp_path, rng):
    image = write_image(rng.uniform(size=(8, 8, 3)), tmp_path / "input.png")
    assert main(["augment-preview", "--input", str(image), "--policy", "heavy", "--out", str(tmp_path), "-q"]) == 1


def test_scatter_export(tmp_path):
    out = tmp_path / "coeffs" / "noise.bin"
    code = main(["scatter-export", "--data", "synth:noise:3", "--out", str(out), "--scales", "2",
                 "--orientations", "4", "--image-size", "16", "-q"])
    assert code == 0
    assert read_header(out) == (3, 3 * channel_count(2, 4), 4, 4)
    assert (tmp_path / "coeffs" / "resolved_config.json").exists()


def test_reference(tmp_path, capsys):
    text = render_reference(build_parser())
    assert "## pretrain" in text and "`--epochs`" in text and "## sweep" in text
    out = tmp_path / "reference.md"
    assert main(["reference", "--out", str(out)]) == 0
    assert out.read_text().startswith("# scatsimclr")


@pytest.mark.parametrize("flag", ["--lambda", "--lambda-warmup", "--temperature", "--pretext-views"])
def test_every_train_flag_is_documented(flag):
    assert f"`{flag}`" in render_reference(build_parser())


def test_folder_runs_write_a_load_report(tmp_path, rng):
    data = tmp_path / "images"
    for label in ("a", "b"):
        (data / label).mkdir(parents=True)
        for i in range(4):
            write_image(rng.uniform(size=(16, 16, 3)), data / label / f"{i}.png")

    run = tmp_path / "run"
    assert main(["pretrain", "--data", str(data), "--out", str(run), "--epochs", "1"] + SMALL_MODEL) == 0
    report = (run / "load_report.txt").read_text()
    assert f"root: {data}" in report
    assert "images: 8" in report and "failures: 0" in report

    probe_csv = tmp_path / "eval" / "probe.csv"
    assert main(["linear-eval", "--checkpoint", str(run / "final.ckpt"), "--data", str(data), "--steps", "5",
                 "--runs", "1", "--out", str(probe_csv), "-q"]) == 0
    assert "images: 8" in (tmp_path / "eval" / "load_report.txt").read_text()

    out = tmp_path / "coeffs" / "images.bin"
    assert main(["scatter-export", "--data", str(data), "--out", str(out), "--scales", "2", "--orientations", "4",
                 "--image-size", "16", "-q"]) == 0
    assert (tmp_path / "coeffs" / "load_report.txt").exists()


def test_synthetic_runs_skip_the_load_report(tmp_path):
    out = tmp_path / "coeffs" / "noise.bin"
    assert main(["scatter-export", "--data", "synth:noise:2", "--out", str(out), "--scales", "2",
                 "--orientations", "4", "--image-size", "16", "-q"]) == 0
    assert not (tmp_path / "coeffs" / "load_report.txt").exists()
