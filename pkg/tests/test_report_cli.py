import json
import re
from pathlib import Path

import numpy as np
import pytest

from bgaudit.audit import AuditReport, ConditionResult, SeedResult
from bgaudit.cli import main
from bgaudit.dataset import load_dataset
from bgaudit.image_core import load_image
from bgaudit.report import PLOT_HEIGHT, chart_svg, render_chart, report_csv


def _report(accs=((1.0, 1.0),), names=("raw",)):
    conds = []
    for name, seeds in zip(names, accs):
        r = ConditionResult(name, {"kind": "identity"}, 0.2)
        r.seeds = [SeedResult(i + 1, a, 100, int(a * 100), 0.001, a >= 0.4) for i, a in enumerate(seeds)]
        conds.append(r)
    return AuditReport("demo", {}, conds, "none_detected", "inconclusive", num_classes=5)


# --- report rendering ------------------------------------------------------------


def test_single_condition_svg_structure():
    svg = chart_svg(_report())
    assert svg.count("<rect") == 1
    assert len(re.findall(r"<line[^>]*stroke-dasharray", svg)) == 1
    assert "Test accuracy" in svg and "Condition" in svg
    assert "href" not in svg and "<image" not in svg


def test_full_accuracy_bar_spans_plot():
    svg = chart_svg(_report())
    height = float(re.search(r'<rect[^>]*height="([0-9.]+)"', svg).group(1))
    assert height == PLOT_HEIGHT


def test_seed_ticks_and_failed_conditions():
    rep = _report(accs=((0.5, 0.7, 0.6), (0.2, 0.2, 0.2)), names=("raw", "median5"))
    failed = ConditionResult("fourier", {"kind": "dft_magnitude"}, 0.2, status="failed", error="boom")
    rep.conditions.append(failed)
    svg = chart_svg(rep)
    assert svg.count('class="seed"') == 6
    assert svg.count("<rect") == 2
    assert "failed" in svg


def test_svg_deterministic(tmp_path):
    render_chart(_report(), tmp_path / "a.svg")
    render_chart(_report(), tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_report_csv_rows():
    rows = report_csv(_report(accs=((0.5, 0.6),))).splitlines()
    assert rows[0].startswith("condition,seed,accuracy")
    assert len(rows) == 3 and rows[1].startswith("raw,1,0.5,100,50")


# --- CLI ---------------------------------------------------------------------------


def _write(path, obj):
    path.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(path)


SMALL_SPEC = {"num_classes": 3, "per_class": 10, "seed": 1}


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = _write(root / "spec.json", SMALL_SPEC)
    bias = _write(root / "bias.json", {"kind": "corner_watermark", "strength": 1.0})
    assert main(["gen", "--spec", spec, "--bias", bias, "--out", str(root / "data")]) == 0
    return root / "data"


def test_gen_layout(small_ds, capsys):
    subdirs = sorted(p.name for p in small_ds.iterdir() if p.is_dir())
    assert len(subdirs) == 3
    assert (small_ds / "manifest.json").exists()


def test_gen_prints_config_first(tmp_path, capsys):
    spec = _write(tmp_path / "s.json", SMALL_SPEC)
    assert main(["gen", "--spec", spec, "--out", str(tmp_path / "o")]) == 0
    assert capsys.readouterr().out.startswith("[gen] resolved config:")


def test_gen_malformed_json(tmp_path, capsys):
    spec = _write(tmp_path / "s.json", '{"num_classes": 3,, "per_class": 10}')
    assert main(["gen", "--spec", spec, "--out", str(tmp_path / "o")]) == 1
    assert "byte offset 18" in capsys.readouterr().err


def test_gen_strength_out_of_range(tmp_path, capsys):
    spec = _write(tmp_path / "s.json", SMALL_SPEC)
    bias = _write(tmp_path / "b.json", {"kind": "corner_watermark", "strength": 1.5})
    assert main(["gen", "--spec", spec, "--bias", bias, "--out", str(tmp_path / "o")]) == 1
    assert "strength" in capsys.readouterr().err


def test_non_empty_out_requires_overwrite(small_ds, tmp_path):
    spec = _write(tmp_path / "s.json", SMALL_SPEC)
    assert main(["gen", "--spec", spec, "--out", str(small_ds)]) == 1


def test_transform_identity_pixelwise(small_ds, tmp_path):
    assert main(["transform", "--in", str(small_ds), "--transform", '{"kind": "identity"}', "--out", str(tmp_path / "t")]) == 0
    a, b = load_dataset(small_ds), load_dataset(tmp_path / "t")
    assert [it.path for it in a.items] == [it.path for it in b.items]
    assert all(p.image == q.image for p, q in zip(a.items, b.items))


def test_transform_scramble_twice_identical(small_ds, tmp_path):
    spec = '{"kind": "tile_scramble", "tile": 16, "seed": 7}'
    for name in ("a", "b"):
        assert main(["transform", "--in", str(small_ds), "--transform", spec, "--out", str(tmp_path / name), "--jobs", "2"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 30
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_transform_crop_outputs_20x20(small_ds, tmp_path):
    crop = _write(tmp_path / "crop.json", {"kind": "crop_background", "x0": 0, "y0": 0, "w": 20, "h": 20})
    assert main(["transform", "--in", str(small_ds), "--transform", crop, "--out", str(tmp_path / "c")]) == 0
    for png in (tmp_path / "c").rglob("*.png"):
        assert load_image(png).shape == (20, 20, 1)


def test_transform_unreadable_image_exit_2(small_ds, tmp_path, capsys):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(small_ds, broken)
    victim = sorted(broken.rglob("*.png"))[0]
    victim.write_bytes(b"not an image")
    assert main(["transform", "--in", str(broken), "--transform", '{"kind": "identity"}', "--out", str(tmp_path / "o")]) == 2
    assert victim.name in capsys.readouterr().err


def test_transform_unknown_kind_exit_1(small_ds, tmp_path, capsys):
    assert main(["transform", "--in", str(small_ds), "--transform", '{"kind": "blur"}', "--out", str(tmp_path / "o")]) == 1
    assert "blur" in capsys.readouterr().err


def test_audit_missing_data_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["audit", "--out", str(tmp_path / "o")])
    assert exc.value.code == 1
    assert "--data" in capsys.readouterr().err


def test_audit_unknown_condition_kind(small_ds, tmp_path, capsys):
    cfg = _write(tmp_path / "a.json", {"conditions": ["raw", {"name": "x", "transform": {"kind": "sharpen"}}]})
    assert main(["audit", "--data", str(small_ds), "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "sharpen" in capsys.readouterr().err


TINY_AUDIT = {
    "conditions": ["raw", "cropped20", "median5"],
    "arch": {"input_size": [16, 16], "input_channels": 1, "blocks": [{"conv_filters": 4, "conv_kernel": 3, "conv_stride": 1, "pool": 2, "convs": 1}],
             "fc_widths": [8, 3]},
    "train": {"optimizer": {"name": "rmsprop", "learning_rate": 0.001}, "epochs": 2, "batch_size": 8},
    "seeds": [1, 2],
    "input_size": [16, 16],
}


def test_audit_and_report_commands(small_ds, tmp_path, capsys):
    cfg = _write(tmp_path / "a.json", TINY_AUDIT)
    assert main(["audit", "--data", str(small_ds), "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("[audit] resolved config:")
    assert re.search(r"^bias_verdict: (bias_detected|none_detected)$", out, re.M)
    assert re.search(r"^profile_verdict: \w+$", out, re.M)
    report = tmp_path / "o" / "audit_report.json"
    assert main(["report", "--report", str(report), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "audit_chart.svg").read_bytes() == (tmp_path / "o" / "audit_chart.svg").read_bytes()
    assert (tmp_path / "r" / "audit_report.csv").read_bytes() == (tmp_path / "o" / "audit_report.csv").read_bytes()
    # idempotent re-run into the same directory
    first = report.read_bytes()
    assert main(["audit", "--data", str(small_ds), "--config", cfg, "--out", str(tmp_path / "o"), "--overwrite"]) == 0
    assert report.read_bytes() == first


def test_train_command(small_ds, tmp_path, capsys):
    arch = _write(tmp_path / "arch.json", TINY_AUDIT["arch"])
    cfg = _write(tmp_path / "t.json", {"epochs": 2, "batch_size": 8})
    assert main(["train", "--data", str(small_ds), "--arch", arch, "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    assert {p.name for p in (tmp_path / "m").iterdir()} == {"model.blns", "history.csv", "metrics.json"}
    assert len((tmp_path / "m" / "history.csv").read_text().splitlines()) == 3


@pytest.mark.parametrize("sub", [None, "gen", "transform", "train", "audit", "report"])
def test_help_exits_zero(sub, capsys):
    argv = [sub, "--help"] if sub else ["--help"]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    text = capsys.readouterr().out
    if sub:
        assert "--out" in text and "--overwrite" in text


def test_unknown_flag_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--spec", "x", "--out", str(tmp_path), "--bogus"])
    assert exc.value.code == 1
