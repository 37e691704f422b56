"""Acceptance suite A1-A8.

Each test records one PASS/FAIL line (printed in the terminal summary and
when the module is run directly). A4-A6 train real audits and take several
minutes each on a single core.

    pytest -v tests/test_acceptance.py
    python3 tests/test_acceptance.py
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import Phase, given, settings
from hypothesis import strategies as st

from bgaudit.audit import AuditConfig, default_condition, run_audit
from bgaudit.classifier import (
    ArchSpec,
    TrainConfig,
    average_probabilities,
    ensemble_predict,
    loss_and_grads,
    new_model,
    predict,
    prepare_image,
    train,
)
from bgaudit.cli import main as cli_main
from bgaudit.image_core import ImageTensor
from bgaudit.synthbias import BiasSpec, SynthSpec, generate
from bgaudit.transforms import (
    Identity,
    TileScramble,
    apply_transform,
    dft_spectrum,
    median_filter,
    tile_scramble,
    wavedec2,
    waverec2,
)

RESULTS = {}

# tolerances and budgets, fixed by the acceptance criteria
MEDIAN_CASES, MEDIAN_SIDE = 100, 16
PARSEVAL_RTOL = 1e-4
DFT_ORACLE_ATOL = 1e-6
DWT_RECON_ATOL = 1e-5
A1_BUDGET = 30.0
A2_CASES, A2_BUDGET = 500, 10.0
GRAD_RTOL, GRAD_SEEDS, GRAD_H = 1e-3, 5, 1e-4
INIT_LOSS_RTOL = 0.05
A3_BUDGET = 120.0
ALPHA, RATIO = 0.01, 2.0
AUDIT_BUDGET = 20 * 60.0
SEEDS = (1, 2, 3)


def record(key, ok, detail):
    RESULTS[key] = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    print(RESULTS[key])
    assert ok, RESULTS[key]


# --- A1 ------------------------------------------------------------------------


def _median_oracle(img, k):
    r = k // 2
    pad = np.pad(img, r, mode="edge")
    out = np.empty_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = sorted(pad[i:i + k, j:j + k].ravel())[k * k // 2]
    return out


def _direct_dft(f):
    h, w = f.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for x in range(h):
                for y in range(w):
                    acc += f[x, y] * np.exp(-2j * np.pi * (u * x / h + v * y / w))
            out[u, v] = acc
    return out


def test_a1_transform_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    median_ok = all(
        np.array_equal(median_filter(ImageTensor(img), k).data[..., 0], _median_oracle(img, k))
        for img in (rng.random((MEDIAN_SIDE, MEDIAN_SIDE)) for _ in range(MEDIAN_CASES))
        for k in (3, 5)
    )
    parseval_err = 0.0
    for _ in range(20):
        f = rng.random((32, 32))
        mag = dft_spectrum(f, log_scale=False, center=False)
        parseval_err = max(parseval_err, abs((mag**2).sum() / f.size - (f**2).sum()) / (f**2).sum())
    oracle_err = 0.0
    for _ in range(3):
        f = rng.random((8, 8))
        oracle_err = max(oracle_err, np.abs(dft_spectrum(f, log_scale=False, center=False) - np.abs(_direct_dft(f))).max())
    recon_err = 0.0
    for family in ("haar", "db4"):
        for levels in (1, 2):
            for _ in range(5):
                f = rng.random((64, 64))
                recon_err = max(recon_err, np.abs(waverec2(wavedec2(f, family, levels), family) - f).max())
    elapsed = time.perf_counter() - t0
    ok = (median_ok and parseval_err < PARSEVAL_RTOL and oracle_err < DFT_ORACLE_ATOL
          and recon_err < DWT_RECON_ATOL and elapsed < A1_BUDGET)
    record("A1", ok, f"median exact={median_ok}, parseval rel err={parseval_err:.2e}, "
                     f"direct-DFT err={oracle_err:.2e}, DWT recon err={recon_err:.2e}, {elapsed:.1f}s")


# --- A2 ------------------------------------------------------------------------

_A2 = {"cases": 0, "bad": []}


@settings(max_examples=A2_CASES, deadline=None, database=None, phases=[Phase.generate])
@given(
    side=st.integers(2, 24),
    tile=st.integers(1, 8),
    seed=st.integers(0, 2**64 - 1),
    data=st.data(),
)
def _a2_property(side, tile, seed, data):
    tile = min(tile, side)
    img = ImageTensor(np.random.default_rng(seed % 2**32).random((side, side)))
    out = tile_scramble(img, tile, seed).data
    n = side // tile * tile
    if not np.array_equal(np.sort(out, axis=None), np.sort(img.data[:n, :n], axis=None)):
        _A2["bad"].append(("multiset", side, tile, seed))
    if not np.array_equal(out, tile_scramble(img, tile, seed).data):
        _A2["bad"].append(("determinism", side, tile, seed))
    if not tile_scramble(img, side, seed) == img:
        _A2["bad"].append(("identity", side, seed))
    a, b = data.draw(st.lists(st.text(min_size=1, max_size=12), min_size=2, max_size=2, unique=True))
    if side >= 4:
        # distinct values so that distinct permutations give distinct images
        probe = ImageTensor(np.arange(side * side, dtype=float).reshape(side, side) / (side * side))
        spec = TileScramble(1, seed)
        if np.array_equal(apply_transform(probe, spec, a).data, apply_transform(probe, spec, b).data):
            _A2["bad"].append(("distinct-paths", side, seed, a, b))
    _A2["cases"] += 1


def test_a2_scramble_invariants():
    t0 = time.perf_counter()
    _a2_property()
    elapsed = time.perf_counter() - t0
    ok = _A2["cases"] >= A2_CASES and not _A2["bad"] and elapsed < A2_BUDGET
    record("A2", ok, f"{_A2['cases']} cases, {len(_A2['bad'])} violations {_A2['bad'][:3]}, {elapsed:.1f}s")


# --- A3 ------------------------------------------------------------------------


def _grad_check(model, x, y):
    _, grads = loss_and_grads(model, x, y)
    worst = 0.0
    for name, theta in model.params.items():
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + GRAD_H
            lp, _ = loss_and_grads(model, x, y)
            theta[idx] = orig - GRAD_H
            lm, _ = loss_and_grads(model, x, y)
            theta[idx] = orig
            num = (lp - lm) / (2 * GRAD_H)
            ana = grads[name][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


def test_a3_classifier_numerical_gate():
    t0 = time.perf_counter()
    arch = ArchSpec((8, 8), 1, (3, 4), (6, 3))
    worst, loss_dev = 0.0, 0.0
    for seed in range(GRAD_SEEDS):
        rng = np.random.default_rng(seed)
        y = np.repeat(np.arange(3), 20)
        x = rng.random((60, 8, 8, 1))
        fresh = new_model(arch, seed=seed, dtype=np.float64)
        loss, _ = loss_and_grads(fresh, x, y)
        loss_dev = max(loss_dev, abs(loss - math.log(3)) / math.log(3))
        # randomize every parameter, biases included, then check a small batch
        model = new_model(arch, seed=seed, dtype=np.float64)
        for k, v in model.params.items():
            model.params[k] = rng.normal(0.0, 0.5, v.shape)
        worst = max(worst, _grad_check(model, x[:4], y[:4]))
    elapsed = time.perf_counter() - t0
    ok = worst < GRAD_RTOL and loss_dev < INIT_LOSS_RTOL and elapsed < A3_BUDGET
    record("A3", ok, f"max grad rel err={worst:.2e} over {GRAD_SEEDS} seeds, "
                     f"init loss dev from ln3={loss_dev:.2%}, {elapsed:.1f}s")


# --- A4-A6: end-to-end audits -------------------------------------------------------


def _audit_spec(**kw):
    # 140 per class -> exactly 100 train / 20 val / 20 test per class: 500/100/100
    return SynthSpec(num_classes=5, per_class=140, splits=(100 / 140, 20 / 140, 20 / 140), seed=11, **kw)


def _audit(ds, names):
    cfg = AuditConfig(conditions=[default_condition(n) for n in names], seeds=SEEDS, alpha=ALPHA,
                      ratio_threshold=RATIO)
    t0 = time.perf_counter()
    report = run_audit(ds, cfg)
    return report, time.perf_counter() - t0


def _seed_summary(report, name):
    c = report.condition(name)
    return c, " ".join(f"{s.accuracy:.2f}(p={s.p_value:.1g})" for s in c.seeds)


@pytest.mark.slow
def test_a4_bias_detection_power():
    ds = generate(_audit_spec(), BiasSpec("corner_watermark", 1.0))
    assert (len(ds.split("train")), len(ds.split("test"))) == (500, 100)
    report, elapsed = _audit(ds, ("raw", "cropped20", "scrambled@1"))
    ok = report.bias_verdict == "bias_detected" and elapsed < AUDIT_BUDGET
    parts = []
    for name in ("cropped20", "scrambled@1"):
        c, detail = _seed_summary(report, name)
        hits = sum(s.p_value < ALPHA and s.accuracy / c.chance >= RATIO for s in c.seeds)
        ok = ok and hits >= 2
        parts.append(f"{name} flagged on {hits}/3 [{detail}]")
    record("A4", ok, "; ".join(parts) + f"; bias_verdict={report.bias_verdict}, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_a5_false_positive_control():
    ds = generate(_audit_spec(), BiasSpec())
    report, elapsed = _audit(ds, ("raw", "cropped20", "scrambled@1"))
    ok = report.bias_verdict == "none_detected" and elapsed < AUDIT_BUDGET
    parts = []
    for name in ("cropped20", "scrambled@1"):
        c, detail = _seed_summary(report, name)
        inside = sum(s.p_value >= ALPHA for s in c.seeds)
        ok = ok and inside >= 2
        parts.append(f"{name} at chance on {inside}/3 [{detail}]")
    record("A5", ok, "; ".join(parts) + f"; bias_verdict={report.bias_verdict}, {elapsed / 60:.1f} min")


# Small glyphs with a few pixels of position jitter: the class lives in fine shape
# detail that raw pixels resolve but half-resolution and 5x5 median views blur away.
CONTEXT_SPEC = {"glyph_size": 5.0, "position_jitter": 3.0, "scale_jitter": (1.0, 1.0), "rotation_jitter": 0.0}


@pytest.mark.slow
def test_a6_profile_discrimination():
    names = ("raw", "dwt_haar", "median5")
    noisy, t1 = _audit(generate(_audit_spec(), BiasSpec("noise_signature", 1.0)), names)
    glyphs, t2 = _audit(generate(_audit_spec(**CONTEXT_SPEC), BiasSpec()), names)

    def fmt(rep):
        p = rep.profile
        means = ", ".join(f"{n}={rep.condition(n).mean_accuracy:.2f}" for n in names)
        return (f"{rep.profile_verdict} ({means}; dw={p.get('delta_wavelet', float('nan')):+.3f}"
                f"±{p.get('eps_wavelet', float('nan')):.3f}, dm={p.get('delta_median', float('nan')):+.3f}"
                f"±{p.get('eps_median', float('nan')):.3f})")

    ok = noisy.profile_verdict == "background_noise" and glyphs.profile_verdict == "contextual_signal"
    record("A6", ok, f"noise-signature set -> {fmt(noisy)}; glyph set -> {fmt(glyphs)}; {(t1 + t2) / 60:.1f} min")


# --- A7 ------------------------------------------------------------------------


def test_a7_audit_determinism(tmp_path):
    spec = {"num_classes": 3, "per_class": 12, "seed": 4}
    bias = {"kind": "corner_watermark", "strength": 1.0}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    (tmp_path / "bias.json").write_text(json.dumps(bias))
    assert cli_main(["gen", "--spec", str(tmp_path / "spec.json"), "--bias", str(tmp_path / "bias.json"),
                     "--out", str(tmp_path / "data")]) == 0
    cfg = {
        "conditions": ["raw", "cropped20", "scrambled@1", "dwt_haar", "median5"],
        "arch": ArchSpec((16, 16), 1, (4, 8), (16, 3)).to_json(),
        "train": {"epochs": 2, "batch_size": 8, "optimizer": {"name": "rmsprop", "learning_rate": 1e-3}},
        "seeds": [1, 2],
        "input_size": [16, 16],
    }
    (tmp_path / "audit.json").write_text(json.dumps(cfg))
    for run in ("a", "b"):
        assert cli_main(["audit", "--data", str(tmp_path / "data"), "--config", str(tmp_path / "audit.json"),
                         "--out", str(tmp_path / run)]) == 0
    same_json = (tmp_path / "a" / "audit_report.json").read_bytes() == (tmp_path / "b" / "audit_report.json").read_bytes()
    same_svg = (tmp_path / "a" / "audit_chart.svg").read_bytes() == (tmp_path / "b" / "audit_chart.svg").read_bytes()
    record("A7", same_json and same_svg, f"report JSON identical={same_json}, SVG identical={same_svg}")


# --- A8 ------------------------------------------------------------------------


def test_a8_ensemble_sanity():
    ds = generate(SynthSpec(num_classes=3, per_class=20, image_size=(40, 40), glyph_size=5.0, seed=8))
    arch = ArchSpec((16, 16), 1, (4,), (16, 3))
    from bgaudit.audit import condition_dataset

    model = train(condition_dataset(ds, Identity(), arch.input_size), arch,
                  TrainConfig(learning_rate=1e-3, epochs=3, batch_size=8))
    test_items = ds.split("test")
    agree = 0
    for it in test_items:
        x = prepare_image(it.image, Identity(), arch, it.path)[None]
        agree += ensemble_predict([model], [Identity()], it.image, it.path) == int(predict(model, x)[0])
    avg = average_probabilities([[0.6, 0.4], [0.2, 0.8]])
    arith = np.allclose(avg, [0.4, 0.6]) and int(np.argmax(avg)) == 1
    ok = agree == len(test_items) and arith
    record("A8", ok, f"single-model ensemble agrees on {agree}/{len(test_items)} test images; "
                     f"hand example average={avg.round(6).tolist()} -> class {int(np.argmax(avg))}")


if __name__ == "__main__":
    import sys
    import tempfile

    tests = [test_a1_transform_oracles, test_a2_scramble_invariants, test_a3_classifier_numerical_gate,
             test_a4_bias_detection_power, test_a5_false_positive_control, test_a6_profile_discrimination,
             lambda: test_a7_audit_determinism(Path(tempfile.mkdtemp())), test_a8_ensemble_sanity]
    failed = 0
    for t in tests:
        try:
            t()
        except AssertionError:
            failed += 1
    print("\n".join(RESULTS.values()))
    sys.exit(1 if failed else 0)
