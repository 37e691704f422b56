"""Bias audit: train and test under every probe condition and compare to chance."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import ArchSpec, TrainConfig, evaluate, train
from .dataset import LabeledDataset
from .image_core import resize, to_grayscale
from .transforms import (
    Compose,
    CropBackground,
    DftMagnitude,
    DwtCompose,
    Identity,
    MedianFilter,
    TileScramble,
    TransformError,
    TransformSpec,
    apply_transform,
    spec_from_json,
)

BIAS_VERDICTS = ("none_detected", "bias_detected")
PROFILE_VERDICTS = ("contextual_signal", "background_noise", "inconclusive")
WAVELET_CONDITIONS = ("dwt_haar", "median5+dwt_haar")
MEDIAN_CONDITION = "median5"


class AuditError(RuntimeError):
    pass


class ProfileError(ValueError):
    pass


def chance_accuracy(num_classes: int) -> float:
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return 1.0 / num_classes


def _logsumexp(values) -> float:
    m = max(values)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def binomial_p_value(k: int, n: int, p: float) -> float:
    """Exact upper tail P(X >= k) for X ~ Binomial(n, p), summed in log space."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if k == 0:
        return 1.0
    lp, lq = math.log(p), math.log1p(-p)
    lgn = math.lgamma(n + 1)
    terms = [lgn - math.lgamma(i + 1) - math.lgamma(n - i + 1) + i * lp + (n - i) * lq for i in range(k, n + 1)]
    return min(1.0, math.exp(_logsumexp(terms)))


def is_flagged(k: int, n: int, p: float, alpha: float, ratio_threshold: float) -> bool:
    """Above chance both statistically (exact test) and materially (accuracy ratio)."""
    if n == 0:
        return False
    return binomial_p_value(k, n, p) < alpha and (k / n) / p >= ratio_threshold


# --------------------------------------------------------------------------
# conditions


@dataclass(frozen=True)
class Condition:
    name: str
    spec: TransformSpec

    def to_json(self) -> dict:
        return {"name": self.name, "transform": self.spec.to_json()}


CROP20 = CropBackground(0, 0, 20, 20)


def default_conditions(scramble_seed: int = 0) -> list:
    """The full condition grid: probes, transforms, and cropped variants."""
    base = {
        "fourier": DftMagnitude(True, True),
        "dwt_haar": DwtCompose("haar", 1),
        "dwt_db4": DwtCompose("db4", 1),
        "median5": MedianFilter(5),
        "median5+fourier": Compose((MedianFilter(5), DftMagnitude(True, True))),
        "median5+dwt_haar": Compose((MedianFilter(5), DwtCompose("haar", 1))),
    }
    conds = [
        Condition("raw", Identity()),
        Condition("cropped20", CROP20),
        Condition("scrambled@1", TileScramble(1, scramble_seed)),
        Condition("scrambled@16", TileScramble(16, scramble_seed)),
        Condition("scrambled@32", TileScramble(32, scramble_seed)),
    ]
    conds += [Condition(name, spec) for name, spec in base.items()]
    for name, spec in base.items():
        steps = spec.steps if isinstance(spec, Compose) else (spec,)
        conds.append(Condition(f"cropped20+{name}", Compose((CROP20,) + tuple(steps))))
    return conds


def default_condition(name: str, scramble_seed: int = 0) -> Condition:
    for cond in default_conditions(scramble_seed):
        if cond.name == name:
            return cond
    raise ValueError(f"unknown condition name {name!r}")


def is_information_free(spec: TransformSpec) -> bool:
    """Cropped-background and pixel-level scramble conditions carry no object signal."""
    if isinstance(spec, CropBackground):
        return True
    if isinstance(spec, TileScramble):
        return int(spec.tile) == 1
    if isinstance(spec, Compose):
        return any(is_information_free(s) for s in spec.steps)
    return False


AUDIT_TRAIN = TrainConfig(learning_rate=3e-4, epochs=15, batch_size=16)


@dataclass
class AuditConfig:
    conditions: list = field(default_factory=default_conditions)
    arch: ArchSpec | None = None  # None: MiniVGG sized to the dataset's classes
    # a faster schedule than the bare TrainConfig default: 15 epochs suffice
    # for the 64x64 MiniVGG to pick up weak pixel-statistics bias
    train: TrainConfig = field(default_factory=lambda: AUDIT_TRAIN)
    alpha: float = 0.01
    ratio_threshold: float = 2.0
    seeds: tuple = (1, 2, 3)
    input_size: tuple = (64, 64)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.input_size = tuple(int(v) for v in self.input_size)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.ratio_threshold > 1.0:
            raise ValueError(f"ratio_threshold must exceed 1, got {self.ratio_threshold}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        names = [c.name for c in self.conditions]
        if "raw" not in names:
            raise ValueError("conditions must include 'raw'")
        if len(set(names)) != len(names):
            raise ValueError("condition names must be unique")
        if self.arch is not None and tuple(self.arch.input_size) != self.input_size:
            self.input_size = tuple(self.arch.input_size)

    def resolved_arch(self, num_classes: int) -> ArchSpec:
        if self.arch is None:
            return ArchSpec.mini_vgg(num_classes, self.input_size)
        if self.arch.num_classes != num_classes:
            raise ValueError(f"arch outputs {self.arch.num_classes} classes, dataset has {num_classes}")
        return self.arch

    def to_json(self) -> dict:
        return {
            "conditions": [c.to_json() for c in self.conditions],
            "arch": self.arch.to_json() if self.arch is not None else None,
            "train": self.train.to_json(),
            "alpha": self.alpha,
            "ratio_threshold": self.ratio_threshold,
            "seeds": list(self.seeds),
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AuditConfig":
        obj = dict(obj)
        kwargs = {}
        if "conditions" in obj:
            conds = []
            for entry in obj.pop("conditions"):
                if isinstance(entry, str):
                    conds.append(default_condition(entry))
                elif isinstance(entry, dict) and set(entry) <= {"name", "transform"} and "name" in entry:
                    if "transform" in entry:
                        conds.append(Condition(entry["name"], spec_from_json(entry["transform"])))
                    else:
                        conds.append(default_condition(entry["name"]))
                else:
                    raise ValueError(f"condition entries need a 'name' (and optional 'transform'), got {entry!r}")
            kwargs["conditions"] = conds
        arch = obj.pop("arch", None)
        if arch is not None:
            kwargs["arch"] = ArchSpec.from_json(arch)
        if "train" in obj:
            kwargs["train"] = TrainConfig.from_json(obj.pop("train"), base=AUDIT_TRAIN)
        for key in ("alpha", "ratio_threshold", "seeds", "input_size"):
            if key in obj:
                kwargs[key] = obj.pop(key)
        if obj:
            raise ValueError(f"unknown audit config field(s) {sorted(obj)}")
        return cls(**kwargs)


# --------------------------------------------------------------------------
# results


@dataclass
class SeedResult:
    seed: int
    accuracy: float
    n: int
    correct: int
    p_value: float
    flagged: bool

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "accuracy": self.accuracy,
            "n": self.n,
            "correct": self.correct,
            "p_value": self.p_value,
            "flagged": self.flagged,
        }


@dataclass
class ConditionResult:
    name: str
    transform: dict
    chance: float
    seeds: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    @property
    def accuracies(self) -> list:
        return [s.accuracy for s in self.seeds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.seeds else float("nan")

    @property
    def n(self) -> int:
        return self.seeds[0].n if self.seeds else 0

    @property
    def ratio(self) -> float:
        return self.mean_accuracy / self.chance

    @property
    def p_value(self) -> float:
        # median over seeds; with an odd seed count this is one seed's exact p-value
        return float(np.median([s.p_value for s in self.seeds])) if self.seeds else float("nan")

    @property
    def flagged(self) -> bool:
        """Flagged when a strict majority of seeds is flagged."""
        if self.status != "ok" or not self.seeds:
            return False
        return 2 * sum(s.flagged for s in self.seeds) > len(self.seeds)

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "transform": self.transform,
            "status": self.status,
            "seeds": [s.to_json() for s in self.seeds],
            "chance": self.chance,
        }
        if self.status == "ok":
            out.update(
                mean_accuracy=self.mean_accuracy,
                ratio=self.ratio,
                p_value=self.p_value,
                flagged=self.flagged,
            )
        else:
            out.update(mean_accuracy=None, ratio=None, p_value=None, flagged=False, error=self.error)
        return out


@dataclass
class AuditReport:
    dataset: str
    config: dict
    conditions: list
    bias_verdict: str
    profile_verdict: str
    profile: dict = field(default_factory=dict)
    num_classes: int = 0
    version: str = __version__

    def condition(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "num_classes": self.num_classes,
            "config": self.config,
            "conditions": [c.to_json() for c in self.conditions],
            "bias_verdict": self.bias_verdict,
            "profile_verdict": self.profile_verdict,
            "profile": self.profile,
            "version": self.version,
        }


# --------------------------------------------------------------------------
# verdicts


def _std_error(deltas) -> float:
    d = np.asarray(deltas, dtype=np.float64)
    if d.size < 2:
        return 0.0
    return float(d.std(ddof=1) / math.sqrt(d.size))


def _delta(raw, cond):
    """Mean accuracy change and its standard error across seeds.

    Seeds are paired when both conditions ran the same number of them;
    otherwise the two standard errors are combined in quadrature.
    """
    raw = np.asarray(raw, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if raw.size == cond.size:
        d = cond - raw
        return float(d.mean()), _std_error(d)
    se = math.sqrt(_std_error(raw) ** 2 + _std_error(cond) ** 2)
    return float(cond.mean() - raw.mean()), se


def profile_rule(results) -> tuple:
    """Classify the transform response profile.

    ``results`` maps condition name to a list of per-seed accuracies (or is a
    list of ConditionResult). Returns (verdict, details).
    """
    if not isinstance(results, dict):
        results = {r.name: r.accuracies for r in results if getattr(r, "status", "ok") == "ok"}
    results = {k: list(np.atleast_1d(v)) for k, v in results.items()}
    if "raw" not in results:
        raise ProfileError("profile rule needs the 'raw' condition")
    wavelet = next((c for c in WAVELET_CONDITIONS if c in results), None)
    if wavelet is None and MEDIAN_CONDITION not in results:
        raise ProfileError(
            f"profile rule needs at least one of {WAVELET_CONDITIONS + (MEDIAN_CONDITION,)} besides 'raw'"
        )
    details = {"wavelet_condition": wavelet}
    raw = results["raw"]
    dw = dm = None
    if wavelet is not None:
        dw, ew = _delta(raw, results[wavelet])
        details.update(delta_wavelet=dw, eps_wavelet=ew)
    if MEDIAN_CONDITION in results:
        dm, em = _delta(raw, results[MEDIAN_CONDITION])
        details.update(delta_median=dm, eps_median=em)
    if dw is not None and dw >= -ew:
        verdict = "background_noise"
    elif dw is not None and dm is not None and dw < -ew and dm < -em:
        verdict = "contextual_signal"
    else:
        verdict = "inconclusive"
    return verdict, details


def bias_verdict(results) -> str:
    for r in results:
        spec = spec_from_json(r.transform)
        if r.status == "ok" and is_information_free(spec) and r.flagged:
            return "bias_detected"
    return "none_detected"


# --------------------------------------------------------------------------
# orchestration


def condition_dataset(ds: LabeledDataset, spec: TransformSpec, input_size) -> LabeledDataset:
    """Grayscale, transform, then resize every image to the classifier input."""
    h, w = input_size

    def prep(item):
        try:
            img = apply_transform(to_grayscale(item.image), spec, item.path)
            return resize(to_grayscale(img), h, w)
        except Exception as exc:
            raise TransformError(f"transform failed on {item.path}: {exc}") from exc

    return ds.map_images(prep)


def run_condition(ds: LabeledDataset, cond: Condition, cfg: AuditConfig, log=None) -> ConditionResult:
    chance = chance_accuracy(ds.num_classes)
    result = ConditionResult(cond.name, cond.spec.to_json(), chance)
    arch = cfg.resolved_arch(ds.num_classes)
    try:
        cds = condition_dataset(ds, cond.spec, arch.input_size)
    except Exception as exc:
        result.status, result.error = "failed", str(exc)
        return result
    for seed in sorted(cfg.seeds):
        tcfg = replace(cfg.train, seed=seed)
        try:
            model = train(cds, arch, tcfg)
        except Exception as exc:
            result.status, result.error = "failed", f"seed {seed}: {exc}"
            result.seeds = []
            return result
        m = evaluate(model, cds, "test")
        k = int(np.trace(m.confusion))
        p = binomial_p_value(k, m.n, chance)
        flagged = p < cfg.alpha and (m.accuracy / chance) >= cfg.ratio_threshold
        result.seeds.append(SeedResult(seed, m.accuracy, m.n, k, p, bool(flagged)))
        if log is not None:
            log(f"{cond.name} seed={seed} accuracy={m.accuracy:.4f} p={p:.3g}")
    return result


def run_audit(ds: LabeledDataset, cfg: AuditConfig, dataset_id: str = "dataset", out_dir=None, log=None,
              jobs: int = 1) -> AuditReport:
    """Train from scratch under every condition and seed; derive verdicts.

    Conditions are independent, so ``jobs > 1`` runs them on a thread pool;
    results keep the configured order either way.
    """
    if jobs > 1 and len(cfg.conditions) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: run_condition(ds, c, cfg, log), cfg.conditions))
    else:
        results = [run_condition(ds, c, cfg, log) for c in cfg.conditions]
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        raise AuditError("every audit condition failed: " + "; ".join(f"{r.name}: {r.error}" for r in results))
    try:
        profile, details = profile_rule(ok)
    except ProfileError as exc:
        profile, details = "inconclusive", {"reason": str(exc)}
    report = AuditReport(
        dataset=dataset_id,
        config=cfg.to_json(),
        conditions=results,
        bias_verdict=bias_verdict(results),
        profile_verdict=profile,
        profile=details,
        num_classes=ds.num_classes,
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def report_json(report: AuditReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"


def write_report(report: AuditReport, out_dir) -> None:
    from .report import render_chart, report_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "audit_report.json", report_json(report).encode("utf-8"))
    _atomic_write(out / "audit_report.csv", report_csv(report).encode("utf-8"))
    render_chart(report, out / "audit_chart.svg")


def load_report(path) -> AuditReport:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    conds = []
    for c in obj["conditions"]:
        cr = ConditionResult(c["name"], c["transform"], c["chance"], status=c.get("status", "ok"), error=c.get("error"))
        cr.seeds = [
            SeedResult(s["seed"], s["accuracy"], s["n"], s.get("correct", round(s["accuracy"] * s["n"])), s["p_value"], s.get("flagged", False))
            for s in c["seeds"]
        ]
        conds.append(cr)
    return AuditReport(
        dataset=obj["dataset"],
        config=obj["config"],
        conditions=conds,
        bias_verdict=obj["bias_verdict"],
        profile_verdict=obj["profile_verdict"],
        profile=obj.get("profile", {}),
        num_classes=obj.get("num_classes", 0),
        version=obj.get("version", __version__),
    )
