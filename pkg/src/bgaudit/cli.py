"""Command-line front end: gen, transform, train, audit, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_json(source: str, what: str):
    """Parse a JSON file (or an inline JSON object) with byte-offset diagnostics."""
    text = source
    if not source.lstrip().startswith("{"):
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"{what}: cannot read {source!r}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise UsageError(f"{what}: malformed JSON at byte offset {offset} (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc


def _prepare_out(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {path!r} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not overwrite:
        raise UsageError(f"--out {path!r} is not empty (pass --overwrite to replace its contents)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_config(name: str, config: dict):
    print(f"[{name}] resolved config:")
    print(json.dumps(config, indent=2, sort_keys=True))
    sys.stdout.flush()


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    from .synthbias import BiasSpec, SynthError, SynthSpec, describe, generate

    try:
        synth = SynthSpec.from_json(read_json(args.spec, "--spec"))
        bias = BiasSpec.from_json(read_json(args.bias, "--bias")) if args.bias else BiasSpec()
    except (SynthError, TypeError) as exc:
        raise UsageError(f"invalid spec: {exc}") from exc
    out = _prepare_out(args.out, args.overwrite)
    _print_config("gen", {"synth_spec": synth.to_json(), "bias_spec": bias.to_json(), "out": str(out)})
    ds = generate(synth, bias, out)
    summary = describe(ds)
    for name, count in summary["class_counts"].items():
        print(f"{name}: {count}")
    print("splits: " + ", ".join(f"{k}={v}" for k, v in summary["split_counts"].items()))
    return EXIT_OK


def cmd_transform(args) -> int:
    from .dataset import load_dataset, save_dataset
    from .transforms import TransformError, apply_to_dataset, spec_from_json

    try:
        spec = spec_from_json(read_json(args.transform, "--transform"))
    except (TransformError, TypeError) as exc:
        raise UsageError(f"invalid transform: {exc}") from exc
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"--in {args.input!r} is not a directory")
    out = _prepare_out(args.out, args.overwrite)
    _print_config("transform", {"in": str(src), "out": str(out), "transform": spec.to_json(), "jobs": args.jobs})
    ds = load_dataset(src)
    result = apply_to_dataset(ds, spec, jobs=args.jobs)
    manifest = {"source": str(src), "transform": spec.to_json()}
    save_dataset(result, out, manifest)
    counts = {}
    for it in result.items:
        counts[result.class_names[it.label]] = counts.get(result.class_names[it.label], 0) + 1
    for name in result.class_names:
        print(f"{name}: {counts.get(name, 0)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .classifier import ArchSpec, TrainConfig, evaluate, history_csv, save_model, train
    from .dataset import load_dataset

    src = Path(args.data)
    if not src.is_dir():
        raise UsageError(f"--data {args.data!r} is not a directory")
    try:
        cfg = TrainConfig.from_json(read_json(args.config, "--config")) if args.config else TrainConfig()
        arch_obj = read_json(args.arch, "--arch") if args.arch else None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    ds = load_dataset(src)
    try:
        arch = ArchSpec.from_json(arch_obj) if arch_obj else ArchSpec.mini_vgg(ds.num_classes, tuple(args.input_size))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid arch: {exc}") from exc
    out = _prepare_out(args.out, args.overwrite)
    _print_config("train", {"data": str(src), "out": str(out), "arch": arch.to_json(), "train": cfg.to_json()})
    from .audit import condition_dataset
    from .transforms import Identity

    prepared = condition_dataset(ds, Identity(), arch.input_size)
    model = train(prepared, arch, cfg, log=lambda r: print(
        f"epoch {r['epoch']}: loss={r['train_loss']:.4f} train_acc={r['train_acc']:.4f} val_acc={r['val_acc']:.4f}"))
    save_model(model, out / "model.blns")
    (out / "history.csv").write_text(history_csv(model.history), encoding="utf-8")
    m = evaluate(model, prepared, "test")
    metrics = {"accuracy": m.accuracy, "n": m.n, "confusion": m.confusion.tolist(), "class_names": ds.class_names}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"test accuracy: {m.accuracy:.4f} (n={m.n})")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import AuditConfig, run_audit
    from .dataset import load_dataset
    from .transforms import TransformError

    src = Path(args.data)
    if not src.is_dir():
        raise UsageError(f"--data {args.data!r} is not a directory")
    try:
        cfg = AuditConfig.from_json(read_json(args.config, "--config")) if args.config else AuditConfig()
    except (TransformError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid audit config: {exc}") from exc
    out = _prepare_out(args.out, args.overwrite)
    dataset_id = args.dataset_id or src.name
    _print_config("audit", {"data": str(src), "dataset": dataset_id, "out": str(out), "audit": cfg.to_json()})
    ds = load_dataset(src)
    report = run_audit(ds, cfg, dataset_id=dataset_id, out_dir=out, log=print, jobs=args.jobs)
    for c in report.conditions:
        if c.status == "ok":
            print(f"{c.name}: accuracy={c.mean_accuracy:.4f} chance={c.chance:.4f} ratio={c.ratio:.2f} "
                  f"p={c.p_value:.3g} flagged={c.flagged}")
        else:
            print(f"{c.name}: FAILED ({c.error})")
    print(f"bias_verdict: {report.bias_verdict}")
    print(f"profile_verdict: {report.profile_verdict}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .audit import load_report
    from .report import render_chart, report_csv

    try:
        report = load_report(args.report)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"--report: cannot load {args.report!r}: {exc}") from exc
    out = _prepare_out(args.out, args.overwrite)
    _print_config("report", {"report": args.report, "out": str(out)})
    (out / "audit_report.csv").write_text(report_csv(report), encoding="utf-8")
    render_chart(report, out / "audit_chart.svg")
    print(f"bias_verdict: {report.bias_verdict}")
    print(f"profile_verdict: {report.profile_verdict}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bgaudit", description="Audit image datasets for hidden background bias.")
    parser.add_argument("--version", action="version", version=f"bgaudit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def common(p):
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty --out")

    p = sub.add_parser("gen", help="generate a synthetic dataset with optional capture bias")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--bias", help="BiasSpec JSON file (default: no bias)")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("transform", help="apply a transform spec to every image of a dataset")
    p.add_argument("--in", dest="input", required=True, help="input dataset directory")
    p.add_argument("--transform", required=True, help="TransformSpec JSON file or inline JSON object")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    common(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="train the CNN on a dataset's train split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--arch", help="ArchSpec JSON (default: MiniVGG for the dataset)")
    p.add_argument("--config", help="TrainConfig JSON (default: built-in defaults)")
    p.add_argument("--input-size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"),
                   help="network input size when --arch is not given (default 64 64)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="run the full bias audit on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="AuditConfig JSON (default: every condition, seeds 1 2 3)")
    p.add_argument("--dataset-id", help="name recorded in the report (default: directory name)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="conditions trained in parallel (default: all cores)")
    common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="re-render CSV and SVG chart from audit_report.json")
    p.add_argument("--report", required=True, help="path to audit_report.json")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("bgaudit: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bgaudit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"bgaudit {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
