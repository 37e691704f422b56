"""Audit a watermarked and a clean synthetic dataset.

The watermark lives only in the top-left 20x20 corner, so a network trained
on that crop alone (or on pixel-scrambled images) beats chance on the biased
set and stays at chance on the clean one. A reduced condition list keeps the
run to roughly 15 minutes on one core; pass --quick for a smaller version.

    python3 demos/03_audit_synthetic.py [--quick]
"""

import sys
from pathlib import Path

from bgaudit.audit import AuditConfig, default_condition, run_audit
from bgaudit.classifier import TrainConfig
from bgaudit.synthbias import BiasSpec, SynthSpec, generate

quick = "--quick" in sys.argv
per_class = 60 if quick else 140
spec = SynthSpec(num_classes=5, per_class=per_class, splits=(100 / 140, 20 / 140, 20 / 140), seed=11)
cfg = AuditConfig(
    conditions=[default_condition(n) for n in ("raw", "cropped20", "scrambled@1")],
    seeds=(1,) if quick else (1, 2, 3),
    train=TrainConfig(learning_rate=3e-4, epochs=8 if quick else 15, batch_size=16),
)

for label, bias in (("watermarked", BiasSpec("corner_watermark", 1.0)), ("clean", BiasSpec())):
    ds = generate(spec, bias)
    report = run_audit(ds, cfg, dataset_id=label, out_dir=Path("demo_out/audit") / label)
    print(f"\n== {label} ==")
    for c in report.conditions:
        print(f"{c.name:12s} acc {c.mean_accuracy:.2f}  chance {c.chance:.2f}  ratio {c.ratio:.2f}  "
              f"p {c.p_value:.2g}  flagged {c.flagged}")
    print("bias_verdict:", report.bias_verdict)
    print("chart:", Path("demo_out/audit") / label / "audit_chart.svg")
