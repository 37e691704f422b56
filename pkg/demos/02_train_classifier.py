"""Train the small VGG-style CNN on a synthetic glyph dataset.

Shows the plain training loop, per-epoch history, the confusion matrix and a
checkpoint round trip. Takes about a minute on one core.

    python3 demos/02_train_classifier.py
"""

from pathlib import Path

import numpy as np

from bgaudit.audit import condition_dataset
from bgaudit.classifier import ArchSpec, TrainConfig, evaluate, history_csv, load_model, predict, save_model, train
from bgaudit.synthbias import SynthSpec, describe, generate
from bgaudit.transforms import Identity

out = Path("demo_out/classifier")
out.mkdir(parents=True, exist_ok=True)

ds = generate(SynthSpec(num_classes=4, per_class=60, seed=5))
summary = describe(ds)
print("classes:", summary["class_counts"])
print("splits:", summary["split_counts"])

arch = ArchSpec.mini_vgg(ds.num_classes, input_size=(32, 32))
data = condition_dataset(ds, Identity(), arch.input_size)
cfg = TrainConfig(learning_rate=1e-3, epochs=8, batch_size=16, seed=1)

model = train(data, arch, cfg, log=lambda r: print(
    "epoch %(epoch)d  loss %(train_loss).3f  train %(train_acc).2f  val %(val_acc).2f" % r))

m = evaluate(model, data, "test")
print("test accuracy %.3f on %d images" % (m.accuracy, m.n))
print("confusion (rows = truth):")
print(m.confusion)

save_model(model, out / "model.blns")
(out / "history.csv").write_text(history_csv(model.history))
back = load_model(out / "model.blns")
x, _ = data.arrays("test")
print("checkpoint predictions identical:", np.array_equal(predict(back, x), predict(model, x)))
