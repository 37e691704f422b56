"""A small VGG-style CNN written directly in numpy.

Layout is NHWC throughout. Each block is one or more 3x3 convolutions
(stride 1, zero padding 1) with ReLU, followed by a 2x2/2 max pool; then
fully connected layers with ReLU on all but the last. Gradients are exact
backpropagation; training uses RMSprop.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import DatasetError, LabeledDataset
from .image_core import ImageTensor, resize, to_grayscale

MAGIC = b"BLNS"
HEAD_SCALE = 0.01
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ArchSpec:
    input_size: tuple = (64, 64)
    input_channels: int = 1
    blocks: tuple = (16, 32, 64)
    fc_widths: tuple = (128, 2)
    convs_per_block: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "blocks", tuple(int(v) for v in self.blocks))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        convs = self.convs_per_block
        convs = tuple(1 for _ in self.blocks) if convs is None else tuple(int(v) for v in convs)
        object.__setattr__(self, "convs_per_block", convs)
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be two positive ints, got {self.input_size}")
        if self.input_channels != 1:
            raise ValueError("only single-channel (grayscale) input is supported")
        if len(convs) != len(self.blocks) or any(c < 1 for c in convs):
            raise ValueError("convs_per_block must give a positive count for every block")
        if any(f < 1 for f in self.blocks) or any(w < 1 for w in self.fc_widths):
            raise ValueError("filter counts and FC widths must be positive")
        if not self.fc_widths:
            raise ValueError("need at least the output FC layer")
        if self.num_classes < 2:
            raise ValueError("the final FC width (num_classes) must be >= 2")
        h, w = self.feature_size
        if h < 1 or w < 1:
            raise ValueError(f"input {self.input_size} collapses to {h}x{w} after {len(self.blocks)} pools")

    @property
    def num_classes(self) -> int:
        return self.fc_widths[-1]

    @property
    def feature_size(self) -> tuple:
        h, w = self.input_size
        for _ in self.blocks:
            h, w = h // 2, w // 2
        return h, w

    @classmethod
    def mini_vgg(cls, num_classes: int, input_size=(64, 64)) -> "ArchSpec":
        return cls(input_size=input_size, blocks=(16, 32, 64), fc_widths=(128, num_classes))

    @classmethod
    def vgg16(cls, num_classes: int, input_size=(224, 224)) -> "ArchSpec":
        return cls(
            input_size=input_size,
            blocks=(64, 128, 256, 512, 512),
            convs_per_block=(2, 2, 3, 3, 3),
            fc_widths=(4096, 4096, num_classes),
        )

    def to_json(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "input_channels": self.input_channels,
            "blocks": [
                {"conv_filters": f, "conv_kernel": 3, "conv_stride": 1, "pool": 2, "convs": c}
                for f, c in zip(self.blocks, self.convs_per_block)
            ],
            "fc_widths": list(self.fc_widths),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArchSpec":
        obj = dict(obj)
        blocks = obj.pop("blocks")
        filters, convs = [], []
        for b in blocks:
            if isinstance(b, int):
                filters.append(b)
                convs.append(1)
                continue
            if b.get("conv_kernel", 3) != 3 or b.get("conv_stride", 1) != 1 or b.get("pool", 2) != 2:
                raise ValueError("only 3x3 stride-1 convolutions with 2x2 pooling are supported")
            filters.append(b["conv_filters"])
            convs.append(b.get("convs", 1))
        num_classes = obj.pop("num_classes", None)
        fc = tuple(obj.pop("fc_widths"))
        if num_classes is not None and (not fc or fc[-1] != num_classes):
            raise ValueError(f"final fc width {fc[-1] if fc else None} must equal num_classes {num_classes}")
        arch = cls(
            input_size=tuple(obj.pop("input_size")),
            input_channels=obj.pop("input_channels", 1),
            blocks=tuple(filters),
            fc_widths=fc,
            convs_per_block=tuple(convs),
        )
        if obj:
            raise ValueError(f"unknown arch field(s) {sorted(obj)}")
        return arch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    # standardize inputs with the train-split mean/std (stored in the model)
    standardize: bool = True
    # keep the parameters of the epoch with the best validation accuracy
    keep_best: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_json(self) -> dict:
        return {
            "optimizer": {"name": "rmsprop", "learning_rate": self.learning_rate, "rho": self.rho, "eps": self.eps},
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "shuffle": self.shuffle,
            "standardize": self.standardize,
            "keep_best": self.keep_best,
        }

    @classmethod
    def from_json(cls, obj: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse a config object; fields it omits come from ``base`` (or the defaults)."""
        obj = dict(obj)
        opt = dict(obj.pop("optimizer", {}))
        name = opt.pop("name", "rmsprop")
        if name != "rmsprop":
            raise ValueError(f"unsupported optimizer {name!r}")
        kwargs = {k: opt.pop(k) for k in ("learning_rate", "rho", "eps") if k in opt}
        if opt:
            raise ValueError(f"unknown optimizer field(s) {sorted(opt)}")
        for k in ("learning_rate", "rho", "eps", "epochs", "batch_size", "seed", "shuffle", "standardize", "keep_best"):
            if k in obj:
                kwargs[k] = obj.pop(k)
        if obj:
            raise ValueError(f"unknown train config field(s) {sorted(obj)}")
        return replace(base, **kwargs) if base is not None else cls(**kwargs)


@dataclass
class TrainedModel:
    arch: ArchSpec
    params: dict  # name -> array, in declaration order
    history: list = field(default_factory=list)
    input_mean: float = 0.0
    input_std: float = 1.0


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray
    n: int
    predictions: np.ndarray | None = None


# --------------------------------------------------------------------------
# parameters


def param_shapes(arch: ArchSpec) -> list:
    shapes = []
    c = arch.input_channels
    for bi, (f, nconv) in enumerate(zip(arch.blocks, arch.convs_per_block)):
        for ci in range(nconv):
            name = f"conv{bi + 1}_{ci + 1}"
            shapes.append((name + ".W", (3, 3, c, f)))
            shapes.append((name + ".b", (f,)))
            c = f
    h, w = arch.feature_size
    fan = h * w * c
    for li, width in enumerate(arch.fc_widths):
        shapes.append((f"fc{li + 1}.W", (fan, width)))
        shapes.append((f"fc{li + 1}.b", (width,)))
        fan = width
    return shapes


def init_params(arch: ArchSpec, seed: int = 0, dtype=np.float32, head_scale: float = HEAD_SCALE) -> dict:
    """He initialization: weights ~ N(0, 2 / fan_in), biases zero.

    The output layer is additionally multiplied by ``head_scale`` so the
    initial logits are near zero and the initial loss is close to ln(C).
    """
    rng = np.random.default_rng(seed)
    params = {}
    head = f"fc{len(arch.fc_widths)}.W"
    for name, shape in param_shapes(arch):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name == head:
                w *= head_scale
            params[name] = w.astype(dtype)
    return params


def new_model(arch: ArchSpec, seed: int = 0, dtype=np.float32) -> TrainedModel:
    return TrainedModel(arch, init_params(arch, seed, dtype), [])


# --------------------------------------------------------------------------
# layers


def _im2col(x):
    """(n, h, w, c) -> (n*h*w, 9c) patches of the zero-padded input, ordered (ky, kx, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1)
    return cols.reshape(n * h * w, 9 * c)


def _conv_forward(x, W, b):
    n, h, w, c = x.shape
    cols = _im2col(x)
    out = cols @ W.reshape(9 * c, -1) + b
    return out.reshape(n, h, w, -1), cols


def _conv_backward(dout, cols, x_shape, W, need_dx=True):
    n, h, w, c = x_shape
    f = W.shape[-1]
    d2 = dout.reshape(-1, f)
    dW = (cols.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d2 @ W.reshape(9 * c, f).T).reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dW, db


def _pool_forward(x, with_idx: bool = True):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    # the four corners of every 2x2 window, in row-major order
    q = [x[:, di:2 * h2:2, dj:2 * w2:2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    if not with_idx:
        return out, None
    # index of the first corner attaining the max, so ties go to the top-left
    u8 = np.uint8
    idx = np.where(q[0] == out, u8(0), np.where(q[1] == out, u8(1), np.where(q[2] == out, u8(2), u8(3))))
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    d = np.zeros((n, h, w, c), dtype=dout.dtype)
    for k in range(4):
        di, dj = divmod(k, 2)
        d[:, di:2 * h2:2, dj:2 * w2:2, :] = np.where(idx == k, dout, 0)
    return d


def _check_input(arch: ArchSpec, x):
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:3] != arch.input_size or x.shape[3] != arch.input_channels:
        raise ShapeError(
            f"layer conv1_1: expected input batch of shape (N, {arch.input_size[0]}, "
            f"{arch.input_size[1]}, {arch.input_channels}), got {tuple(x.shape)}"
        )
    return x


def _forward(model: TrainedModel, x, keep_cache: bool):
    arch, p = model.arch, model.params
    x = _check_input(arch, np.asarray(x))
    dtype = p["fc1.W"].dtype
    a = x.astype(dtype, copy=False)
    if model.input_mean != 0.0 or model.input_std != 1.0:
        a = (a - dtype.type(model.input_mean)) / dtype.type(model.input_std)
    cache = []
    for bi, nconv in enumerate(arch.convs_per_block):
        for ci in range(nconv):
            name = f"conv{bi + 1}_{ci + 1}"
            z, cols = _conv_forward(a, p[name + ".W"], p[name + ".b"])
            out = np.maximum(z, 0)
            if keep_cache:
                cache.append(("conv", name, a.shape, cols, z > 0))
            a = out
        pool_in = a.shape
        a, idx = _pool_forward(a, keep_cache)
        if keep_cache:
            cache.append(("pool", None, pool_in, idx, None))
    flat_shape = a.shape
    a = a.reshape(a.shape[0], -1)
    nfc = len(arch.fc_widths)
    for li in range(nfc):
        name = f"fc{li + 1}"
        z = a @ p[name + ".W"] + p[name + ".b"]
        if li < nfc - 1:
            if keep_cache:
                cache.append(("fc", name, a, None, z > 0))
            a = np.maximum(z, 0)
        else:
            if keep_cache:
                cache.append(("fc", name, a, None, None))
            a = z
    return a, cache, flat_shape


def forward(model: TrainedModel, batch) -> np.ndarray:
    """Raw logits, shape (N, num_classes)."""
    logits, _, _ = _forward(model, batch, keep_cache=False)
    return logits


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(model: TrainedModel, batch, labels, context: str = ""):
    """Mean softmax cross-entropy and its exact gradient for every parameter."""
    loss, grads, _ = _loss_grads_probs(model, batch, labels, context)
    return loss, grads


def _loss_grads_probs(model: TrainedModel, batch, labels, context: str = ""):
    labels = np.asarray(labels, dtype=np.int64)
    nc = model.arch.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= nc):
        raise ValueError(f"labels must lie in [0, {nc}), got range [{labels.min()}, {labels.max()}]")
    # overflow shows up as a non-finite loss, reported below with its context
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logits, cache, flat_shape = _forward(model, batch, keep_cache=True)
        n = logits.shape[0]
        probs = softmax(logits)
        picked = probs[np.arange(n), labels]
        loss = float(-np.log(picked).sum(dtype=np.float64) / n)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss{(' at ' + context) if context else ''}")
    dtype = model.params["fc1.W"].dtype
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d = (d / n).astype(dtype)
    grads = {}
    p = model.params
    first_conv = "conv1_1"
    for kind, name, saved, aux, mask in reversed(cache):
        if kind == "fc":
            grads[name + ".W"] = saved.T @ d
            grads[name + ".b"] = d.sum(axis=0, dtype=np.float64).astype(dtype)
            d = d @ p[name + ".W"].T
            if name == "fc1":
                d = d.reshape(flat_shape)
            prev_mask = _prev_fc_mask(cache, name)
            if prev_mask is not None:
                d = d * prev_mask
        elif kind == "pool":
            d = _pool_backward(d, aux, saved)
        else:
            d = d * mask
            dx, dW, db = _conv_backward(d, aux, saved, p[name + ".W"], need_dx=name != first_conv)
            grads[name + ".W"] = dW
            grads[name + ".b"] = db
            d = dx
    ordered = {k: grads[k] for k in p}
    return loss, ordered, probs


def _prev_fc_mask(cache, name):
    li = int(name[2:])
    if li == 1:
        return None
    for kind, nm, _, _, mask in cache:
        if kind == "fc" and nm == f"fc{li - 1}":
            return mask
    return None


# --------------------------------------------------------------------------
# optimizer


def rmsprop_init(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def rmsprop_step(params: dict, grads: dict, state: dict, cfg: TrainConfig):
    """s <- rho*s + (1-rho)*g^2 ; theta <- theta - lr*g/(sqrt(s)+eps). Returns new dicts."""
    new_params, new_state = {}, {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {theta.shape}")
        # divergence surfaces as non-finite loss in the training loop
        with np.errstate(over="ignore", invalid="ignore"):
            s = cfg.rho * state[k] + (1.0 - cfg.rho) * g * g
            new_state[k] = s.astype(theta.dtype, copy=False)
            new_params[k] = (theta - cfg.learning_rate * g / (np.sqrt(s) + cfg.eps)).astype(theta.dtype, copy=False)
    return new_params, new_state


# --------------------------------------------------------------------------
# training and evaluation


def predict_proba(model: TrainedModel, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., None]
    out = [softmax(forward(model, x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.num_classes))


def predict(model: TrainedModel, x, batch_size: int = 256) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class id
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., None]
    out = [forward(model, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def metrics_from_predictions(pred, labels, num_classes: int) -> Metrics:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    n = int(labels.size)
    acc = float(np.trace(confusion) / n) if n else 0.0
    return Metrics(acc, confusion, n, pred)


def evaluate(model: TrainedModel, ds: LabeledDataset, split: str = "test") -> Metrics:
    x, y = ds.arrays(split)
    return metrics_from_predictions(predict(model, x), y, model.arch.num_classes)


def train(ds: LabeledDataset, arch: ArchSpec, cfg: TrainConfig, log=None) -> TrainedModel:
    """Train from scratch. Fully deterministic given (ds, arch, cfg)."""
    if ds.num_classes != arch.num_classes:
        raise DatasetError(f"dataset has {ds.num_classes} classes but arch outputs {arch.num_classes}")
    x, y = ds.arrays("train")
    missing = sorted(set(range(ds.num_classes)) - set(y.tolist()))
    if missing:
        raise DatasetError(f"class(es) {[ds.class_names[m] for m in missing]} absent from train split")
    xv, yv = ds.arrays("val")
    return train_arrays(x, y, xv, yv, arch, cfg, log=log)


def train_arrays(x, y, xv, yv, arch: ArchSpec, cfg: TrainConfig, log=None) -> TrainedModel:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[..., None]
    y = np.asarray(y, dtype=np.int64)
    model = new_model(arch, cfg.seed)
    if cfg.standardize:
        sd = float(x.std())
        model.input_mean = float(x.mean())
        model.input_std = sd if sd > 0 else 1.0
    state = rmsprop_init(model.params)
    best_acc, best_params = -1.0, None
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total_loss = 0.0
        correct = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads, probs = _loss_grads_probs(model, x[idx], y[idx], context=f"epoch {epoch + 1}, batch {bi + 1}")
            total_loss += loss * len(idx)
            # running accuracy: predictions made before each batch's update
            correct += int((np.argmax(probs, axis=1) == y[idx]).sum())
            model.params, state = rmsprop_step(model.params, grads, state, cfg)
        val_acc = float((predict(model, xv) == np.asarray(yv)).mean()) if len(xv) else float("nan")
        rec = {
            "epoch": epoch + 1,
            "train_loss": total_loss / n,
            "train_acc": correct / n,
            "val_acc": val_acc,
        }
        model.history.append(rec)
        if log is not None:
            log(rec)
        if cfg.keep_best and len(xv) and val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.copy() for k, v in model.params.items()}
    if best_params is not None:
        model.params = best_params
    return model


# --------------------------------------------------------------------------
# ensembles


def prepare_image(img: ImageTensor, spec, arch: ArchSpec, path: str | None = None) -> np.ndarray:
    """Grayscale, apply ``spec``, resize to the network input; returns H x W x 1."""
    from .transforms import apply_transform

    out = apply_transform(to_grayscale(img), spec, path)
    out = resize(to_grayscale(out), *arch.input_size)
    return out.data.astype(np.float32)


def ensemble_proba(models, specs, img: ImageTensor, path: str | None = None) -> np.ndarray:
    if len(models) != len(specs):
        raise ValueError(f"got {len(models)} models but {len(specs)} transform specs")
    if not models:
        raise ValueError("ensemble needs at least one model")
    probs = [predict_proba(m, prepare_image(img, s, m.arch, path)[None])[0] for m, s in zip(models, specs)]
    return average_probabilities(probs)


def average_probabilities(probs) -> np.ndarray:
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probs]), axis=0)


def ensemble_predict(models, specs, img: ImageTensor, path: str | None = None) -> int:
    """Average member softmax outputs and take the argmax (ties to the lower id)."""
    return int(np.argmax(ensemble_proba(models, specs, img, path)))


# --------------------------------------------------------------------------
# persistence


def save_model(model: TrainedModel, path) -> None:
    """Write the BLNS checkpoint: magic, version, arch JSON, float32 arrays."""
    header = dict(model.arch.to_json(), input_norm=[model.input_mean, model.input_std])
    arch_json = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch_json)))
    buf.write(arch_json)
    for name, shape in param_shapes(model.arch):
        arr = np.asarray(model.params[name])
        if arr.shape != shape:
            raise ShapeError(f"{name}: shape {arr.shape} does not match arch {shape}")
        buf.write(arr.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a BLNS checkpoint")
    version, alen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + alen].decode("utf-8"))
    mean, std = header.pop("input_norm", (0.0, 1.0))
    arch = ArchSpec.from_json(header)
    offset = 12 + alen
    params = {}
    for name, shape in param_shapes(arch):
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        params[name] = arr.astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return TrainedModel(arch, params, [], float(mean), float(std))


def history_csv(history) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
    for rec in history:
        writer.writerow([rec["epoch"], repr(float(rec["train_loss"])), repr(float(rec["train_acc"])), repr(float(rec["val_acc"]))])
    return out.getvalue()
