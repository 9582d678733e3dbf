"""Classifier builders, the early-stopping training loop and transfer-learning head swap."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .audio import Label, PRETRAIN_LABELS
from .balance import SYNTHETIC_PATIENT, SmoteConfig, smote
from .evalcv.metrics import classify_event, f1_score
from .features import FeatureMatrix
from .nn import Adam, Checkpoint, Network, NetworkSpec, ShapeError, checksum, layer

log = logging.getLogger(__name__)

# hyperparameter ranges searched for the non-pretrained classifiers
CLASSIFIER_GRID = {
    "conv_filters": (24, 48, 96),
    "kernel_size": (2, 3),
    "dropout": (0.1, 0.3, 0.5),
    "dense_units": (16, 32),
    "lstm_units": (64, 128, 256),
    "learning_rate": (1e-2, 1e-3, 1e-4),
    "batch_size": (64, 128, 256),
}
GRID_FIELDS = {
    "cnn": ("conv_filters", "kernel_size", "dropout", "dense_units", "batch_size"),
    "lstm": ("dropout", "dense_units", "lstm_units", "learning_rate", "batch_size"),
    "resnet_mini": ("batch_size",),
    # fine-tuning a swapped checkpoint: the backbone fixes every architecture field
    "transfer": ("learning_rate", "batch_size"),
}
# step size for architectures whose learning rate is not searched; 1e-3 lets
# the wide flatten->dense layer overshoot (one Adam step moves every one of
# its thousands of inputs by about lr in a coherent direction)
FIXED_LEARNING_RATE = {"cnn": 1e-4, "resnet_mini": 1e-4}

PRETRAIN_CONV_FILTERS = (256, 128, 64)
PRETRAIN_LSTM_UNITS = (512, 256, 128)
PRETRAIN_DENSE_UNITS = (512, 128)
PRETRAIN_DROPOUT = 0.3
TRANSFER_HEAD_UNITS = 16

CLASS_ORDER = {
    2: (Label.TB, Label.COVID19),
    3: (Label.TB, Label.COVID19, Label.HEALTHY),
}
PRETRAIN_CLASSES = (Label.SNEEZE, Label.SPEECH, Label.NOISE)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    conv_filters: int = 24
    kernel_size: int = 2
    dropout: float = 0.3
    dense_units: int = 16
    lstm_units: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    def in_grid(self, architecture: str) -> bool:
        return all(getattr(self, f) in CLASSIFIER_GRID[f] for f in GRID_FIELDS[architecture])


def classifier_grid(architecture: str, **restrict) -> list[ClassifierConfig]:
    """Cartesian product of the grid fields an architecture uses.

    ``restrict`` narrows a field to a subset, e.g. ``conv_filters=(24,)``.
    """
    names = GRID_FIELDS[architecture]
    for key, values in restrict.items():
        if key not in CLASSIFIER_GRID:
            raise KeyError(f"unknown hyperparameter {key!r}")
        outside = set(values) - set(CLASSIFIER_GRID[key])
        if outside:
            raise ValueError(f"{key} values {sorted(outside)} outside the search range")
    axes = [tuple(restrict.get(n, CLASSIFIER_GRID[n])) for n in names]
    fixed = {"learning_rate": FIXED_LEARNING_RATE[architecture]} if architecture in FIXED_LEARNING_RATE else {}
    return [ClassifierConfig(**dict(zip(names, combo)), **fixed) for combo in itertools.product(*axes)]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    batch_size: int = 128
    learning_rate: float = 1e-3
    dtype: str = "float64"
    # parameters of layers with index below this stay fixed
    freeze_below: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid training config")

    @classmethod
    def from_classifier(cls, clf: ClassifierConfig, **kw) -> "TrainConfig":
        return cls(batch_size=clf.batch_size, learning_rate=clf.learning_rate, **kw)


def _as_input_shape(input_shape) -> tuple[int, int, int]:
    shape = tuple(int(v) for v in input_shape)
    return (1,) + shape if len(shape) == 2 else shape


def _check_classes(classes: int, allowed=(2, 3)):
    if classes not in allowed:
        raise ValueError(f"class count must be one of {allowed}, got {classes}")


def _validate(spec: NetworkSpec) -> NetworkSpec:
    infer_shapes(spec)
    return spec


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes, computed without allocating parameters."""
    shape = spec.input_shape
    shapes = []
    for i, ls in enumerate(spec.layers):
        o, k = ls.options, ls.kind
        bad = ShapeError(f"layer {i} ({k}): incompatible input shape {shape}")
        if k in ("conv2d", "residual_block"):
            if len(shape) != 3:
                raise bad
            kern = o["kernel"] if k == "conv2d" else 3
            pad = o.get("padding", 0) if k == "conv2d" else 1
            s = o.get("stride", 1)
            h = (shape[1] + 2 * pad - kern) // s + 1
            w = (shape[2] + 2 * pad - kern) // s + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i} ({k}): input {shape} too small")
            shape = (o["filters"], h, w)
        elif k == "maxpool2x2":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeError(f"layer {i} (maxpool2x2): input {shape} too small for pooling")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "global_avg_pool":
            if len(shape) != 3:
                raise bad
            shape = (shape[0],)
        elif k == "to_sequence":
            if len(shape) != 3 or shape[0] != 1:
                raise bad
            shape = (shape[2], shape[1])
        elif k == "lstm":
            if len(shape) != 2:
                raise bad
            shape = (shape[0], o["units"]) if o.get("return_sequences") else (o["units"],)
        elif k == "dense":
            if len(shape) != 1:
                raise bad
            shape = (o["units"],)
        elif k == "softmax" and len(shape) != 1:
            raise bad
        shapes.append(shape)
    if shape != (spec.classes,):
        raise ShapeError(f"network output {shape} != ({spec.classes},)")
    return shapes


def _head(units: Sequence[int], classes: int, dropout: float | None = None) -> list:
    out = []
    for u in units:
        out += [layer("dense", units=int(u)), layer("relu")]
        if dropout:
            out.append(layer("dropout", rate=float(dropout)))
    return out + [layer("dense", units=classes), layer("softmax")]


def build_cnn(cfg: ClassifierConfig | None, input_shape, classes: int, pretrain: bool = False,
              conv_filters: Sequence[int] = PRETRAIN_CONV_FILTERS,
              dense_units: Sequence[int] = PRETRAIN_DENSE_UNITS,
              kernel_size: int = 2, dropout: float = PRETRAIN_DROPOUT) -> NetworkSpec:
    """Single-conv grid CNN, or with ``pretrain=True`` the three-conv pre-training CNN.

    Pre-training layout: conv(256)-pool-conv(128)-pool-conv(64)-pool, flatten,
    dense(512)-dropout(0.3), dense(128), dense(3). Widths are overridable to
    run the same structure at toy scale.
    """
    shape = _as_input_shape(input_shape)
    if pretrain:
        _check_classes(classes, (3,))
        layers = []
        for f in conv_filters:
            # pooling before relu gives the same activations at a quarter of the relu cost
            layers += [layer("conv2d", filters=int(f), kernel=kernel_size), layer("maxpool2x2"),
                       layer("relu")]
        layers.append(layer("flatten"))
        first, *rest = dense_units
        layers += [layer("dense", units=int(first)), layer("relu"),
                   layer("dropout", rate=float(dropout))]
        layers += _head(rest, classes)
        return _validate(NetworkSpec(layers, shape, classes, "cnn-pretrain"))
    _check_classes(classes)
    cfg = cfg or ClassifierConfig()
    layers = [
        layer("conv2d", filters=cfg.conv_filters, kernel=cfg.kernel_size),
        layer("maxpool2x2"), layer("relu"), layer("flatten"), layer("dropout", rate=cfg.dropout),
        layer("dense", units=cfg.dense_units), layer("relu"),
        layer("dense", units=classes), layer("softmax"),
    ]
    return _validate(NetworkSpec(layers, shape, classes, "cnn"))


def build_lstm(cfg: ClassifierConfig | None, input_shape, classes: int, pretrain: bool = False,
               lstm_units: Sequence[int] = PRETRAIN_LSTM_UNITS,
               dense_units: Sequence[int] = PRETRAIN_DENSE_UNITS,
               dropout: float = PRETRAIN_DROPOUT) -> NetworkSpec:
    """Frames become a length-S sequence of (3M+2)-dim vectors."""
    shape = _as_input_shape(input_shape)
    layers = [layer("to_sequence")]
    if pretrain:
        _check_classes(classes, (3,))
        for j, u in enumerate(lstm_units):
            layers.append(layer("lstm", units=int(u), return_sequences=j < len(lstm_units) - 1))
        first, *rest = dense_units
        layers += [layer("dense", units=int(first)), layer("relu"),
                   layer("dropout", rate=float(dropout))]
        layers += _head(rest, classes)
        return _validate(NetworkSpec(layers, shape, classes, "lstm-pretrain"))
    _check_classes(classes)
    cfg = cfg or ClassifierConfig()
    layers += [
        layer("lstm", units=cfg.lstm_units), layer("dropout", rate=cfg.dropout),
        layer("dense", units=cfg.dense_units), layer("relu"),
        layer("dense", units=classes), layer("softmax"),
    ]
    return _validate(NetworkSpec(layers, shape, classes, "lstm"))


def build_resnet_mini(depth_blocks: int, input_shape, classes: int, base_filters: int = 8,
                      dense_units: int = 512) -> NetworkSpec:
    """Stem conv, ``depth_blocks`` residual blocks with doubling channels, global pool, dense head.

    Block 0 keeps the stem width (identity shortcut); each later block doubles
    the channels and halves the resolution through a projection shortcut.
    """
    if depth_blocks < 1:
        raise ValueError("depth_blocks must be >= 1")
    _check_classes(classes)
    shape = _as_input_shape(input_shape)
    layers = [layer("conv2d", filters=base_filters, kernel=3, padding=1), layer("batchnorm"),
              layer("relu"), layer("maxpool2x2")]
    for b in range(depth_blocks):
        layers.append(layer("residual_block", filters=base_filters * 2 ** b, stride=1 if b == 0 else 2))
    layers += [layer("global_avg_pool"), layer("dense", units=dense_units), layer("relu"),
               layer("dense", units=classes), layer("softmax")]
    return _validate(NetworkSpec(layers, shape, classes, "resnet_mini"))


def build(architecture: str, cfg: ClassifierConfig | None, input_shape, classes: int,
          **kw) -> NetworkSpec:
    if architecture == "cnn":
        return build_cnn(cfg, input_shape, classes, **kw)
    if architecture == "lstm":
        return build_lstm(cfg, input_shape, classes, **kw)
    if architecture == "resnet_mini":
        return build_resnet_mini(kw.pop("depth_blocks", 2), input_shape, classes, **kw)
    raise ValueError(f"unknown architecture {architecture!r}")


# ---------------------------------------------------------------- data helpers


@dataclass(frozen=True)
class Standardizer:
    """Per-feature-row mean/std fitted on training matrices."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, examples: Sequence[FeatureMatrix]) -> "Standardizer":
        stack = np.stack([fm.values for fm in examples])
        mean = stack.mean(axis=(0, 2))
        std = stack.std(axis=(0, 2))
        return cls(mean, np.where(std > 1e-8, std, 1.0))

    def apply(self, examples: Sequence[FeatureMatrix]) -> np.ndarray:
        stack = np.stack([fm.values for fm in examples])
        return ((stack - self.mean[None, :, None]) / self.std[None, :, None])[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def label_indices(examples: Sequence[FeatureMatrix], classes: Sequence[Label]) -> np.ndarray:
    index = {lab: i for i, lab in enumerate(classes)}
    try:
        return np.array([index[fm.label] for fm in examples], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not among classes {[c.value for c in classes]}") from None


def f1_for(predictions, truths, n_classes: int) -> float:
    """Selection metric: COVID-positive F1 for two classes, macro F1 otherwise."""
    if n_classes == 2:
        return f1_score(predictions, truths, "positive", positive=1)
    return f1_score(predictions, truths, "macro", n_classes=n_classes)


def predict_events(ckpt: Checkpoint, examples: Sequence[FeatureMatrix]) -> np.ndarray:
    """Class probabilities per event, shape ``(n_events, classes)``."""
    return Network.from_checkpoint(ckpt).predict_proba(_scaler_of(ckpt).apply(examples))


def _scaler_of(ckpt: Checkpoint) -> Standardizer:
    return Standardizer.from_dict(ckpt.metadata["standardizer"])


def patient_split(examples: Sequence[FeatureMatrix], fraction: float, seed: int):
    """Hold out ~``fraction`` of real patients per label; synthetic examples stay in training."""
    by_label: dict[Label, list[str]] = {}
    for fm in examples:
        if fm.patient_id == SYNTHETIC_PATIENT:
            continue
        pats = by_label.setdefault(fm.label, [])
        if fm.patient_id not in pats:
            pats.append(fm.patient_id)
    rng = np.random.default_rng([seed, 7])
    held: set[str] = set()
    for lab in sorted(by_label, key=lambda l: l.value):
        pats = sorted(set(by_label[lab]) - held)
        if len(pats) < 2:
            continue
        n = max(1, int(round(fraction * len(pats))))
        held.update(pats[j] for j in rng.permutation(len(pats))[:n])
    train = [fm for fm in examples if fm.patient_id not in held]
    val = [fm for fm in examples if fm.patient_id in held]
    return train, val


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def train(net: Network | NetworkSpec, train_examples: Sequence[FeatureMatrix], cfg: TrainConfig,
          classes: Sequence[Label], validation: Sequence[FeatureMatrix] | None = None,
          standardizer: Standardizer | None = None) -> TrainResult:
    """Minibatch Adam with early stopping on validation F1.

    Without explicit ``validation`` a patient-disjoint ``cfg.val_fraction`` of
    the training examples is held out. Training stops once the best
    validation F1 has not improved (strictly) for ``cfg.patience`` epochs;
    the returned checkpoint holds the best epoch's parameters. An epoch that
    only ties the best F1 replaces the snapshot when its validation loss is
    lower, without resetting the patience count.
    """
    classes = tuple(classes)
    if not train_examples:
        raise ValueError("no training examples")
    if isinstance(net, NetworkSpec):
        net = Network(net, cfg.seed, np.dtype(cfg.dtype))
    if net.spec.classes != len(classes):
        raise ValueError(f"network has {net.spec.classes} outputs for {len(classes)} classes")
    if validation is None:
        train_examples, validation = patient_split(train_examples, cfg.val_fraction, cfg.seed)
        if not validation:
            raise ValueError("could not hold out validation patients")
    scaler = standardizer or Standardizer.fit(train_examples)
    X = scaler.apply(train_examples).astype(net.dtype)
    y = label_indices(train_examples, classes)
    Xv = scaler.apply(validation).astype(net.dtype)
    yv = label_indices(validation, classes)

    frozen = {name for name in net.parameters() if int(name.split(".", 1)[0]) < cfg.freeze_below}
    opt = Adam(cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 3])
    n_classes = len(classes)

    def validate():
        probs = net.predict_proba(Xv)
        preds = [classify_event(p) for p in probs]
        return f1_for(preds, yv, n_classes), net.loss(probs, yv)

    best_f1, best_loss = -math.inf, math.inf
    best_epoch = 0
    best_params = {k: v.copy() for k, v in net.parameters().items()}
    best_buffers = {k: v.copy() for k, v in net.buffers().items()}
    history = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            probs = net.forward(X[idx], training=True)
            loss = net.loss(probs, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = net.backward(y[idx])
            params = {k: v for k, v in net.parameters().items() if k not in frozen}
            opt.step(params, grads)
            losses.append(loss * len(idx))
        f1, vloss = validate()
        history.append({"epoch": epoch, "loss": float(np.sum(losses) / len(X)), "val_f1": f1,
                        "val_loss": vloss})
        improved = f1 > best_f1
        # a tie with lower validation loss refreshes the snapshot but not the patience
        if improved or (f1 == best_f1 and vloss < best_loss):
            best_f1, best_loss, best_epoch = f1, vloss, epoch
            best_params = {k: v.copy() for k, v in net.parameters().items()}
            best_buffers = {k: v.copy() for k, v in net.buffers().items()}
        stale = 0 if improved else stale + 1
        if stale >= cfg.patience:
            break
    net.set_parameters(best_params, best_buffers)
    meta = {
        "classes": [c.value for c in classes],
        "standardizer": scaler.to_dict(),
        "feature_config": train_examples[0].config.to_dict(),
        "best_epoch": best_epoch,
        "best_val_f1": None if best_epoch == 0 else best_f1,
        "epochs_run": len(history),
    }
    return TrainResult(net.checkpoint(meta), history, best_epoch)


def pretrain(architecture: str | NetworkSpec, pretrain_examples: Sequence[FeatureMatrix],
             cfg: TrainConfig = TrainConfig(), smote_cfg: SmoteConfig | None = None,
             **build_kw) -> TrainResult:
    """Train a 3-class sneeze/speech/noise network for later head swapping."""
    bad = sorted({fm.label.value for fm in pretrain_examples} - {l.value for l in PRETRAIN_LABELS})
    if bad:
        raise ValueError(f"pre-training data must exclude coughs; found labels {bad}")
    if isinstance(architecture, NetworkSpec):
        spec = architecture
    else:
        shape = pretrain_examples[0].shape
        if architecture == "resnet_mini":
            spec = build_resnet_mini(build_kw.pop("depth_blocks", 2), shape, 3, **build_kw)
        else:
            spec = build(architecture, None, shape, 3, pretrain=True, **build_kw)
    if spec.classes != 3:
        raise ValueError("pre-training network needs a 3-wide output")
    train_part, val_part = patient_split(pretrain_examples, cfg.val_fraction, cfg.seed)
    if smote_cfg is not None:
        train_part = smote([fm.with_fold("train") for fm in train_part], smote_cfg)
    return train(spec, train_part, cfg, PRETRAIN_CLASSES, validation=val_part)


def head_swap(pretrained: Checkpoint, classes: int, seed: int = 0,
              hidden_units: int = TRANSFER_HEAD_UNITS, dtype="float64") -> Network:
    """Drop the last two dense layers and append dense(16)-relu-dense(classes)-softmax.

    Every retained parameter and buffer is copied bit-exact; only the new
    head is freshly initialised (seeded).
    """
    _check_classes(classes)
    spec = pretrained.spec
    if spec.classes != 3:
        raise ValueError("head_swap expects a 3-class pre-training checkpoint")
    dense_at = [i for i, ls in enumerate(spec.layers) if ls.kind == "dense"]
    if len(dense_at) < 2:
        raise ValueError("checkpoint architecture lacks a two-layer dense head")
    cut = dense_at[-2]
    new_layers = list(spec.layers[:cut]) + [
        layer("dense", units=hidden_units), layer("relu"),
        layer("dense", units=classes), layer("softmax"),
    ]
    new_spec = _validate(NetworkSpec(new_layers, spec.input_shape, classes,
                                     (spec.name.replace("-pretrain", "") or "net") + "+transfer"))
    net = Network(new_spec, seed, np.dtype(dtype))
    kept = backbone_keys(pretrained)
    net.set_parameters({k: pretrained.params[k] for k in kept},
                       {k: v for k, v in pretrained.buffers.items()
                        if int(k.split(".", 1)[0]) < cut},
                       strict=False)
    return net


def backbone_keys(ckpt: Checkpoint) -> list[str]:
    """Parameter names that survive a head swap (everything before the second-last dense)."""
    dense_at = [i for i, ls in enumerate(ckpt.spec.layers) if ls.kind == "dense"]
    cut = dense_at[-2]
    return [k for k in ckpt.params if int(k.split(".", 1)[0]) < cut]


def backbone_checksum(ckpt_or_net, keys: Sequence[str]) -> str:
    params = ckpt_or_net.params if isinstance(ckpt_or_net, Checkpoint) else ckpt_or_net.parameters()
    return checksum(params, keys)


def pretrained_standardizer(ckpt: Checkpoint) -> Standardizer | None:
    d = ckpt.metadata.get("standardizer")
    return Standardizer.from_dict(d) if d else None


def finetune(swapped: Network, cough_examples: Sequence[FeatureMatrix], cfg: TrainConfig,
             classes: Sequence[Label] | None = None, validation=None,
             standardizer: Standardizer | None = None) -> TrainResult:
    """Same contract as :func:`train`; all layers train unless ``cfg.freeze_below`` is set.

    Pass the pre-training standardizer so the backbone sees inputs on the
    scale it was trained on.
    """
    classes = classes or CLASS_ORDER[swapped.spec.classes]
    return train(swapped, cough_examples, cfg, classes, validation=validation,
                 standardizer=standardizer)
