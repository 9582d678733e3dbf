"""Network specs, parameter containers, forward/backward passes and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L

CHECKPOINT_MAGIC = b"CPCK1"

LAYER_KINDS = {
    "conv2d": L.Conv2D,
    "maxpool2x2": L.MaxPool2x2,
    "dense": L.Dense,
    "relu": L.ReLU,
    "softmax": L.Softmax,
    "dropout": L.Dropout,
    "flatten": L.Flatten,
    "lstm": L.LSTM,
    "residual_block": L.ResidualBlock,
    "batchnorm": L.BatchNorm,
    "global_avg_pool": L.GlobalAvgPool,
    "to_sequence": L.ToSequence,
}
_WEIGHTED = {"conv2d", "dense", "lstm", "residual_block", "batchnorm"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.options}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


def layer(kind: str, **options) -> LayerSpec:
    return LayerSpec(kind, options)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("network must end in a softmax layer")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "layers": [ls.to_dict() for ls in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(LayerSpec.from_dict(x) for x in d["layers"]), tuple(d["input_shape"]),
                   int(d["classes"]), d.get("name", ""))

    def kinds(self) -> list[str]:
        return [ls.kind for ls in self.layers]

    def dense_units(self) -> list[int]:
        return [ls.options["units"] for ls in self.layers if ls.kind == "dense"]


def _build_layer(spec: LayerSpec, in_shape, rng, dropout_rng, dtype, next_kind=None):
    o = spec.options
    k = spec.kind
    if k == "conv2d":
        return L.Conv2D(in_shape, o["filters"], o["kernel"], o.get("stride", 1), o.get("padding", 0),
                        rng, dtype)
    if k == "dense":
        return L.Dense(in_shape, o["units"], rng, dtype, relu_follows=next_kind == "relu")
    if k == "lstm":
        return L.LSTM(in_shape, o["units"], o.get("return_sequences", False), rng, dtype)
    if k == "residual_block":
        return L.ResidualBlock(in_shape, o["filters"], o.get("stride", 1), rng, dtype)
    if k == "batchnorm":
        return L.BatchNorm(in_shape, dtype)
    if k == "dropout":
        return L.Dropout(in_shape, o["rate"], dropout_rng)
    return LAYER_KINDS[k](in_shape)


class Network:
    """A NetworkSpec with live parameters.

    Parameters are addressed as ``"<layer index>.<kind>.<name>"`` in spec
    order; that order is also the checkpoint layout.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        init_rng = np.random.default_rng([self.seed, 0])
        self.dropout_rng = np.random.default_rng([self.seed, 1])
        self.layers: list[L.Layer] = []
        shape = spec.input_shape
        for i, ls in enumerate(spec.layers):
            if ls.kind == "softmax" and i != len(spec.layers) - 1:
                raise L.ShapeError(f"layer {i}: softmax must be the final layer")
            try:
                nxt = spec.layers[i + 1].kind if i + 1 < len(spec.layers) else None
                lay = _build_layer(ls, shape, init_rng, self.dropout_rng, self.dtype, nxt)
            except (L.ShapeError, KeyError) as exc:
                raise L.ShapeError(f"layer {i} ({ls.kind}): {exc}") from None
            self.layers.append(lay)
            shape = lay.out_shape
        if shape != (spec.classes,):
            raise L.ShapeError(f"network output shape {shape} != ({spec.classes},)")
        self._probs = None

    def prefix(self, i: int) -> str:
        return f"{i}.{self.spec.layers[i].kind}"

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lay in enumerate(self.layers):
            for name, arr in lay.params.items():
                out[f"{self.prefix(i)}.{name}"] = arr
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lay in enumerate(self.layers):
            for name, arr in lay.state.items():
                out[f"{self.prefix(i)}.{name}"] = arr
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lay in enumerate(self.layers):
            for name in lay.params:
                out[f"{self.prefix(i)}.{name}"] = lay.grads[name]
        return out

    def set_parameters(self, params: dict[str, np.ndarray], buffers: dict | None = None, strict=True):
        for i, lay in enumerate(self.layers):
            p = self.prefix(i)
            for name in lay.params:
                key = f"{p}.{name}"
                if key in params:
                    arr = np.asarray(params[key])
                    if arr.shape != lay.params[name].shape:
                        raise L.ShapeError(f"{key}: shape {arr.shape} != {lay.params[name].shape}")
                    lay.params[name] = arr.astype(self.dtype, copy=True)
                elif strict:
                    raise KeyError(f"missing parameter {key}")
            for name in lay.state:
                key = f"{p}.{name}"
                if buffers and key in buffers:
                    lay.state[name] = np.asarray(buffers[key]).astype(self.dtype, copy=True)

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def forward(self, x, training: bool = False, dropout: bool | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.spec.input_shape:
            raise L.ShapeError(
                f"layer 0 ({self.spec.layers[0].kind}): input shape {x.shape[1:]} "
                f"!= {self.spec.input_shape}"
            )
        use_dropout = training if dropout is None else dropout
        for lay in self.layers:
            x = lay.forward(x, training, use_dropout)
        self._probs = x
        return x

    def logits_backward(self, dlogits):
        for lay in self.layers:
            lay.zero_grads()
        d = dlogits
        for lay in reversed(self.layers[:-1]):
            d = lay.backward(d)
        return self.gradients()

    def backward(self, labels) -> dict[str, np.ndarray]:
        """Gradients of the mean cross-entropy of the last forward pass."""
        if self._probs is None:
            raise RuntimeError("backward called before forward")
        labels = np.asarray(labels, dtype=np.int64)
        p = self._probs
        d = p.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return self.logits_backward(d / len(labels))

    def loss(self, probs, labels) -> float:
        labels = np.asarray(labels, dtype=np.int64)
        picked = np.asarray(probs, dtype=np.float64)[np.arange(len(labels)), labels]
        return float(-np.mean(np.log(np.maximum(picked, 1e-300))))

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(x[i: i + batch_size], training=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.classes))

    def checkpoint(self, metadata: dict | None = None) -> "Checkpoint":
        return Checkpoint(
            self.spec,
            {k: v.astype(np.float64, copy=True) for k, v in self.parameters().items()},
            {k: v.astype(np.float64, copy=True) for k, v in self.buffers().items()},
            self.seed,
            dict(metadata or {}),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", dtype=np.float64) -> "Network":
        net = cls(ckpt.spec, ckpt.seed, dtype)
        net.set_parameters(ckpt.params, ckpt.buffers)
        return net


def forward(net: Network, batch, training: bool = False) -> np.ndarray:
    return net.forward(batch, training)


def backward(net: Network, batch, labels, training: bool = True, dropout: bool = True):
    net.forward(batch, training, dropout)
    return net.backward(labels)


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "metadata": self.metadata,
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
            "buffers": [[k, list(v.shape)] for k, v in self.buffers.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(head)), head]
        for arr in list(self.params.values()) + list(self.buffers.values()):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a checkpoint (bad magic)")
        off = len(CHECKPOINT_MAGIC)
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        head = json.loads(blob[off: off + n].decode("utf-8"))
        off += n

        def take(entries):
            nonlocal off
            out = {}
            for key, shape in entries:
                count = int(np.prod(shape)) if shape else 1
                out[key] = np.frombuffer(blob, "<f8", count, off).reshape(shape).astype(np.float64)
                off += 8 * count
            return out

        params = take(head["params"])
        buffers = take(head["buffers"])
        if off != len(blob):
            raise ValueError("checkpoint has trailing bytes")
        return cls(NetworkSpec.from_dict(head["spec"]), params, buffers, head["seed"], head["metadata"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def checksum(arrays: dict[str, np.ndarray], keys=None) -> str:
    h = hashlib.sha256()
    for k in (keys if keys is not None else arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    return h.hexdigest()
