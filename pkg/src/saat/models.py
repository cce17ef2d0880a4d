"""Small CNN architectures, training, checkpoints and feature taps.

Three topologies ship with the package so that white-box / black-box pairs
differ in structure, not only in weights:

* ``vgg``  - plain conv-bn-relu stacks with max pooling (4 taps)
* ``res``  - residual blocks with strided projections (5 taps)
* ``inc``  - inception-style blocks concatenating 1x1 and 3x3 branches (6 taps)

Taps are numbered from the input side: tap 0 is the shallowest.
"""

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import (
    BatchNormState,
    batchnorm2d,
    concat,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
    softmax_cross_entropy,
)
from .tensor import NonFiniteError, Tape, Tensor

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SAATCKPT"
CKPT_VERSION = 1

BLOCK_KINDS = ("conv", "pool", "res", "incep", "gap", "linear")


@dataclass(frozen=True)
class Block:
    kind: str
    out: int = 0
    stride: int = 1
    # inception: channels of the 1x1 branch; the 3x3 branch gets out - branch1
    branch1: int = 0


@dataclass(frozen=True)
class Architecture:
    name: str
    blocks: Tuple[Block, ...]
    tap_points: Tuple[int, ...]

    def validate(self) -> None:
        for b in self.blocks:
            if b.kind not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {b.kind!r} in architecture {self.name!r}")
        taps = list(self.tap_points)
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap points must be strictly increasing, got {taps}")
        if taps and (taps[0] < 0 or taps[-1] >= len(self.blocks)):
            raise ValueError(f"tap points {taps} out of range for {len(self.blocks)} blocks")
        if not self.blocks or self.blocks[-1].kind != "linear":
            raise ValueError("architecture must end with a linear classifier block")

    @property
    def num_taps(self) -> int:
        return len(self.tap_points)


ARCHITECTURES: Dict[str, Architecture] = {
    "vgg": Architecture(
        "vgg",
        (
            Block("conv", 16), Block("pool"),
            Block("conv", 32), Block("conv", 32), Block("pool"),
            Block("conv", 64), Block("pool"),
            Block("conv", 64), Block("gap"), Block("linear"),
        ),
        tap_points=(2, 3, 5, 7),
    ),
    "res": Architecture(
        "res",
        (
            Block("conv", 16), Block("pool"),
            Block("res", 16), Block("res", 32, stride=2), Block("res", 32),
            Block("res", 64, stride=2), Block("res", 64),
            Block("gap"), Block("linear"),
        ),
        tap_points=(2, 3, 4, 5, 6),
    ),
    "inc": Architecture(
        "inc",
        (
            Block("conv", 16), Block("pool"),
            Block("incep", 24, branch1=8), Block("incep", 32, branch1=8), Block("pool"),
            Block("incep", 48, branch1=16), Block("incep", 48, branch1=16), Block("pool"),
            Block("incep", 64, branch1=16), Block("incep", 64, branch1=16),
            Block("gap"), Block("linear"),
        ),
        tap_points=(2, 3, 5, 6, 8, 9),
    ),
}


def get_architecture(name: str) -> Architecture:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None


@dataclass
class FeatureMap:
    """Activations at one tap as a (batch, channels, positions) array.

    ``values`` may be a Tensor (differentiable w.r.t. the image) or an array.
    """

    values: Tensor

    @property
    def channels(self) -> int:
        return self.values.shape[-2]

    @property
    def positions(self) -> int:
        return self.values.shape[-1]


class Model:
    """Parameters plus running batchnorm statistics for one architecture."""

    def __init__(self, arch: Architecture, num_classes: int, in_channels: int = 1, dtype=np.float32):
        arch.validate()
        self.arch = arch
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.params: Dict[str, np.ndarray] = {}
        self.bn: Dict[str, BatchNormState] = {}
        self.dtype = np.dtype(dtype)
        self.meta: dict = {}

    @property
    def name(self) -> str:
        return self.arch.name

    @property
    def num_taps(self) -> int:
        return self.arch.num_taps

    def astype(self, dtype) -> "Model":
        m = Model(self.arch, self.num_classes, self.in_channels, dtype)
        m.params = {k: v.astype(dtype) for k, v in self.params.items()}
        for k, st in self.bn.items():
            s2 = BatchNormState(len(st.running_mean), st.momentum, st.eps, dtype)
            s2.running_mean[...] = st.running_mean
            s2.running_var[...] = st.running_var
            m.bn[k] = s2
        m.meta = dict(self.meta)
        return m

    # parameter creation -------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.in_channels
        for i, b in enumerate(self.arch.blocks):
            p = f"b{i}"
            if b.kind == "conv":
                self._conv_bn(p, c, b.out, 3, rng)
                c = b.out
            elif b.kind == "res":
                self._conv_bn(p + ".c1", c, b.out, 3, rng)
                self._conv_bn(p + ".c2", b.out, b.out, 3, rng)
                if b.stride != 1 or c != b.out:
                    self._conv_bn(p + ".proj", c, b.out, 1, rng)
                c = b.out
            elif b.kind == "incep":
                b3 = b.out - b.branch1
                self._conv_bn(p + ".a", c, b.branch1, 1, rng)
                self._conv_bn(p + ".r", c, b3 // 2, 1, rng)
                self._conv_bn(p + ".b", b3 // 2, b3, 3, rng)
                c = b.out
            elif b.kind == "linear":
                bound = np.sqrt(6.0 / c)
                self.params[p + ".w"] = rng.uniform(-bound, bound, (self.num_classes, c)).astype(self.dtype)
                self.params[p + ".b"] = np.zeros(self.num_classes, dtype=self.dtype)

    def _conv_bn(self, p: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        self.params[p + ".w"] = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(self.dtype)
        self.params[p + ".g"] = np.ones(cout, dtype=self.dtype)
        self.params[p + ".beta"] = np.zeros(cout, dtype=self.dtype)
        self.bn[p] = BatchNormState(cout, dtype=self.dtype)

    # forward -------------------------------------------------------------
    def _cbr(self, P, p, x, training, stride=1, act=True):
        w = P[p + ".w"]
        k = w.shape[-1]
        y = conv2d(x, w, None, stride=stride, pad=k // 2)
        y = batchnorm2d(y, P[p + ".g"], P[p + ".beta"], self.bn[p], training)
        return relu(y) if act else y

    def _block(self, P, i, b, x, training):
        p = f"b{i}"
        if b.kind == "conv":
            return self._cbr(P, p, x, training)
        if b.kind == "pool":
            return maxpool2d(x, 2)
        if b.kind == "res":
            h = self._cbr(P, p + ".c1", x, training, stride=b.stride)
            h = self._cbr(P, p + ".c2", h, training, act=False)
            skip = self._cbr(P, p + ".proj", x, training, stride=b.stride, act=False) if p + ".proj.w" in P else x
            return relu(h + skip)
        if b.kind == "incep":
            a = self._cbr(P, p + ".a", x, training)
            r = self._cbr(P, p + ".r", x, training)
            return concat([a, self._cbr(P, p + ".b", r, training)], axis=1)
        if b.kind == "gap":
            return global_avg_pool(x)
        if b.kind == "linear":
            return linear(x, P[p + ".w"], P[p + ".b"])
        raise ValueError(f"unknown block kind {b.kind!r}")

    def forward(self, x: Tensor, training: bool = False, stop_block: Optional[int] = None,
                params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        P = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        h = x
        for i, b in enumerate(self.arch.blocks):
            h = self._block(P, i, b, h, training)
            if stop_block is not None and i == stop_block:
                break
        return h

    def tap_block(self, tap: int) -> int:
        if not 0 <= tap < self.num_taps:
            raise IndexError(f"tap {tap} out of range for {self.name} with {self.num_taps} taps")
        return self.arch.tap_points[tap]

    def feature_shape(self, tap: int, image_shape: Sequence[int]) -> Tuple[int, ...]:
        x = Tensor(np.zeros((1, *image_shape), dtype=self.dtype))
        return self.forward(x, stop_block=self.tap_block(tap)).shape[1:]


def build(arch, num_classes: int = 10, seed: int = 0, in_channels: int = 1, dtype=np.float32) -> Model:
    """Create a model with Kaiming-uniform weights drawn from ``seed``."""
    if isinstance(arch, str):
        arch = get_architecture(arch)
    model = Model(arch, num_classes, in_channels, dtype)
    model._init_params(np.random.default_rng(seed))
    return model


def _as_input(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=dtype))


def forward_to_tap(model: Model, image, tap: int) -> FeatureMap:
    """Features at ``tap`` reshaped to (batch, channels, height*width).

    A single image of shape (C, H, W) is treated as a batch of one. The
    result is differentiable w.r.t. ``image`` when it is a Tensor recorded on
    an active tape.
    """
    block = model.tap_block(tap)
    x = _as_input(image, model.dtype)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    h = model.forward(x, stop_block=block)
    n, c, hh, ww = h.shape
    return FeatureMap(h.reshape(n, c, hh * ww))


def predict(model: Model, images, batch: int = 500) -> np.ndarray:
    """Logits for a batch of images (inference-mode batchnorm)."""
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    outs = [model.forward(Tensor(x[i:i + batch])).data for i in range(0, len(x), batch)]
    return np.concatenate(outs, axis=0)


def rank_of_label(logits, k: int) -> int:
    """Label whose logit is the k-th largest (k=1 is the top prediction).

    Equal logits are ordered by ascending label index.
    """
    logits = np.asarray(logits).reshape(-1)
    if not 1 <= k <= logits.size:
        raise ValueError(f"rank {k} outside 1..{logits.size}")
    order = np.lexsort((np.arange(logits.size), -logits))
    return int(order[k - 1])


def rank_labels(logits: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`rank_of_label` for a (batch, classes) array."""
    logits = np.asarray(logits)
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"rank {k} outside 1..{logits.shape[1]}")
    idx = np.broadcast_to(np.arange(logits.shape[1]), logits.shape)
    order = np.lexsort((idx, -logits), axis=1)
    return order[:, k - 1].astype(np.int64)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(model, images).argmax(axis=1) == labels))


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    epochs: int
    train_acc: List[float] = field(default_factory=list)
    val_acc: List[float] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    seconds: float = 0.0


def train(model: Model, images: np.ndarray, labels: np.ndarray, epochs: int = 10, lr: float = 0.05,
          batch: int = 128, seed: int = 0, val: Optional[Tuple[np.ndarray, np.ndarray]] = None,
          momentum: float = 0.9, weight_decay: float = 5e-4) -> TrainReport:
    """SGD with momentum and a cosine learning-rate schedule.

    Updates ``model`` in place and records per-epoch accuracies in
    ``model.meta``. Raises TrainingDiverged if the loss becomes non-finite.
    """
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    rng = np.random.default_rng(seed)
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    report = TrainReport(epochs=epochs)
    t0 = time.perf_counter()
    n = len(images)
    steps_per_epoch = max(1, -(-n // batch))
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, batch):
            idx = perm[s:s + batch]
            if len(idx) < 2:
                continue
            cur_lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
            step += 1
            P = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
            try:
                with Tape() as tape:
                    logits = model.forward(Tensor(images[idx]), training=True, params=P)
                    loss = softmax_cross_entropy(logits, labels[idx])
                tape.backward(loss)
            except NonFiniteError as e:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}: {e}") from None
            tape.clear()
            lval = loss.item()
            for k, t in P.items():
                g = t.grad + weight_decay * model.params[k]
                vel[k] = momentum * vel[k] + g
                model.params[k] = (model.params[k] - cur_lr * vel[k]).astype(model.dtype)
                if not np.all(np.isfinite(model.params[k])):
                    raise TrainingDiverged(f"parameter {k} became non-finite at epoch {epoch}")
            losses.append(lval)
        report.loss.append(float(np.mean(losses)) if losses else float("nan"))
        try:
            report.train_acc.append(accuracy(model, images, labels))
            if val is not None:
                report.val_acc.append(accuracy(model, *val))
        except NonFiniteError as e:
            raise TrainingDiverged(f"non-finite predictions after epoch {epoch}: {e}") from None
        logger.info("%s epoch %d loss %.4f train %.4f val %s", model.name, epoch + 1, report.loss[-1],
                    report.train_acc[-1], report.val_acc[-1] if report.val_acc else "-")
    report.seconds = time.perf_counter() - t0
    model.meta.update({
        "epochs": epochs,
        "train_acc": report.train_acc,
        "val_acc": report.val_acc,
        "seed": seed,
    })
    return report


# checkpoints -----------------------------------------------------------------

def _manifest(model: Model) -> Tuple[dict, List[np.ndarray]]:
    entries, arrays = [], []
    for k, v in model.params.items():
        entries.append({"name": k, "shape": list(v.shape)})
        arrays.append(v)
    for k, st in model.bn.items():
        for suffix, arr in (("running_mean", st.running_mean), ("running_var", st.running_var)):
            entries.append({"name": f"{k}.{suffix}", "shape": list(arr.shape)})
            arrays.append(arr)
    manifest = {
        "arch": model.arch.name,
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "tensors": entries,
        "meta": model.meta,
    }
    return manifest, arrays


def save_checkpoint(model: Model, path) -> None:
    """Write magic, u32 version, u32 manifest length, JSON manifest, then float32 LE tensors."""
    manifest, arrays = _manifest(model)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    model = Model(get_architecture(manifest["arch"]), manifest["num_classes"], manifest["in_channels"])
    model._init_params(np.random.default_rng(0))
    off = 16 + mlen
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        name = entry["name"]
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            layer, stat = name.rsplit(".", 1)
            getattr(model.bn[layer], stat)[...] = arr
        else:
            if name not in model.params or model.params[name].shape != shape:
                raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
            model.params[name] = arr
    model.meta = manifest.get("meta", {})
    return model
