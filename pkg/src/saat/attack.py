"""Momentum sign attack driven by feature-alignment or logit losses.

Each step takes the gradient of the loss w.r.t. the current adversarial
image, L1-normalises it per image, accumulates it into a momentum buffer and
moves every pixel by ``-alpha * sign(momentum)``; the result is projected back
onto the L-infinity ball around the clean image and onto [0, 1].
"""

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import statalign as sa
from .layers import softmax_cross_entropy
from .models import Model, forward_to_tap, predict, rank_labels
from .seeding import rng_for
from .tensor import NonFiniteError, Tape, Tensor

LOSSES = ("paa_l", "paa_p", "paa_g", "gaa", "euclid", "mifgsm")
FEATURE_LOSSES = LOSSES[:-1]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.07
    iters: int = 20
    alpha: Optional[float] = None  # None -> epsilon / iters
    decay: float = 1.0
    loss: str = "paa_p"
    kernel_c: float = 0.0
    kernel_d: int = 2
    tap: int = 0
    strategy: str = sa.POINT_WISE
    label_mode: str = "random"  # "random" or "rank:K"
    seed: int = 0
    norm: str = "l1"
    bandwidth: str = "recompute"  # gaussian bandwidth: "recompute" each step or "fixed" from the clean source
    batch_size: int = 100

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.strategy not in sa.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"unknown gradient norm {self.norm!r}")
        if self.bandwidth not in ("recompute", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth!r}")
        if self.kernel_c < 0:
            raise ValueError(f"kernel bias c must be >= 0, got {self.kernel_c}")
        parse_label_mode(self.label_mode)

    @property
    def step(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.epsilon / self.iters if self.iters else 0.0

    @property
    def kernel(self) -> Optional[sa.KernelSpec]:
        if self.loss == "paa_l":
            return sa.KernelSpec("linear")
        if self.loss == "paa_p":
            return sa.KernelSpec("polynomial", c=self.kernel_c, d=self.kernel_d)
        if self.loss == "paa_g":
            return sa.KernelSpec("gaussian")
        return None

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def parse_label_mode(mode: str) -> Tuple[str, int]:
    if mode == "random":
        return "random", 0
    if mode.startswith("rank:"):
        try:
            k = int(mode.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad label mode {mode!r}") from None
        if k < 1:
            raise ValueError(f"rank must be >= 1 in {mode!r}")
        return "rank", k
    raise ValueError(f"label mode must be 'random' or 'rank:K', got {mode!r}")


# gallery ------------------------------------------------------------------------

@dataclass
class Gallery:
    """K candidate target images per label, plus cached tap features."""

    images: np.ndarray  # (labels, K, C, H, W)
    source_index: np.ndarray  # (labels, K) indices into the originating dataset
    seed: int
    features: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.images.shape[1]

    @property
    def num_labels(self) -> int:
        return self.images.shape[0]

    def __len__(self) -> int:
        return self.images.shape[0] * self.images.shape[1]

    def tap_features(self, model: Model, tap: int) -> np.ndarray:
        key = (model.name, tap)
        if key not in self.features:
            flat = self.images.reshape(-1, *self.images.shape[2:])
            feats = _features(model, flat, tap)
            self.features[key] = feats.reshape(self.num_labels, self.k, *feats.shape[1:])
        return self.features[key]


class InsufficientImages(ValueError):
    pass


def _features(model: Model, images: np.ndarray, tap: int, batch: int = 250) -> np.ndarray:
    out = [forward_to_tap(model, images[i:i + batch], tap).values.data for i in range(0, len(images), batch)]
    return np.concatenate(out, axis=0)


def build_gallery(images: np.ndarray, labels: np.ndarray, model: Model, tap: Optional[int] = None,
                  k: int = 20, seed: int = 0, num_classes: Optional[int] = None) -> Gallery:
    """Sample K correctly classified images per label; features at ``tap`` are cached."""
    num_classes = num_classes or model.num_classes
    labels = np.asarray(labels)
    pred = predict(model, images).argmax(axis=1)
    rng = rng_for(seed, "gallery")
    short = []
    picks = []
    for lbl in range(num_classes):
        pool = np.flatnonzero((labels == lbl) & (pred == lbl))
        if len(pool) < k:
            short.append(f"{lbl} ({len(pool)} available)")
            continue
        picks.append(np.sort(rng.choice(pool, size=k, replace=False)))
    if short:
        raise InsufficientImages(f"fewer than {k} correctly classified images for labels: {', '.join(short)}")
    idx = np.stack(picks)
    gal = Gallery(np.asarray(images)[idx], idx, seed)
    if tap is not None:
        gal.tap_features(model, tap)
    return gal


# target selection -----------------------------------------------------------------

def select_target_labels(logits: np.ndarray, y: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Target label per image from the white-box logits on the clean input."""
    kind, k = parse_label_mode(mode)
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n_cls = logits.shape[1]
    if kind == "rank":
        if k == 1:
            raise ValueError("rank 1 is the predicted label of a correctly classified input, not a valid target")
        tgt = rank_labels(logits, k)
        if np.any(tgt == y):
            raise ValueError("rank-selected target equals the true label; input is not correctly classified")
        return tgt
    draw = rng.integers(0, n_cls - 1, size=len(y))
    return np.where(draw >= y, draw + 1, draw).astype(np.int64)


def select_target_label(logits, y: int, mode: str, rng: Optional[np.random.Generator] = None) -> int:
    rng = rng if rng is not None else np.random.default_rng(0)
    return int(select_target_labels(np.asarray(logits)[None], np.array([y]), mode, rng)[0])


def target_labels_for(logits: np.ndarray, y: np.ndarray, ids: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Targets for a batch; random draws are seeded per image id, independent of batching."""
    if parse_label_mode(cfg.label_mode)[0] == "rank":
        return select_target_labels(logits, y, cfg.label_mode, None)
    return np.array([select_target_label(logits[i], y[i], "random", rng_for(cfg.seed, "label", int(ids[i])))
                     for i in range(len(y))], dtype=np.int64)


def scoring_losses(source: np.ndarray, candidates: np.ndarray, cfg: AttackConfig,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Score every candidate target map against the clean source map (larger = further)."""
    s = np.broadcast_to(source, candidates.shape)
    if cfg.loss == "gaa":
        return sa.gaa_loss(s, candidates).data
    if cfg.loss == "euclid":
        return sa.euclid_loss(s, candidates).data
    if cfg.kernel is None:
        raise ValueError(f"loss {cfg.loss!r} does not use target images")
    return sa.mmd2_linear_time(sa.split(s, cfg.strategy), sa.split(candidates, cfg.strategy), cfg.kernel, rng).data


def select_target_image(gallery: Gallery, y_tgt: int, source_fm: np.ndarray, cfg: AttackConfig,
                        model: Model, rng: Optional[np.random.Generator] = None) -> int:
    """Index (within the y_tgt sub-gallery) of the highest-scoring candidate; ties -> lowest index."""
    feats = gallery.tap_features(model, cfg.tap)[y_tgt]
    if len(feats) == 0:
        raise InsufficientImages(f"empty sub-gallery for label {y_tgt}")
    scores = np.asarray(scoring_losses(np.asarray(source_fm, dtype=np.float64), feats.astype(np.float64), cfg, rng))
    return int(np.argmax(scores))


# momentum step --------------------------------------------------------------------------

@dataclass
class MomentumState:
    beta: np.ndarray
    step: int = 0
    zero_grad: np.ndarray = None  # per-image count of steps with a zero gradient

    @classmethod
    def zeros(cls, x: np.ndarray) -> "MomentumState":
        return cls(np.zeros_like(x), 0, np.zeros(len(x), dtype=np.int64))


def normalise(g: np.ndarray, norm: str = "l1") -> Tuple[np.ndarray, np.ndarray]:
    """Per-image normalised gradient and the mask of images whose norm was zero."""
    axes = tuple(range(1, g.ndim))
    if norm == "l1":
        mag = np.abs(g).sum(axis=axes, keepdims=True)
    else:
        mag = np.sqrt((g * g).sum(axis=axes, keepdims=True))
    zero = mag == 0
    out = np.where(zero, 0.0, g / np.where(zero, 1.0, mag)).astype(g.dtype)
    return out, zero.reshape(-1)


def project(x_new: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """L-infinity ball around ``x`` first, then the [0, 1] pixel box."""
    return np.clip(np.clip(x_new, x - epsilon, x + epsilon), 0.0, 1.0)


def momentum_update(x_adv: np.ndarray, x: np.ndarray, g: np.ndarray, state: MomentumState,
                    cfg: AttackConfig) -> Tuple[np.ndarray, MomentumState]:
    """One momentum-sign descent step given the loss gradient ``g``."""
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient at attack step {state.step}")
    gn, zero = normalise(g, cfg.norm)
    beta = cfg.decay * state.beta + gn
    x_next = project(x_adv - cfg.step * np.sign(beta), x, cfg.epsilon).astype(x.dtype)
    zg = (state.zero_grad if state.zero_grad is not None else np.zeros(len(x), dtype=np.int64)) + zero
    return x_next, MomentumState(beta, state.step + 1, zg)


LossFn = Callable[[Tensor], Tensor]


def loss_and_grad(loss_fn: LossFn, x_adv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    xt = Tensor(x_adv, requires_grad=True)
    with Tape() as tape:
        per_image = loss_fn(xt)
        total = per_image.sum()
    tape.backward(total)
    tape.clear()
    return per_image.data.copy(), xt.grad


def attack_step(x_adv: np.ndarray, x: np.ndarray, loss_fn: LossFn, state: MomentumState,
                cfg: AttackConfig) -> Tuple[np.ndarray, MomentumState, np.ndarray]:
    """Gradient of ``loss_fn`` at ``x_adv`` followed by :func:`momentum_update`.

    Returns the next image, the new state and the per-image loss at ``x_adv``.
    """
    if state.step >= cfg.iters:
        raise ValueError(f"attack already ran {state.step} of {cfg.iters} steps")
    losses, g = loss_and_grad(loss_fn, x_adv)
    x_next, state = momentum_update(x_adv, x, g, state, cfg)
    return x_next, state, losses


def make_loss(model: Model, cfg: AttackConfig, target_fm: Optional[np.ndarray] = None,
              y_tgt: Optional[np.ndarray] = None, sigma2: Optional[np.ndarray] = None) -> LossFn:
    """Per-image loss of the adversarial batch against fixed targets."""
    if cfg.loss == "mifgsm":
        labels = np.asarray(y_tgt)

        def logit_loss(xt: Tensor) -> Tensor:
            return softmax_cross_entropy(model.forward(xt), labels, reduction="none")

        return logit_loss

    tgt = Tensor(np.asarray(target_fm, dtype=model.dtype))
    kernel = cfg.kernel

    def feature_loss(xt: Tensor) -> Tensor:
        s = forward_to_tap(model, xt, cfg.tap).values
        if cfg.loss == "gaa":
            return sa.gaa_loss(s, tgt)
        if cfg.loss == "euclid":
            return sa.euclid_loss(s, tgt)
        bw = sigma2
        if kernel.family == "gaussian" and bw is None:
            bw = sa.paa_bandwidth(s, tgt, cfg.strategy)[0]
        return sa.paa_loss(s, tgt, kernel, cfg.strategy, sigma2=bw)

    return feature_loss


@dataclass
class AdversarialResult:
    x_adv: np.ndarray
    y: np.ndarray
    y_tgt: np.ndarray
    loss_trace: np.ndarray  # (images, iters + 1); last column is the loss at the final image
    white_pred: np.ndarray
    target_index: Optional[np.ndarray]
    zero_grad_steps: np.ndarray
    seconds: float

    @property
    def white_success(self) -> np.ndarray:
        return self.white_pred == self.y_tgt


def run_attack(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               gallery: Optional[Gallery] = None, image_ids: Optional[np.ndarray] = None,
               y_tgt: Optional[np.ndarray] = None) -> AdversarialResult:
    """Full pipeline for a batch: target labels, target images, then ``cfg.iters`` steps.

    ``image_ids`` name the images for seed derivation so that a given image
    gets the same random choices however the batch is composed.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    ids = np.arange(len(x)) if image_ids is None else np.asarray(image_ids)
    logits = predict(model, x)
    if y_tgt is None:
        y_tgt = target_labels_for(logits, y, ids, cfg)
    y_tgt = np.asarray(y_tgt, dtype=np.int64)

    target_fm = target_index = None
    if cfg.loss != "mifgsm":
        if gallery is None:
            raise ValueError(f"loss {cfg.loss!r} needs a gallery")
        clean = _features(model, x, cfg.tap)
        feats = gallery.tap_features(model, cfg.tap)
        target_index = np.array([
            select_target_image(gallery, int(y_tgt[i]), clean[i], cfg, model,
                                rng_for(cfg.seed, "score", int(ids[i])))
            for i in range(len(x))
        ], dtype=np.int64)
        target_fm = feats[y_tgt, target_index]

    x_adv = x.copy()
    trace = np.zeros((len(x), cfg.iters + 1))
    zero_steps = np.zeros(len(x), dtype=np.int64)
    for s in range(0, len(x), cfg.batch_size):
        sl = slice(s, s + cfg.batch_size)
        x_adv[sl], trace[sl], zero_steps[sl] = _attack_chunk(
            model, x[sl], cfg, None if target_fm is None else target_fm[sl], y_tgt[sl])
    white_pred = predict(model, x_adv).argmax(axis=1)
    return AdversarialResult(x_adv, y, y_tgt, trace, white_pred, target_index, zero_steps,
                             time.perf_counter() - t0)


def _attack_chunk(model, x, cfg, target_fm, y_tgt):
    sigma2 = None
    if cfg.loss == "paa_g" and cfg.bandwidth == "fixed":
        clean = _features(model, x, cfg.tap)
        sigma2 = sa.paa_bandwidth(clean, target_fm, cfg.strategy)[0]
    loss_fn = make_loss(model, cfg, target_fm, y_tgt, sigma2)
    state = MomentumState.zeros(x)
    x_adv = x.copy()
    trace = np.zeros((len(x), cfg.iters + 1))
    for it in range(cfg.iters):
        x_adv, state, losses = attack_step(x_adv, x, loss_fn, state, cfg)
        trace[:, it] = losses
    trace[:, cfg.iters] = loss_fn(Tensor(x_adv)).data
    return x_adv, trace, state.zero_grad


def linf_violations(x_adv: np.ndarray, x: np.ndarray, epsilon: float, tol: float = 1e-6) -> int:
    """Number of images breaking the budget or leaving [0, 1]."""
    axes = tuple(range(1, x.ndim))
    over = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)).max(axis=axes) > epsilon + tol
    out = (x_adv.min(axis=axes) < 0) | (x_adv.max(axis=axes) > 1)
    return int(np.sum(over | out))


__all__ = [
    "AdversarialResult",
    "AttackConfig",
    "FEATURE_LOSSES",
    "Gallery",
    "InsufficientImages",
    "LOSSES",
    "MomentumState",
    "attack_step",
    "build_gallery",
    "target_labels_for",
    "linf_violations",
    "make_loss",
    "momentum_update",
    "normalise",
    "project",
    "run_attack",
    "scoring_losses",
    "select_target_image",
    "select_target_label",
    "select_target_labels",
]
