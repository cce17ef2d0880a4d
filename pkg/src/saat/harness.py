"""Transfer evaluation, sweeps and result export.

tSuc is the share of adversarial examples a model labels as the target;
tTR is the same share restricted to examples that already fooled the
white-box model. A tTR over zero white-box successes is reported as n/a.
"""

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import statalign as sa
from .attack import AttackConfig, Gallery, build_gallery, linf_violations, run_attack
from .models import Model, forward_to_tap, predict

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["white_box", "black_box", "loss", "tap", "rank_or_random", "c", "seed", "n_images",
               "tsuc", "ttr", "runtime_s"]


class ConstraintViolation(AssertionError):
    pass


@dataclass
class TransferRecord:
    image_id: int
    y: int
    y_tgt: int
    white_box: str
    black_box: str
    white_success: bool
    black_success: bool
    loss: str
    tap: int
    config_hash: str


def config_hash(cfg: AttackConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def eval_tsuc(records: Sequence[TransferRecord]) -> float:
    if not records:
        raise ValueError("tSuc of an empty record set is undefined")
    return 100.0 * sum(r.black_success for r in records) / len(records)


def eval_ttr(records: Sequence[TransferRecord]) -> Optional[float]:
    """Percent of white-box successes that also fool the black box; None when there are none."""
    white = [r for r in records if r.white_success]
    if not white:
        return None
    return 100.0 * sum(r.black_success for r in white) / len(white)


def check_counts(records: Sequence[TransferRecord]) -> None:
    total = len(records)
    w = sum(r.white_success for r in records)
    b = sum(r.black_success for r in records)
    both = sum(r.white_success and r.black_success for r in records)
    if not (both <= w <= total and both <= b <= total):
        raise ConstraintViolation(f"inconsistent success counts: total={total} white={w} black={b} both={both}")
    if w and both == b:
        tsuc, ttr = eval_tsuc(records), eval_ttr(records)
        if ttr + 1e-9 < tsuc:
            raise ConstraintViolation(f"tTR {ttr} below tSuc {tsuc} with black successes inside white successes")


def transfer_records(white: Model, blacks: Dict[str, Model], result, image_ids: np.ndarray,
                     cfg: AttackConfig) -> Dict[str, List[TransferRecord]]:
    """Records keyed by black-box name; the white-box itself is included under its own name."""
    h = config_hash(cfg)
    out = {}
    targets = {white.name: white, **blacks}
    for name, model in targets.items():
        pred = result.white_pred if model is white else predict(model, result.x_adv).argmax(axis=1)
        recs = [
            TransferRecord(int(image_ids[i]), int(result.y[i]), int(result.y_tgt[i]), white.name, name,
                           bool(result.white_success[i]), bool(pred[i] == result.y_tgt[i]), cfg.loss, cfg.tap, h)
            for i in range(len(image_ids))
        ]
        check_counts(recs)
        out[name] = recs
    return out


@dataclass
class ResultRow:
    white_box: str
    black_box: str
    loss: str
    tap: Optional[int]
    rank_or_random: str
    c: Optional[float]
    seed: int
    n_images: int
    tsuc: float
    ttr: Optional[float]
    runtime_s: Optional[float] = None

    def csv_values(self) -> List[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.4f}"
            return str(v)

        vals = asdict(self)
        out = [fmt(vals[c]) for c in CSV_COLUMNS]
        out[CSV_COLUMNS.index("ttr")] = "n/a" if self.ttr is None else f"{self.ttr:.4f}"
        return out


class GalleryPool:
    """Builds and caches galleries per (white-box, seed) from a fixed image pool."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, k: int = 20):
        self.images, self.labels, self.k = images, labels, k
        self._cache: Dict = {}

    def get(self, model: Model, seed: int) -> Gallery:
        key = (model.name, id(model), seed)
        if key not in self._cache:
            self._cache[key] = build_gallery(self.images, self.labels, model, k=self.k, seed=seed)
        return self._cache[key]


@dataclass
class Bench:
    """Models, attack images and the gallery pool shared by every experiment."""

    models: Dict[str, Model]
    images: np.ndarray
    labels: np.ndarray
    pool: GalleryPool
    image_ids: Optional[np.ndarray] = None
    record_runtime: bool = False
    violations: int = 0
    attacks_run: int = 0
    # loss -> [images whose final loss is below the initial one, images attacked]
    reductions: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.image_ids is None:
            self.image_ids = np.arange(len(self.labels))

    def blacks(self, white: str) -> Dict[str, Model]:
        return {k: m for k, m in self.models.items() if k != white}


def correct_by_all(models: Iterable[Model], images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Indices of images every model classifies correctly."""
    ok = np.ones(len(labels), dtype=bool)
    for m in models:
        ok &= predict(m, images).argmax(axis=1) == labels
    return np.flatnonzero(ok)


def _label_mode_str(cfg: AttackConfig) -> str:
    return cfg.label_mode


def run_point(bench: Bench, white: str, cfg: AttackConfig) -> List[ResultRow]:
    """Attack every bench image on ``white`` and score transfer to all other models."""
    t0 = time.perf_counter()
    wm = bench.models[white]
    gallery = None if cfg.loss == "mifgsm" else bench.pool.get(wm, cfg.seed)
    res = run_attack(wm, bench.images, bench.labels, cfg, gallery, image_ids=bench.image_ids)
    bad = linf_violations(res.x_adv, bench.images.astype(wm.dtype), cfg.epsilon)
    bench.violations += bad
    bench.attacks_run += len(res.x_adv)
    tally = bench.reductions.setdefault(cfg.loss, [0, 0])
    tally[0] += int(np.sum(res.loss_trace[:, -1] < res.loss_trace[:, 0]))
    tally[1] += len(res.loss_trace)
    if bad:
        raise ConstraintViolation(f"{bad} adversarial images violate the L-inf budget or pixel range")
    recs = transfer_records(wm, bench.blacks(white), res, bench.image_ids, cfg)
    runtime = time.perf_counter() - t0
    rows = []
    for name, rr in recs.items():
        rows.append(ResultRow(
            white, name, cfg.loss, None if cfg.loss == "mifgsm" else cfg.tap, _label_mode_str(cfg),
            cfg.kernel_c if cfg.loss == "paa_p" else None, cfg.seed, len(rr), eval_tsuc(rr), eval_ttr(rr),
            round(runtime, 3) if bench.record_runtime else None))
    logger.info("%s %s tap=%s %s seed=%d: %s", white, cfg.loss, cfg.tap, cfg.label_mode, cfg.seed,
                ", ".join(f"{r.black_box}={r.tsuc:.1f}" for r in rows))
    return rows


@dataclass
class SweepResult:
    axis: str
    values: List
    white_box: str
    loss: str
    seeds: List[int]
    rows: List[ResultRow] = field(default_factory=list)
    runtime_s: float = 0.0

    def _axis_of(self, row: ResultRow):
        if self.axis == "tap":
            return row.tap
        if self.axis == "rank":
            return int(row.rank_or_random.split(":")[1])
        return row.c

    def mean(self, black: str, value, metric: str = "tsuc") -> Optional[float]:
        vals = [getattr(r, metric) for r in self.rows if r.black_box == black and self._axis_of(r) == value]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def table(self, metric: str = "tsuc") -> Dict[str, List[Optional[float]]]:
        blacks = sorted({r.black_box for r in self.rows})
        return {b: [self.mean(b, v, metric) for v in self.values] for b in blacks}

    def best(self, black: str, metric: str = "tsuc"):
        """Axis value with the highest mean metric (first on ties)."""
        scores = [self.mean(black, v, metric) for v in self.values]
        scores = [-1.0 if s is None else s for s in scores]
        return self.values[int(np.argmax(scores))]


def sweep(bench: Bench, white: str, cfg: AttackConfig, axis: str, values: Sequence,
          seeds: Sequence[int] = (0, 1, 2)) -> SweepResult:
    t0 = time.perf_counter()
    result = SweepResult(axis, list(values), white, cfg.loss, list(seeds))
    for v in values:
        if axis == "tap":
            point = cfg.with_(tap=int(v))
        elif axis == "rank":
            point = cfg.with_(label_mode=f"rank:{int(v)}")
        elif axis == "c":
            if v < 0:
                raise ValueError(f"polynomial bias c must be >= 0, got {v}")
            point = cfg.with_(kernel_c=float(v))
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        for s in seeds:
            result.rows.extend(run_point(bench, white, point.with_(seed=int(s))))
    result.runtime_s = time.perf_counter() - t0
    return result


def layer_sweep(bench: Bench, white: str, cfg: AttackConfig, taps: Optional[Sequence[int]] = None,
                seeds: Sequence[int] = (0, 1, 2)) -> SweepResult:
    taps = list(range(bench.models[white].num_taps)) if taps is None else list(taps)
    for t in taps:
        bench.models[white].tap_block(t)
    return sweep(bench, white, cfg, "tap", taps, seeds)


def rank_sweep(bench: Bench, white: str, cfg: AttackConfig, ranks: Sequence[int] = (2, 4, 6, 8, 10),
               seeds: Sequence[int] = (0, 1, 2)) -> SweepResult:
    return sweep(bench, white, cfg, "rank", ranks, seeds)


C_GRID = tuple(round(0.1 * i, 1) for i in range(21))


def c_sweep(bench: Bench, white: str, cfg: AttackConfig, cs: Sequence[float] = C_GRID,
            seeds: Sequence[int] = (0, 1, 2)) -> SweepResult:
    if cfg.loss != "paa_p" or cfg.kernel_d != 2:
        raise ValueError("c sweep needs the polynomial kernel with power 2")
    if any(c < 0 for c in cs):
        raise ValueError("polynomial bias c must be >= 0")
    return sweep(bench, white, cfg, "c", cs, seeds)


@dataclass
class MethodComparison:
    best_taps: Dict[str, Dict[str, int]]  # white -> loss -> tap
    rows: List[ResultRow]

    def mean_tsuc(self, white: str, black: str, loss: str) -> float:
        vals = [r.tsuc for r in self.rows if r.white_box == white and r.black_box == black and r.loss == loss]
        return float(np.mean(vals))


def compare_methods(bench: Bench, selection: Bench, losses: Sequence[str], cfg: AttackConfig,
                    whites: Optional[Sequence[str]] = None, seeds: Sequence[int] = (0, 1, 2),
                    selection_seed: int = 0) -> MethodComparison:
    """Per white-box and loss: pick the tap with the best mean black-box tSuc on the
    ``selection`` images, then evaluate that tap on ``bench`` over ``seeds``."""
    whites = list(bench.models) if whites is None else list(whites)
    best: Dict[str, Dict[str, int]] = {}
    rows: List[ResultRow] = []
    for white in whites:
        best[white] = {}
        blacks = list(bench.blacks(white))
        for loss in losses:
            lcfg = cfg.with_(loss=loss)
            if loss == "mifgsm":
                tap = lcfg.tap
            else:
                sw = layer_sweep(selection, white, lcfg, seeds=[selection_seed])
                avg = [np.mean([sw.mean(b, t) for b in blacks]) for t in sw.values]
                tap = sw.values[int(np.argmax(avg))]
            best[white][loss] = tap
            for s in seeds:
                rows.extend(run_point(bench, white, lcfg.with_(tap=tap, seed=int(s))))
    return MethodComparison(best, rows)


# translation demo -----------------------------------------------------------------

KERNELS = {
    "paa_l": sa.KernelSpec("linear"),
    "paa_p": sa.KernelSpec("polynomial", c=0.0, d=2),
    "paa_g": sa.KernelSpec("gaussian"),
}


def feature_distances(a: np.ndarray, b: np.ndarray) -> Dict[str, float]:
    out = {"euclid": float(sa.euclid_loss(a, b).data), "gaa": float(sa.gaa_loss(a, b).data)}
    for name, k in KERNELS.items():
        out[name] = float(sa.paa_loss(a, b, k).data)
    return out


def circular_shift(fm: np.ndarray, shift: int) -> np.ndarray:
    return np.roll(fm, shift, axis=-1)


def translation_demo(model: Model, image: np.ndarray, tap: int, shift: int = 1,
                     tol: float = 1e-9) -> dict:
    """Distances between an image's tap features and those of its horizontal flip, and
    between the feature map and a circular shift of its positions."""
    m64 = model.astype(np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    fm = forward_to_tap(m64, img, tap).values.data[0]
    flipped = forward_to_tap(m64, img[..., ::-1].copy(), tap).values.data[0]
    shifted = circular_shift(fm, shift)
    flip = feature_distances(fm, flipped)
    shift_d = feature_distances(fm, shifted)
    invariant = all(abs(shift_d[k]) <= tol for k in ("paa_l", "paa_p", "paa_g", "gaa"))
    report = {
        "model": model.name,
        "tap": tap,
        "shift": shift,
        "channels": int(fm.shape[0]),
        "positions": int(fm.shape[1]),
        "flip": flip,
        "shift_distances": shift_d,
        "statalign_shift_invariant": invariant,
        "euclid_shift_sensitive": shift_d["euclid"] > 1e-3,
    }
    if not invariant:
        raise AssertionError(f"statistic-alignment losses changed under a circular shift: {shift_d}")
    return report


# export -------------------------------------------------------------------------------

def export(rows: Sequence[ResultRow], path, fmt: Optional[str] = None) -> Path:
    """Write rows as long-format CSV (fixed column order) or JSON with the same keys."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow(r.csv_values())
    elif fmt == "json":
        with open(path, "w") as f:
            json.dump([{c: asdict(r)[c] for c in CSV_COLUMNS} for r in rows], f, indent=1, sort_keys=False)
            f.write("\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def load_rows(path) -> List[ResultRow]:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return [ResultRow(**d) for d in json.loads(path.read_text())]
    rows = []
    with open(path, newline="") as f:
        for d in csv.DictReader(f):
            rows.append(ResultRow(
                d["white_box"], d["black_box"], d["loss"], int(d["tap"]) if d["tap"] else None,
                d["rank_or_random"], float(d["c"]) if d["c"] else None, int(d["seed"]), int(d["n_images"]),
                float(d["tsuc"]), None if d["ttr"] == "n/a" else float(d["ttr"]),
                float(d["runtime_s"]) if d["runtime_s"] else None))
    return rows
