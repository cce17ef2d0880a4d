"""Command-line workflows: dataset creation, training, attacks, sweeps, demo and export.

Configuration is a flat ``key = value`` text file; command-line flags
override file values and everything else falls back to the defaults in
:class:`RunConfig`. Each run writes its resolved configuration and that
configuration's hash next to its results, so ``--config <out>/config.txt``
reproduces a run.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import harness
from .attack import LOSSES, AttackConfig, parse_label_mode
from .data import Dataset, ingest_idx, make_desk_dataset, save_dataset
from .models import ARCHITECTURES, Model, build, load_checkpoint, save_checkpoint, train
from .seeding import derive

logger = logging.getLogger("saat")

COMMANDS = ("make-dataset", "train", "attack", "sweep-layers", "sweep-ranks", "sweep-c", "compare",
            "demo-translation", "export")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset_images: str = ""
    dataset_labels: str = ""
    gallery_images: str = ""  # empty -> use the dataset
    gallery_labels: str = ""
    checkpoint_dir: str = "checkpoints"
    out: str = "run"
    models: str = "vgg,res,inc"
    white: str = "all"
    seed: int = 0
    n_seeds: int = 3
    eps: float = 0.07
    iters: int = 20
    alpha: Optional[float] = None  # None -> eps / iters
    decay: float = 1.0
    loss: str = "paa_p"
    kernel_c: float = 0.0
    kernel_d: int = 2
    tap: int = 0
    label_mode: str = "random"
    gallery_k: int = 20
    split: str = "point"
    n_images: int = 100
    selection_images: int = 100
    taps: str = "all"
    ranks: str = "2,4,6,8,10"
    c_values: str = "0.0:2.0:0.1"
    losses: str = "paa_p,gaa,euclid"
    epochs: int = 12
    lr: float = 0.05
    batch_size: int = 64
    n_train: int = 5000
    n_test: int = 2000
    image_index: int = 0
    shift: int = 1
    results: str = ""
    format: str = "json"
    record_runtime: bool = False

    # parsing ---------------------------------------------------------------

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def coerce(cls, key: str, raw):
        f = {f.name: f for f in fields(cls)}[key]
        if raw is None:
            return None
        default = f.default
        if key == "alpha":
            return None if str(raw).strip().lower() in ("", "auto", "none") else float(raw)
        if isinstance(default, bool):
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        try:
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        return str(raw).strip()

    @classmethod
    def from_sources(cls, file_values: Dict[str, str], overrides: Dict[str, object]) -> "RunConfig":
        cfg = cls()
        for source in (file_values, overrides):
            for k, v in source.items():
                if k not in cls.keys():
                    raise ConfigError(f"unknown config key {k!r}")
                setattr(cfg, k, cls.coerce(k, v))
        if cfg.alpha is None and cfg.iters > 0:
            cfg.alpha = cfg.eps / cfg.iters
        cfg.validate()
        return cfg

    # views -------------------------------------------------------------------

    @property
    def model_names(self) -> List[str]:
        return [m.strip() for m in self.models.split(",") if m.strip()]

    @property
    def white_names(self) -> List[str]:
        if self.white == "all":
            return self.model_names
        return [m.strip() for m in self.white.split(",") if m.strip()]

    @property
    def seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def tap_list(self, arch: str) -> List[int]:
        if self.taps == "all":
            return list(range(ARCHITECTURES[arch].num_taps))
        return [int(t) for t in self.taps.split(",")]

    @property
    def rank_list(self) -> List[int]:
        return [int(r) for r in self.ranks.split(",")]

    @property
    def c_list(self) -> List[float]:
        if ":" in self.c_values:
            lo, hi, step = (float(v) for v in self.c_values.split(":"))
            n = int(round((hi - lo) / step)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        return [float(c) for c in self.c_values.split(",")]

    @property
    def loss_list(self) -> List[str]:
        return [s.strip() for s in self.losses.split(",") if s.strip()]

    def attack_config(self, **kw) -> AttackConfig:
        base = dict(epsilon=self.eps, iters=self.iters, alpha=self.alpha, decay=self.decay, loss=self.loss,
                    kernel_c=self.kernel_c, kernel_d=self.kernel_d, tap=self.tap,
                    strategy="point_wise" if self.split == "point" else "channel_wise",
                    label_mode=self.label_mode, seed=self.seed)
        base.update(kw)
        return AttackConfig(**base)

    def validate(self) -> None:
        for m in self.model_names:
            if m not in ARCHITECTURES:
                raise ConfigError(f"unknown model {m!r}; choose from {sorted(ARCHITECTURES)}")
        if not self.model_names:
            raise ConfigError("no models selected")
        for w in self.white_names:
            if w not in self.model_names:
                raise ConfigError(f"white-box model {w!r} is not among models {self.model_names}")
        if self.split not in ("point", "channel"):
            raise ConfigError(f"split must be 'point' or 'channel', got {self.split!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        for loss in self.loss_list:
            if loss not in LOSSES:
                raise ConfigError(f"unknown loss {loss!r} in losses")
        if self.n_seeds < 1 or self.n_images < 1 or self.gallery_k < 1:
            raise ConfigError("n_seeds, n_images and gallery_k must be positive")
        if self.kernel_d < 1:
            raise ConfigError("kernel_d must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")
        try:
            parse_label_mode(self.label_mode)
            self.attack_config()
            for m in self.white_names:
                n_taps = ARCHITECTURES[m].num_taps
                for t in self.tap_list(m) + [self.tap]:
                    if not 0 <= t < n_taps:
                        raise ConfigError(f"tap {t} out of range for {m} ({n_taps} taps)")
            for r in self.rank_list:
                if r < 2:
                    raise ConfigError(f"rank {r} is not a valid target rank (must be >= 2)")
            if any(c < 0 for c in self.c_list):
                raise ConfigError("c values must be >= 0")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # serialisation ---------------------------------------------------------------

    def dump(self) -> str:
        lines = []
        for k in self.keys():
            v = getattr(self, k)
            lines.append(f"{k} = {'auto' if v is None else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()


def read_config_file(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in RunConfig.keys():
            raise ConfigError(f"{path}:{n}: unknown config key {k!r}")
        out[k] = v
    return out


# argument parsing ------------------------------------------------------------------

FLAG_KEYS = {
    "dataset_images": str, "dataset_labels": str, "gallery_images": str, "gallery_labels": str,
    "checkpoint_dir": str, "out": str, "models": str, "white": str, "seed": int, "n_seeds": int,
    "eps": float, "iters": int, "alpha": float, "decay": float, "loss": str, "kernel_c": float,
    "kernel_d": int, "tap": int, "label_mode": str, "gallery_k": int, "split": str, "n_images": int,
    "selection_images": int, "taps": str, "ranks": str, "c_values": str, "losses": str, "epochs": int,
    "lr": float, "batch_size": int, "n_train": int, "n_test": int, "image_index": int, "shift": int,
    "results": str, "format": str,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saat", description="Feature statistic alignment attacks on toy CNNs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    for key, typ in FLAG_KEYS.items():
        kw = {"type": typ, "default": None, "dest": key}
        if key == "loss":
            kw["choices"] = LOSSES
        if key == "split":
            kw["choices"] = ("point", "channel")
        p.add_argument("--" + key.replace("_", "-"), **kw)
    p.add_argument("--record-runtime", action="store_true", default=None, dest="record_runtime",
                   help="fill the runtime_s column (makes CSV output time-dependent)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in list(FLAG_KEYS) + ["record_runtime"]
                 if getattr(args, k) is not None}
    return RunConfig.from_sources(file_values, overrides)


# workflow helpers --------------------------------------------------------------------

def _dataset(images: str, labels: str, what: str) -> Dataset:
    if not images or not labels:
        raise ConfigError(f"{what}: set dataset_images and dataset_labels (see `saat make-dataset`)")
    for p in (images, labels):
        if not Path(p).is_file():
            raise FileNotFoundError(f"{what}: file not found: {p}")
    return ingest_idx(images, labels)


def checkpoint_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.checkpoint_dir) / f"{name}.ckpt"


def load_models(cfg: RunConfig) -> Dict[str, Model]:
    missing = [str(checkpoint_path(cfg, m)) for m in cfg.model_names if not checkpoint_path(cfg, m).is_file()]
    if missing:
        raise FileNotFoundError(f"missing checkpoints: {', '.join(missing)}; run `saat train` first")
    return {m: load_checkpoint(checkpoint_path(cfg, m)) for m in cfg.model_names}


def prepare_run(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    (out / "config_hash.txt").write_text(cfg.hash() + "\n")
    return out


def make_bench(cfg: RunConfig, models: Dict[str, Model], n: int, offset: int = 0) -> harness.Bench:
    ds = _dataset(cfg.dataset_images, cfg.dataset_labels, "attack images")
    if cfg.gallery_images:
        gal = _dataset(cfg.gallery_images, cfg.gallery_labels, "gallery images")
    else:
        gal = ds
    ok = harness.correct_by_all(models.values(), ds.images, ds.labels)
    pick = ok[offset:offset + n]
    if len(pick) < n:
        raise ConfigError(f"only {len(ok) - offset} images are correctly classified by every model, need {n}")
    pool = harness.GalleryPool(gal.images, gal.labels, cfg.gallery_k)
    return harness.Bench(models, ds.images[pick], ds.labels[pick], pool, pick, cfg.record_runtime)


def write_results(out: Path, rows: Sequence[harness.ResultRow], timings: dict) -> None:
    harness.export(rows, out / "results.csv")
    harness.export(rows, out / "results.json")
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n")


def print_rows(rows: Sequence[harness.ResultRow]) -> None:
    print(",".join(harness.CSV_COLUMNS))
    for r in rows:
        print(",".join(r.csv_values()))


# commands ---------------------------------------------------------------------------------

def cmd_make_dataset(cfg: RunConfig) -> int:
    out = prepare_run(cfg)
    train_ds, test_ds = make_desk_dataset(cfg.n_train, cfg.n_test, seed=derive(cfg.seed, "dataset") % 2**32)
    save_dataset(train_ds, out / "train-images.idx", out / "train-labels.idx")
    save_dataset(test_ds, out / "test-images.idx", out / "test-labels.idx")
    print(f"wrote {len(train_ds)} train and {len(test_ds)} test images to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds = _dataset(cfg.dataset_images, cfg.dataset_labels, "training data")
    out = prepare_run(cfg)
    Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in cfg.model_names:
        path = checkpoint_path(cfg, name)
        if path.is_file():
            model = load_checkpoint(path)
            print(f"{name}: checkpoint exists, skipping ({path})")
        else:
            s = derive(cfg.seed, "train", name) % 2**32
            model = build(name, ds.num_classes, seed=s)
            rep = train(model, ds.images, ds.labels, epochs=cfg.epochs, lr=cfg.lr, batch=cfg.batch_size, seed=s)
            save_checkpoint(model, path)
            print(f"{name}: train accuracy {rep.train_acc[-1]:.4f} after {cfg.epochs} epochs ({rep.seconds:.0f}s)")
        summary[name] = {"checkpoint": str(path), "train_acc": model.meta.get("train_acc", [None])[-1]}
    (out / "train.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0


def _run_sweep(cfg: RunConfig, axis: str) -> int:
    models = load_models(cfg)
    bench = make_bench(cfg, models, cfg.n_images)
    out = prepare_run(cfg)
    rows, timings = [], {}
    for white in cfg.white_names:
        acfg = cfg.attack_config()
        t0 = time.perf_counter()
        if axis == "attack":
            res = harness.sweep(bench, white, acfg, "tap", [cfg.tap], cfg.seeds)
        elif axis == "tap":
            res = harness.layer_sweep(bench, white, acfg, cfg.tap_list(white), cfg.seeds)
        elif axis == "rank":
            res = harness.rank_sweep(bench, white, acfg, cfg.rank_list, cfg.seeds)
        else:
            res = harness.c_sweep(bench, white, acfg, cfg.c_list, cfg.seeds)
        timings[white] = time.perf_counter() - t0
        rows.extend(res.rows)
        for black, vals in res.table().items():
            shown = ", ".join(f"{v}:{m:.1f}" for v, m in zip(res.values, vals) if m is not None)
            print(f"{white} -> {black} mean tSuc by {res.axis}: {shown}")
    write_results(out, rows, timings)
    return 0


def cmd_attack(cfg: RunConfig) -> int:
    return _run_sweep(cfg, "attack")


def cmd_compare(cfg: RunConfig) -> int:
    models = load_models(cfg)
    bench = make_bench(cfg, models, cfg.n_images)
    selection = make_bench(cfg, models, cfg.selection_images, offset=cfg.n_images)
    out = prepare_run(cfg)
    t0 = time.perf_counter()
    cmp = harness.compare_methods(bench, selection, cfg.loss_list, cfg.attack_config(),
                                  whites=cfg.white_names, seeds=cfg.seeds, selection_seed=cfg.seed)
    write_results(out, cmp.rows, {"total": time.perf_counter() - t0})
    (out / "best_taps.json").write_text(json.dumps(cmp.best_taps, indent=1, sort_keys=True) + "\n")
    for white in cfg.white_names:
        for black in bench.blacks(white):
            scores = ", ".join(f"{l}={cmp.mean_tsuc(white, black, l):.1f}" for l in cfg.loss_list)
            print(f"{white} -> {black}: {scores}")
    return 0


def cmd_demo_translation(cfg: RunConfig) -> int:
    models = load_models(cfg)
    ds = _dataset(cfg.dataset_images, cfg.dataset_labels, "demo image")
    if not 0 <= cfg.image_index < len(ds):
        raise ConfigError(f"image_index {cfg.image_index} out of range ({len(ds)} images)")
    out = prepare_run(cfg)
    reports = [harness.translation_demo(models[w], ds.images[cfg.image_index], cfg.tap, cfg.shift)
               for w in cfg.white_names]
    (out / "translation.json").write_text(json.dumps(reports, indent=1) + "\n")
    for r in reports:
        print(f"{r['model']} tap {r['tap']} ({r['channels']}x{r['positions']})")
        for name in ("euclid", "paa_l", "paa_p", "paa_g", "gaa"):
            print(f"  {name:7s} flip {r['flip'][name]:.6g}  shift {r['shift_distances'][name]:.6g}")
    return 0


def cmd_export(cfg: RunConfig) -> int:
    if not cfg.results:
        raise ConfigError("export needs --results pointing at a results.csv or results.json")
    src = Path(cfg.results)
    if src.is_dir():
        src = src / "results.csv"
    if not src.is_file():
        raise FileNotFoundError(f"results file not found: {src}")
    rows = harness.load_rows(src)
    out = Path(cfg.out)
    target = out if out.suffix else out / f"results.{cfg.format}"
    target.parent.mkdir(parents=True, exist_ok=True)
    harness.export(rows, target, cfg.format)
    print(f"wrote {len(rows)} rows to {target}")
    return 0


HANDLERS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep-layers": lambda c: _run_sweep(c, "tap"),
    "sweep-ranks": lambda c: _run_sweep(c, "rank"),
    "sweep-c": lambda c: _run_sweep(c, "c"),
    "compare": cmd_compare,
    "demo-translation": cmd_demo_translation,
    "export": cmd_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "sweep-c" and cfg.loss != "paa_p":
            raise ConfigError("sweep-c needs --loss paa_p")
        return HANDLERS[args.command](cfg)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
