"""Command-line entry point: synth | pretrain | adapt | eval | report.

Exit codes: 0 success, 1 validation error, 2 divergence, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from .cube import HSICube, downsample, load_cube, save_cube
from .metrics import evaluate_pair, format_float, write_band_csv, write_report_csv
from .model import ModelConfig, count_parameters, load_checkpoint, save_checkpoint
from .pretrain import (
    SynthConfig,
    TrainConfig,
    bicubic_predictor,
    load_dataset,
    pretrain,
    save_dataset,
    synth_dataset,
    write_train_log,
)
from .ttt import DivergenceError, TTTConfig, adapt, predict, write_log_csv

log = logging.getLogger("hsittt")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "HSITTT_THREADS"


class ValidationError(ValueError):
    pass


# --------------------------------------------------------------------------
# run configuration

_SECTIONS = {
    "model": {"blocks", "features", "feature_dim", "mlp_layers", "mlp_hidden", "variant"},
    "ttt": {"steps", "learning_rate", "ema_alpha", "mixup_lambda", "aug_enabled"},
    "train": {"epochs", "batch_patches", "patch_size", "learning_rate", "aug_enabled", "mixup_lambda"},
    "data": {"scale", "seed"},
}


@dataclasses.dataclass
class RunConfig:
    model: dict = dataclasses.field(default_factory=dict)
    ttt: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    data: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ValidationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        sections = {}
        for name, allowed in _SECTIONS.items():
            sec = doc.get(name, {})
            if not isinstance(sec, dict):
                raise ValidationError(f"config section {name!r} must be an object")
            bad = set(sec) - allowed
            if bad:
                raise ValidationError(f"unknown key(s) in {name!r}: {', '.join(sorted(bad))}")
            sections[name] = dict(sec)
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def scale(self, override=None) -> float:
        value = override if override is not None else self.data.get("scale", 2.0)
        if not isinstance(value, (int, float)) or value < 1:
            raise ValidationError(f"scale must be a number >= 1, got {value!r}")
        return float(value)

    def seed(self, override=None) -> int:
        value = override if override is not None else self.data.get("seed", 0)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValidationError(f"seed must be an integer, got {value!r}")
        return value

    def model_config(self, bands: int = 1, variant=None) -> ModelConfig:
        fields = dict(self.model)
        dim = fields.pop("feature_dim", None)
        if variant is not None:
            fields["variant"] = variant
        if fields.get("variant", "single") == "joint":
            fields["bands"] = bands
        cfg = _build(ModelConfig, fields, "model")
        if dim is not None and dim != cfg.feature_dim:
            raise ValidationError(f"model.feature_dim {dim} must equal model.features {cfg.features}")
        return cfg


def _build(kind, fields, section):
    try:
        return kind(**fields)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {section} config: {exc}") from exc


def _overlay(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def _deterministic():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise FileNotFoundError(f"{what} not found: {path}")


def _say(args, msg):
    if not args.quiet:
        print(msg)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, run: RunConfig) -> int:
    cfg = _build(SynthConfig, dict(
        num_images=args.images, height=args.size, width=args.size, bands=args.bands,
        endmembers=min(args.endmembers, max(args.bands, 1)),
        smoothness=args.smoothness, seed=run.seed(args.seed),
    ), "synth")
    if args.out is None:
        raise ValidationError("synth needs --out")
    cubes = synth_dataset(cfg)
    split = save_dataset(cubes, args.out)
    _say(args, f"synth: {cfg.num_images} cubes {cfg.bands}x{cfg.height}x{cfg.width} seed {cfg.seed} "
               f"({len(split['train'])} train / {len(split['test'])} test) -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args, run: RunConfig) -> int:
    scale = run.scale(args.scale)
    seed = run.seed(args.seed)
    train_cfg = _build(TrainConfig, _overlay(
        run.train, epochs=args.epochs, learning_rate=args.lr, batch_patches=args.batch_patches,
        patch_size=args.patch_size, aug_enabled=True if args.aug else None, scale=scale, seed=seed,
    ), "train")
    if args.out is None:
        raise ValidationError("pretrain needs --out")
    _require_dir(args.data, "dataset")
    _, cubes = load_dataset(args.data, args.split)
    bands = cubes[0].bands
    if any(c.bands != bands for c in cubes):
        raise ValidationError("dataset cubes disagree on band count")
    model_cfg = run.model_config(bands=bands, variant=args.variant)
    result = pretrain(cubes, train_cfg, model_cfg)
    out = Path(args.out)
    save_checkpoint(result.model, out)
    write_train_log(result.log, out / "train_log.csv")
    final = result.log[-1][4] if result.log else float("nan")
    _say(args, f"pretrain: {len(result.log)} steps, {count_parameters(result.model)} params, "
               f"final loss {final:.5g} -> {out}")
    return EXIT_OK


def _ttt_config(args, run: RunConfig, scale, seed) -> TTTConfig:
    return _build(TTTConfig, _overlay(
        run.ttt, steps=args.steps, learning_rate=args.lr, ema_alpha=args.alpha,
        mixup_lambda=args.mixup_lambda, aug_enabled=False if args.no_aug else None,
        scale=scale, seed=seed,
    ), "ttt")


def cmd_adapt(args, run: RunConfig) -> int:
    scale = run.scale(args.scale)
    config = _ttt_config(args, run, scale, run.seed(args.seed))
    if args.out is None:
        raise ValidationError("adapt needs --out")
    model = load_checkpoint(args.model)
    image = load_cube(args.image)
    if args.from_hr:
        image = downsample(image, scale)
    pred, state = adapt(model, image, config)
    out = Path(args.out)
    save_cube(pred, out / "prediction")
    save_checkpoint(state.student, out / "student")
    save_checkpoint(state.teacher, out / "teacher")
    write_log_csv(state.log, out / "log.csv")
    _say(args, f"adapt: {config.steps} steps on {image.bands}x{image.height}x{image.width} -> {out}")
    return EXIT_OK


_worker_model = None


def _worker_init(model_path):
    global _worker_model
    torch.set_num_threads(1)
    _worker_model = load_checkpoint(model_path)


def _adapt_one(item):
    lr_data, config = item
    pred, _ = adapt(_worker_model, HSICube(lr_data), config)
    return pred.data


def cmd_eval(args, run: RunConfig) -> int:
    scale = run.scale(args.scale)
    seed = run.seed(args.seed)
    workers = worker_count()
    config = _ttt_config(args, run, scale, seed) if args.method == "adapted" else None
    if args.out is None:
        raise ValidationError("eval needs --out")
    if args.method in ("source", "adapted") and args.model is None:
        raise ValidationError(f"--method {args.method} needs --model")
    if args.method == "stored" and args.predictions is None:
        raise ValidationError("--method stored needs --predictions")
    _require_dir(args.data, "dataset")
    model = load_checkpoint(args.model) if args.model and args.method != "bicubic" else None
    ids, cubes = load_dataset(args.data, None if args.split == "all" else args.split)
    stored = [load_cube(Path(args.predictions) / i) for i in ids] if args.method == "stored" else None

    lrs = [downsample(hr, scale) for hr in cubes]
    if args.method == "source":
        preds = [predict(model, lr, scale) for lr in lrs]
    elif args.method == "bicubic":
        preds = [bicubic_predictor(scale)(lr) for lr in lrs]
    elif args.method == "stored":
        preds = stored
    elif workers == 1:
        preds = [adapt(model, lr, config)[0] for lr in lrs]
    else:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn"),
                                 initializer=_worker_init, initargs=(str(args.model),)) as pool:
            preds = [HSICube(p) for p in pool.map(_adapt_one, [(lr.data, config) for lr in lrs])]

    reports = [evaluate_pair(p, hr, scale, i) for p, hr, i in zip(preds, cubes, ids)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.method}_{args.split}"
    write_report_csv(reports, out / f"{stem}.csv")
    write_band_csv(reports, out / f"{stem}_bands.csv")
    if args.save_predictions:
        for image_id, pred in zip(ids, preds):
            save_cube(pred, out / f"pred_{args.method}" / image_id)
    mean = float(np.mean([r.mpsnr for r in reports]))
    _say(args, f"eval: {args.method} on {len(reports)} {args.split} images, mean MPSNR {mean:.4f} dB -> {out / stem}.csv")
    return EXIT_OK


# --------------------------------------------------------------------------
# report

_METRICS = ("rmse", "mpsnr", "ergas")


def read_report_csv(path) -> dict:
    """image_id -> {scale, rmse, mpsnr, ergas}; rejects empty or malformed files."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["image_id", "scale", *_METRICS]
        if reader.fieldnames != expected:
            raise ValidationError(f"{path}: expected header {','.join(expected)}, got {reader.fieldnames}")
        rows = {}
        for n, row in enumerate(reader, start=2):
            try:
                rows[row["image_id"]] = {k: float(row[k]) for k in ("scale", *_METRICS)}
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{n}: malformed row") from exc
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return rows


def comparison_rows(source: dict, adapted: dict) -> list:
    if set(source) != set(adapted):
        raise ValidationError("source and adapted reports cover different images")
    rows = []
    for image_id in sorted(source):
        row = {"image_id": image_id}
        for m in _METRICS:
            a, b = source[image_id][m], adapted[image_id][m]
            row.update({f"{m}_source": a, f"{m}_adapted": b, f"{m}_delta": b - a})
        rows.append(row)
    mean = {"image_id": "mean"}
    for key in rows[0]:
        if key != "image_id":
            mean[key] = float(np.mean([r[key] for r in rows]))
    return rows + [mean]


def write_comparison(rows, out: Path) -> None:
    keys = list(rows[0])
    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join([r["image_id"]] + [format_float(r[k]) for k in keys[1:]]) + "\n")
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for r in rows:
        lines.append("| " + " | ".join([r["image_id"]] + [format_float(r[k]) for k in keys[1:]]) + " |")
    (out / "comparison.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


def default_bands(bands: int) -> tuple:
    """Three bands spread from the long- to the short-wavelength end."""
    return tuple(int(round(f * (bands - 1))) for f in (0.8, 0.45, 0.2))


def composite(cube: HSICube, rgb) -> np.ndarray:
    """Plain band-to-channel assignment, no colour processing."""
    planes = [cube.data[b] for b in rgb]
    return np.round(np.clip(np.stack(planes, axis=-1), 0.0, 1.0) * 255.0).astype(np.uint8)


def _plot_losses(log_path: Path, png: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(log_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "total" not in rows[0]:
        raise ValidationError(f"{log_path}: not a loss log")
    fig, ax = plt.subplots(figsize=(5, 3.2))
    phases = sorted({r.get("phase", "train") or "train" for r in rows})
    for phase in phases:
        sel = [r for r in rows if (r.get("phase", "train") or "train") == phase]
        ax.plot([int(r["step"]) for r in sel], [float(r["total"]) for r in sel], label=phase)
    ax.set_xlabel("step")
    ax.set_ylabel("L1 + SSTV")
    ax.set_title(log_path.parent.name or log_path.stem)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)


def _parse_pred(items) -> dict:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ValidationError(f"--pred expects NAME=DIR, got {item!r}")
        out[name] = Path(path)
    return out


def cmd_report(args, run: RunConfig) -> int:
    from PIL import Image

    if args.out is None:
        raise ValidationError("report needs --out")
    rows = comparison_rows(read_report_csv(args.source), read_report_csv(args.adapted))
    preds = _parse_pred(args.pred)
    scale = run.scale(args.scale)
    images = []
    if args.data is not None:
        ids, cubes = load_dataset(args.data, None if args.split == "all" else args.split)
        rgb = tuple(int(b) for b in args.bands.split(",")) if args.bands else default_bands(cubes[0].bands)
        if len(rgb) != 3 or any(not 0 <= b < cubes[0].bands for b in rgb):
            raise ValidationError(f"--bands needs three indices in [0, {cubes[0].bands - 1}], got {rgb}")
        for image_id, hr in zip(ids, cubes):
            panels = {"gt": hr, "bicubic": bicubic_predictor(scale)(downsample(hr, scale))}
            for name, root in preds.items():
                panels[name] = load_cube(root / image_id)
            images.append((image_id, panels))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_comparison(rows, out)
    for n, log_path in enumerate(args.logs or []):
        log_path = Path(log_path)
        _plot_losses(log_path, out / f"loss_{n:02d}_{log_path.stem}.png")
    for image_id, panels in images:
        for name, cube in panels.items():
            Image.fromarray(composite(cube, rgb), mode="RGB").save(out / f"composite_{image_id}_{name}.png")
    mean = rows[-1]
    _say(args, f"report: {len(rows) - 1} images, mean delta MPSNR {mean['mpsnr_delta']:+.4f} dB, "
               f"RMSE {mean['rmse_delta']:+.3g} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON run config", **({"default": None} if not suppress else kw))
    parser.add_argument("--seed", type=int, help="global seed", **({"default": None} if not suppress else kw))
    parser.add_argument("--out", help="output path", **({"default": None} if not suppress else kw))
    parser.add_argument("--quiet", action="store_true", **({"default": False} if not suppress else kw))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsittt", description="Test-time training for hyperspectral super-resolution.")
    _common(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--endmembers", type=int, default=4)
    p.add_argument("--smoothness", type=float, default=3.0)

    p = sub.add_parser("pretrain", parents=[common], help="train a source model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--variant", choices=["single", "joint"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-patches", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--aug", action="store_true", help="Spectral Mixup on training patches")

    def ttt_flags(p):
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--lambda", dest="mixup_lambda", type=float)
        p.add_argument("--no-aug", action="store_true")
        p.add_argument("--scale", type=float)

    p = sub.add_parser("adapt", parents=[common], help="test-time train on one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="LR cube container")
    p.add_argument("--from-hr", action="store_true", help="degrade --image first")
    ttt_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score a model on a dataset split")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--method", default="source", choices=["source", "adapted", "bicubic", "stored"])
    p.add_argument("--predictions", help="directory of stored predictions (method 'stored')")
    p.add_argument("--save-predictions", action="store_true")
    ttt_flags(p)

    p = sub.add_parser("report", parents=[common], help="tables, loss curves and composites")
    p.add_argument("--source", required=True, help="report CSV of the source model")
    p.add_argument("--adapted", required=True, help="report CSV after adaptation")
    p.add_argument("--logs", nargs="*", help="loss-log CSVs to plot")
    p.add_argument("--data", help="dataset for composites")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--pred", action="append", help="NAME=DIR of stored predictions")
    p.add_argument("--bands", help="R,G,B band indices")
    p.add_argument("--scale", type=float)
    return parser


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        run = RunConfig.load(args.config)
        worker_count()
        _deterministic()
        return COMMANDS[args.command](args, run)
    except DivergenceError as exc:
        print(f"error: divergence at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, KeyError) as exc:  # CubeError, CheckpointError, ValidationError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
