"""Synthetic hyperspectral data, source-model pretraining and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .augment import mix_bands, sample_mixing_matrix
from .cube import HSICube, downsample, downsample_array, load_cube, save_cube, upsample_bicubic
from .losses import total_loss
from .metrics import evaluate_pair
from .model import DESK, ModelConfig, SRModel, build_model, super_resolve_batch
from .ttt import DivergenceError, predict

log = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    num_images: int = 20
    height: int = 64
    width: int = 64
    bands: int = 8
    endmembers: int = 4
    smoothness: float = 3.0
    seed: int = 0
    wavelength_range: tuple = (400.0, 700.0)

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if self.bands < 1:
            raise ValueError(f"bands must be positive, got {self.bands}")
        if self.height < 8 or self.width < 8:
            raise ValueError("height and width must be at least 8")
        if not 1 <= self.endmembers <= self.bands:
            raise ValueError(f"endmembers must lie in [1, bands], got {self.endmembers}")
        if not self.smoothness > 0:
            raise ValueError("smoothness must be positive")


def _spectrum(rng, bands):
    # smoothed random walk on a random base level; reflectance spectra are smooth
    curve = gaussian_filter1d(np.cumsum(rng.normal(size=bands)), 1.0, mode="nearest")
    span = curve.max() - curve.min()
    curve = (curve - curve.min()) / span if span > 0 else np.full(bands, 0.5)
    return rng.uniform(0.1, 0.6) + rng.uniform(0.1, 0.35) * curve


def _field(rng, shape, sigma):
    f = gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def synth_cube(rng: np.random.Generator, config: SynthConfig) -> HSICube:
    """Linear mixture of K random smooth spectra with piecewise-smooth abundances."""
    shape = (config.height, config.width)
    spectra = np.stack([_spectrum(rng, config.bands) for _ in range(config.endmembers)])
    # sharpened low-pass fields give regions with crisp boundaries plus texture
    logits = np.stack([
        3.0 * _field(rng, shape, config.smoothness) + 0.5 * _field(rng, shape, config.smoothness / 4)
        for _ in range(config.endmembers)
    ])
    abund = np.exp(logits - logits.max(axis=0))
    abund /= abund.sum(axis=0)
    shading = 0.7 + 0.3 * np.tanh(_field(rng, shape, 4 * config.smoothness))
    abund *= shading
    cube = np.einsum("ks,khw->shw", spectra, abund)
    lo, hi = config.wavelength_range
    wl = np.linspace(lo, hi, config.bands) if config.bands > 1 else [0.5 * (lo + hi)]
    return HSICube(np.clip(cube, 0.0, 1.0).astype(np.float32), wavelengths_nm=wl)


def synth_dataset(config: SynthConfig) -> List[HSICube]:
    rng = np.random.default_rng(config.seed)
    return [synth_cube(rng, config) for _ in range(config.num_images)]


def default_split(n: int, n_test: Optional[int] = None) -> dict:
    """Last quarter held out (15/5 for 20 images)."""
    n_test = max(1, n // 4) if n_test is None else n_test
    ids = [f"img_{i:04d}" for i in range(n)]
    return {"train": ids[: n - n_test], "test": ids[n - n_test:]}


def save_dataset(cubes, out_dir, split: Optional[dict] = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, cube in enumerate(cubes):
        save_cube(cube, out_dir / f"img_{i:04d}")
    split = split or default_split(len(cubes))
    (out_dir / "split.json").write_text(json.dumps(split, indent=2) + "\n", encoding="utf-8")
    return split


def load_dataset(root, subset: Optional[str] = None):
    """Return (ids, cubes); ``subset`` picks 'train' or 'test' from split.json."""
    root = Path(root)
    if subset is None:
        ids = sorted(p.name for p in root.iterdir() if (p / "header.json").is_file())
    else:
        split = json.loads((root / "split.json").read_text(encoding="utf-8"))
        if subset not in split:
            raise KeyError(f"split.json has no {subset!r} entry")
        ids = list(split[subset])
    if not ids:
        raise ValueError(f"no cubes found in {root}")
    return ids, [load_cube(root / i) for i in ids]


# --------------------------------------------------------------------------
# pretraining


@dataclass
class TrainConfig:
    # desk schedule: 15 images / 3 per step -> 5 steps per epoch, 900 steps
    epochs: int = 180
    batch_patches: int = 3
    patch_size: int = 48
    learning_rate: float = 1e-3
    scale: float = 2.0
    aug_enabled: bool = False
    mixup_lambda: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_patches < 1 or self.patch_size < 1:
            raise ValueError("epochs, batch_patches and patch_size must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.scale < 1 or abs(self.patch_size / self.scale - round(self.patch_size / self.scale)) > 1e-9:
            raise ValueError(f"patch_size {self.patch_size} is not divisible by scale {self.scale}")


class TrainResult(NamedTuple):
    model: SRModel
    log: list


def _sample_patch(rng, cube: HSICube, size: int) -> np.ndarray:
    _, h, w = cube.shape
    size_h, size_w = min(size, h), min(size, w)
    y = int(rng.integers(0, h - size_h + 1))
    x = int(rng.integers(0, w - size_w + 1))
    patch = cube.data[:, y:y + size_h, x:x + size_w]
    k = int(rng.integers(0, 8))
    if k & 1:
        patch = patch[:, :, ::-1]
    if k & 2:
        patch = patch[:, ::-1, :]
    if k & 4 and size_h == size_w:
        patch = patch.transpose(0, 2, 1)
    return np.ascontiguousarray(patch)


def pretrain(
    dataset: List[HSICube],
    config: Optional[TrainConfig] = None,
    model_cfg: ModelConfig = DESK,
    dtype=torch.float32,
    init: Optional[SRModel] = None,
) -> TrainResult:
    """Supervised training on (downsample(HR patch), HR patch) pairs.

    One epoch visits every training image once, ``batch_patches`` images per
    step, one random patch (with a random flip/transpose) per image.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    model = init if init is not None else build_model(model_cfg, seed=config.seed, dtype=dtype)
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_patches):
            hr = np.stack([_sample_patch(rng, dataset[i], config.patch_size) for i in order[start:start + config.batch_patches]])
            if config.aug_enabled:
                hr = np.stack([mix_bands(p, sample_mixing_matrix(p.shape[0], rng), config.mixup_lambda) for p in hr])
            lr = np.stack([downsample_array(p, config.scale) for p in hr])
            hr_t = torch.as_tensor(hr, dtype=dtype)
            lr_t = torch.as_tensor(lr, dtype=dtype)
            optimizer.zero_grad(set_to_none=True)
            pred = super_resolve_batch(lr_t, config.scale, model)
            loss = total_loss(pred, hr_t)
            step += 1
            if not torch.isfinite(loss.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, step {step}", step)
            loss.total.backward()
            optimizer.step()
            total, l1, tv = loss.floats()
            history.append((step, epoch + 1, l1, tv, total))
        if history:
            log.debug("epoch %d: loss %.5f", epoch + 1, history[-1][4])
    return TrainResult(model, history)


def write_train_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,l1,sstv,total\n")
        for step, _, l1, tv, total in rows:
            fh.write(f"{step},{l1:.6g},{tv:.6g},{total:.6g}\n")


def epoch_means(rows) -> list:
    by_epoch = {}
    for _, epoch, _, _, total in rows:
        by_epoch.setdefault(epoch, []).append(total)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# --------------------------------------------------------------------------
# evaluation


def evaluate(
    model: Optional[SRModel],
    dataset: List[HSICube],
    scale: float,
    ids: Optional[list] = None,
    predictor: Optional[Callable[[HSICube], HSICube]] = None,
    return_predictions: bool = False,
):
    """Degrade each cube, super-resolve it and score against the original.

    ``predictor`` replaces the model (e.g. bicubic upsampling or an adapted
    model per image); it receives the LR cube and returns the HR estimate.
    """
    if predictor is None:
        if model is None:
            raise ValueError("need a model or a predictor")
        predictor = lambda lr: predict(model, lr, scale)  # noqa: E731
    ids = ids or [f"img_{i:04d}" for i in range(len(dataset))]
    reports, preds = [], []
    for image_id, hr in zip(ids, dataset):
        lr = downsample(hr, scale)
        pred = predictor(lr)
        reports.append(evaluate_pair(pred, hr, scale, image_id))
        preds.append(pred)
    return (reports, preds) if return_predictions else reports


def bicubic_predictor(scale: float) -> Callable[[HSICube], HSICube]:
    return lambda lr: HSICube(np.clip(upsample_bicubic(lr.data, scale), 0, 1).astype(np.float32))
