"""RMSE, per-band PSNR / MPSNR and ERGAS for [0, 1] hyperspectral cubes.

PSNR uses a peak of 1.0 and floors the MSE at 1e-12, so identical bands score
a finite 120 dB. ERGAS follows the usual convention

    ERGAS = (100 / r) * sqrt(mean_s (RMSE_s / mean(ref_s))**2)

with ``r`` the upscaling ratio (2 for x2, 4 for x4). Conventions differ between
codebases (some use the inverse ratio); this one grows as quality drops and
shrinks with larger ratios.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cube import as_array

MSE_FLOOR = 1e-12
PSNR_CAP = 10.0 * math.log10(1.0 / MSE_FLOOR)


def _as_array(x) -> np.ndarray:
    return np.asarray(as_array(x), dtype=np.float64)


def _pair(pred, ref):
    p, r = _as_array(pred), _as_array(ref)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
    return p, r


def rmse(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def psnr_band(pred_band, ref_band) -> float:
    p, r = _pair(pred_band, ref_band)
    mse = float(np.mean((p - r) ** 2))
    return 10.0 * math.log10(1.0 / max(mse, MSE_FLOOR))


def psnr_per_band(pred, ref) -> list:
    p, r = _pair(pred, ref)
    if p.ndim != 3:
        raise ValueError(f"expected S x H x W cubes, got shape {p.shape}")
    return [psnr_band(p[s], r[s]) for s in range(p.shape[0])]


def mpsnr(pred, ref) -> float:
    return float(np.mean(psnr_per_band(pred, ref)))


def ergas(pred, ref, factor) -> float:
    p, r = _pair(pred, ref)
    if p.ndim != 3:
        raise ValueError(f"expected S x H x W cubes, got shape {p.shape}")
    means = r.mean(axis=(1, 2))
    zero = np.flatnonzero(means == 0.0)
    if zero.size:
        raise ValueError(f"reference band {zero[0]} has zero mean; ERGAS undefined")
    band_rmse = np.sqrt(np.mean((p - r) ** 2, axis=(1, 2)))
    return float(100.0 / float(factor) * np.sqrt(np.mean((band_rmse / means) ** 2)))


@dataclass
class MetricsReport:
    rmse: float
    mpsnr: float
    ergas: float
    psnr_per_band: list
    scale: float
    image_id: str = field(default="")


def evaluate_pair(pred, ref, factor, image_id: str = "") -> MetricsReport:
    per_band = psnr_per_band(pred, ref)
    return MetricsReport(
        rmse=rmse(pred, ref),
        mpsnr=float(np.mean(per_band)),
        ergas=ergas(pred, ref, factor),
        psnr_per_band=per_band,
        scale=float(factor),
        image_id=image_id,
    )


def format_float(x: float) -> str:
    return f"{x:.6g}"


def write_report_csv(reports, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("image_id,scale,rmse,mpsnr,ergas\n")
        for r in reports:
            fh.write(
                f"{r.image_id},{format_float(r.scale)},{format_float(r.rmse)},"
                f"{format_float(r.mpsnr)},{format_float(r.ergas)}\n"
            )


def write_band_csv(reports, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("image_id,band,psnr_db\n")
        for r in reports:
            for s, value in enumerate(r.psnr_per_band):
                fh.write(f"{r.image_id},{s},{format_float(value)}\n")
