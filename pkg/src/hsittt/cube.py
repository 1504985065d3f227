"""Hyperspectral cube container, on-disk format and the shared degradation operator.

Cubes are stored band-major: ``data[s]`` is the H x W plane of band ``s``.
Band indices are zero-based; band ``s`` here is band ``s + 1`` in the usual
1-based notation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

HEADER_NAME = "header.json"
PAYLOAD_NAME = "data.f32"


class CubeError(ValueError):
    """Raised for malformed cubes or cube containers."""


@dataclass(frozen=True)
class HSICube:
    """An S x H x W reflectance cube with values in [0, 1]."""

    data: np.ndarray
    wavelengths_nm: Optional[tuple] = None
    clamp: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise CubeError(f"cube data must be a non-empty S x H x W array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        bad = np.flatnonzero(~np.isfinite(data))
        if bad.size:
            raise CubeError(f"non-finite value at flat index {bad[0]}")
        if self.clamp:
            data = np.clip(data, 0.0, 1.0)
        else:
            bad = np.flatnonzero((data < 0.0) | (data > 1.0))
            if bad.size:
                raise CubeError(
                    f"value {data.flat[bad[0]]!r} outside [0, 1] at flat index {bad[0]}"
                )
        object.__setattr__(self, "data", data)
        if self.wavelengths_nm is not None:
            wl = tuple(float(w) for w in self.wavelengths_nm)
            if len(wl) != data.shape[0]:
                raise CubeError(f"{len(wl)} wavelengths given for {data.shape[0]} bands")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise CubeError("wavelengths_nm must be strictly increasing")
            object.__setattr__(self, "wavelengths_nm", wl)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


def as_array(x):
    """The data array of an :class:`HSICube`, or ``x`` itself for arrays."""
    return x.data if isinstance(x, HSICube) else x


def band(cube: HSICube, s: int) -> np.ndarray:
    """Read-only H x W view of band ``s`` (zero-based)."""
    if not 0 <= s < cube.bands:
        raise IndexError(f"band index {s} out of range for {cube.bands} bands")
    view = cube.data[s]
    view.flags.writeable = False
    return view


def stack_bands(planes: Sequence[np.ndarray], wavelengths_nm=None) -> HSICube:
    return HSICube(np.stack(planes, axis=0), wavelengths_nm=wavelengths_nm)


# --------------------------------------------------------------------------
# container I/O


def save_cube(cube: HSICube, path) -> None:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        header = {
            "height": cube.height,
            "width": cube.width,
            "bands": cube.bands,
            "dtype": "f32le",
            "layout": "band-major",
        }
        if cube.wavelengths_nm is not None:
            header["wavelengths_nm"] = list(cube.wavelengths_nm)
        (path / HEADER_NAME).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
        payload = np.ascontiguousarray(cube.data, dtype="<f4")
        (path / PAYLOAD_NAME).write_bytes(payload.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write cube to {path}: {exc}") from exc


def _read_header(path: Path) -> dict:
    header_path = path / HEADER_NAME
    if not header_path.is_file():
        raise FileNotFoundError(f"missing {HEADER_NAME} in {path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CubeError(f"{header_path}: invalid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise CubeError(f"{header_path}: header must be a JSON object")
    for key in ("height", "width", "bands"):
        val = header.get(key)
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise CubeError(f"{header_path}: '{key}' must be a positive integer")
    if header.get("dtype", "f32le") != "f32le":
        raise CubeError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    if header.get("layout", "band-major") != "band-major":
        raise CubeError(f"{header_path}: unsupported layout {header['layout']!r}")
    return header


def load_cube(path, clamp: bool = False) -> HSICube:
    path = Path(path)
    header = _read_header(path)
    payload_path = path / PAYLOAD_NAME
    if not payload_path.is_file():
        raise FileNotFoundError(f"missing {PAYLOAD_NAME} in {path}")
    raw = payload_path.read_bytes()
    s, h, w = header["bands"], header["height"], header["width"]
    expected = s * h * w
    if len(raw) != 4 * expected:
        raise CubeError(
            f"{payload_path}: header declares {s}x{h}x{w} = {expected} floats, "
            f"payload holds {len(raw) / 4:g}"
        )
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(s, h, w)
    return HSICube(data, wavelengths_nm=header.get("wavelengths_nm"), clamp=clamp)


# --------------------------------------------------------------------------
# resampling


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resample_matrix(n_in: int, n_out: int, factor: float) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D cubic resampling.

    ``factor`` is input pixels per output pixel. For factor > 1 the kernel is
    stretched by ``factor`` (anti-aliasing); out-of-range taps are folded onto
    the border sample (edge replication).
    """
    support = max(factor, 1.0)
    radius = 2.0 * support
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * factor - 0.5
        lo = int(math.floor(center - radius))
        hi = int(math.ceil(center + radius))
        taps = np.arange(lo, hi + 1)
        weights = cubic_kernel((center - taps) / support)
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), weights)
        mat[i] /= mat[i].sum()
    return mat


def _check_factor(factor) -> float:
    factor = float(factor)
    if not math.isfinite(factor) or factor < 1.0:
        raise ValueError(f"scale factor must be >= 1, got {factor}")
    return factor


def downsampled_size(n: int, factor: float) -> int:
    return int(math.floor(n / factor + 1e-9))


def downsample_band(plane: np.ndarray, factor) -> np.ndarray:
    """Anti-aliased bicubic downsampling of one H x W plane.

    Output size is floor(H / factor) x floor(W / factor). Computed in float64,
    returned in the input's floating dtype.
    """
    factor = _check_factor(factor)
    plane = np.asarray(plane)
    h, w = plane.shape
    if factor == 1.0:
        return plane.copy()
    oh, ow = downsampled_size(h, factor), downsampled_size(w, factor)
    if oh < 1 or ow < 1:
        raise ValueError(f"downsampling {h}x{w} by {factor} gives an empty image")
    rows = resample_matrix(h, oh, factor)
    cols = resample_matrix(w, ow, factor)
    out = rows @ plane.astype(np.float64) @ cols.T
    return out.astype(plane.dtype if np.issubdtype(plane.dtype, np.floating) else np.float64)


def downsample_array(data: np.ndarray, factor) -> np.ndarray:
    """Apply :func:`downsample_band` to every plane of an S x H x W array.

    This is the one degradation operator used everywhere (pretraining pairs,
    evaluation inputs and test-time pseudo pairs). Values are not range-checked,
    so unclamped network outputs can be degraded too.
    """
    data = np.asarray(data)
    return np.stack([downsample_band(p, factor) for p in data], axis=0)


def downsample(cube: HSICube, factor) -> HSICube:
    return HSICube(
        np.clip(downsample_array(cube.data, factor), 0.0, 1.0),
        wavelengths_nm=cube.wavelengths_nm,
    )


def upsample_bicubic(data: np.ndarray, factor) -> np.ndarray:
    """Plain bicubic upsampling of an S x H x W array to round(H*factor) x round(W*factor)."""
    factor = _check_factor(factor)
    data = np.asarray(data)
    _, h, w = data.shape
    oh, ow = int(round(h * factor)), int(round(w * factor))
    rows = resample_matrix(h, oh, 1.0 / factor)
    cols = resample_matrix(w, ow, 1.0 / factor)
    return np.stack([rows @ p.astype(np.float64) @ cols.T for p in data], axis=0)
