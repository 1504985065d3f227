"""Band-shared implicit-function super-resolution network.

A single-channel EDSR-baseline encoder turns one band into an H x W x D latent
grid; an MLP decodes (latent code, relative offset, query cell) into a pixel
value. Each query blends the decodes of its four surrounding latent codes,
weighted by inverse squared distance. Every band of a cube goes through the
same network on its own, so nothing in the model mixes bands.

The ``joint`` variant is the conventional alternative (all bands in, all bands
out) and exists only as an ablation control.

Coordinates live on [-1, 1] per axis with pixel ``i`` of ``n`` centred at
``-1 + (2i + 1) / n``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cube import as_array

COORD_CONVENTION = "pixel-centers-v1"
WEIGHT_EPS = 1e-9
MODEL_JSON = "model.json"
WEIGHTS_NAME = "weights.f32"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``mlp_layers`` counts Linear layers in the decoder including the output
    layer, so ``mlp_layers=3, mlp_hidden=64`` is 2 hidden layers of width 64.
    """

    blocks: int = 4
    features: int = 32
    mlp_layers: int = 3
    mlp_hidden: int = 64
    variant: str = "single"
    bands: int = 1
    res_scale: float = 1.0

    def __post_init__(self):
        if self.variant not in ("single", "joint"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        for name in ("blocks", "mlp_layers"):
            if getattr(self, name) < (0 if name == "blocks" else 1):
                raise ValueError(f"{name} out of range: {getattr(self, name)}")
        for name in ("features", "mlp_hidden", "bands"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.variant == "single" and self.bands != 1:
            raise ValueError("the single-channel variant takes bands=1")

    @property
    def feature_dim(self) -> int:
        return self.features

    @property
    def channels(self) -> int:
        return self.bands if self.variant == "joint" else 1


DESK = ModelConfig()
PAPER = ModelConfig(blocks=16, features=64, mlp_layers=5, mlp_hidden=256)
TINY = ModelConfig(blocks=2, features=8, mlp_layers=2, mlp_hidden=32)


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResBlock(nn.Module):
    def __init__(self, features, res_scale=1.0):
        super().__init__()
        self.body = nn.Sequential(conv3x3(features, features), nn.ReLU(inplace=True), conv3x3(features, features))
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.body(x) * self.res_scale


class Encoder(nn.Module):
    """EDSR-baseline trunk without the upsampler; keeps the input resolution."""

    def __init__(self, in_channels, features, blocks, res_scale=1.0):
        super().__init__()
        self.head = conv3x3(in_channels, features)
        self.body = nn.Sequential(
            *[ResBlock(features, res_scale) for _ in range(blocks)],
            conv3x3(features, features),
        )

    def forward(self, x):
        x = self.head(x)
        return x + self.body(x)


class MLP(nn.Module):
    def __init__(self, in_dim, out_dim, hidden, layers):
        super().__init__()
        mods = []
        last = in_dim
        for _ in range(layers - 1):
            mods += [nn.Linear(last, hidden), nn.ReLU(inplace=True)]
            last = hidden
        mods.append(nn.Linear(last, out_dim))
        self.layers = nn.Sequential(*mods)

    def forward(self, x):
        return self.layers(x)


def make_coord(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """(h*w, 2) pixel-centre coordinates in row-major order, (y, x) per row."""
    ys = -1.0 + (2.0 * torch.arange(h, dtype=torch.float64) + 1.0) / h
    xs = -1.0 + (2.0 * torch.arange(w, dtype=torch.float64) + 1.0) / w
    grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1)
    return grid.reshape(-1, 2).to(dtype)


@dataclass
class QueryGrid:
    coords: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        self.coords = torch.as_tensor(self.coords).clamp(-1.0, 1.0)
        self.cell = torch.as_tensor(self.cell)

    @classmethod
    def for_size(cls, h: int, w: int, dtype=torch.float32) -> "QueryGrid":
        return cls(make_coord(h, w, dtype), torch.tensor([2.0 / h, 2.0 / w], dtype=dtype))


def neighbour_codes(coords: torch.Tensor, h: int, w: int):
    """Indices and centres of the 2 x 2 latent codes surrounding each query.

    Returns a list of four ``(iy, ix, cy, cx)`` tuples. Indices are clamped to
    the grid, so near the border some of the four codes coincide.
    """
    fy = (coords[:, 0].double() + 1.0) * h / 2.0 - 0.5
    fx = (coords[:, 1].double() + 1.0) * w / 2.0 - 0.5
    y0 = torch.floor(fy).long()
    x0 = torch.floor(fx).long()
    out = []
    for dy in (0, 1):
        iy = (y0 + dy).clamp(0, h - 1)
        cy = -1.0 + (2.0 * iy.double() + 1.0) / h
        for dx in (0, 1):
            ix = (x0 + dx).clamp(0, w - 1)
            cx = -1.0 + (2.0 * ix.double() + 1.0) / w
            out.append((iy, ix, cy.to(coords.dtype), cx.to(coords.dtype)))
    return out


def ensemble_weights(coords: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Normalised inverse-squared-distance weights, shape (Q, 4)."""
    raw = []
    for _, _, cy, cx in neighbour_codes(coords, h, w):
        d2 = (coords[:, 0] - cy) ** 2 + (coords[:, 1] - cx) ** 2
        raw.append(1.0 / (d2 + WEIGHT_EPS))
    raw = torch.stack(raw, dim=-1)
    return raw / raw.sum(dim=-1, keepdim=True)


class SRModel(nn.Module):
    def __init__(self, config: ModelConfig = DESK):
        super().__init__()
        self.config = config
        c = config.channels
        self.encoder = Encoder(c, config.features, config.blocks, config.res_scale)
        self.decoder = MLP(config.features + 4, c, config.mlp_hidden, config.mlp_layers)

    @property
    def variant(self) -> str:
        return self.config.variant

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """N x C x h x w -> N x D x h x w latent grid."""
        feat = self.encoder(x)
        if not torch.isfinite(feat).all():
            raise FloatingPointError("encoder produced non-finite activations")
        return feat

    def decode(self, code, rel, cell):
        return self.decoder(torch.cat([code, rel, cell], dim=-1))

    def query(self, feat: torch.Tensor, grid: QueryGrid) -> torch.Tensor:
        """Evaluate the implicit function at every grid point: N x Q x C."""
        n, d, h, w = feat.shape
        coords = grid.coords.to(feat.dtype)
        q = coords.shape[0]
        flat = feat.reshape(n, d, h * w)
        cell = (grid.cell.to(feat.dtype) * torch.tensor([h, w], dtype=feat.dtype)).expand(n, q, 2)
        scale = torch.tensor([h, w], dtype=feat.dtype)
        weights = ensemble_weights(coords, h, w)
        out = 0
        for t, (iy, ix, cy, cx) in enumerate(neighbour_codes(coords, h, w)):
            code = flat[:, :, iy * w + ix].permute(0, 2, 1)
            # offsets are fed to the MLP in units of latent cells
            rel = torch.stack([coords[:, 0] - cy, coords[:, 1] - cx], dim=-1) * scale
            pred = self.decode(code, rel.expand(n, q, 2), cell)
            out = out + pred * weights[:, t].unsqueeze(-1)
        return out

    def forward(self, x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
        """N x C x h x w -> N x C x out_h x out_w."""
        feat = self.encode(x)
        grid = QueryGrid.for_size(out_h, out_w, feat.dtype)
        out = self.query(feat, grid)
        return out.permute(0, 2, 1).reshape(x.shape[0], -1, out_h, out_w)


def build_model(config: ModelConfig = DESK, seed: int = 0, dtype=torch.float32) -> SRModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SRModel(config)
    return model.to(dtype)


def output_size(h: int, w: int, factor: float) -> tuple:
    if factor < 1:
        raise ValueError(f"scale factor must be >= 1, got {factor}")
    return int(round(h * factor)), int(round(w * factor))


def _as_tensor(x, model: SRModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(as_array(x)), dtype=dtype)


def super_resolve_band(band, factor: float, model: SRModel) -> torch.Tensor:
    """Super-resolve one H x W plane with a single-channel model."""
    if model.variant != "single":
        raise ValueError("super_resolve_band needs the single-channel variant")
    x = _as_tensor(band, model)
    oh, ow = output_size(x.shape[-2], x.shape[-1], factor)
    return model(x.reshape(1, 1, *x.shape[-2:]), oh, ow)[0, 0]


def super_resolve_joint(data, factor: float, model: SRModel) -> torch.Tensor:
    if model.variant != "joint":
        raise ValueError("super_resolve_joint needs the joint variant")
    x = _as_tensor(data, model)
    if x.shape[0] != model.config.bands:
        raise ValueError(f"joint model expects {model.config.bands} bands, got {x.shape[0]}")
    oh, ow = output_size(x.shape[-2], x.shape[-1], factor)
    return model(x.unsqueeze(0), oh, ow)[0]


def super_resolve(data, factor: float, model: SRModel) -> torch.Tensor:
    """S x h x w -> S x H x W, unclamped.

    For the single-channel variant each band is processed on its own, in input
    order, so results are independent of which other bands are present.
    """
    if model.variant == "joint":
        return super_resolve_joint(data, factor, model)
    x = _as_tensor(data, model)
    return torch.stack([super_resolve_band(x[s], factor, model) for s in range(x.shape[0])])


def super_resolve_batch(x: torch.Tensor, factor: float, model: SRModel) -> torch.Tensor:
    """Batched training path: N x S x h x w -> N x S x H x W.

    Single-channel models fold bands into the batch axis. Numerically equal to
    :func:`super_resolve` up to floating-point summation order.
    """
    n, s, h, w = x.shape
    oh, ow = output_size(h, w, factor)
    if model.variant == "joint":
        return model(x, oh, ow)
    return model(x.reshape(n * s, 1, h, w), oh, ow).reshape(n, s, oh, ow)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# checkpoints
#
# weights.f32 holds every parameter flattened (row-major) and concatenated in
# model.parameters() order, i.e. module definition order: encoder.head,
# encoder.body (blocks then tail conv), decoder layers; weight before bias.


def save_checkpoint(model: SRModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = asdict(model.config)
    meta.update(
        feature_dim=model.config.feature_dim,
        coord_convention=COORD_CONVENTION,
        feat_unfold=False,
        cell_decode=True,
        param_count=count_parameters(model),
        param_order=[name for name, _ in model.named_parameters()],
    )
    (path / MODEL_JSON).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    flat = torch.cat([p.detach().reshape(-1).to(torch.float32) for p in model.parameters()])
    (path / WEIGHTS_NAME).write_bytes(flat.numpy().astype("<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, dtype=torch.float32) -> SRModel:
    path = Path(path)
    try:
        meta = json.loads((path / MODEL_JSON).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path / MODEL_JSON}: invalid JSON ({exc})") from exc
    if meta.get("coord_convention") != COORD_CONVENTION:
        raise CheckpointError(f"unsupported coordinate convention {meta.get('coord_convention')!r}")
    if meta.get("feat_unfold"):
        raise CheckpointError("feature unfolding is not supported")
    fields = {k: meta[k] for k in ("blocks", "features", "mlp_layers", "mlp_hidden", "variant", "bands", "res_scale") if k in meta}
    try:
        config = ModelConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model.json: {exc}") from exc
    model = SRModel(config)
    expected = count_parameters(model)
    if meta.get("param_count") != expected:
        raise CheckpointError(f"param_count {meta.get('param_count')} does not match architecture ({expected})")
    raw = (path / WEIGHTS_NAME).read_bytes()
    if len(raw) != 4 * expected:
        raise CheckpointError(f"weights.f32 holds {len(raw) / 4:g} values, expected {expected}")
    flat = torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float32))
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(flat[offset:offset + p.numel()].reshape(p.shape))
            offset += p.numel()
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise CheckpointError("checkpoint contains non-finite parameters")
    return model.to(dtype)
