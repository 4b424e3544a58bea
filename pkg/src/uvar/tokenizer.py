"""Multi-scale bitwise residual tokenizer.

Each latent position is quantized to d sign bits scaled onto the unit
sphere; a ladder of scales encodes successive residuals, each with one
least-squares gain. The conv encoder/decoder map images to and from the
latent grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Conv2d, Module

Scale = tuple[int, int]


@dataclass(frozen=True)
class ScaleSchedule:
    scales: tuple[Scale, ...]
    bits: int = 8

    def __post_init__(self):
        scales = tuple((int(h), int(w)) for h, w in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales:
            raise ValueError("schedule needs at least one scale")
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        for h, w in scales:
            if h < 1 or w < 1:
                raise ValueError(f"scale sizes must be >= 1, got {(h, w)}")
        areas = [h * w for h, w in scales]
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ValueError(f"scale areas must strictly increase, got {list(scales)}")

    @property
    def base(self) -> Scale:
        return self.scales[-1]

    def __len__(self) -> int:
        return len(self.scales)

    @property
    def block_sizes(self) -> list[int]:
        return [h * w for h, w in self.scales]

    @property
    def n_tokens(self) -> int:
        return sum(self.block_sizes)

    def prefix(self, k: int) -> "ScaleSchedule":
        return ScaleSchedule(self.scales[:k], self.bits)

    def is_prefix_of(self, other: "ScaleSchedule") -> bool:
        return self.bits == other.bits and other.scales[: len(self.scales)] == self.scales

    def extended(self, scale: Scale) -> "ScaleSchedule":
        h, w = scale
        bh, bw = self.base
        if h * w <= bh * bw:
            raise ValueError(f"extension scale {scale} must be larger than the current base {self.base}")
        return ScaleSchedule(self.scales + ((h, w),), self.bits)

    def to_json(self) -> dict:
        return {"scales": [list(s) for s in self.scales], "bits": self.bits}

    @classmethod
    def from_json(cls, d: dict) -> "ScaleSchedule":
        return cls(tuple(tuple(s) for s in d["scales"]), int(d["bits"]))


LO_SCHEDULE = ScaleSchedule(((1, 1), (2, 2), (4, 4), (8, 8)), bits=8)
HI_SCHEDULE = LO_SCHEDULE.extended((16, 16))


@dataclass
class ScaleTokens:
    """Per-scale bit grids (..., h_k, w_k, d) in {0, 1} and gains (..., K)."""

    bits: list[np.ndarray]
    gains: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.bits)

    def flat_bits(self) -> np.ndarray:
        """Concatenate scales into (..., n_tokens, d), coarse to fine."""
        parts = [b.reshape(b.shape[:-3] + (-1, b.shape[-1])) for b in self.bits]
        return np.concatenate(parts, axis=-2)

    @classmethod
    def from_flat(cls, flat: np.ndarray, schedule: ScaleSchedule, gains: np.ndarray) -> "ScaleTokens":
        out, start = [], 0
        lead = flat.shape[:-2]
        for h, w in schedule.scales:
            out.append(flat[..., start:start + h * w, :].reshape(lead + (h, w, flat.shape[-1])))
            start += h * w
        if start != flat.shape[-2]:
            raise ValueError(f"flat bits have {flat.shape[-2]} tokens, schedule needs {start}")
        return cls(out, np.asarray(gains, dtype=np.float64))

    def select(self, idx) -> "ScaleTokens":
        return ScaleTokens([b[idx] for b in self.bits], self.gains[idx])


def _resize(x: np.ndarray, size: Scale) -> np.ndarray:
    """Bilinear resize of (..., H, W, C) with antialiasing when shrinking."""
    rh = F.resample_matrix(x.shape[-3], size[0], "bilinear", True)
    rw = F.resample_matrix(x.shape[-2], size[1], "bilinear", True)
    return np.einsum("ih,...hwc,jw->...ijc", rh, x, rw, optimize=True)


def quantize_unit(residual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign bits of the last axis and their unit-norm embedding; sign(0) = +1."""
    r = np.asarray(residual, dtype=np.float64)
    if r.ndim == 0 or r.shape[-1] < 1:
        raise ValueError("quantize_unit needs at least one channel")
    if not np.all(np.isfinite(r)):
        raise ValueError("quantize_unit: non-finite input")
    bits = (r >= 0).astype(np.uint8)
    return bits, bits_to_unit(bits)


def bits_to_unit(bits: np.ndarray) -> np.ndarray:
    d = bits.shape[-1]
    return (2.0 * bits.astype(np.float64) - 1.0) / math.sqrt(d)


def _check_feature(feature: np.ndarray, schedule: ScaleSchedule) -> None:
    if feature.ndim < 3 or tuple(feature.shape[-3:-1]) != schedule.base or feature.shape[-1] != schedule.bits:
        raise ValueError(
            f"feature map {feature.shape} does not match schedule base {schedule.base} with {schedule.bits} bits"
        )


def quantize_scales(feature: np.ndarray, schedule: ScaleSchedule) -> tuple[ScaleTokens, np.ndarray]:
    """Residual ladder over ``schedule``; accepts (H, W, d) or a batch (..., H, W, d)."""
    f = np.asarray(feature, dtype=np.float64)
    _check_feature(f, schedule)
    if not np.all(np.isfinite(f)):
        raise ValueError("quantize_scales: non-finite feature map")
    lead = f.shape[:-3]
    acc = np.zeros_like(f)
    bits_out, gains = [], []
    for h, w in schedule.scales:
        r = _resize(f - acc, (h, w))
        bits, q = quantize_unit(r)
        num = np.sum(r * q, axis=(-3, -2, -1))
        den = float(h * w)  # <q, q> is one per position
        g = np.maximum(0.0, num / den)
        acc = acc + _resize(g[..., None, None, None] * q, schedule.base)
        bits_out.append(bits)
        gains.append(g)
    gains_arr = np.stack(gains, axis=-1) if lead else np.array([float(x) for x in gains])
    return ScaleTokens(bits_out, gains_arr), acc


def reconstruct(tokens: ScaleTokens, schedule: ScaleSchedule, gains: np.ndarray | None = None) -> np.ndarray:
    """Sum of upsampled, gain-scaled unit codes; ``gains`` overrides the stored ones."""
    if len(tokens.bits) != len(schedule):
        raise ValueError(f"tokens have {len(tokens.bits)} scales, schedule has {len(schedule)}")
    g_all = np.asarray(tokens.gains if gains is None else gains, dtype=np.float64)
    acc = None
    for k, ((h, w), bits) in enumerate(zip(schedule.scales, tokens.bits)):
        if tuple(bits.shape[-3:-1]) != (h, w) or bits.shape[-1] != schedule.bits:
            raise ValueError(f"scale {k}: bits {bits.shape} do not match {(h, w)} x {schedule.bits}")
        g = g_all[..., k]
        term = _resize(np.asarray(g)[..., None, None, None] * bits_to_unit(bits), schedule.base)
        acc = term if acc is None else acc + term
    return acc


def partial_inputs(bits: Sequence[np.ndarray], gains: np.ndarray, schedule: ScaleSchedule) -> list[np.ndarray]:
    """Teacher-forcing inputs for scales 1..K-1: the reconstruction from all
    coarser scales, resampled to each scale's grid.

    ``bits`` may hold fewer than K scales (generation in progress); the list
    then covers scales 1..len(bits).
    """
    gains = np.asarray(gains, dtype=np.float64)
    out = []
    acc = None
    n = min(len(bits), len(schedule) - 1)
    for k in range(n):
        g = gains[..., k]
        term = _resize(np.asarray(g)[..., None, None, None] * bits_to_unit(bits[k]), schedule.base)
        acc = term if acc is None else acc + term
        out.append(_resize(acc, schedule.scales[k + 1]))
    return out


# ---- conv autoencoder ------------------------------------------------------

@dataclass
class TokenizerConfig:
    bits: int = 8
    width1: int = 32
    width2: int = 64
    commit_weight: float = 0.25


class TokenizerModel(Module):
    """4x downsampling conv encoder and mirrored decoder (channels-last)."""

    def __init__(self, cfg: TokenizerConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c1, c2, d = cfg.width1, cfg.width2, cfg.bits
        self.enc1 = Conv2d(rng, 3, c1, 4, stride=2, padding=1, dtype=dtype)
        self.enc2 = Conv2d(rng, c1, c2, 4, stride=2, padding=1, dtype=dtype)
        self.enc3 = Conv2d(rng, c2, d, 3, padding=1, dtype=dtype)
        self.dec1 = Conv2d(rng, d, c2, 3, padding=1, dtype=dtype)
        self.dec2 = Conv2d(rng, c2, c1, 3, padding=1, dtype=dtype)
        self.dec3 = Conv2d(rng, c1, 3, 3, padding=1, dtype=dtype)
        # generation-time gains keyed by ladder length (one ladder per resolution)
        self.calibrations: dict[int, np.ndarray] = {}

    def named_parameters(self, prefix: str = ""):
        for name in ("enc1", "enc2", "enc3", "dec1", "dec2", "dec3"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def encode(self, images: Tensor) -> Tensor:
        x = images - 0.5
        x = F.gelu(self.enc1(x))
        x = F.gelu(self.enc2(x))
        z = self.enc3(x)
        # project each latent vector onto the unit sphere, as the codes live there too
        norm = F.power((z * z).sum(axis=-1, keepdims=True) + 1e-6, 0.5)
        return z / norm

    def decode(self, latent: Tensor) -> Tensor:
        x = F.gelu(self.dec1(latent))
        h, w = x.shape[1:3]
        x = F.resample2d(x, (2 * h, 2 * w), mode="nearest")
        x = F.gelu(self.dec2(x))
        x = F.resample2d(x, (4 * h, 4 * w), mode="nearest")
        return self.dec3(x) + 0.5

    def gains(self, schedule: ScaleSchedule) -> np.ndarray:
        g = self.calibrations.get(len(schedule))
        if g is None:
            raise ValueError(f"tokenizer has no calibrated gains for a {len(schedule)}-scale ladder")
        return g

    def latent_size(self, resolution: int) -> Scale:
        return (resolution // 4, resolution // 4)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TokenizerLosses:
    total: float
    recon: float
    commit: float
    gains: np.ndarray


def tokenizer_loss(model: TokenizerModel, images: np.ndarray, schedule: ScaleSchedule,
                   commit_weight: float | None = None) -> tuple[Tensor, TokenizerLosses]:
    """Reconstruction + commitment loss with a straight-through quantizer.

    Both terms are per-element means of squared error.
    """
    images = np.asarray(images)
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("tokenizer images must lie in [0, 1]")
    lam = model.cfg.commit_weight if commit_weight is None else commit_weight
    dtype = model.enc1.weight.dtype
    f = model.encode(Tensor(images.astype(dtype)))
    tokens, acc = quantize_scales(f.data, schedule)
    acc_t = Tensor(acc.astype(dtype))
    # straight-through: forward uses acc, backward treats quantization as identity
    st = f + F.stop_gradient(acc_t - f)
    recon = model.decode(st)
    diff = recon - Tensor(images.astype(dtype))
    rec_loss = (diff * diff).mean()
    c = f - acc_t
    commit = (c * c).mean()
    total = rec_loss + commit * lam if lam else rec_loss
    vals = (float(total.data), float(rec_loss.data), float(commit.data))
    if not all(np.isfinite(v) for v in vals):
        raise NonFiniteLoss(f"tokenizer loss is non-finite: total={vals[0]} recon={vals[1]} commit={vals[2]}")
    return total, TokenizerLosses(*vals, gains=tokens.gains)


def encode_images(model: TokenizerModel, images: np.ndarray, schedule: ScaleSchedule) -> ScaleTokens:
    from .autodiff import no_grad

    with no_grad():
        f = model.encode(Tensor(np.asarray(images, dtype=model.enc1.weight.dtype)))
    tokens, _ = quantize_scales(f.data, schedule)
    return tokens


def decode_tokens(model: TokenizerModel, tokens: ScaleTokens, schedule: ScaleSchedule,
                  gains: np.ndarray | None = None) -> np.ndarray:
    from .autodiff import no_grad

    acc = reconstruct(tokens, schedule, gains)
    single = acc.ndim == 3
    if single:
        acc = acc[None]
    with no_grad():
        img = model.decode(Tensor(acc.astype(model.enc1.weight.dtype))).data
    img = np.clip(img, 0.0, 1.0).astype(np.float64)
    return img[0] if single else img


def calibrate_gains(model: TokenizerModel, images: np.ndarray, schedule: ScaleSchedule) -> np.ndarray:
    """Mean least-squares gain per scale over a set of images."""
    tokens = encode_images(model, images, schedule)
    return np.asarray(tokens.gains, dtype=np.float64).reshape(-1, len(schedule)).mean(axis=0)
