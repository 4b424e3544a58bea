"""Guidance, filtering and the scale-by-scale decode loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .model import UnifiedModel, latents_from_bits
from .sequence import assemble, collate
from .tokenizer import ScaleSchedule, ScaleTokens, TokenizerModel, decode_tokens

HEADS = ("bits", "codes")


@dataclass(frozen=True)
class SamplerConfig:
    cfg_scale: float = 1.5
    top_k: int = 900
    top_p: float = 0.95
    temperature: float = 1.0
    seed: int = 0
    # "codes" samples each token from the explicit 2^d distribution implied by the
    # bit logits, where top-k / top-p apply; "bits" samples every bit on its own.
    head: str = "codes"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")


def apply_cfg(cond: np.ndarray, uncond: np.ndarray, s: float) -> np.ndarray:
    cond = np.asarray(cond)
    uncond = np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise ValueError(f"apply_cfg: cond {cond.shape} and uncond {uncond.shape} differ")
    # the endpoints are returned exactly; u + 1 * (c - u) need not round back to c
    if s == 1:
        return cond.copy()
    if s == 0:
        return uncond.copy()
    return uncond + s * (cond - uncond)


def top_k_top_p_filter(probs: np.ndarray, k: int, p: float) -> np.ndarray:
    """Top-k then nucleus filtering over the last axis, renormalized.

    The nucleus is the shortest prefix (by descending probability, ties to the
    lower index) whose top-k mass reaches ``p``, pulled in further while its last
    token holds no more than ``1 - p`` of the kept mass. Only prefixes with that
    property are their own nucleus after renormalizing, so this is what makes
    filtering idempotent. Nothing is rescaled when nothing is removed.
    """
    if k < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"top-p needs p in (0, 1], got {p}")
    x = np.asarray(probs, dtype=np.float64)
    n = x.shape[-1]
    order = np.argsort(-x, axis=-1, kind="stable")
    ranked = np.take_along_axis(x, order, axis=-1)
    keep_rank = np.broadcast_to(np.arange(n) < min(k, n), x.shape).copy()
    keep_rank &= ranked > 0
    keep_rank[..., 0] = True
    if p < 1.0:
        kept = np.where(keep_rank, ranked, 0.0)
        c = np.cumsum(kept, axis=-1)
        prev = c - kept
        reach = np.argmax(c >= p * c[..., -1:], axis=-1)  # shortest prefix reaching p
        stable = prev < p * c
        stable[..., 0] = True
        idx = np.arange(n)
        stable &= idx <= reach[..., None]
        last = n - 1 - np.argmax(stable[..., ::-1], axis=-1)
        keep_rank &= idx <= last[..., None]
    keep = np.zeros_like(keep_rank)
    np.put_along_axis(keep, order, keep_rank, axis=-1)
    if np.all(keep | (x == 0)):
        return x.copy()
    out = np.where(keep, x, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sample_bits(bit_logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(bit_logits, dtype=np.float64) / temperature
    u = rng.random(z.shape)
    return (u < _sigmoid(z)).astype(np.uint8)


def code_table(bits: int) -> np.ndarray:
    """(2^d, d) table; code c has bit j = (c >> j) & 1."""
    c = np.arange(2 ** bits)
    return ((c[:, None] >> np.arange(bits)[None, :]) & 1).astype(np.uint8)


def code_log_probs(bit_logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Log-probabilities of every code under the factorized bit model, (..., 2^d)."""
    z = np.asarray(bit_logits, dtype=np.float64) / temperature
    d = z.shape[-1]
    if d > 12:
        raise ValueError(f"explicit code distribution needs d <= 12, got {d}")
    table = code_table(d).astype(np.float64)
    log_on = -np.logaddexp(0.0, -z)  # log sigmoid(z)
    log_off = -np.logaddexp(0.0, z)
    return log_on @ table.T + log_off @ (1.0 - table).T


def sample_codes(bit_logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw whole tokens from the filtered 2^d distribution; returns bits."""
    d = np.shape(bit_logits)[-1]
    lp = code_log_probs(bit_logits, cfg.temperature)
    probs = np.exp(lp - lp.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    probs = top_k_top_p_filter(probs, min(cfg.top_k, probs.shape[-1]), cfg.top_p)
    flat = probs.reshape(-1, probs.shape[-1])
    cdf = np.cumsum(flat, axis=-1)
    u = rng.random(len(flat))[:, None] * cdf[:, -1:]
    idx = np.minimum((cdf <= u).sum(axis=-1), flat.shape[-1] - 1)
    return code_table(d)[idx].reshape(np.shape(bit_logits))


def _check_schedule(model: UnifiedModel, schedule: ScaleSchedule | None) -> ScaleSchedule:
    trained = model.cfg.schedule
    if schedule is None:
        return trained
    if len(schedule) > len(trained) or not schedule.is_prefix_of(trained):
        raise ValueError(f"schedule {list(schedule.scales)} is longer than or differs from "
                         f"the trained ladder {list(trained.scales)}")
    return schedule


def generate_tokens(model: UnifiedModel, prompts: list[str], gains: np.ndarray, cfg: SamplerConfig,
                    schedule: ScaleSchedule | None = None, rng: np.random.Generator | None = None,
                    und_images: np.ndarray | None = None) -> ScaleTokens:
    """Sample token ladders for a list of prompts, one scale block per step.

    Each step reruns the full sequence with all coarser scales realized, for the
    prompts and (when ``cfg_scale != 1``) for their null-prompt twins.
    """
    schedule = _check_schedule(model, schedule)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape[-1] < len(schedule):
        raise ValueError(f"need {len(schedule)} generation gains, got {gains.shape[-1]}")
    n = len(prompts)
    und = model.cfg.n_und_patches if und_images is not None else None
    guided = cfg.cfg_scale != 1
    d = schedule.bits
    bits: list[np.ndarray] = []
    for k, (h, w) in enumerate(schedule.scales):
        blocks = schedule.block_sizes[: k + 1]
        seqs = [assemble(p, gen_blocks=blocks, und_patches=und) for p in prompts]
        if guided:
            seqs += [assemble("", gen_blocks=blocks, und_patches=und, null_prompt=True) for _ in prompts]
        batch = collate(seqs)
        both = bits if not guided else [np.concatenate([b, b]) for b in bits]
        lat = latents_from_bits(both, gains, schedule, k + 1) if k else np.zeros((len(seqs), 1, d))
        imgs = None
        if und_images is not None:
            imgs = und_images if not guided else np.concatenate([und_images, und_images])
        with no_grad():
            out = model(batch, lat, imgs)
        logits = out.bit_logits.data.astype(np.float64)[:, -h * w:]
        if guided:
            logits = apply_cfg(logits[:n], logits[n:], cfg.cfg_scale)
        if cfg.head == "codes":
            new = sample_codes(logits, cfg, rng)
        else:
            new = sample_bits(logits, cfg.temperature, rng)
        bits.append(new.reshape(n, h, w, d))
    return ScaleTokens(bits, np.broadcast_to(gains[: len(schedule)], (n, len(schedule))).copy())


def generate_image(model: UnifiedModel, tokenizer: TokenizerModel, prompt: str, cfg: SamplerConfig,
                   schedule: ScaleSchedule | None = None) -> tuple[ScaleTokens, np.ndarray]:
    schedule = _check_schedule(model, schedule)
    gains = tokenizer.gains(schedule)
    tokens = generate_tokens(model, [prompt], gains, cfg, schedule)
    image = decode_tokens(tokenizer, tokens, schedule, tokens.gains)
    return tokens.select(0), image[0]


def generate_images(model: UnifiedModel, tokenizer: TokenizerModel, prompts: list[str], cfg: SamplerConfig,
                    schedule: ScaleSchedule | None = None, batch_size: int = 32) -> np.ndarray:
    """Batched generation with one rng stream per call; returns (N, H, W, 3)."""
    schedule = _check_schedule(model, schedule)
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(0, len(prompts), batch_size):
        toks = generate_tokens(model, prompts[i:i + batch_size], tokenizer.gains(schedule), cfg, schedule, rng)
        out.append(decode_tokens(tokenizer, toks, schedule, toks.gains))
    return np.concatenate(out) if out else np.zeros((0,))
