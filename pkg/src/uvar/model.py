"""The unified backbone: causal LLM, understanding path, generation projectors,
block-causal visual decoder, text head and per-bit image head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .masks import build_block_causal_mask, padded_causal_mask
from .nn import Block, Conv2d, LayerNorm, Linear, Module, trunc_normal
from .sequence import Batch, assemble, collate
from .tokenizer import ScaleSchedule, ScaleTokens, partial_inputs

GROUPS = ("llm", "und_encoder", "und_projector", "gen_in_proj", "gen_out_proj", "visual_decoder")


class NonFiniteActivation(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers_llm: int = 4
    n_heads: int = 4
    d_visdec: int = 128
    n_layers_visdec: int = 4
    vocab_size: int = 0
    bits: int = 8
    schedule: ScaleSchedule = None  # type: ignore[assignment]
    dropout: float = 0.0
    max_text_len: int = 64
    und_resolution: int = 32
    patch: int = 8
    mlp_ratio: int = 4
    img_loss_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.schedule is None:
            from .tokenizer import LO_SCHEDULE

            self.schedule = LO_SCHEDULE
        if isinstance(self.schedule, dict):
            self.schedule = ScaleSchedule.from_json(self.schedule)
        if self.vocab_size <= 0:
            from .sequence import default_vocab

            self.vocab_size = default_vocab().size
        for name in ("d_model", "n_layers_llm", "n_heads", "d_visdec", "n_layers_visdec", "bits", "max_text_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads or self.d_visdec % self.n_heads:
            raise ValueError(f"d_model {self.d_model} / d_visdec {self.d_visdec} not divisible by n_heads {self.n_heads}")
        if self.schedule.bits != self.bits:
            raise ValueError(f"schedule carries {self.schedule.bits} bits, config says {self.bits}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_und_patches(self) -> int:
        return (self.und_resolution // self.patch) ** 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["schedule"] = ScaleSchedule.from_json(d["schedule"])
        return cls(**d)


class LLM(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        d = cfg.d_model
        self.tok_emb = Tensor(trunc_normal(rng, (cfg.vocab_size, d), dtype=dtype), requires_grad=True)
        self.pos_emb = Tensor(trunc_normal(rng, (cfg.max_text_len, d), dtype=dtype), requires_grad=True)
        self.blocks = [Block(rng, d, cfg.n_heads, cfg.mlp_ratio, dtype) for _ in range(cfg.n_layers_llm)]
        self.ln_f = LayerNorm(d, dtype)
        self.text_head = Linear(rng, d, cfg.vocab_size, bias=False, dtype=dtype)


class Projector(Module):
    """Two linear layers with a GELU between; the output layer starts at zero unless ``zero_out`` is off."""

    def __init__(self, rng, din: int, dhid: int, dout: int, dtype, zero_out: bool = True, std: float = 0.02):
        self.fc1 = Linear(rng, din, dhid, std=std, dtype=dtype)
        self.fc2 = Linear(rng, dhid, dout, std=std, zero=zero_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class GenInput(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        d = cfg.d_model
        n_scales = len(cfg.schedule)
        self.start = Tensor(trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
        self.scale_emb = Tensor(trunc_normal(rng, (n_scales, d), dtype=dtype), requires_grad=True)
        self.pos_emb = Tensor(trunc_normal(rng, (cfg.schedule.n_tokens, d), dtype=dtype), requires_grad=True)
        self.proj = Projector(rng, cfg.bits, d, d, dtype)


class VisualDecoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        dv = cfg.d_visdec
        self.pos_emb = Tensor(trunc_normal(rng, (cfg.schedule.n_tokens, dv), dtype=dtype), requires_grad=True)
        self.blocks = [Block(rng, dv, cfg.n_heads, cfg.mlp_ratio, dtype) for _ in range(cfg.n_layers_visdec)]
        self.ln_f = LayerNorm(dv, dtype)
        self.ivc_head = Linear(rng, dv, cfg.bits, dtype=dtype)


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, L, d_model) after the final norm
    bit_logits: Tensor | None  # (B, G, bits)


class UnifiedModel(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.llm = LLM(rng, cfg, dtype)
        # fan-in scaling on the understanding path: at 0.02 the image signal is too faint to
        # compete with the answer prior and question answering never leaves chance
        self.und_encoder = Conv2d(rng, 3, d, cfg.patch, stride=cfg.patch, dtype=dtype)
        self.und_projector = Projector(rng, d, d, d, dtype, zero_out=False, std=1.0 / math.sqrt(d))
        self.gen_in_proj = GenInput(rng, cfg, dtype)
        self.gen_out_proj = Projector(rng, d, cfg.d_visdec, cfg.d_visdec, dtype)
        self.visual_decoder = VisualDecoder(rng, cfg, dtype)
        self.frozen: set[str] = set()

    # ---- parameter bookkeeping ------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for g in GROUPS:
            yield from getattr(self, g).named_parameters(f"{prefix}{g}.")

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        out: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, p in self.named_parameters():
            out[name.split(".", 1)[0]][name] = p
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if n.split(".", 1)[0] not in self.frozen}

    # ---- forward ---------------------------------------------------------
    def embed(self, batch: Batch, gen_latents: np.ndarray | None = None, und_images: np.ndarray | None = None) -> Tensor:
        cfg = self.cfg
        x = F.embedding(self.llm.tok_emb, batch.ids)
        nongen = batch.segments != 2
        pos = np.where(nongen, batch.pos_ids, 0)
        if pos.max() >= cfg.max_text_len:
            raise ValueError(f"text part of the sequence exceeds max_text_len {cfg.max_text_len}")
        pos_term = F.embedding(self.llm.pos_emb, pos) * nongen[..., None].astype(self.dtype)
        if batch.und_positions is not None:
            if und_images is None:
                raise ValueError("batch declares an understanding image but none was provided")
            x = F.place_rows(x, batch.und_positions, self.encode_understanding(und_images))
        elif und_images is not None:
            raise ValueError("understanding image given for a batch without understanding slots")
        if batch.gen_positions is not None:
            if gen_latents is None:
                raise ValueError("batch declares generation slots but no generation inputs were provided")
            x = F.place_rows(x, batch.gen_positions, self.embed_generation(gen_latents, batch.gen_scale))
        return x + pos_term

    def encode_understanding(self, images: np.ndarray) -> Tensor:
        imgs = Tensor(np.asarray(images, dtype=self.dtype) - 0.5)
        p = self.und_encoder(imgs)
        b, h, w, d = p.shape
        return self.und_projector(p.reshape(b, h * w, d))

    def embed_generation(self, latents: np.ndarray, gen_scale: np.ndarray) -> Tensor:
        """(B, G, bits) partial reconstructions -> (B, G, d_model); scale-0 slots use the start vector."""
        gi = self.gen_in_proj
        g = latents.shape[1]
        if len(gen_scale) != g:
            raise ValueError(f"generation inputs cover {g} slots, layout has {len(gen_scale)}")
        e = gi.proj(Tensor(np.asarray(latents, dtype=self.dtype)))
        first = (gen_scale == 0)[None, :, None]
        e = F.where(first, gi.start, e)
        return e + F.embedding(gi.scale_emb, gen_scale) + gi.pos_emb[:g]

    def llm_forward(self, x: Tensor, batch: Batch) -> Tensor:
        allow = padded_causal_mask(batch.key_valid)
        for i, blk in enumerate(self.llm.blocks):
            x = blk(x, allow)
            if not np.all(np.isfinite(x.data)):
                raise NonFiniteActivation(f"non-finite activation after LLM layer {i}")
        return self.llm.ln_f(x)

    def text_logits(self, hidden: Tensor) -> Tensor:
        return self.llm.text_head(hidden)

    def visual_decoder_forward(self, hidden: Tensor, batch: Batch) -> Tensor:
        blocks = np.bincount(batch.gen_scale).tolist()
        if any(b == 0 for b in blocks):
            raise ValueError(f"generation layout is not contiguous per scale: {blocks}")
        sched = self.cfg.schedule.block_sizes
        if blocks[:-1] != sched[: len(blocks) - 1] or blocks[-1] != sched[len(blocks) - 1]:
            raise ValueError(f"generation block layout {blocks} is not a prefix of the schedule {sched}")
        vd = self.visual_decoder
        h = self.gen_out_proj(F.gather_rows(hidden, batch.gen_positions))
        g = h.shape[1]
        h = h + vd.pos_emb[:g]
        allow = build_block_causal_mask(blocks)
        for i, blk in enumerate(vd.blocks):
            h = blk(h, allow)
            if not np.all(np.isfinite(h.data)):
                raise NonFiniteActivation(f"non-finite activation after visual decoder layer {i}")
        return vd.ivc_head(vd.ln_f(h))

    def forward(self, batch: Batch, gen_latents: np.ndarray | None = None,
                und_images: np.ndarray | None = None) -> ForwardOutput:
        x = self.embed(batch, gen_latents, und_images)
        hidden = self.llm_forward(x, batch)
        bits = self.visual_decoder_forward(hidden, batch) if batch.gen_positions is not None else None
        return ForwardOutput(hidden, bits)

    __call__ = forward

    def generation_latents(self, tokens: ScaleTokens, gains: np.ndarray, n_scales: int | None = None) -> np.ndarray:
        """Teacher-forcing inputs (B, G, bits) for a batch of token ladders."""
        sched = self.cfg.schedule
        n_scales = len(sched) if n_scales is None else n_scales
        return latents_from_bits(tokens.bits[: n_scales], gains, sched, n_scales)


def latents_from_bits(bits: list[np.ndarray], gains: np.ndarray, schedule: ScaleSchedule, n_scales: int) -> np.ndarray:
    """Block 0 is zeros (replaced by the start vector); block k holds the
    reconstruction from scales < k on the k-th grid."""
    b = bits[0].shape[0]
    d = schedule.bits
    parts = [np.zeros((b, schedule.block_sizes[0], d))]
    if n_scales > 1:
        ins = partial_inputs(bits[: n_scales - 1], gains, schedule)
        for k in range(1, n_scales):
            x = ins[k - 1]
            parts.append(x.reshape(b, -1, d))
    return np.concatenate(parts, axis=1)


@dataclass
class GenBatch:
    """Teacher-forced image-generation batch: sequences, inputs and bit targets."""

    batch: Batch
    latents: np.ndarray  # (B, G, bits)
    targets: np.ndarray  # (B, G, bits)
    und_images: np.ndarray | None = None


def generation_batch(model: UnifiedModel, prompts: list[str], tokens: ScaleTokens, gains: np.ndarray,
                     und_images: np.ndarray | None = None, null_prompt: np.ndarray | None = None,
                     schedule: ScaleSchedule | None = None) -> GenBatch:
    """Assemble prompts with a full generation ladder (the model's, or a prefix of it);
    ``null_prompt`` marks rows whose prompt is dropped."""
    sched = model.cfg.schedule if schedule is None else schedule
    if not sched.is_prefix_of(model.cfg.schedule):
        raise ValueError(f"schedule {list(sched.scales)} is not a prefix of the model ladder")
    if len(tokens) != len(sched):
        raise ValueError(f"tokens carry {len(tokens)} scales, the schedule has {len(sched)}")
    und = model.cfg.n_und_patches if und_images is not None else None
    drop = np.zeros(len(prompts), bool) if null_prompt is None else np.asarray(null_prompt, bool)
    seqs = [assemble(p, gen_blocks=sched.block_sizes, und_patches=und, null_prompt=bool(z))
            for p, z in zip(prompts, drop)]
    latents = latents_from_bits(tokens.bits, gains, sched, len(sched))
    return GenBatch(collate(seqs), latents, tokens.flat_bits(), und_images)


# ---- losses ----------------------------------------------------------------

def ivc_loss(bit_logits: Tensor, target_bits: np.ndarray) -> Tensor:
    """Mean over positions of the summed per-bit binary cross-entropy."""
    per_bit = F.bce_with_logits(bit_logits, np.asarray(target_bits))
    n_pos = int(np.prod(bit_logits.shape[:-1]))
    return per_bit.sum() * (1.0 / n_pos)


def text_ce_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    return F.cross_entropy(logits, targets, mask)


# ---- freezing --------------------------------------------------------------

def apply_freeze(model: UnifiedModel, trainable: Iterable[str]) -> UnifiedModel:
    """Make only the named groups trainable; everything else is frozen."""
    trainable = set(trainable)
    unknown = trainable - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}; valid groups are {GROUPS}")
    model.frozen = set(GROUPS) - trainable
    for name, p in model.named_parameters():
        p.requires_grad = name.split(".", 1)[0] in trainable
        p.grad = None
    return model


# ---- schedule extension ----------------------------------------------------

def extend_model_schedule(model: UnifiedModel, new: ScaleSchedule, seed: int = 1) -> UnifiedModel:
    """Grow scale/position tables for an appended finer scale; existing rows are kept bit-exactly."""
    old = model.cfg.schedule
    if not old.is_prefix_of(new) or len(new) != len(old) + 1:
        raise ValueError(f"{list(new.scales)} is not a one-scale extension of {list(old.scales)}")
    rng = np.random.default_rng([model.cfg.seed, seed, len(new)])
    extra = new.n_tokens - old.n_tokens
    gi, vd = model.gen_in_proj, model.visual_decoder

    def grow(t: Tensor, rows: int) -> Tensor:
        fresh = trunc_normal(rng, (rows, t.shape[1]), dtype=t.dtype)
        return Tensor(np.concatenate([t.data, fresh], axis=0), requires_grad=t.requires_grad)

    gi.scale_emb = grow(gi.scale_emb, 1)
    gi.pos_emb = grow(gi.pos_emb, extra)
    vd.pos_emb = grow(vd.pos_emb, extra)
    model.cfg.schedule = new
    return model
