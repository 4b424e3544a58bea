"""Held-out measurements of a frozen model: generation, understanding,
reconstruction, preference margins and editing."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import no_grad
from ..data import Record, make_corpus, oracle_classify, parse_instruction
from ..dpo import PreferencePair, held_out_margins
from ..imageio import psnr
from ..model import UnifiedModel
from ..sampling import SamplerConfig, generate_tokens
from ..sequence import assemble, collate, default_vocab
from ..tokenizer import LO_SCHEDULE, ScaleSchedule, TokenizerModel, decode_tokens, encode_images

SPLITS = ("generation", "understanding", "reconstruction", "preference", "editing", "all")


def eval_prompts(n: int, seed: int) -> list[str]:
    return [r.text for r in make_corpus("t2i", n, seed)]


def generation_accuracy(model: UnifiedModel, tokenizer: TokenizerModel, prompts: list[str], n_seeds: int,
                        sampler: SamplerConfig, schedule: ScaleSchedule | None = None,
                        batch_size: int = 32) -> dict[str, float]:
    """Oracle attribute accuracy of images generated for each prompt under ``n_seeds`` seeds."""
    from ..data import parse_caption

    schedule = schedule or model.cfg.schedule
    gains = tokenizer.gains(schedule)
    hits = {"color": 0, "shape": 0, "cell": 0, "all": 0, "readable": 0}
    total = 0
    for s in range(n_seeds):
        rng = np.random.default_rng([sampler.seed, s])
        for i in range(0, len(prompts), batch_size):
            chunk = prompts[i:i + batch_size]
            toks = generate_tokens(model, chunk, gains, sampler, schedule, rng)
            imgs = decode_tokens(tokenizer, toks, schedule, toks.gains)
            for p, img in zip(chunk, imgs):
                spec = parse_caption(p)
                r = oracle_classify(img)
                ok = {"color": r.color == spec.color, "shape": r.shape == spec.shape, "cell": r.cell == spec.cell}
                for k, v in ok.items():
                    hits[k] += v
                hits["all"] += all(ok.values())
                hits["readable"] += r.known
                total += 1
    return {k: v / total for k, v in hits.items()}


def qa_accuracy(model: UnifiedModel, records: list[Record], batch_size: int = 64) -> float:
    """Exact match of the greedy one-word answer."""
    if not records:
        raise ValueError("question answering needs a non-empty split")
    vocab = default_vocab()
    correct = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        seqs = []
        for r in chunk:
            s = assemble(r.text, und_patches=model.cfg.n_und_patches)
            # drop the eos so the last position predicts the first answer token
            s.ids, s.segments, s.scale, s.loss_mask = s.ids[:-1], s.segments[:-1], s.scale[:-1], s.loss_mask[:-1]
            seqs.append(s)
        batch = collate(seqs)
        imgs = np.stack([r.image() for r in chunk])
        with no_grad():
            out = model(batch, None, imgs)
            logits = model.text_logits(out.hidden).data[:, -1]
        pred = logits[:, : vocab.n_text].argmax(axis=-1)
        for r, t in zip(chunk, pred):
            correct += vocab.decode([int(t)]) == r.answer
    return correct / len(records)


def reconstruction_psnr(tokenizer: TokenizerModel, images: np.ndarray, schedule: ScaleSchedule) -> float:
    toks = encode_images(tokenizer, images, schedule)
    rec = decode_tokens(tokenizer, toks, schedule, tokenizer.gains(schedule))
    return float(np.mean([psnr(a, b) for a, b in zip(rec, images)]))


def edit_accuracy(model: UnifiedModel, tokenizer: TokenizerModel, records: list[Record], sampler: SamplerConfig,
                  batch_size: int = 32) -> float:
    """Fraction of edited outputs on which the oracle reads the instructed attribute value."""
    schedule = LO_SCHEDULE
    gains = tokenizer.gains(schedule)
    rng = np.random.default_rng(sampler.seed)
    hits = 0
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        src = np.stack([r.image() for r in chunk])
        toks = generate_tokens(model, [r.text for r in chunk], gains, sampler, schedule, rng, und_images=src)
        imgs = decode_tokens(tokenizer, toks, schedule, toks.gains)
        for r, img in zip(chunk, imgs):
            attr, value = parse_instruction(r.text)
            hits += getattr(oracle_classify(img), attr) == value
    return hits / len(records)


def preference_margin_rate(model: UnifiedModel, ref: UnifiedModel, pairs: list[PreferencePair],
                           gains: np.ndarray, beta: float) -> float:
    m = held_out_margins(model, ref, pairs, gains, beta)
    return float(np.mean(m > 0))


def evaluate(model: UnifiedModel, tokenizer: TokenizerModel, split: str = "all", cfg=None,
             sampler: SamplerConfig | None = None, ref: UnifiedModel | None = None,
             pairs: list[PreferencePair] | None = None, beta: float = 0.1) -> dict[str, float]:
    """Report dict; every value is a finite float. ``cfg`` is an EvalConfig."""
    from .config import EvalConfig

    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    cfg = cfg or EvalConfig()
    sampler = sampler or SamplerConfig(seed=cfg.seed)
    report: dict[str, float] = {}
    want = (lambda s: split in (s, "all"))
    sched = model.cfg.schedule
    res = 4 * sched.base[0]
    if want("generation"):
        prompts = eval_prompts(cfg.n_prompts, cfg.seed)
        for k, v in generation_accuracy(model, tokenizer, prompts, cfg.n_seeds, sampler, sched).items():
            report[f"gen_{k}_acc"] = v
    if want("understanding"):
        report["qa_acc"] = qa_accuracy(model, make_corpus("understanding_qa", cfg.n_qa, cfg.seed))
    if want("reconstruction"):
        imgs = np.stack([r.image() for r in make_corpus("t2i", cfg.n_recon, cfg.seed + 1, resolution=res)])
        report["recon_psnr"] = reconstruction_psnr(tokenizer, imgs, sched)
    if want("editing"):
        report["edit_acc"] = edit_accuracy(model, tokenizer, make_corpus("editing", cfg.n_edit, cfg.seed), sampler)
    if want("preference") and ref is not None and pairs:
        report["dpo_margin_rate"] = preference_margin_rate(model, ref, pairs, tokenizer.gains(sched), beta)
    bad = {k: v for k, v in report.items() if not math.isfinite(v)}
    if bad:
        raise FloatingPointError(f"non-finite evaluation results {bad}")
    return report
