"""Preference pairs and direct preference optimization over image tokens."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import functional as F
from .data import COLORS, CaptionError, SceneSpec, oracle_classify, parse_caption, render
from .imageio import load_image, save_image
from .model import GenBatch, UnifiedModel, generation_batch
from .nn import AdamW
from .tokenizer import ScaleTokens

PROVENANCE = ("policy", "corrupt_color", "corrupt_noise")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    reference: str = "post-sft"
    lr: float = 2e-5
    steps: int = 500

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass
class PreferencePair:
    prompt: str
    winner: np.ndarray
    loser: np.ndarray
    provenance: str
    seed: int
    winner_tokens: ScaleTokens | None = field(default=None, repr=False)
    loser_tokens: ScaleTokens | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.winner.shape != self.loser.shape:
            raise ValueError(f"winner {self.winner.shape} and loser {self.loser.shape} differ in shape")


# ---- log-probabilities and the objective -------------------------------------

def image_token_logprob(model: UnifiedModel, gb: GenBatch) -> Tensor:
    """log pi(y | x) per sequence: summed log-Bernoulli of every target bit at generation slots."""
    out = model(gb.batch, gb.latents, gb.und_images)
    if out.bit_logits is None:
        raise ValueError("batch has no generation slots")
    if out.bit_logits.shape != gb.targets.shape:
        raise ValueError(f"bit logits {out.bit_logits.shape} do not match targets {gb.targets.shape}")
    return -F.bce_with_logits(out.bit_logits, gb.targets).sum(axis=(1, 2))


def dpo_loss(lp_w, lp_l, ref_w, ref_l, beta: float):
    """Mean of -log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l))).

    Accepts floats / arrays (evaluated in float64) or Tensors for the policy terms.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if isinstance(lp_w, Tensor) or isinstance(lp_l, Tensor):
        lp_w, lp_l = (F.cast(t, np.float64) if isinstance(t, Tensor) else Tensor(np.asarray(t, np.float64))
                      for t in (lp_w, lp_l))
        z = ((lp_w - np.asarray(ref_w, np.float64)) - (lp_l - np.asarray(ref_l, np.float64))) * beta
        return F.softplus(-z).mean()
    z = beta * ((np.asarray(lp_w, np.float64) - ref_w) - (np.asarray(lp_l, np.float64) - ref_l))
    return float(np.mean(np.logaddexp(0.0, -z)))


def implicit_reward(lp_policy, lp_ref, beta: float):
    return beta * (np.asarray(lp_policy, np.float64) - np.asarray(lp_ref, np.float64))


def loss_from_rewards(r_w, r_l) -> float:
    return float(np.mean(np.logaddexp(0.0, -(np.asarray(r_w) - np.asarray(r_l)))))


# ---- pair construction -----------------------------------------------------

def corrupt(winner_spec: SceneSpec, winner: np.ndarray, rng: np.random.Generator,
            seed: int) -> tuple[np.ndarray, str]:
    """Wrong colour with probability 0.5, otherwise Gaussian pixel noise (sigma 0.2)."""
    if rng.random() < 0.5:
        others = [c for c in COLORS if c != winner_spec.color]
        spec = SceneSpec(winner_spec.shape, str(rng.choice(others)), winner_spec.cell,
                         winner_spec.background, winner_spec.resolution)
        return render(spec, seed), "corrupt_color"
    noisy = winner + rng.normal(0.0, 0.2, winner.shape)
    return np.clip(noisy, 0.0, 1.0), "corrupt_noise"


def _matches(image: np.ndarray, spec: SceneSpec) -> bool:
    r = oracle_classify(image)
    return (r.color, r.shape, r.cell) == (spec.color, spec.shape, spec.cell)


@dataclass
class PairStats:
    skipped: int = 0
    by_provenance: dict[str, int] = field(default_factory=dict)


def build_preference_pairs(
    prompts: Sequence[str],
    rng: np.random.Generator,
    resolution: int = 32,
    policy_sampler: Callable[[list[str], np.random.Generator], np.ndarray] | None = None,
    oracle_sampler: Callable[[SceneSpec, int], np.ndarray] = render,
) -> tuple[list[PreferencePair], PairStats]:
    """Winner = oracle render of the caption; loser = a policy sample when the
    policy produced a readable image that gets the caption wrong, otherwise a
    corrupted oracle render. Captions that do not parse are skipped and counted."""
    stats = PairStats()
    specs: list[tuple[str, SceneSpec, int]] = []
    for p in prompts:
        seed = int(rng.integers(2 ** 31))
        try:
            bg = str(rng.choice(["white", "black", "gray"]))
            specs.append((p, parse_caption(p, background=bg, resolution=resolution), seed))
        except CaptionError:
            stats.skipped += 1
    samples = policy_sampler([p for p, _, _ in specs], rng) if (policy_sampler and specs) else None
    pairs = []
    for i, (p, spec, seed) in enumerate(specs):
        win = oracle_sampler(spec, seed)
        lose = None
        if samples is not None:
            s = samples[i]
            r = oracle_classify(s)
            if r.known and not _matches(s, spec):
                lose, prov = s, "policy"
        if lose is None:
            lose, prov = corrupt(spec, win, rng, seed)
        stats.by_provenance[prov] = stats.by_provenance.get(prov, 0) + 1
        pairs.append(PreferencePair(p, win, lose, prov, seed))
    return pairs, stats


def write_pairs(pairs: Iterable[PreferencePair], path: str | Path, image_dir: str | Path) -> int:
    """Line-delimited {prompt, winner, loser, provenance, seed}; images go to ``image_dir`` as PNG."""
    path, image_dir = Path(path), Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w") as fh:
        for i, pair in enumerate(pairs):
            w = save_image(pair.winner, image_dir / f"{i:06d}_w.png")
            l = save_image(pair.loser, image_dir / f"{i:06d}_l.png")
            rec = {"prompt": pair.prompt, "winner": str(w), "loser": str(l),
                   "provenance": pair.provenance, "seed": pair.seed}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n


def read_pairs(path: str | Path) -> list[PreferencePair]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(PreferencePair(d["prompt"], load_image(d["winner"]), load_image(d["loser"]),
                                          d["provenance"], int(d["seed"])))
    return out


# ---- training ----------------------------------------------------------------

def check_reference(model: UnifiedModel, ref: UnifiedModel) -> None:
    if model.cfg.to_json() != ref.cfg.to_json():
        raise ValueError("reference and policy models have different configurations")


def pair_batches(model: UnifiedModel, pairs: Sequence[PreferencePair], gains: np.ndarray) -> tuple[GenBatch, GenBatch]:
    prompts = [p.prompt for p in pairs]
    w = ScaleTokens([np.concatenate([p.winner_tokens.bits[k] for p in pairs]) for k in range(len(pairs[0].winner_tokens))])
    l = ScaleTokens([np.concatenate([p.loser_tokens.bits[k] for p in pairs]) for k in range(len(pairs[0].loser_tokens))])
    return generation_batch(model, prompts, w, gains), generation_batch(model, prompts, l, gains)


def sequence_logprobs(model: UnifiedModel, pairs: Sequence[PreferencePair], gains: np.ndarray,
                      batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(winner, loser) log-probabilities without gradient."""
    lw, ll = [], []
    with no_grad():
        for i in range(0, len(pairs), batch_size):
            gw, gl = pair_batches(model, pairs[i:i + batch_size], gains)
            lw.append(image_token_logprob(model, gw).data.astype(np.float64))
            ll.append(image_token_logprob(model, gl).data.astype(np.float64))
    return np.concatenate(lw), np.concatenate(ll)


@dataclass
class DpoStepResult:
    loss: float
    margin: float  # mean implicit-reward margin r(w) - r(l)
    accuracy: float  # fraction of pairs with a positive margin
    grad_norm: float


def dpo_train_step(model: UnifiedModel, ref_logprobs: tuple[np.ndarray, np.ndarray], pairs: Sequence[PreferencePair],
                   gains: np.ndarray, cfg: DpoConfig, optimizer: AdamW, lr: float | None = None) -> DpoStepResult:
    """One gradient step of the preference loss on a batch of pairs with precomputed reference log-probs."""
    ref_w, ref_l = (np.asarray(r, np.float64) for r in ref_logprobs)
    if len(ref_w) != len(pairs) or len(ref_l) != len(pairs):
        raise ValueError("reference log-probabilities do not match the batch")
    gw, gl = pair_batches(model, pairs, gains)
    lw = image_token_logprob(model, gw)
    ll = image_token_logprob(model, gl)
    loss = dpo_loss(lw, ll, ref_w, ref_l, cfg.beta)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite preference loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    norm = optimizer.step(lr)
    m = implicit_reward(lw.data, ref_w, cfg.beta) - implicit_reward(ll.data, ref_l, cfg.beta)
    return DpoStepResult(loss.item(), float(np.mean(m)), float(np.mean(m > 0)), norm)


def held_out_margins(model: UnifiedModel, ref: UnifiedModel, pairs: Sequence[PreferencePair], gains: np.ndarray,
                     beta: float) -> np.ndarray:
    check_reference(model, ref)
    pw, pl = sequence_logprobs(model, pairs, gains)
    rw, rl = sequence_logprobs(ref, pairs, gains)
    return implicit_reward(pw, rw, beta) - implicit_reward(pl, rl, beta)
