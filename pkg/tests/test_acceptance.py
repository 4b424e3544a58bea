"""Acceptance suite. Each test carries a ``criterion(n)`` marker; a one-line verdict per
criterion is printed at the end of the session."""

import json
import math
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest

from conftest import BASELINES, bind, tiny_model, tiny_run_dict
from test_dpo import GAINS, SCHED, _pairs
from test_model import mixed_batch, random_tokens, total_loss
from test_sampling import SCHED as SAMPLER_SCHED, _tiny_tokenizer
from test_sequence import _seq
from uvar.autodiff import Tensor, gradcheck, no_grad
from uvar.dpo import dpo_loss, image_token_logprob, implicit_reward, pair_batches, sequence_logprobs
from uvar.masks import build_block_causal_mask, build_causal_mask
from uvar.model import extend_model_schedule, generation_batch, ivc_loss
from uvar.nn import attention
from uvar.pipeline.config import STAGES, config_from_dict
from uvar.pipeline.metrics import read_metrics, series
from uvar.pipeline.run import Pipeline, load_for_inference
from uvar.pipeline.state import snapshot
from uvar.sampling import SamplerConfig, apply_cfg, generate_image, top_k_top_p_filter
from uvar.data import COLORS, QUESTIONS, make_corpus
from uvar.sequence import ParsedSequence, SequenceError, assemble, default_vocab, parse
from uvar.tokenizer import ScaleSchedule, _resize, bits_to_unit, quantize_scales, quantize_unit, reconstruct

LN2 = math.log(2)
SP = default_vocab().special


# ---- 1 -------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_analytic_dpo_values(note):
    t0 = time.perf_counter()
    lp = np.random.default_rng(0).normal(-200, 50, 64)
    at_ref = dpo_loss(lp, lp[::-1], lp, lp[::-1], 0.1)
    getcontext().prec = 50
    oracle = float((1 + (-Decimal("0.2")).exp()).ln())  # -ln sigmoid(0.1 * (1 - (-1)))
    example = dpo_loss(1.0, -1.0, 0.0, 0.0, 0.1)
    elapsed = time.perf_counter() - t0
    note(f"|L - ln2| = {abs(at_ref - LN2):.1e}, example {example:.12f} vs {oracle:.12f}, {elapsed * 1e3:.1f} ms")
    assert abs(at_ref - LN2) <= 1e-9
    assert abs(example - oracle) <= 1e-9
    assert elapsed < 1.0


# ---- 2 -------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_reward_form_matches_loss(note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        lw, ll, rw, rl = rng.normal(-100, 40, 4)
        beta = float(rng.uniform(0.01, 1.0))
        margin = implicit_reward(lw, rw, beta) - implicit_reward(ll, rl, beta)
        reward_form = -math.log(1.0 / (1.0 + math.exp(-margin)))
        worst = max(worst, abs(reward_form - dpo_loss(lw, ll, rw, rl, beta)))
    elapsed = time.perf_counter() - t0
    note(f"max diff {worst:.1e} over 100 instances, {elapsed * 1e3:.1f} ms")
    assert worst <= 1e-12 and elapsed < 1.0


# ---- 3 -------------------------------------------------------------------

GRADCHECK_SECONDS: dict[str, float] = {}  # the two checks share one budget

@pytest.mark.criterion(3)
def test_c3_gradcheck_text_and_image_loss(note):
    t0 = time.perf_counter()
    model = tiny_model()
    batch, latents, targets, imgs = mixed_batch(model, np.random.default_rng(0))
    names, params = zip(*model.named_parameters())

    def f(*ws):
        bind(model, names, ws)
        return total_loss(model, batch, latents, targets, imgs)

    rep = gradcheck(f, [p.data for p in params], rel_tol=1e-4)
    elapsed = time.perf_counter() - t0
    GRADCHECK_SECONDS["ce_ivc"] = elapsed
    note(f"CE+IVC, {model.num_parameters()} params: passed={rep.passed}, {elapsed:.0f} s")
    assert model.num_parameters() <= 10_000
    assert rep.passed, rep
    assert sum(GRADCHECK_SECONDS.values()) < 120


@pytest.mark.criterion(3)
def test_c3_gradcheck_dpo_through_token_logprob(note):
    t0 = time.perf_counter()
    model = tiny_model(schedule=SCHED)
    ref = snapshot(model)
    pairs = _pairs(np.random.default_rng(1), 2)
    rw, rl = sequence_logprobs(ref, pairs, GAINS)
    rw, rl = rw + 0.3, rl - 0.2  # move away from the symmetric point
    gw, gl = pair_batches(model, pairs, GAINS)
    # groups off the image-token path must get exactly zero gradient; the rest go through finite differences
    off_path = ("und_encoder.", "und_projector.", "llm.text_head.")
    loss = dpo_loss(image_token_logprob(model, gw), image_token_logprob(model, gl), rw, rl, 0.1)
    loss.backward()
    stray = [n for n, p in model.named_parameters() if n.startswith(off_path) and p.grad is not None and p.grad.any()]
    assert not stray, stray
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if not n.startswith(off_path)])

    def f(*ws):
        bind(model, names, ws)
        return dpo_loss(image_token_logprob(model, gw), image_token_logprob(model, gl), rw, rl, 0.1)

    rep = gradcheck(f, [p.data for p in params], rel_tol=1e-4)
    elapsed = time.perf_counter() - t0
    GRADCHECK_SECONDS["dpo"] = elapsed
    note(f"DPO, {sum(p.data.size for p in params)} checked params: passed={rep.passed}, {elapsed:.0f} s")
    assert rep.passed, rep
    assert sum(GRADCHECK_SECONDS.values()) < 120


# ---- 4 -------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c4_quantizer(note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    _, q = quantize_unit(rng.standard_normal((1000, 8)) * rng.uniform(0.1, 10, (1000, 1)))
    norm_err = float(np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0)))
    sched = ScaleSchedule(((1, 1), (2, 2), (4, 4)), bits=8)
    held = 0
    for seed in range(100):
        f = np.random.default_rng(seed).standard_normal((4, 4, 8))
        toks, acc = quantize_scales(f, sched)
        before = sum(_resize(g * bits_to_unit(b), sched.base) for b, g in zip(toks.bits[:-1], toks.gains[:-1]))
        held += np.linalg.norm(f - acc) <= np.linalg.norm(f - before)
    lo = ScaleSchedule(((1, 1), (2, 2), (4, 4), (8, 8)), bits=8)
    exact = 0
    for seed in range(20):
        toks, acc = quantize_scales(np.random.default_rng(seed).standard_normal((8, 8, 8)), lo)
        exact += np.array_equal(reconstruct(toks, lo), acc)
    elapsed = time.perf_counter() - t0
    note(f"norm err {norm_err:.1e}, residual non-increase {held}/100, round trip exact {exact}/20, {elapsed:.1f} s")
    assert norm_err <= 1e-12 and held == 100 and exact == 20 and elapsed < 30


# ---- 5 -------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c5_masks(note):
    t0 = time.perf_counter()
    same = all(np.array_equal(build_causal_mask(n), build_block_causal_mask([1] * n)) for n in range(1, 65))
    sizes = [1, 4, 16]
    block = np.repeat(np.arange(len(sizes)), sizes)
    enumerated = sum(int(block[j] <= block[i]) for i in range(len(block)) for j in range(len(block)))
    count = int(build_block_causal_mask(sizes).sum())
    rng = np.random.default_rng(5)
    allow = build_block_causal_mask(sizes)
    q, k, v = (rng.standard_normal((2, 2, 21, 8)) for _ in range(3))
    base = attention(Tensor(q), Tensor(k), Tensor(v), allow).data
    k2, v2 = k.copy(), v.copy()
    k2[..., 5:, :] += 100 * rng.standard_normal((2, 2, 16, 8))
    v2[..., 5:, :] += 100 * rng.standard_normal((2, 2, 16, 8))
    moved = attention(Tensor(q), Tensor(k2), Tensor(v2), allow).data
    leak = float(np.max(np.abs(moved[..., :5, :] - base[..., :5, :])))
    elapsed = time.perf_counter() - t0
    note(f"unit blocks = causal for n<=64: {same}; pairs {count} (enumerated {enumerated}); "
         f"masked-key drift {leak:.1e}; {elapsed:.1f} s")
    assert same and count == enumerated == 357 and leak <= 1e-12 and elapsed < 30


# ---- 6 -------------------------------------------------------------------

MALFORMED = [
    [SP.bos, 0, SP.image_gen_start, SP.image_gen_slot, SP.eos],
    [SP.bos, SP.image_gen_start, SP.image_gen_start, SP.image_gen_slot, SP.image_gen_end, SP.image_gen_end, SP.eos],
    [SP.bos, SP.image_und_start, SP.image_gen_start, SP.image_gen_end, SP.image_und_end, SP.eos],
    [SP.bos, SP.image_gen_start, SP.image_gen_slot, SP.image_und_end, SP.eos],
    [SP.bos, SP.image_gen_end, SP.eos],
    [SP.bos, SP.image_und_slot, SP.eos],
    [SP.bos, 0, SP.eos, 0],
    [0, SP.eos],
    [SP.bos, 0],
]


PROMPTS = [r.text for r in make_corpus("t2i", 200, 6)] + list(QUESTIONS.values()) + [""]
ANSWERS = list(COLORS) + ["circle", "top", "blue square"]


def _random_case(rng) -> ParsedSequence:
    prompt = PROMPTS[rng.integers(len(PROMPTS))]
    response = ANSWERS[rng.integers(len(ANSWERS))] if rng.random() < 0.5 else None
    blocks = tuple(int(b) for b in rng.integers(1, 17, rng.integers(1, 5))) if rng.random() < 0.5 else None
    und = int(rng.integers(1, 21)) if rng.random() < 0.5 else None
    return ParsedSequence(prompt, response, blocks, und)


@pytest.mark.criterion(6)
def test_c6_mixed_modal_round_trip(note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    ok = 0
    for _ in range(1000):
        c = _random_case(rng)
        s = assemble(c.prompt, c.response, c.gen_blocks, c.und_patches)
        ok += parse(s) == c
    rejected = 0
    for ids in MALFORMED:
        try:
            parse(_seq(ids))
        except SequenceError:
            rejected += 1
    elapsed = time.perf_counter() - t0
    note(f"round trips {ok}/1000, malformed rejected {rejected}/{len(MALFORMED)}, {elapsed:.1f} s")
    assert ok == 1000 and rejected == len(MALFORMED) and elapsed < 10


# ---- 7 -------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_c7_sampling(note):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    c, u = rng.standard_normal((100, 256)) * 5, rng.standard_normal((100, 256)) * 5
    cfg_exact = np.array_equal(apply_cfg(c, u, 1.0), c)
    probs = rng.dirichlet(np.full(256, 0.2), size=100)
    idem = 0
    for x in probs:
        for k, p in ((256, 0.95), (40, 0.9), (5, 0.5), (256, 1.0)):
            once = top_k_top_p_filter(x, k, p)
            idem += np.array_equal(top_k_top_p_filter(once, k, p), once)
    model, tok = tiny_model(schedule=SAMPLER_SCHED), _tiny_tokenizer()
    repro = 0
    for head in ("codes", "bits"):
        cfg = SamplerConfig(seed=5, top_k=8, head=head)
        _, a = generate_image(model, tok, "a red square in the center", cfg)
        _, b = generate_image(model, tok, "a red square in the center", cfg)
        repro += np.array_equal(a, b)
    elapsed = time.perf_counter() - t0
    note(f"cfg s=1 exact {cfg_exact}, filter idempotent {idem}/400, reproducible heads {repro}/2, {elapsed:.1f} s")
    assert cfg_exact and idem == 400 and repro == 2 and elapsed < 30


# ---- 8 -------------------------------------------------------------------

CHANCE = 1 / 6
THRESHOLD = CHANCE + 3 * math.sqrt(CHANCE * (1 - CHANCE) / 256)
TOLERANCE = {"recon_psnr": 0.5}  # dB; every other locked value is a rate, held to within 0.05
BUDGET = 60 * 60


def _results(pipe) -> dict[str, float]:
    extra = load_for_inference(pipe.checkpoint_path(STAGES[-1])).extra
    return {k[len("result."):]: float(v) for k, v in extra.items() if k.startswith("result.")}


def _baselines() -> dict[str, float]:
    if not BASELINES.exists():
        pytest.fail(f"no baselines at {BASELINES}; record them with scripts/run_curriculum.py --record-baselines")
    return json.loads(BASELINES.read_text())


@pytest.mark.criterion(8)
def test_c8_curriculum_completes_within_budget(desk_run, note):
    pipe, info = desk_run
    total = sum(info["seconds"].values())
    steps = sum(pipe.cfg.stages[s].steps + pipe.cfg.stages[s].align_steps for s in STAGES)
    note(f"7 stages, {steps} steps, {total / 60:.1f} min")
    assert all(pipe.checkpoint_path(s).exists() for s in STAGES)
    assert total <= BUDGET


@pytest.mark.criterion(8)
def test_c8_color_accuracy_after_low_res_sft_beats_chance(desk_run, note):
    pipe, _ = desk_run
    acc = _results(pipe)["stage3_sft_lo.gen_color_acc"]
    n = pipe.cfg.eval.n_prompts * pipe.cfg.eval.n_seeds
    note(f"color accuracy {acc:.3f} over {n} samples, threshold {THRESHOLD:.4f}")
    assert n == 256
    assert acc > THRESHOLD


@pytest.mark.criterion(8)
def test_c8_final_accuracies_match_baselines(desk_run, note):
    pipe, _ = desk_run
    got, base = _results(pipe), _baselines()
    drift = []
    for key, want in sorted(base.items()):
        if key == "stage_edit.edit_margin":  # checked under criterion 11
            continue
        have = got.get(key, math.nan)
        if not have >= want - TOLERANCE.get(key.split(".", 1)[1], 0.05):
            drift.append(f"{key}: {have:.4f} vs {want:.4f}")
    note(f"{len(drift)} of {len(base) - 1} locked values drifted")
    assert not drift, drift


def smoothed(values, window=3):
    """Trailing mean over ``window`` logged windows."""
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")


@pytest.mark.criterion(8)
@pytest.mark.parametrize("stage", ["stage3_sft_lo", "stage3_sft_hi"])
def test_c8_smoothed_sft_loss_does_not_rise_in_final_quarter(desk_run, note, stage):
    pipe, _ = desk_run
    steps, values = series(pipe.run_dir / "metrics.jsonl", stage, "loss")
    sm, st = smoothed(values), np.asarray(steps[2:])
    tail = sm[st >= 0.75 * pipe.cfg.stages[stage].steps]
    steps_down = np.diff(tail)
    note(f"{stage}: smoothed loss {tail[0]:.4f} -> {tail[-1]:.4f} over {len(tail)} windows, "
         f"largest step {steps_down.max():+.4f}")
    assert len(tail) >= 2 and np.all(steps_down <= 0)


# ---- 9 -------------------------------------------------------------------

@pytest.mark.criterion(9)
@pytest.mark.parametrize("stage", ["stage3_dpo_lo", "stage3_dpo_hi"])
def test_c9_dpo_phase(desk_run, note, stage):
    pipe, _ = desk_run
    r = _results(pipe)
    start, rate = r[f"{stage}.initial_loss"], r[f"{stage}.held_out_margin_rate"]
    note(f"{stage}: |L0 - ln2| = {abs(start - LN2):.1e}, held-out margin > 0 on {rate:.3f} "
         f"of {pipe.cfg.eval.n_pairs} pairs")
    assert pipe.cfg.eval.n_pairs == 200
    assert abs(start - LN2) <= 1e-9
    assert rate >= 0.9


# ---- 10 ------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_extension_preserves_old_scales_and_hi_res_trains(note):
    sched = ScaleSchedule(((1, 1), (2, 2), (4, 4), (8, 8)), bits=3)
    model = tiny_model(schedule=sched)
    toks = random_tokens(np.random.default_rng(10), sched, 2)
    prompts = ["a red circle in the center", "a blue square in the top left"]
    gb = generation_batch(model, prompts, toks, toks.gains)
    with no_grad():
        before = model(gb.batch, gb.latents).bit_logits.data
    extend_model_schedule(model, sched.extended((16, 16)))
    gb = generation_batch(model, prompts, toks, toks.gains, schedule=sched)
    with no_grad():
        after = model(gb.batch, gb.latents).bit_logits.data
    drift = float(np.max(np.abs(after - before)))
    big = random_tokens(np.random.default_rng(11), model.cfg.schedule, 2)
    gb = generation_batch(model, prompts, big, big.gains)
    loss = ivc_loss(model(gb.batch, gb.latents).bit_logits, gb.targets)
    loss.backward()
    note(f"old-scale drift {drift:.1e}; {model.cfg.schedule.n_tokens}-token loss {loss.item():.3f}")
    assert drift <= 1e-12
    assert np.isfinite(loss.item()) and model.visual_decoder.pos_emb.grad[sched.n_tokens:].any()


@pytest.mark.criterion(10)
def test_c10_hi_res_stages_ran_in_curriculum(desk_run, note):
    pipe, _ = desk_run
    model = load_for_inference(pipe.checkpoint_path("stage3_sft_hi")).model
    steps, _ = series(pipe.run_dir / "metrics.jsonl", "stage3_sft_hi", "loss")
    note(f"hi ladder ends at {model.cfg.schedule.scales[-1]} with {model.cfg.schedule.n_tokens} tokens")
    assert model.cfg.schedule.scales[-1] == (16, 16)
    assert steps and steps[-1] == pipe.cfg.stages["stage3_sft_hi"].steps


@pytest.mark.criterion(10)
def test_c10_interrupted_curriculum_resumes_bit_exact(tmp_path, note):
    cfg = config_from_dict(tiny_run_dict(steps=4))
    a, b = Pipeline(tmp_path / "a", cfg), Pipeline(tmp_path / "b", cfg)
    same = 0
    for s in STAGES:
        a.train(s)
        assert not b.train(s, stop_after=3).finished
        Pipeline(tmp_path / "b", cfg).train(s, resume=True)
        same += a.checkpoint_path(s).read_bytes() == b.checkpoint_path(s).read_bytes()
    logs_equal = list(read_metrics(a.run_dir / "metrics.jsonl")) == list(read_metrics(b.run_dir / "metrics.jsonl"))
    note(f"byte-identical checkpoints on {same}/{len(STAGES)} interrupted stages, metrics equal {logs_equal}")
    assert same == len(STAGES) and logs_equal


# ---- 11 ------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_c11_edit_stage_beats_pre_edit_model(desk_run, note):
    pipe, _ = desk_run
    r = _results(pipe)
    before, after = r["stage_edit.edit_acc_before"], r["stage_edit.edit_acc_after"]
    margin = _baselines()["stage_edit.edit_margin"]
    note(f"edit accuracy {before:.3f} -> {after:.3f} on {pipe.cfg.eval.n_edit} instructions "
         f"(gain {after - before:+.3f}, recorded margin {margin:.3f})")
    assert pipe.cfg.eval.n_edit == 200
    assert after - before > 0
    assert after - before >= margin - 0.05
