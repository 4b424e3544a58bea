"""The staged curriculum: tokenizer, mixed instruction tuning, low/high
resolution SFT each followed by preference optimization, then editing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import no_grad
from ..data import Record, make_corpus, render
from ..dpo import (DpoConfig, PreferencePair, build_preference_pairs, dpo_loss, image_token_logprob,
                   implicit_reward, pair_batches)
from ..model import (ModelConfig, NonFiniteActivation, UnifiedModel, apply_freeze, extend_model_schedule,
                     generation_batch, ivc_loss, text_ce_loss)
from ..nn import AdamW, cosine_lr
from ..sampling import SamplerConfig, generate_tokens
from ..sequence import assemble, collate
from ..tokenizer import (HI_SCHEDULE, LO_SCHEDULE, NonFiniteLoss, ScaleSchedule, TokenizerConfig, TokenizerModel,
                         calibrate_gains, decode_tokens, encode_images, tokenizer_loss)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import STAGES, TOKENIZER_GROUP, RunConfig, StageConfig
from .evaluate import edit_accuracy, generation_accuracy, eval_prompts, reconstruction_psnr
from .metrics import MetricsLog
from .state import TrainState, snapshot, state_from_checkpoint, state_to_checkpoint

CALIBRATION_IMAGES = 256


class StageOrderError(RuntimeError):
    pass


class NumericalAbort(RuntimeError):
    pass


@dataclass
class StageResult:
    stage: str
    steps: int
    finished: bool
    checkpoint: Path
    metrics: dict


def previous_stage(stage: str) -> str | None:
    i = STAGES.index(stage)
    return STAGES[i - 1] if i else None


def stage_seed(cfg: RunConfig, stage: str, salt: int = 0) -> list[int]:
    return [cfg.seed, STAGES.index(stage), salt]


def _corpus_seed(cfg: RunConfig, stage: str) -> int:
    return 1000 * cfg.seed + STAGES.index(stage)


def stage_schedule(model: UnifiedModel, st: StageConfig) -> ScaleSchedule:
    if st.resolution == "hi":
        return model.cfg.schedule
    return LO_SCHEDULE


class Pipeline:
    """Owns one run directory: ``checkpoints/<stage>.ckpt`` per finished stage,
    ``checkpoints/<stage>.partial.ckpt`` while a stage is in progress, and ``metrics.jsonl``."""

    def __init__(self, run_dir: str | Path, config: RunConfig):
        self.run_dir = Path(run_dir)
        self.cfg = config
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.log = MetricsLog(self.run_dir / "metrics.jsonl")

    def checkpoint_path(self, stage: str, partial: bool = False) -> Path:
        return self.ckpt_dir / (f"{stage}.partial.ckpt" if partial else f"{stage}.ckpt")

    def latest_checkpoint(self) -> Path | None:
        for s in reversed(STAGES):
            p = self.checkpoint_path(s)
            if p.exists():
                return p
        return None

    # ---- entry point -----------------------------------------------------
    def train(self, stage: str, resume: bool = False, stop_after: int | None = None) -> StageResult:
        """Run (or continue) one stage. ``stop_after`` ends the call early after
        that many total steps, leaving a resumable partial checkpoint."""
        st = self.cfg.stage(stage)
        partial = self.checkpoint_path(stage, partial=True)
        if resume and partial.exists():
            state = state_from_checkpoint(load_checkpoint(partial))
            if state.stage != stage:
                raise StageOrderError(f"{partial} belongs to stage {state.stage}")
            self.log.truncate(stage, state.step)
        else:
            state = self._initial_state(stage)
        runner = {
            "stage1_tok": self._run_tokenizer,
            "stage2_mixed": self._run_sft,
            "stage3_sft_lo": self._run_sft,
            "stage3_sft_hi": self._run_sft,
            "stage3_dpo_lo": self._run_dpo,
            "stage3_dpo_hi": self._run_dpo,
            "stage_edit": self._run_sft,
        }[stage]
        try:
            finished = runner(state, st, stop_after)
        except (NonFiniteLoss, NonFiniteActivation, FloatingPointError) as e:
            raise NumericalAbort(f"{stage} aborted at step {state.step + 1}: {e}") from e
        if not finished:
            save_checkpoint(state_to_checkpoint(state), partial)
            return StageResult(stage, state.step, False, partial, {})
        metrics = self._finish_stage(state, st)
        state.completed.append(stage)
        state.stage, state.step, state.optimizer, state.optimizer_target, state.rng = None, 0, None, None, None
        state.extra = {k: v for k, v in state.extra.items() if k.startswith("result.")}
        out = save_checkpoint(state_to_checkpoint(state), self.checkpoint_path(stage))
        if partial.exists():
            partial.unlink()
        return StageResult(stage, st.steps, True, out, metrics)

    def _initial_state(self, stage: str) -> TrainState:
        prev = previous_stage(stage)
        if prev is None:
            mcfg = ModelConfig(**{"seed": self.cfg.seed, **self.cfg.model})
            model = UnifiedModel(mcfg, dtype=np.float32)
            tok = TokenizerModel(TokenizerConfig(**self.cfg.tokenizer), seed=self.cfg.seed, dtype=np.float32)
            state = TrainState(tok, model)
        else:
            path = self.checkpoint_path(prev)
            if not path.exists():
                raise StageOrderError(f"{stage} needs a finished {prev} checkpoint ({path} not found)")
            state = state_from_checkpoint(load_checkpoint(path))
            if state.completed != list(STAGES[: STAGES.index(stage)]):
                raise StageOrderError(f"{path} records stages {state.completed}, expected {list(STAGES[:STAGES.index(stage)])}")
        state.stage, state.step = stage, 0
        state.rng = np.random.default_rng(stage_seed(self.cfg, stage))
        state.extra = {k: v for k, v in state.extra.items() if k.startswith("result.")}
        return state

    # ---- helpers ---------------------------------------------------------
    def _make_optimizer(self, state: TrainState, params: dict, st: StageConfig, lr: float, target: str) -> None:
        if state.optimizer is None or state.optimizer_target != target:
            state.optimizer = AdamW(params, lr=lr, weight_decay=st.weight_decay)
            state.optimizer_target = target

    def _step_update(self, state: TrainState, loss, lr: float) -> float:
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"loss is {value}")
        state.optimizer.zero_grad()
        loss.backward()
        norm = state.optimizer.step(lr)
        if not math.isfinite(norm):
            raise FloatingPointError(f"gradient norm is {norm}")
        return value

    def _record(self, state: TrainState, st: StageConfig, values: dict[str, float]) -> None:
        """Accumulate per-step values and flush window means every ``log_every`` steps."""
        win = state.extra.setdefault("window", {})
        for k, v in values.items():
            win.setdefault(k, []).append(float(v))
        if state.step % st.log_every == 0:
            for k in sorted(win):
                self.log.write(st.stage, state.step, k, float(np.mean(win[k])))
            state.extra["window"] = {}

    def _maybe_checkpoint(self, state: TrainState, st: StageConfig) -> None:
        if st.checkpoint_every and state.step % st.checkpoint_every == 0:
            save_checkpoint(state_to_checkpoint(state), self.checkpoint_path(st.stage, partial=True))

    def _images(self, records: list[Record], resolution: int) -> np.ndarray:
        from dataclasses import replace

        return np.stack([render(replace(r.spec, resolution=resolution), r.seed) for r in records])

    def _tokens(self, state: TrainState, images: np.ndarray, schedule: ScaleSchedule):
        return encode_images(state.tokenizer, images, schedule)

    # ---- stage 1: tokenizer, then projector alignment ---------------------
    def _run_tokenizer(self, state: TrainState, st: StageConfig, stop_after: int | None) -> bool:
        corpus = make_corpus("t2i", st.n_t2i, _corpus_seed(self.cfg, st.stage))
        tok = state.tokenizer
        total = st.steps + st.align_steps
        train_tok = TOKENIZER_GROUP in st.trainable
        for _, p in tok.named_parameters():
            p.requires_grad = train_tok
        apply_freeze(state.model, st.model_trainable)
        while state.step < total:
            if stop_after is not None and state.step >= stop_after:
                return False
            idx = state.rng.integers(len(corpus), size=st.batch_size)
            recs = [corpus[i] for i in idx]
            if state.step < st.steps:
                if not train_tok:
                    state.step = st.steps
                    continue
                self._make_optimizer(state, dict(tok.named_parameters()), st, st.lr, "tokenizer")
                images = self._images(recs, st.image_size)
                loss, parts = tokenizer_loss(tok, images, LO_SCHEDULE)
                lr = cosine_lr(state.step, st.steps, st.lr, st.warmup_ratio)
                self._step_update(state, loss, lr)
                state.step += 1
                self._record(state, st, {"loss": parts.total, "recon_loss": parts.recon, "commit_loss": parts.commit,
                                         "lr": lr})
                if state.step == st.steps:
                    self._calibrate(state, LO_SCHEDULE, st.image_size)
            else:
                if not tok.calibrations:
                    self._calibrate(state, LO_SCHEDULE, st.image_size)
                for _, p in tok.named_parameters():
                    p.requires_grad = False
                self._make_optimizer(state, state.model.trainable_parameters(), st, st.align_lr, "model")
                i = state.step - st.steps
                lr = cosine_lr(i, st.align_steps, st.align_lr, st.warmup_ratio)
                loss = self._t2i_loss(state, st, recs, LO_SCHEDULE, st.cfg_dropout)
                value = self._step_update(state, loss, lr)
                state.step += 1
                self._record(state, st, {"align_loss": value, "lr": lr})
            self._maybe_checkpoint(state, st)
        for _, p in tok.named_parameters():
            p.requires_grad = False
        return True

    def _calibrate(self, state: TrainState, schedule: ScaleSchedule, resolution: int) -> None:
        recs = make_corpus("t2i", CALIBRATION_IMAGES, self.cfg.seed + 77, resolution=resolution)
        images = np.stack([r.image() for r in recs])
        state.tokenizer.calibrations[len(schedule)] = calibrate_gains(state.tokenizer, images, schedule)

    # ---- losses shared by supervised stages -------------------------------
    def _t2i_loss(self, state: TrainState, st: StageConfig, recs: list[Record], schedule: ScaleSchedule,
                  dropout: float):
        images = self._images(recs, 4 * schedule.base[0])
        toks = self._tokens(state, images, schedule)
        drop = state.rng.random(len(recs)) < dropout
        gb = generation_batch(state.model, [r.text for r in recs], toks, state.tokenizer.gains(schedule),
                              null_prompt=drop, schedule=schedule)
        out = state.model(gb.batch, gb.latents)
        return ivc_loss(out.bit_logits, gb.targets) * state.model.cfg.img_loss_weight

    def _qa_loss(self, state: TrainState, recs: list[Record]):
        model = state.model
        seqs = [assemble(r.text, response_text=r.answer, und_patches=model.cfg.n_und_patches) for r in recs]
        batch = collate(seqs)
        imgs = np.stack([r.image() for r in recs])
        out = model(batch, None, imgs)
        tgt, mask = batch.text_targets()
        return text_ce_loss(model.text_logits(out.hidden), tgt, mask)

    def _edit_loss(self, state: TrainState, st: StageConfig, recs: list[Record]):
        schedule = LO_SCHEDULE
        src = np.stack([r.image() for r in recs])
        tgt = np.stack([r.target_image() for r in recs])
        toks = self._tokens(state, tgt, schedule)
        drop = state.rng.random(len(recs)) < st.cfg_dropout
        gb = generation_batch(state.model, [r.text for r in recs], toks, state.tokenizer.gains(schedule),
                              und_images=src, null_prompt=drop, schedule=schedule)
        out = state.model(gb.batch, gb.latents, gb.und_images)
        return ivc_loss(out.bit_logits, gb.targets) * state.model.cfg.img_loss_weight

    # ---- supervised stages -------------------------------------------------
    def _run_sft(self, state: TrainState, st: StageConfig, stop_after: int | None) -> bool:
        model = state.model
        seed = _corpus_seed(self.cfg, st.stage)
        if st.stage == "stage3_sft_hi" and len(model.cfg.schedule) == len(LO_SCHEDULE):
            extend_model_schedule(model, HI_SCHEDULE)
            self._calibrate(state, HI_SCHEDULE, 64)
        schedule = stage_schedule(model, st)
        t2i = make_corpus("t2i", st.n_t2i, seed, resolution=st.image_size) if st.n_t2i else []
        qa = make_corpus("understanding_qa", st.n_qa, seed) if st.n_qa else []
        edits = make_corpus("editing", st.n_edit, seed) if st.n_edit else []
        if not (t2i or qa or edits):
            raise ValueError(f"{st.stage}: no corpus configured (n_t2i, n_qa and n_edit are all 0)")
        apply_freeze(model, st.model_trainable)
        self._make_optimizer(state, model.trainable_parameters(), st, st.lr, "model")
        if st.stage == "stage_edit" and "edit_acc_before" not in state.extra:
            state.extra["edit_acc_before"] = self._edit_eval(state)
            self.log.write(st.stage, 0, "edit_acc", state.extra["edit_acc_before"])
        kinds = [("qa", len(qa)), ("t2i", len(t2i)), ("edit", len(edits))]
        kinds = [(k, n) for k, n in kinds if n]
        weights = np.array([n for _, n in kinds], dtype=np.float64)
        weights /= weights.sum()
        if st.t2i_share is not None and t2i and len(kinds) > 1:
            rest = [i for i, (k, _) in enumerate(kinds) if k != "t2i"]
            weights[rest] *= (1.0 - st.t2i_share) / weights[rest].sum()
            weights[[k for k, _ in kinds].index("t2i")] = st.t2i_share
        while state.step < st.steps:
            if stop_after is not None and state.step >= stop_after:
                return False
            # one data kind per step keeps every batch's sequence layout uniform
            kind = kinds[int(state.rng.choice(len(kinds), p=weights))][0] if len(kinds) > 1 else kinds[0][0]
            pool = {"qa": qa, "t2i": t2i, "edit": edits}[kind]
            recs = [pool[i] for i in state.rng.integers(len(pool), size=st.batch_size)]
            if kind == "qa":
                loss = self._qa_loss(state, recs)
            elif kind == "t2i":
                loss = self._t2i_loss(state, st, recs, schedule, st.cfg_dropout)
            else:
                loss = self._edit_loss(state, st, recs)
            lr = cosine_lr(state.step, st.steps, st.lr, st.warmup_ratio)
            value = self._step_update(state, loss, lr)
            state.step += 1
            self._record(state, st, {"loss": value, f"loss_{kind}": value, "lr": lr})
            self._maybe_checkpoint(state, st)
        return True

    def _edit_eval(self, state: TrainState) -> float:
        recs = make_corpus("editing", self.cfg.eval.n_edit, self.cfg.eval.seed)
        return edit_accuracy(state.model, state.tokenizer, recs, SamplerConfig(seed=self.cfg.eval.seed))

    # ---- preference stages ---------------------------------------------------
    def preference_pairs(self, state: TrainState, st: StageConfig, ref: UnifiedModel,
                         held_out: bool = False) -> list[PreferencePair]:
        """Deterministic pairs for a stage; the policy sampler is the phase-start model."""
        n = self.cfg.eval.n_pairs if held_out else st.n_pairs
        salt = 2 if held_out else 1
        prompts = [r.text for r in make_corpus("preference_prompt", n, _corpus_seed(self.cfg, st.stage) + 100 * salt)]
        schedule = stage_schedule(ref, st)
        gains = state.tokenizer.gains(schedule)
        sampler = SamplerConfig(seed=int(np.random.default_rng(stage_seed(self.cfg, st.stage, salt)).integers(2**31)))

        def policy(ps: list[str], rng: np.random.Generator) -> np.ndarray:
            out = []
            for i in range(0, len(ps), 32):
                toks = generate_tokens(ref, ps[i:i + 32], gains, sampler, schedule, rng)
                out.append(decode_tokens(state.tokenizer, toks, schedule, toks.gains))
            return np.concatenate(out)

        rng = np.random.default_rng(stage_seed(self.cfg, st.stage, 10 + salt))
        pairs, stats = build_preference_pairs(prompts, rng, st.image_size, policy if st.policy_losers else None)
        w = encode_images(state.tokenizer, np.stack([p.winner for p in pairs]), schedule)
        l_ = encode_images(state.tokenizer, np.stack([p.loser for p in pairs]), schedule)
        for i, p in enumerate(pairs):
            p.winner_tokens = w.select(slice(i, i + 1))
            p.loser_tokens = l_.select(slice(i, i + 1))
        state.extra.setdefault("pair_stats" + ("_held_out" if held_out else ""), dict(stats.by_provenance))
        return pairs

    def reference_model(self, st: StageConfig) -> UnifiedModel:
        prev = previous_stage(st.stage)
        return snapshot(state_from_checkpoint(load_checkpoint(self.checkpoint_path(prev))).model)

    def _run_dpo(self, state: TrainState, st: StageConfig, stop_after: int | None) -> bool:
        model = state.model
        ref = self.reference_model(st)
        if state.step == 0:
            # the policy starts as the reference, exactly
            for (n1, p), (n2, q) in zip(model.named_parameters(), ref.named_parameters()):
                if n1 != n2 or not np.array_equal(p.data, q.data):
                    raise StageOrderError(f"{st.stage}: policy does not start at the reference ({n1})")
        dcfg = DpoConfig(beta=st.beta, lr=st.lr, steps=st.steps)
        pairs = self.preference_pairs(state, st, ref)
        schedule = stage_schedule(model, st)
        gains = state.tokenizer.gains(schedule)
        apply_freeze(model, st.model_trainable)
        self._make_optimizer(state, model.trainable_parameters(), st, st.lr, "model")
        while state.step < st.steps:
            if stop_after is not None and state.step >= stop_after:
                return False
            batch = [pairs[i] for i in state.rng.integers(len(pairs), size=st.batch_size)]
            gw, gl = pair_batches(model, batch, gains)
            with no_grad():
                ref_w = image_token_logprob(ref, gw).data.astype(np.float64)
                ref_l = image_token_logprob(ref, gl).data.astype(np.float64)
            lw = image_token_logprob(model, gw)
            ll = image_token_logprob(model, gl)
            loss = dpo_loss(lw, ll, ref_w, ref_l, dcfg.beta)
            lr = cosine_lr(state.step, st.steps, st.lr, st.warmup_ratio)
            value = self._step_update(state, loss, lr)
            margin = implicit_reward(lw.data, ref_w, dcfg.beta) - implicit_reward(ll.data, ref_l, dcfg.beta)
            if state.step == 0:
                state.extra["initial_loss"] = value
                self.log.write(st.stage, 0, "initial_loss", value)
            state.step += 1
            self._record(state, st, {"loss": value, "margin": float(np.mean(margin)),
                                     "reward_acc": float(np.mean(margin > 0)), "lr": lr})
            self._maybe_checkpoint(state, st)
        return True

    # ---- end-of-stage measurements ---------------------------------------
    def _finish_stage(self, state: TrainState, st: StageConfig) -> dict:
        ev = self.cfg.eval
        m: dict[str, float] = {}
        model, tok = state.model, state.tokenizer
        sampler = SamplerConfig(seed=ev.seed)
        if st.stage == "stage1_tok":
            recs = make_corpus("t2i", ev.n_recon, ev.seed + 1)
            m["recon_psnr"] = reconstruction_psnr(tok, np.stack([r.image() for r in recs]), LO_SCHEDULE)
        elif st.stage in ("stage3_sft_lo", "stage3_sft_hi"):
            schedule = stage_schedule(model, st)
            acc = generation_accuracy(model, tok, eval_prompts(ev.n_prompts, ev.seed), ev.n_seeds, sampler, schedule)
            m.update({f"gen_{k}_acc": v for k, v in acc.items()})
        elif st.is_preference:
            from .evaluate import preference_margin_rate

            ref = self.reference_model(st)
            held = self.preference_pairs(state, st, ref, held_out=True)
            schedule = stage_schedule(model, st)
            m["initial_loss"] = float(state.extra.get("initial_loss", float("nan")))
            m["held_out_margin_rate"] = preference_margin_rate(model, ref, held, tok.gains(schedule), st.beta)
        elif st.stage == "stage_edit":
            m["edit_acc_before"] = float(state.extra["edit_acc_before"])
            m["edit_acc_after"] = self._edit_eval(state)
        elif st.stage == "stage2_mixed":
            from .evaluate import qa_accuracy

            m["qa_acc"] = qa_accuracy(model, make_corpus("understanding_qa", ev.n_qa, ev.seed))
        for k, v in m.items():
            self.log.write(st.stage, st.steps, k, v)
            state.extra[f"result.{st.stage}.{k}"] = v
        return m

    def run_all(self, resume: bool = True, stages=STAGES) -> list[StageResult]:
        out = []
        for s in stages:
            if resume and self.checkpoint_path(s).exists():
                continue
            out.append(self.train(s, resume=resume))
        return out


def load_for_inference(path: str | Path) -> TrainState:
    return state_from_checkpoint(load_checkpoint(path))


RUN_INFO = "run_info.json"


def run_curriculum(run_dir: str | Path, config: RunConfig, fresh: bool = False, log=print) -> dict:
    """Run every stage into ``run_dir``, reusing finished stages when the directory was
    produced by the same configuration. Returns the run info: config digest and
    per-stage wall-clock seconds."""
    import json
    import shutil
    import time

    run_dir = Path(run_dir)
    info_path = run_dir / RUN_INFO
    info = json.loads(info_path.read_text()) if info_path.exists() else None
    if fresh or info is None or info.get("digest") != config.digest():
        if run_dir.exists():
            shutil.rmtree(run_dir)
        info = {"digest": config.digest(), "seconds": {}}
    run_dir.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(run_dir, config)
    for s in STAGES:
        if pipe.checkpoint_path(s).exists() and s in info["seconds"]:
            continue
        t0 = time.perf_counter()
        res = pipe.train(s, resume=True)
        info["seconds"][s] = info["seconds"].get(s, 0.0) + time.perf_counter() - t0
        info_path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        log(f"{s}: {info['seconds'][s]:.0f} s " + " ".join(f"{k}={v:.4f}" for k, v in res.metrics.items()))
    return info
