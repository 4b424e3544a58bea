"""Everything a training run carries between steps, and its checkpoint mapping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..model import GROUPS, ModelConfig, UnifiedModel, apply_freeze
from ..nn import AdamW
from ..tokenizer import ScaleSchedule, TokenizerConfig, TokenizerModel
from .checkpoint import Checkpoint, CheckpointError


@dataclass
class TrainState:
    tokenizer: TokenizerModel
    model: UnifiedModel
    completed: list[str] = field(default_factory=list)
    stage: str | None = None  # stage in progress
    step: int = 0  # steps finished in that stage
    rng: np.random.Generator | None = None
    optimizer: AdamW | None = None
    optimizer_target: str | None = None  # "model" or "tokenizer"
    extra: dict = field(default_factory=dict)  # stage bookkeeping (baselines, loss windows)

    @property
    def schedule(self) -> ScaleSchedule:
        return self.model.cfg.schedule


def _params(state: TrainState, target: str):
    return dict(state.model.named_parameters()) if target == "model" else dict(state.tokenizer.named_parameters())


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    arrays = {}
    for name, p in state.model.named_parameters():
        arrays[f"model.{name}"] = p.data
    for name, p in state.tokenizer.named_parameters():
        arrays[f"tokenizer.{name}"] = p.data
    opt = None
    if state.optimizer is not None:
        o = state.optimizer
        opt = {"target": state.optimizer_target, "step": o.state.step, "lr": o.lr, "betas": list(o.betas),
               "eps": o.eps, "weight_decay": o.weight_decay, "grad_clip": o.grad_clip, "params": sorted(o.params)}
        for k in o.params:
            arrays[f"opt.m.{k}"] = o.state.m[k]
            arrays[f"opt.v.{k}"] = o.state.v[k]
    meta = {
        "model_config": state.model.cfg.to_json(),
        "model_dtype": state.model.dtype.str,
        "frozen": sorted(state.model.frozen),
        "tokenizer_config": vars(state.tokenizer.cfg),
        "tokenizer_dtype": state.tokenizer.enc1.weight.dtype.str,
        "calibrations": {str(k): [float(x) for x in v] for k, v in sorted(state.tokenizer.calibrations.items())},
        "completed": list(state.completed),
        "cursor": {"stage": state.stage, "step": state.step},
        "rng": None if state.rng is None else state.rng.bit_generator.state,
        "optimizer": opt,
        "extra": state.extra,
    }
    return Checkpoint(meta, arrays)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    m, a = ckpt.meta, ckpt.arrays
    try:
        cfg = ModelConfig.from_json(m["model_config"])
        model = UnifiedModel(cfg, dtype=np.dtype(m["model_dtype"]))
        tok = TokenizerModel(TokenizerConfig(**m["tokenizer_config"]), dtype=np.dtype(m["tokenizer_dtype"]))
        for name, p in model.named_parameters():
            _assign(p, a, f"model.{name}")
        for name, p in tok.named_parameters():
            _assign(p, a, f"tokenizer.{name}")
        tok.calibrations = {int(k): np.asarray(v, dtype=np.float64) for k, v in m["calibrations"].items()}
        apply_freeze(model, set(GROUPS) - set(m["frozen"]))
        rng = None
        if m["rng"] is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = m["rng"]
        state = TrainState(tok, model, list(m["completed"]), m["cursor"]["stage"], int(m["cursor"]["step"]), rng,
                           extra=m["extra"])
        o = m["optimizer"]
        if o is not None:
            params = _params(state, o["target"])
            missing = set(o["params"]) - set(params)
            if missing:
                raise CheckpointError(f"optimizer state names unknown parameters {sorted(missing)[:3]}")
            opt = AdamW({k: params[k] for k in o["params"]}, lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                        weight_decay=o["weight_decay"], grad_clip=o["grad_clip"])
            opt.state.step = int(o["step"])
            for k in o["params"]:
                opt.state.m[k] = a[f"opt.m.{k}"].copy()
                opt.state.v[k] = a[f"opt.v.{k}"].copy()
            state.optimizer, state.optimizer_target = opt, o["target"]
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing field {e}") from None
    return state


def _assign(p, arrays, key):
    if key not in arrays:
        raise CheckpointError(f"checkpoint lacks parameter {key}")
    v = arrays[key]
    if v.shape != p.data.shape:
        raise CheckpointError(f"{key}: checkpoint shape {v.shape} does not match model shape {p.data.shape}")
    p.data = v.astype(p.data.dtype, copy=True)


def snapshot(model: UnifiedModel) -> UnifiedModel:
    """Frozen deep copy, used as a preference reference."""
    ref = copy.deepcopy(model)
    apply_freeze(ref, ())
    return ref
