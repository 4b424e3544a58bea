"""Stage and run configuration, loadable from TOML."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..model import GROUPS

STAGES = ("stage1_tok", "stage2_mixed", "stage3_sft_lo", "stage3_dpo_lo", "stage3_sft_hi", "stage3_dpo_hi", "stage_edit")
RESOLUTIONS = {"lo": 32, "hi": 64}
TOKENIZER_GROUP = "tokenizer"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: str
    lr: float
    steps: int
    batch_size: int = 32
    resolution: str = "lo"
    trainable: tuple[str, ...] = ()
    lr_schedule: str = "cosine"
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    # stage1_tok: extra steps aligning the generation projectors once the tokenizer is trained
    align_steps: int = 0
    align_lr: float = 1e-3
    # corpus sizes (records); understanding_qa only matters for stage2_mixed
    n_t2i: int = 0
    n_qa: int = 0
    n_edit: int = 0
    n_pairs: int = 0
    t2i_share: float | None = None  # fraction of t2i batches in mixed stages; None = by corpus size
    cfg_dropout: float = 0.1  # probability of replacing the prompt by the null token in t2i batches
    beta: float = 0.1  # preference stages only
    policy_losers: bool = True  # preference stages: use policy samples as losers when possible
    log_every: int = 50
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 1:
            raise ConfigError(f"{self.stage}: steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"{self.stage}: batch_size must be >= 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"{self.stage}: warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.resolution not in RESOLUTIONS:
            raise ConfigError(f"{self.stage}: resolution must be 'lo' or 'hi', got {self.resolution!r}")
        if self.lr_schedule != "cosine":
            raise ConfigError(f"{self.stage}: only the cosine schedule is supported")
        if not self.lr > 0:
            raise ConfigError(f"{self.stage}: lr must be > 0")
        bad = set(self.trainable) - set(GROUPS) - {TOKENIZER_GROUP}
        if bad:
            raise ConfigError(f"{self.stage}: unknown parameter groups {sorted(bad)}")
        if not self.beta > 0:
            raise ConfigError(f"{self.stage}: beta must be > 0")
        if self.t2i_share is not None and not 0.0 < self.t2i_share < 1.0:
            raise ConfigError(f"{self.stage}: t2i_share must be in (0, 1)")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ConfigError(f"{self.stage}: cfg_dropout must be in [0, 1)")

    @property
    def image_size(self) -> int:
        return RESOLUTIONS[self.resolution]

    @property
    def is_preference(self) -> bool:
        return "dpo" in self.stage

    @property
    def model_trainable(self) -> tuple[str, ...]:
        return tuple(g for g in self.trainable if g != TOKENIZER_GROUP)


GEN_SIDE = ("visual_decoder", "gen_in_proj", "gen_out_proj")

# Reference schedule at desk scale: the relative step counts and learning rates of
# the original recipe, batch 32 throughout.
DEFAULT_STAGES = {
    "stage1_tok": StageConfig("stage1_tok", 1e-3, 2000, trainable=(TOKENIZER_GROUP, "gen_in_proj", "gen_out_proj"),
                              align_steps=200, n_t2i=20000),
    "stage2_mixed": StageConfig("stage2_mixed", 5e-5, 1000, trainable=("llm", "und_encoder", "und_projector"),
                                n_t2i=2000, n_qa=10000),
    "stage3_sft_lo": StageConfig("stage3_sft_lo", 5e-5, 2000, trainable=GEN_SIDE, n_t2i=20000),
    "stage3_dpo_lo": StageConfig("stage3_dpo_lo", 1e-6, 500, trainable=GEN_SIDE, n_pairs=2000),
    "stage3_sft_hi": StageConfig("stage3_sft_hi", 5e-5, 1500, resolution="hi", trainable=GEN_SIDE, n_t2i=20000),
    "stage3_dpo_hi": StageConfig("stage3_dpo_hi", 1e-6, 300, resolution="hi", trainable=GEN_SIDE, n_pairs=2000),
    "stage_edit": StageConfig("stage_edit", 5e-5, 500, trainable=GROUPS, n_edit=2000),
}


@dataclass(frozen=True)
class EvalConfig:
    n_prompts: int = 64
    n_seeds: int = 4
    n_qa: int = 256
    n_recon: int = 64
    n_pairs: int = 200
    n_edit: int = 200
    seed: int = 12345


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    tokenizer: dict = field(default_factory=dict)  # TokenizerConfig overrides
    stages: dict = field(default_factory=lambda: dict(DEFAULT_STAGES))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def stage(self, stage_id: str) -> StageConfig:
        if stage_id not in STAGES:
            raise ConfigError(f"unknown stage {stage_id!r}; expected one of {STAGES}")
        return self.stages[stage_id]

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "model": dict(self.model), "tokenizer": dict(self.tokenizer),
            "stages": {k: _stage_json(v) for k, v in sorted(self.stages.items())},
            "eval": asdict(self.eval),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _stage_json(s: StageConfig) -> dict:
    d = asdict(s)
    d["trainable"] = list(s.trainable)
    return d


_STAGE_FIELDS = {f.name for f in fields(StageConfig)}
_EVAL_FIELDS = {f.name for f in fields(EvalConfig)}


def config_from_dict(d: dict) -> RunConfig:
    known = {"seed", "model", "tokenizer", "stage", "eval"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    stages = dict(DEFAULT_STAGES)
    for sid, table in d.get("stage", {}).items():
        if sid not in STAGES:
            raise ConfigError(f"unknown stage table [stage.{sid}]")
        bad = set(table) - _STAGE_FIELDS
        if bad:
            raise ConfigError(f"[stage.{sid}]: unknown keys {sorted(bad)}")
        if "stage" in table and table["stage"] != sid:
            raise ConfigError(f"[stage.{sid}] declares stage = {table['stage']!r}")
        kw = dict(table)
        if "trainable" in kw:
            kw["trainable"] = tuple(kw["trainable"])
        try:
            stages[sid] = replace(DEFAULT_STAGES[sid], **kw)
        except TypeError as e:
            raise ConfigError(f"[stage.{sid}]: {e}") from None
    ev = d.get("eval", {})
    bad = set(ev) - _EVAL_FIELDS
    if bad:
        raise ConfigError(f"[eval]: unknown keys {sorted(bad)}")
    from ..model import ModelConfig
    from ..tokenizer import TokenizerConfig

    bad = set(d.get("model", {})) - {f.name for f in fields(ModelConfig)} - {"schedule"}
    if bad:
        raise ConfigError(f"[model]: unknown keys {sorted(bad)}")
    if "schedule" in d.get("model", {}):
        raise ConfigError("[model]: the schedule is fixed by the resolution curriculum")
    bad = set(d.get("tokenizer", {})) - {f.name for f in fields(TokenizerConfig)}
    if bad:
        raise ConfigError(f"[tokenizer]: unknown keys {sorted(bad)}")
    if stages["stage3_sft_hi"].image_size <= stages["stage3_sft_lo"].image_size:
        raise ConfigError("hi-resolution stages must use a larger image size than lo stages")
    return RunConfig(seed=int(d.get("seed", 0)), model=dict(d.get("model", {})),
                     tokenizer=dict(d.get("tokenizer", {})), stages=stages, eval=EvalConfig(**ev))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with path.open("rb") as fh:
            d = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(d)
