import numpy as np
import pytest

from uvar.model import ModelConfig, UnifiedModel
from uvar.tokenizer import ScaleSchedule

TINY_SCHEDULE = ScaleSchedule(((1, 1), (2, 2)), bits=3)


def tiny_model(seed=0, live=True, schedule=TINY_SCHEDULE):
    """About 7k parameters in float64; ``live`` replaces the zero-initialised
    projector outputs so every parameter receives a gradient."""
    cfg = ModelConfig(d_model=8, n_layers_llm=1, n_heads=2, d_visdec=8, n_layers_visdec=1, bits=schedule.bits,
                      schedule=schedule, max_text_len=24, und_resolution=8, patch=4, mlp_ratio=2, seed=seed)
    m = UnifiedModel(cfg, np.float64)
    if live:
        rng = np.random.default_rng(seed + 100)
        for _, p in m.named_parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return m


def bind(module, names, tensors):
    """Swap the named parameters of ``module`` for ``tensors``."""
    for name, t in zip(names, tensors):
        *path, last = name.split(".")
        obj = module
        for key in path:
            obj = obj[int(key)] if key.isdigit() else getattr(obj, key)
        setattr(obj, last, t)


@pytest.fixture
def model_factory():
    return tiny_model


def tiny_run_dict(steps=2):
    """A run configuration small enough to take every stage in seconds."""
    from uvar.pipeline.config import STAGES

    d = {"seed": 0, "model": {"d_model": 16, "n_layers_llm": 1, "n_layers_visdec": 1, "d_visdec": 16, "n_heads": 2},
         "tokenizer": {"width1": 4, "width2": 8},
         "eval": {"n_prompts": 4, "n_seeds": 1, "n_qa": 8, "n_recon": 4, "n_pairs": 8, "n_edit": 4},
         "stage": {s: {"steps": steps, "batch_size": 4, "log_every": 1, "checkpoint_every": 1} for s in STAGES}}
    d["stage"]["stage1_tok"].update(align_steps=2, n_t2i=50)
    d["stage"]["stage2_mixed"].update(n_t2i=20, n_qa=20)
    d["stage"]["stage3_sft_lo"].update(n_t2i=20)
    d["stage"]["stage3_sft_hi"].update(n_t2i=20, batch_size=2)
    d["stage"]["stage3_dpo_lo"].update(n_pairs=8)
    d["stage"]["stage3_dpo_hi"].update(n_pairs=8, batch_size=2)
    d["stage"]["stage_edit"].update(n_edit=20)
    return d


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Every stage run once on the tiny configuration; returns (pipeline, results)."""
    from uvar.pipeline.config import STAGES, config_from_dict
    from uvar.pipeline.run import Pipeline

    pipe = Pipeline(tmp_path_factory.mktemp("tiny_run"), config_from_dict(tiny_run_dict()))
    return pipe, {s: pipe.train(s) for s in STAGES}


# ---- the desk curriculum, shared by the acceptance suite ---------------------

import os  # noqa: E402
from pathlib import Path  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.toml"
BASELINES = Path(__file__).with_name("baselines.json")


@pytest.fixture(scope="session")
def desk_run():
    """The full desk curriculum. A finished run in ``runs/desk`` made with the same
    configuration is reused; UVAR_FRESH_RUN=1 forces a rerun and UVAR_RUN_DIR moves it."""
    from uvar.pipeline.config import load_config
    from uvar.pipeline.run import Pipeline, run_curriculum

    cfg = load_config(DESK_CONFIG)
    run_dir = Path(os.environ.get("UVAR_RUN_DIR", ROOT / "runs" / "desk"))
    info = run_curriculum(run_dir, cfg, fresh=os.environ.get("UVAR_FRESH_RUN") == "1")
    return Pipeline(run_dir, cfg), info


_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to numbered acceptance criterion n")


@pytest.fixture
def note(request):
    """Attach a short measurement to the test's acceptance-summary line."""
    return lambda text: request.node.user_properties.append(("note", text))


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    if call.when == "setup" and call.excinfo is None:
        return
    entry = _CRITERIA.setdefault(mark.args[0], [True, []])
    entry[0] = entry[0] and call.excinfo is None
    entry[1] += [v for k, v in item.user_properties if k == "note"]
    if call.excinfo is not None:
        entry[1].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, notes = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {'; '.join(notes)}")
