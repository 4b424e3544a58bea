"""Command-line entry point: ``python -m uvar <command> ...``.

Exit codes: 0 success, 2 configuration / usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uvar", description="Unified visual autoregression on a toy shapes world.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a procedural corpus as JSON lines")
    p.add_argument("--kind", required=True, choices=["t2i", "understanding_qa", "editing", "preference_prompt"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=32, choices=[32, 64])
    p.add_argument("--images", help="also render PNGs into this directory")

    p = sub.add_parser("train", help="run one curriculum stage (or all of them)")
    p.add_argument("--stage", required=True, help="stage id, or 'all'")
    p.add_argument("--config", help="TOML file with [model], [tokenizer], [stage.<id>] and [eval] tables")
    p.add_argument("--run-dir", default="runs/default")
    p.add_argument("--resume", action="store_true", help="continue from the stage's partial checkpoint")
    p.add_argument("--stop-after", type=int, help="stop after this many stage steps (resumable)")

    p = sub.add_parser("generate", help="sample an image for a caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, default=1.5)
    p.add_argument("--top-k", type=int, default=900)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--head", choices=["codes", "bits"], default="codes")
    p.add_argument("--resolution", choices=["lo", "hi"], help="default: the finest trained ladder")
    p.add_argument("--out", required=True)

    p = sub.add_parser("edit", help="apply an edit instruction to an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, default=1.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="all",
                   choices=["generation", "understanding", "reconstruction", "editing", "all"])
    p.add_argument("--config", help="TOML whose [eval] table sets sample counts")
    p.add_argument("--out", help="also write the report here")

    p = sub.add_parser("report", help="plot a metrics log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="output directory for PNG plots")
    return ap


def _sampler(args, top_k=900, top_p=0.95, temperature=1.0, head="codes"):
    from .sampling import SamplerConfig

    return SamplerConfig(cfg_scale=args.cfg_scale, top_k=top_k, top_p=top_p, temperature=temperature,
                         seed=args.seed, head=head)


def cmd_make_data(args) -> int:
    from .data import make_corpus, write_corpus

    n = write_corpus(make_corpus(args.kind, args.n, args.seed, args.resolution), args.out, args.images)
    print(f"wrote {n} {args.kind} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline.config import STAGES, load_config
    from .pipeline.run import Pipeline

    cfg = load_config(args.config)
    pipe = Pipeline(args.run_dir, cfg)
    stages = STAGES if args.stage == "all" else (args.stage,)
    for s in stages:
        if args.stage == "all" and pipe.checkpoint_path(s).exists():
            print(f"{s}: already finished, skipping")
            continue
        res = pipe.train(s, resume=args.resume or args.stage == "all", stop_after=args.stop_after)
        state = "finished" if res.finished else f"stopped after {res.steps} steps"
        print(f"{s}: {state}; checkpoint {res.checkpoint}")
        for k, v in res.metrics.items():
            print(f"  {k} = {v:.4f}")
        if not res.finished:
            break
    return EXIT_OK


def _load(path):
    from .pipeline.run import load_for_inference

    return load_for_inference(path)


def cmd_generate(args) -> int:
    from .imageio import save_image
    from .sampling import generate_image
    from .tokenizer import LO_SCHEDULE

    st = _load(args.checkpoint)
    schedule = LO_SCHEDULE if args.resolution == "lo" else st.model.cfg.schedule
    n_codes = 2 ** schedule.bits
    if args.top_k > n_codes and args.head == "codes":
        print(f"top-k {args.top_k} exceeds the {n_codes}-code head; clamped to {n_codes}")
    sampler = _sampler(args, min(args.top_k, n_codes), args.top_p, args.temperature, args.head)
    _, image = generate_image(st.model, st.tokenizer, args.prompt, sampler, schedule)
    save_image(image, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_edit(args) -> int:
    from .imageio import load_image, save_image
    from .sampling import generate_tokens
    from .tokenizer import LO_SCHEDULE, decode_tokens

    st = _load(args.checkpoint)
    src = load_image(args.image, st.model.cfg.und_resolution)
    toks = generate_tokens(st.model, [args.instruction], st.tokenizer.gains(LO_SCHEDULE), _sampler(args, 256),
                           LO_SCHEDULE, und_images=src[None])
    save_image(decode_tokens(st.tokenizer, toks, LO_SCHEDULE, toks.gains)[0], args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline.config import load_config
    from .pipeline.evaluate import evaluate

    st = _load(args.checkpoint)
    cfg = load_config(args.config).eval
    report = evaluate(st.model, st.tokenizer, args.split, cfg)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline.report import plot_metrics

    paths = plot_metrics(args.log, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "generate": cmd_generate, "edit": cmd_edit,
            "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    from .data import CaptionError
    from .pipeline.checkpoint import CheckpointError
    from .pipeline.config import ConfigError
    from .pipeline.run import NumericalAbort, StageOrderError

    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, StageOrderError, CheckpointError, CaptionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
