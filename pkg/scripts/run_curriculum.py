"""Run the full curriculum for a config, print per-stage results, and optionally
record them as the regression baselines used by the acceptance suite."""

import argparse
import json
import sys
from pathlib import Path

from uvar.pipeline.config import STAGES, load_config
from uvar.pipeline.run import Pipeline, load_for_inference, run_curriculum

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.toml"))
    ap.add_argument("--run-dir", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--fresh", action="store_true", help="discard any previous run in --run-dir")
    ap.add_argument("--record-baselines", action="store_true",
                    help="write tests/baselines.json from this run's final results")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    info = run_curriculum(args.run_dir, cfg, fresh=args.fresh)
    total = sum(info["seconds"].values())
    print(f"total {total / 60:.1f} min")

    pipe = Pipeline(args.run_dir, cfg)
    extra = load_for_inference(pipe.checkpoint_path(STAGES[-1])).extra
    results = {k[len("result."):]: float(v) for k, v in sorted(extra.items()) if k.startswith("result.")}
    print(json.dumps(results, indent=2))
    if args.record_baselines:
        keep = {k: v for k, v in results.items()
                if not k.endswith((".initial_loss", ".edit_acc_before", ".edit_acc_after"))}
        keep["stage_edit.edit_margin"] = results["stage_edit.edit_acc_after"] - results["stage_edit.edit_acc_before"]
        out = ROOT / "tests" / "baselines.json"
        out.write_text(json.dumps(keep, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
