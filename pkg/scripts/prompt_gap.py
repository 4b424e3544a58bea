"""How much a checkpoint's image head uses the prompt.

Teacher-forces held-out images under their own captions, under captions from other
rows, and under the null prompt, and prints the mean per-token bit loss at each
scale. A model that ignores the prompt shows no gap between the first two rows.
"""

import argparse

import numpy as np

from uvar.autodiff import no_grad
from uvar.data import make_corpus
from uvar.model import generation_batch
from uvar.pipeline.run import load_for_inference
from uvar.tokenizer import LO_SCHEDULE, encode_images


def per_scale_loss(model, prompts, toks, gains, schedule, null=None):
    gb = generation_batch(model, prompts, toks, gains, null_prompt=null, schedule=schedule)
    with no_grad():
        z = model(gb.batch, gb.latents).bit_logits.data.astype(np.float64)
    t = gb.targets.astype(np.float64)
    nll = np.logaddexp(0.0, (1.0 - 2.0 * t) * z).sum(-1)  # (B, slots)
    bounds = np.cumsum([0] + schedule.block_sizes)
    return [float(nll[:, a:b].mean()) for a, b in zip(bounds[:-1], bounds[1:])]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--seed", type=int, default=999)
    args = ap.parse_args(argv)

    st = load_for_inference(args.checkpoint)
    model, tok = st.model, st.tokenizer
    recs = make_corpus("t2i", args.n, args.seed)
    toks = encode_images(tok, np.stack([r.image() for r in recs]), LO_SCHEDULE)
    gains = tok.gains(LO_SCHEDULE)
    prompts = [r.text for r in recs]
    rows = {
        "own caption": per_scale_loss(model, prompts, toks, gains, LO_SCHEDULE),
        "other caption": per_scale_loss(model, prompts[1:] + prompts[:1], toks, gains, LO_SCHEDULE),
        "null prompt": per_scale_loss(model, prompts, toks, gains, LO_SCHEDULE, np.ones(args.n, bool)),
    }
    print("scale".ljust(14) + "".join(f"{h}x{w}".rjust(9) for h, w in LO_SCHEDULE.scales))
    for name, vals in rows.items():
        print(name.ljust(14) + "".join(f"{v:9.3f}" for v in vals))
    gap = sum(rows["other caption"]) - sum(rows["own caption"])
    print(f"gap (other - own, summed over scales): {gap:.3f}")


if __name__ == "__main__":
    main()
