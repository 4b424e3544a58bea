"""Static plots of a metrics log, one PNG per (stage, metric)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_metrics  # noqa: E402


def plot_metrics(log: str | Path, out_dir: str | Path) -> list[Path]:
    data: dict[tuple[str, str], list[tuple[int, float]]] = defaultdict(list)
    for r in read_metrics(log):
        data[(r["stage"], r["metric"])].append((r["step"], float(r["value"])))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (stage, metric), pts in sorted(data.items()):
        if len(pts) < 2:
            continue
        pts.sort()
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="." if len(pts) < 40 else None)
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        ax.set_title(f"{stage}: {metric}")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = out_dir / f"{stage}__{metric}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    summary = [(s, m, pts[-1][1]) for (s, m), pts in sorted(data.items()) if len(pts) == 1]
    if summary:
        p = out_dir / "summary.tsv"
        p.write_text("".join(f"{s}\t{m}\t{v:.6g}\n" for s, m, v in summary))
        paths.append(p)
    return paths
