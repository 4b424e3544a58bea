"""Procedural shapes corpus: renderer, caption grammar, oracle classifier, record sampling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
BACKGROUNDS = ("white", "black", "gray")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
RESOLUTIONS = (32, 64)

RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.75),
    "orange": (1.00, 0.55, 0.05),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}

SHAPE_FRACTION = 0.6  # shape extent relative to its grid cell
JITTER = 0.08  # max centre offset, in cells
SUPERSAMPLE = 4

KINDS = ("t2i", "understanding_qa", "editing", "preference_prompt")
CORPUS_FORMAT = "uvar-corpus/1"


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    cell: int  # row-major index into the 3x3 grid
    background: str = "white"
    resolution: int = 32

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if not 0 <= self.cell < 9:
            raise ValueError(f"cell must be in 0..8, got {self.cell}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"unsupported resolution {self.resolution}")

    @property
    def row(self) -> int:
        return self.cell // 3

    @property
    def col(self) -> int:
        return self.cell % 3


def all_specs(resolution: int = 32) -> list[SceneSpec]:
    return [SceneSpec(s, c, k, b, resolution) for s in SHAPES for c in COLORS for k in range(9) for b in BACKGROUNDS]


# ---- rendering -------------------------------------------------------------

def _jitter(seed: int) -> tuple[float, float]:
    rng = np.random.default_rng([seed, 7919])
    dy, dx = rng.uniform(-JITTER, JITTER, size=2)
    return float(dy), float(dx)


def shape_center(spec: SceneSpec, seed: int) -> tuple[float, float]:
    """Pixel coordinates (y, x) of the shape's bounding-box centre."""
    cell = spec.resolution / 3.0
    dy, dx = _jitter(seed)
    return (spec.row + 0.5 + dy) * cell, (spec.col + 0.5 + dx) * cell


@lru_cache(maxsize=8)
def _subpixel_grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    n = resolution * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / SUPERSAMPLE
    return np.meshgrid(c, c, indexing="ij")


def coverage(shape: str, cy: float, cx: float, resolution: int) -> np.ndarray:
    """Anti-aliased fractional coverage in [0, 1] of a shape centred at (cy, cx)."""
    yy, xx = _subpixel_grid(resolution)
    half = SHAPE_FRACTION * resolution / 3.0 / 2.0
    if shape == "circle":
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
    elif shape == "square":
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif shape == "triangle":
        # apex up, base down; base width == height == 2 * half
        t = (yy - (cy - half)) / (2 * half)
        inside = (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    s = SUPERSAMPLE
    return inside.reshape(resolution, s, resolution, s).mean(axis=(1, 3))


def render(spec: SceneSpec, seed: int = 0) -> np.ndarray:
    """(H, W, 3) float image in [0, 1]; deterministic in (spec, seed)."""
    cy, cx = shape_center(spec, seed)
    alpha = coverage(spec.shape, cy, cx, spec.resolution)[..., None]
    bg = np.asarray(RGB[spec.background])
    fg = np.asarray(RGB[spec.color])
    return (1.0 - alpha) * bg + alpha * fg


# ---- caption grammar -------------------------------------------------------

def location_phrase(cell: int) -> str:
    r, c = divmod(cell, 3)
    if r == 1 and c == 1:
        return "the center"
    return f"the {ROWS[r]} {COLS[c]}"


def caption(spec: SceneSpec) -> str:
    return f"a {spec.color} {spec.shape} in {location_phrase(spec.cell)}"


def parse_caption(text: str, background: str = "white", resolution: int = 32) -> SceneSpec:
    words = text.split(" ")
    if len(words) not in (6, 7) or words[0] != "a" or words[3] != "in" or words[4] != "the":
        raise CaptionError(f"not a grammar caption: {text!r}")
    color, shape = words[1], words[2]
    if color not in COLORS or shape not in SHAPES:
        raise CaptionError(f"unknown color/shape in caption: {text!r}")
    if len(words) == 6:
        if words[5] != "center":
            raise CaptionError(f"not a grammar caption: {text!r}")
        cell = 4
    else:
        if words[5] not in ROWS or words[6] not in COLS:
            raise CaptionError(f"bad location in caption: {text!r}")
        cell = ROWS.index(words[5]) * 3 + COLS.index(words[6])
        if cell == 4:
            raise CaptionError(f"centre cell must be written 'in the center': {text!r}")
    return SceneSpec(shape, color, cell, background, resolution)


def grammar_words() -> list[str]:
    """Every word the caption, question, answer and instruction grammars can emit."""
    words = ["a", "in", "the", "center"]
    words += list(COLORS) + list(SHAPES) + list(ROWS) + list(COLS) + list(BACKGROUNDS)
    words += "what color is shape which row column it change to move".split()
    seen: dict[str, None] = {}
    for w in words:
        seen.setdefault(w, None)
    return list(seen)


# ---- oracle classifier -----------------------------------------------------

UNKNOWN = "unknown"


@dataclass
class OracleReading:
    color: str
    shape: str
    cell: int | None

    @property
    def known(self) -> bool:
        return self.color != UNKNOWN


def oracle_classify(image: np.ndarray, min_contrast: float = 0.25) -> OracleReading:
    """Read (color, shape, cell) from an image without any learned component.

    Background is the median of the border ring; foreground colour is the mean
    of the strongest-contrast pixels, snapped to the nearest palette entry.
    Shape is chosen by matching the soft coverage map against the renderer's
    three templates, each placed so its centroid sits on the measured one.
    """
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    res = img.shape[0]
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    dist = np.linalg.norm(img - bg, axis=-1)
    peak = dist.max()
    if peak < min_contrast:
        return OracleReading(UNKNOWN, UNKNOWN, None)
    core = dist >= 0.75 * peak
    fg = img[core].mean(axis=0)
    color = min(COLORS, key=lambda c: float(np.sum((np.asarray(RGB[c]) - fg) ** 2)))
    direction = fg - bg
    alpha = np.clip(((img - bg) @ direction) / float(direction @ direction), 0.0, 1.0)
    alpha = np.where(alpha > 0.15, alpha, 0.0)
    ys, xs = np.mgrid[0:res, 0:res] + 0.5
    # ignore stray pixels far from the high-contrast core
    reach = 0.6 * res / 3.0
    near = (np.abs(ys - ys[core].mean()) <= reach) & (np.abs(xs - xs[core].mean()) <= reach)
    alpha = np.where(near, alpha, 0.0)
    mass = alpha.sum()
    if mass <= 0:
        return OracleReading(UNKNOWN, UNKNOWN, None)
    cy = float((alpha * ys).sum() / mass)
    cx = float((alpha * xs).sum() / mass)
    cell_px = res / 3.0
    row = min(2, max(0, int(cy // cell_px)))
    col = min(2, max(0, int(cx // cell_px)))
    best, best_err = UNKNOWN, math.inf
    for shape in SHAPES:
        oy = _centroid_offset(shape, res)
        tmpl = coverage(shape, cy - oy, cx, res)
        err = float(np.sum((tmpl - alpha) ** 2))
        if err < best_err:
            best, best_err = shape, err
    return OracleReading(color, best, row * 3 + col)


@lru_cache(maxsize=16)
def _centroid_offset(shape: str, resolution: int) -> float:
    """Vertical offset of the area centroid from the bounding-box centre, in pixels."""
    c = resolution / 2.0
    cov = coverage(shape, c, c, resolution)
    ys = np.arange(resolution)[:, None] + 0.5
    return float((cov * ys).sum() / cov.sum() - c)


# ---- records and corpora ---------------------------------------------------

QUESTIONS = {
    "color": "what color is the shape",
    "shape": "what shape is it",
    "row": "which row is the shape in",
    "col": "which column is the shape in",
}


def answer(spec: SceneSpec, attribute: str) -> str:
    if attribute == "color":
        return spec.color
    if attribute == "shape":
        return spec.shape
    if attribute == "row":
        return ROWS[spec.row]
    if attribute == "col":
        return COLS[spec.col]
    raise ValueError(f"unknown attribute {attribute!r}")


def edit_instruction(attribute: str, target: SceneSpec) -> str:
    if attribute == "color":
        return f"change the color to {target.color}"
    if attribute == "shape":
        return f"change the shape to {target.shape}"
    if attribute == "cell":
        return f"move it to {location_phrase(target.cell)}"
    raise ValueError(f"unknown edit attribute {attribute!r}")


def parse_instruction(text: str) -> tuple[str, str | int]:
    w = text.split(" ")
    if w[:4] == ["change", "the", "color", "to"] and len(w) == 5 and w[4] in COLORS:
        return "color", w[4]
    if w[:4] == ["change", "the", "shape", "to"] and len(w) == 5 and w[4] in SHAPES:
        return "shape", w[4]
    if w[:3] == ["move", "it", "to"]:
        probe = parse_caption("a red circle in " + " ".join(w[3:]))
        return "cell", probe.cell
    raise CaptionError(f"not an edit instruction: {text!r}")


def apply_edit(spec: SceneSpec, instruction: str) -> SceneSpec:
    attr, value = parse_instruction(instruction)
    return replace(spec, **{attr: value})


@dataclass
class Record:
    kind: str
    spec: SceneSpec
    seed: int
    text: str  # caption, question or instruction: whatever the prompt is
    answer: str | None = None
    target: SceneSpec | None = None  # editing only
    attribute: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"format": CORPUS_FORMAT, "kind": self.kind, "seed": self.seed, "text": self.text,
             "spec": asdict(self.spec)}
        if self.answer is not None:
            d["answer"] = self.answer
        if self.target is not None:
            d["target"] = asdict(self.target)
        if self.attribute is not None:
            d["attribute"] = self.attribute
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Record":
        if d.get("format") != CORPUS_FORMAT:
            raise ValueError(f"unsupported corpus format {d.get('format')!r}, expected {CORPUS_FORMAT!r}")
        return cls(
            kind=d["kind"], spec=SceneSpec(**d["spec"]), seed=int(d["seed"]), text=d["text"],
            answer=d.get("answer"), target=SceneSpec(**d["target"]) if "target" in d else None,
            attribute=d.get("attribute"), extra=d.get("extra", {}),
        )

    def image(self) -> np.ndarray:
        return render(self.spec, self.seed)

    def target_image(self) -> np.ndarray:
        if self.target is None:
            raise ValueError("record has no target image")
        return render(self.target, self.seed + 1)


def random_spec(rng: np.random.Generator, resolution: int = 32) -> SceneSpec:
    return SceneSpec(
        SHAPES[rng.integers(3)], COLORS[rng.integers(6)], int(rng.integers(9)),
        BACKGROUNDS[rng.integers(3)], resolution,
    )


def make_corpus(kind: str, n: int, seed: int, resolution: int = 32) -> list[Record]:
    if kind not in KINDS:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {KINDS}")
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    out = []
    for _ in range(n):
        spec = random_spec(rng, resolution)
        rseed = int(rng.integers(2**31))
        if kind in ("t2i", "preference_prompt"):
            out.append(Record(kind, spec, rseed, caption(spec)))
        elif kind == "understanding_qa":
            attr = tuple(QUESTIONS)[rng.integers(len(QUESTIONS))]
            out.append(Record(kind, spec, rseed, QUESTIONS[attr], answer=answer(spec, attr), attribute=attr))
        else:
            attr = ("color", "shape", "cell")[rng.integers(3)]
            current = getattr(spec, attr)
            pool = {"color": COLORS, "shape": SHAPES, "cell": tuple(range(9))}[attr]
            choices = [v for v in pool if v != current]
            target = replace(spec, **{attr: choices[rng.integers(len(choices))]})
            out.append(Record(kind, spec, rseed, edit_instruction(attr, target), target=target, attribute=attr))
    return out


def write_corpus(records: Iterable[Record], path: str | Path, image_dir: str | Path | None = None) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w") as fh:
        for i, rec in enumerate(records):
            d = rec.to_json()
            if image_dir is not None:
                from .imageio import save_image

                img_path = Path(image_dir) / f"{i:06d}.png"
                save_image(rec.image(), img_path)
                d["image"] = str(img_path)
            fh.write(json.dumps(d, sort_keys=True) + "\n")
            count += 1
    return count


def read_corpus(path: str | Path) -> Iterator[Record]:
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                yield Record.from_json(json.loads(line))
