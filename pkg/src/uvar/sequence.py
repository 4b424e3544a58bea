"""Text vocabulary, special markers, and the single interleaved token stream."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .data import grammar_words

TEXT, IMAGE_UND, IMAGE_GEN = 0, 1, 2
SEGMENT_NAMES = {TEXT: "text", IMAGE_UND: "image_und", IMAGE_GEN: "image_gen"}

SPECIAL_NAMES = (
    "bos", "eos", "pad",
    "image_gen_start", "image_gen_end",
    "image_und_start", "image_und_end",
    "null_prompt",
    "image_gen_slot", "image_und_slot",
)


class SequenceError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at index {position})")
        self.position = position


@dataclass(frozen=True)
class SpecialTokens:
    bos: int
    eos: int
    pad: int
    image_gen_start: int
    image_gen_end: int
    image_und_start: int
    image_und_end: int
    null_prompt: int
    image_gen_slot: int
    image_und_slot: int

    def ids(self) -> tuple[int, ...]:
        return tuple(getattr(self, n) for n in SPECIAL_NAMES)


class Vocab:
    """Word-level vocabulary with a byte fallback.

    Known words map to one id each. An unknown word becomes a word-start
    marker followed by its UTF-8 bytes, so every string round-trips.
    Special ids sit above the text range.
    """

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.byte_start = len(self.words)
        self.byte_base = self.byte_start + 1
        self.n_text = self.byte_base + 256
        self.special = SpecialTokens(*range(self.n_text, self.n_text + len(SPECIAL_NAMES)))
        self.size = self.n_text + len(SPECIAL_NAMES)

    def encode(self, s: str) -> list[int]:
        if s == "":
            return []
        ids: list[int] = []
        for word in s.split(" "):
            wid = self.word_to_id.get(word)
            if wid is not None:
                ids.append(wid)
            else:
                ids.append(self.byte_start)
                ids.extend(self.byte_base + b for b in word.encode("utf-8"))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words: list[str] = []
        buf: bytearray | None = None
        for t in ids:
            t = int(t)
            if t < self.byte_start:
                if buf is not None:
                    words.append(buf.decode("utf-8", errors="replace"))
                    buf = None
                words.append(self.words[t])
            elif t == self.byte_start:
                if buf is not None:
                    words.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            elif t < self.n_text:
                if buf is None:
                    buf = bytearray()
                buf.append(t - self.byte_base)
            else:
                raise SequenceError(f"decode: id {t} is a special token, not text")
        if buf is not None:
            words.append(buf.decode("utf-8", errors="replace"))
        return " ".join(words)

    def is_text(self, t: int) -> bool:
        return 0 <= t < self.n_text


@lru_cache(maxsize=1)
def default_vocab() -> Vocab:
    return Vocab(grammar_words())


def tokenize_text(s: str, vocab: Vocab | None = None) -> list[int]:
    return (vocab or default_vocab()).encode(s)


def detokenize(ids: Sequence[int], vocab: Vocab | None = None) -> str:
    return (vocab or default_vocab()).decode(ids)


@dataclass
class MixedSequence:
    ids: np.ndarray  # (n,) int64
    segments: np.ndarray  # (n,) TEXT / IMAGE_UND / IMAGE_GEN
    scale: np.ndarray  # (n,) scale index for generation slots, -1 elsewhere
    loss_mask: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def gen_positions(self) -> np.ndarray:
        return np.flatnonzero(self.segments == IMAGE_GEN)

    @property
    def und_positions(self) -> np.ndarray:
        return np.flatnonzero(self.segments == IMAGE_UND)


@dataclass(frozen=True)
class ParsedSequence:
    prompt: str
    response: str | None
    gen_blocks: tuple[int, ...] | None
    und_patches: int | None


def assemble(
    prompt: str,
    response_text: str | None = None,
    gen_blocks: Sequence[int] | None = None,
    und_patches: int | None = None,
    vocab: Vocab | None = None,
    null_prompt: bool = False,
    generate: bool | None = None,
) -> MixedSequence:
    """Lay out ``[bos, und?, prompt, response?, gen?, eos]``.

    ``gen_blocks`` are the per-scale slot counts (see ``segment_blocks``).
    With ``null_prompt`` the prompt is replaced by the single null token.
    """
    vocab = vocab or default_vocab()
    sp = vocab.special
    if generate and gen_blocks is None:
        raise SequenceError("generation requested but no scale schedule given")
    ids: list[int] = [sp.bos]
    seg: list[int] = [TEXT]
    scale: list[int] = [-1]
    loss: list[bool] = [False]

    def push(t, s=TEXT, k=-1, lm=False):
        ids.append(t)
        seg.append(s)
        scale.append(k)
        loss.append(lm)

    if und_patches:
        push(sp.image_und_start)
        for _ in range(und_patches):
            push(sp.image_und_slot, IMAGE_UND)
        push(sp.image_und_end)
    if null_prompt:
        push(sp.null_prompt)
    else:
        for t in vocab.encode(prompt):
            push(t)
    if response_text is not None:
        for t in vocab.encode(response_text):
            push(t, lm=True)
    if gen_blocks is not None:
        if any(b < 1 for b in gen_blocks) or not len(gen_blocks):
            raise SequenceError(f"invalid generation block sizes {list(gen_blocks)}")
        push(sp.image_gen_start)
        for k, n in enumerate(gen_blocks):
            for _ in range(n):
                push(sp.image_gen_slot, IMAGE_GEN, k, True)
        push(sp.image_gen_end)
    push(sp.eos)
    return MixedSequence(np.array(ids, dtype=np.int64), np.array(seg, dtype=np.int8),
                         np.array(scale, dtype=np.int64), np.array(loss, dtype=bool))


def parse(seq: MixedSequence, vocab: Vocab | None = None) -> ParsedSequence:
    vocab = vocab or default_vocab()
    sp = vocab.special
    ids = [int(t) for t in seq.ids]
    if not ids or ids[0] != sp.bos:
        raise SequenceError("sequence must start with bos", 0)
    open_marker: tuple[str, int] | None = None
    und_count = gen_count = 0
    seen_und = seen_gen = False
    prompt: list[int] = []
    response: list[int] = []
    blocks: list[int] = []
    has_null = False
    end = None
    for i in range(1, len(ids)):
        t = ids[i]
        if t == sp.eos:
            if open_marker is not None:
                raise SequenceError(f"unterminated {open_marker[0]} opened at {open_marker[1]}", i)
            end = i
            break
        if t in (sp.image_und_start, sp.image_gen_start):
            kind = "image_und" if t == sp.image_und_start else "image_gen"
            if open_marker is not None:
                raise SequenceError(f"{kind} marker inside open {open_marker[0]} block", i)
            if (kind == "image_gen" and seen_gen) or (kind == "image_und" and seen_und):
                raise SequenceError(f"more than one {kind} block", i)
            open_marker = (kind, i)
            continue
        if t in (sp.image_und_end, sp.image_gen_end):
            kind = "image_und" if t == sp.image_und_end else "image_gen"
            if open_marker is None or open_marker[0] != kind:
                raise SequenceError(f"{kind} end marker without matching start", i)
            if kind == "image_und":
                seen_und = True
            else:
                seen_gen = True
            open_marker = None
            continue
        if t == sp.image_und_slot:
            if open_marker is None or open_marker[0] != "image_und":
                raise SequenceError("understanding slot outside its markers", i)
            und_count += 1
            continue
        if t == sp.image_gen_slot:
            if open_marker is None or open_marker[0] != "image_gen":
                raise SequenceError("generation slot outside its markers", i)
            k = int(seq.scale[i])
            if k < 0:
                raise SequenceError("generation slot without a scale index", i)
            if k == len(blocks):
                blocks.append(0)
            elif k != len(blocks) - 1:
                raise SequenceError("generation scale indices out of order", i)
            blocks[k] += 1
            gen_count += 1
            continue
        if open_marker is not None:
            raise SequenceError(f"token {t} inside {open_marker[0]} block", i)
        if t == sp.null_prompt:
            has_null = True
            continue
        if not vocab.is_text(t):
            raise SequenceError(f"unexpected special token {t}", i)
        if seen_gen:
            raise SequenceError("text after the generation block", i)
        (response if seq.loss_mask[i] else prompt).append(t)
    if end is None:
        if open_marker is not None:
            raise SequenceError(f"unterminated {open_marker[0]} opened at {open_marker[1]}", open_marker[1])
        raise SequenceError("missing eos", len(ids))
    if end != len(ids) - 1:
        raise SequenceError("tokens after eos", end + 1)
    if has_null and prompt:
        raise SequenceError("null prompt mixed with prompt text")
    return ParsedSequence(
        prompt=vocab.decode(prompt),
        response=vocab.decode(response) if response else None,
        gen_blocks=tuple(blocks) if seen_gen else None,
        und_patches=und_count if seen_und else None,
    )


# ---- batching --------------------------------------------------------------

@dataclass
class Batch:
    """Left-padded batch of sequences that share image-block layouts."""

    ids: np.ndarray  # (B, L)
    segments: np.ndarray  # (B, L)
    pos_ids: np.ndarray  # (B, L) index among non-generation positions, 0 at bos
    key_valid: np.ndarray  # (B, L) False on padding
    loss_mask: np.ndarray  # (B, L)
    gen_positions: np.ndarray | None  # (B, G)
    gen_scale: np.ndarray | None  # (G,) scale index of each generation slot
    und_positions: np.ndarray | None  # (B, U)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def text_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Next-token targets and mask for the text head: logits at t predict token t + 1."""
        tgt = np.zeros_like(self.ids)
        tgt[:, :-1] = self.ids[:, 1:]
        mask = np.zeros_like(self.loss_mask)
        mask[:, :-1] = self.loss_mask[:, 1:] & (self.segments[:, 1:] == TEXT)
        return tgt, mask


def collate(seqs: Sequence[MixedSequence], vocab: Vocab | None = None) -> Batch:
    vocab = vocab or default_vocab()
    if not seqs:
        raise SequenceError("cannot collate an empty batch")
    length = max(len(s) for s in seqs)
    b = len(seqs)
    ids = np.full((b, length), vocab.special.pad, dtype=np.int64)
    segments = np.zeros((b, length), dtype=np.int8)
    pos = np.zeros((b, length), dtype=np.int64)
    valid = np.zeros((b, length), dtype=bool)
    loss = np.zeros((b, length), dtype=bool)
    gen_pos, und_pos, gen_scale = [], [], None
    for i, s in enumerate(seqs):
        off = length - len(s)
        ids[i, off:] = s.ids
        segments[i, off:] = s.segments
        pos[i, off:] = np.cumsum(s.segments != IMAGE_GEN) - 1  # generation slots do not advance it
        valid[i, off:] = True
        loss[i, off:] = s.loss_mask
        g = s.gen_positions
        gen_pos.append(g + off)
        und_pos.append(s.und_positions + off)
        sc = s.scale[g]
        if gen_scale is None:
            gen_scale = sc
        elif not np.array_equal(gen_scale, sc):
            raise SequenceError("sequences in a batch must share the generation block layout")
    if len({len(g) for g in und_pos}) != 1:
        raise SequenceError("sequences in a batch must agree on understanding-image presence")
    return Batch(
        ids=ids, segments=segments, pos_ids=pos, key_valid=valid, loss_mask=loss,
        gen_positions=np.stack(gen_pos) if len(gen_scale) else None,
        gen_scale=gen_scale if len(gen_scale) else None,
        und_positions=np.stack(und_pos) if len(und_pos[0]) else None,
    )
