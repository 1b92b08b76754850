"""Procedural caption->image corpus with controlled duplication.

Captions follow the fixed grammar "<size> <shape> <texture> at <position>"
over a 2 x 4 x 3 x 9 attribute grid.  Images are 32x32 grayscale in
[-1, 1], reproducible bit-exactly from (caption, nuisance_seed).

The pretraining distribution covers the bright/dim textures; the striped
slice is held out as the downstream (fine-tuning) distribution, so a
frozen model is visibly out of domain there.  Memorization pressure is
injected by repeating a small "hot set" of (caption, nuisance_seed) pairs
exactly dup_factor times.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .numerics import Rng, mix64

SIZES = ("small", "large")
SHAPES = ("circle", "square", "triangle", "cross")
TEXTURES = ("bright", "dim", "striped")
POSITIONS = (
    "top-left", "top", "top-right",
    "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
)

PAD = "<pad>"
VOCAB = (PAD,) + SIZES + SHAPES + TEXTURES + ("at",) + POSITIONS
PAD_ID = 0
WORD_IDS = {w: i for i, w in enumerate(VOCAB)}

CAPTION_LEN = 8
IMAGE_SIDE = 32

PRETRAIN_TEXTURES = ("bright", "dim")
FINETUNE_TEXTURE = "striped"


class TokenError(ValueError):
    """Unknown word or malformed caption."""


@dataclass(frozen=True)
class Caption:
    size: str
    shape: str
    texture: str
    position: str

    def __post_init__(self):
        if (self.size not in SIZES or self.shape not in SHAPES
                or self.texture not in TEXTURES or self.position not in POSITIONS):
            raise TokenError(f"invalid caption attributes: {self}")

    @property
    def text(self) -> str:
        return f"{self.size} {self.shape} {self.texture} at {self.position}"

    def token_ids(self) -> list[int]:
        return tokenize(self.text)

    @property
    def cell(self) -> tuple[int, int]:
        i = POSITIONS.index(self.position)
        return i // 3, i % 3


def all_captions() -> list[Caption]:
    """The full 216-tuple attribute grid in a fixed order."""
    return [Caption(sz, sh, tx, pos)
            for sz in SIZES for sh in SHAPES for tx in TEXTURES for pos in POSITIONS]


def tokenize(text: str) -> list[int]:
    """Caption text -> ids padded to CAPTION_LEN.  Empty text -> all PAD."""
    words = text.split()
    if len(words) > CAPTION_LEN:
        raise TokenError(f"caption too long: {len(words)} words")
    ids = []
    for w in words:
        if w not in WORD_IDS:
            raise TokenError(f"unknown word: {w!r}")
        ids.append(WORD_IDS[w])
    return ids + [PAD_ID] * (CAPTION_LEN - len(ids))


def detokenize(ids) -> str:
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(VOCAB):
            raise TokenError(f"token id out of range: {i}")
        if i != PAD_ID:
            words.append(VOCAB[i])
    return " ".join(words)


# -- rendering ----------------------------------------------------------------

_BACKGROUND = -1.0
_FILL = {"bright": 0.9, "dim": 0.25}
_STRIPE_HI, _STRIPE_LO, _STRIPE_PERIOD = 0.9, -0.6, 4
_RADIUS = {"small": 6.5, "large": 9.5}
_EDGE = 1.8          # soft-edge width in pixels
_JITTER = 2.0        # +-px of center jitter
_NOISE_SIGMA = 0.05

_YY, _XX = np.meshgrid(np.arange(IMAGE_SIDE, dtype=np.float64),
                       np.arange(IMAGE_SIDE, dtype=np.float64), indexing="ij")


def _coverage(caption: Caption, cx: float, cy: float) -> np.ndarray:
    """Per-pixel shape coverage in [0,1] with a soft edge."""
    r = _RADIUS[caption.size]
    dx = _XX - cx
    dy = _YY - cy
    if caption.shape == "circle":
        d = np.hypot(dx, dy) - r
    elif caption.shape == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - r * 0.9
    elif caption.shape == "triangle":
        # upward triangle: apex at (0, -1.2r), base y = +0.85r, half-width 1.1r
        slope = (1.2 * r + 0.85 * r) / (1.1 * r)
        nrm = np.hypot(slope, 1.0)
        d_base = dy - 0.85 * r
        d_edges = (slope * np.abs(dx) - dy - 1.2 * r) / nrm
        d = np.maximum(d_base, d_edges)
    else:  # cross: union of a horizontal and a vertical bar
        bar = r * 0.45
        d_h = np.maximum(np.abs(dy) - bar, np.abs(dx) - r)
        d_v = np.maximum(np.abs(dx) - bar, np.abs(dy) - r)
        d = np.minimum(d_h, d_v)
    return np.clip(0.5 - d / _EDGE, 0.0, 1.0)


def render(caption: Caption, nuisance_seed: int) -> np.ndarray:
    """Deterministic (1, 32, 32) float32 image in [-1, 1]."""
    rng = Rng(int(nuisance_seed) & ((1 << 64) - 1), "render")
    jx, jy = rng.uniform(-_JITTER, _JITTER, shape=2)
    row, col = caption.cell
    cell = IMAGE_SIDE / 3.0
    cx = (col + 0.5) * cell + jx
    cy = (row + 0.5) * cell + jy
    cover = _coverage(caption, cx, cy)
    if caption.texture == "striped":
        # stripe phase is keyed to absolute rows, so jitter cannot shift it
        stripe_rows = (_YY.astype(np.int64) % _STRIPE_PERIOD) < (_STRIPE_PERIOD // 2)
        fill = np.where(stripe_rows, _STRIPE_HI, _STRIPE_LO)
    else:
        fill = _FILL[caption.texture]
    img = _BACKGROUND + cover * (fill - _BACKGROUND)
    img = img + rng.normal((IMAGE_SIDE, IMAGE_SIDE)).astype(np.float64) * _NOISE_SIGMA
    return np.clip(img, -1.0, 1.0).astype(np.float32)[None, :, :]


# -- corpus -------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    n_base: int = 8192
    n_ft_unique: int = 256
    hot_set_size: int = 16
    dup_factor: int = 32
    seed: int = 0
    val_size: int = 432
    test_size: int = 256

    def validate(self):
        if min(self.n_base, self.n_ft_unique, self.val_size, self.test_size) <= 0:
            raise ValueError("corpus sizes must be positive")
        if self.hot_set_size < 0 or self.dup_factor < 0:
            raise ValueError("hot_set_size and dup_factor must be non-negative")
        if self.hot_set_size > self.n_ft_unique:
            raise ValueError("hot_set_size may not exceed n_ft_unique")


@dataclass(frozen=True)
class Sample:
    id: int
    caption: Caption
    nuisance_seed: int
    split: str

    def render(self) -> np.ndarray:
        return render(self.caption, self.nuisance_seed)


class Corpus:
    """Materialized splits plus lazily cached image arrays."""

    def __init__(self, spec: CorpusSpec, splits: dict[str, list[Sample]],
                 hot_pairs: list[tuple[Caption, int]]):
        self.spec = spec
        self.splits = splits
        self.hot_pairs = hot_pairs
        self._image_cache: dict[str, np.ndarray] = {}

    def samples(self, split: str) -> list[Sample]:
        return self.splits[split]

    def images(self, split: str) -> np.ndarray:
        if split not in self._image_cache:
            s = self.splits[split]
            out = np.empty((len(s), 1, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
            for i, smp in enumerate(s):
                out[i] = smp.render()
            self._image_cache[split] = out
        return self._image_cache[split]

    def captions(self, split: str) -> list[Caption]:
        return [s.caption for s in self.splits[split]]

    def hot_captions(self) -> list[Caption]:
        return [c for c, _ in self.hot_pairs]


def _nuisance_seed(corpus_seed: int, sample_id: int) -> int:
    # bijective in sample_id for a fixed corpus seed, so distinct ids can
    # never collide into the same (caption, seed) pair
    return mix64(mix64(corpus_seed) ^ sample_id)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Build pretrain / finetune / val / test splits, leak-free by id and
    by (caption, nuisance_seed)."""
    spec.validate()
    grid = all_captions()
    pretrain_caps = [c for c in grid if c.texture in PRETRAIN_TEXTURES]
    ft_caps = [c for c in grid if c.texture == FINETUNE_TEXTURE]
    if spec.hot_set_size > len(ft_caps):
        raise ValueError("hot_set_size exceeds the fine-tune caption slice")

    rng = Rng(spec.seed, "corpus")
    hot_idx = rng.choice(len(ft_caps), size=spec.hot_set_size, replace=False)
    hot_caps = [ft_caps[i] for i in sorted(hot_idx)]
    unique_pool = [c for c in ft_caps if c not in hot_caps]

    next_id = 0

    def take_id():
        nonlocal next_id
        i = next_id
        next_id += 1
        return i

    def roundrobin(caps: list[Caption], n: int, shuffle_rng: Rng) -> list[Caption]:
        order = shuffle_rng.permutation(len(caps))
        return [caps[order[i % len(caps)]] for i in range(n)]

    splits: dict[str, list[Sample]] = {"pretrain": [], "finetune": [], "val": [], "test": []}

    for cap in roundrobin(pretrain_caps, spec.n_base, rng.child("pretrain_order")):
        i = take_id()
        splits["pretrain"].append(Sample(i, cap, _nuisance_seed(spec.seed, i), "train"))

    for cap in roundrobin(unique_pool, spec.n_ft_unique, rng.child("ft_order")):
        i = take_id()
        splits["finetune"].append(Sample(i, cap, _nuisance_seed(spec.seed, i), "train"))

    hot_pairs: list[tuple[Caption, int]] = []
    for cap in hot_caps:
        anchor = take_id()
        seed = _nuisance_seed(spec.seed, anchor)
        hot_pairs.append((cap, seed))
        for k in range(spec.dup_factor):
            i = anchor if k == 0 else take_id()
            splits["finetune"].append(Sample(i, cap, seed, "train"))

    for cap in roundrobin(grid, spec.val_size, rng.child("val_order")):
        i = take_id()
        splits["val"].append(Sample(i, cap, _nuisance_seed(spec.seed, i), "val"))

    for cap in roundrobin(ft_caps, spec.test_size, rng.child("test_order")):
        i = take_id()
        splits["test"].append(Sample(i, cap, _nuisance_seed(spec.seed, i), "test"))

    return Corpus(spec, splits, hot_pairs)


# -- manifest + raw cache -------------------------------------------------------

def save_manifest(corpus: Corpus, path: str | Path) -> None:
    doc = {
        "spec": asdict(corpus.spec),
        "hot_pairs": [[c.text, seed] for c, seed in corpus.hot_pairs],
        "samples": [
            {"id": s.id, "caption": s.caption.text, "nuisance_seed": s.nuisance_seed,
             "split": split, "role": s.split}
            for split in ("pretrain", "finetune", "val", "test")
            for s in corpus.splits[split]
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def _caption_from_text(text: str) -> Caption:
    words = text.split()
    if len(words) != 5 or words[3] != "at":
        raise TokenError(f"malformed caption text: {text!r}")
    return Caption(words[0], words[1], words[2], words[4])


def load_manifest(path: str | Path) -> Corpus:
    doc = json.loads(Path(path).read_text())
    spec = CorpusSpec(**doc["spec"])
    splits: dict[str, list[Sample]] = {"pretrain": [], "finetune": [], "val": [], "test": []}
    for rec in doc["samples"]:
        splits[rec["split"]].append(Sample(
            rec["id"], _caption_from_text(rec["caption"]),
            rec["nuisance_seed"], rec["role"]))
    hot_pairs = [(_caption_from_text(t), s) for t, s in doc["hot_pairs"]]
    return Corpus(spec, splits, hot_pairs)


def save_image_cache(corpus: Corpus, path: str | Path) -> None:
    """Flat little-endian float32 records ordered by sample id."""
    samples = sorted((s for split in corpus.splits.values() for s in split),
                     key=lambda s: s.id)
    arr = np.concatenate([s.render().ravel() for s in samples]).astype("<f4")
    arr.tofile(str(path))
