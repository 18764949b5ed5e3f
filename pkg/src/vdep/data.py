"""Deterministic synthetic image-caption corpus and its on-disk format.

Every sample is a 16x16 RGB scene: one colored glyph (square, cross or
triangle) occupying one cell of a 4x4 grid, on a noisy gray background.
Captions follow a fixed 5-token template, so caption <-> scene is a
bijection over the 3*4*16 = 192 possible scenes. Images are never stored;
they are regenerated from (scene, seed), which keeps dataset files small
and diffable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

PAD, BOS, EOS, IMAGE, AUTO_IMAGE, DESCRIBE = 0, 1, 2, 3, 4, 5

SHAPES = ("square", "cross", "triangle")
COLORS = ("red", "green", "blue", "yellow")
GRID = 4  # scene cells per side

_COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}

# 4x4 glyph masks, row-major. Set-bit counts: square 16, cross 12, triangle 10.
GLYPH_MASKS = {
    "square": np.array([[1, 1, 1, 1],
                        [1, 1, 1, 1],
                        [1, 1, 1, 1],
                        [1, 1, 1, 1]], dtype=bool),
    "cross": np.array([[0, 1, 1, 0],
                       [1, 1, 1, 1],
                       [1, 1, 1, 1],
                       [0, 1, 1, 0]], dtype=bool),
    "triangle": np.array([[1, 0, 0, 0],
                          [1, 1, 0, 0],
                          [1, 1, 1, 0],
                          [1, 1, 1, 1]], dtype=bool),
}

BACKGROUND = 0.5


class Vocabulary:
    """Fixed token inventory with dense, stable ids.

    Ids 0..5 are reserved specials; the caption words follow in a fixed
    order, so the table is identical across runs and machines.
    """

    def __init__(self):
        tokens = ["<pad>", "<bos>", "<eos>", "<image>", "<auto_image>", "<describe>"]
        tokens += list(SHAPES)
        tokens += list(COLORS)
        tokens += [f"r{i}" for i in range(GRID)]
        tokens += [f"c{i}" for i in range(GRID)]
        tokens += ["at"]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index[token]

    def token(self, i: int) -> str:
        return self.tokens[i]

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        vocab = cls()
        stored = json.loads(text)
        if stored != vocab.tokens:
            raise ParseError("serialized vocabulary does not match the fixed inventory")
        return vocab


VOCAB = Vocabulary()
VOCAB_SIZE = len(VOCAB)


@dataclass(frozen=True)
class SyntheticScene:
    shape: str
    color: str
    row: int
    col: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS:
            raise ParseError(f"unknown shape/color: {self.shape}/{self.color}")
        if not (0 <= self.row < GRID and 0 <= self.col < GRID):
            raise ParseError(f"cell ({self.row},{self.col}) outside the {GRID}x{GRID} grid")


@dataclass
class MultimodalSample:
    index: int
    scene: SyntheticScene
    image: np.ndarray  # [side, side, channels] float64 in [0, 1]
    prompt_ids: list[int]
    response_ids: list[int]
    seed: int


@dataclass
class DatasetSpec:
    size: int
    seed: int = 0
    image_side: int = 16
    channels: int = 3
    noise: float = 0.05

    def __post_init__(self):
        if self.size < 1:
            raise ParseError("dataset size must be >= 1")


def sample_seed(master_seed: int, index: int) -> int:
    """Stable 63-bit per-sample seed derived from (master seed, index)."""
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def caption(scene: SyntheticScene) -> list[int]:
    """Fixed 5-token template: shape, color, 'at', row word, col word."""
    return [
        VOCAB.id(scene.shape),
        VOCAB.id(scene.color),
        VOCAB.id("at"),
        VOCAB.id(f"r{scene.row}"),
        VOCAB.id(f"c{scene.col}"),
    ]


def decode_caption(ids: list[int]) -> SyntheticScene:
    if len(ids) != 5:
        raise ParseError(f"caption must have 5 tokens, got {len(ids)}")
    shape, color, glue, row, col = (VOCAB.token(i) for i in ids)
    if glue != "at" or not row.startswith("r") or not col.startswith("c"):
        raise ParseError(f"tokens do not form a caption: {ids}")
    return SyntheticScene(shape=shape, color=color, row=int(row[1:]), col=int(col[1:]))


def render_scene(scene: SyntheticScene, seed: int, spec: DatasetSpec) -> np.ndarray:
    """Render the scene deterministically; the seed drives background noise only."""
    side, ch = spec.image_side, spec.channels
    cell = side // GRID
    _, noise_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(noise_ss)
    img = np.full((side, side, ch), BACKGROUND, dtype=np.float64)
    if spec.noise > 0:
        img += rng.uniform(-spec.noise, spec.noise, size=img.shape)
    mask = GLYPH_MASKS[scene.shape]
    rgb = _COLOR_RGB[scene.color][:ch]
    r0, c0 = scene.row * cell, scene.col * cell
    patch = img[r0:r0 + cell, c0:c0 + cell]
    if cell == mask.shape[0]:
        glyph = mask
    else:  # nearest-neighbor resample for non-default image sides
        idx = np.arange(cell) * mask.shape[0] // cell
        glyph = mask[np.ix_(idx, idx)]
    for k, v in enumerate(rgb):
        channel = patch[:, :, k]
        channel[glyph] = v
    return img


def generate_sample(spec: DatasetSpec, index: int) -> MultimodalSample:
    """Draw and render sample ``index``; pure in (spec, index)."""
    if index >= spec.size:
        raise ParseError(f"index {index} outside dataset of size {spec.size}")
    seed = sample_seed(spec.seed, index)
    scene_ss, _ = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(scene_ss)
    scene = SyntheticScene(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        color=COLORS[int(rng.integers(len(COLORS)))],
        row=int(rng.integers(GRID)),
        col=int(rng.integers(GRID)),
    )
    return MultimodalSample(
        index=index,
        scene=scene,
        image=render_scene(scene, seed, spec),
        prompt_ids=[DESCRIBE],
        response_ids=caption(scene),
        seed=seed,
    )


def generate_dataset(spec: DatasetSpec) -> list[MultimodalSample]:
    return [generate_sample(spec, i) for i in range(spec.size)]


def write_dataset(samples: list[MultimodalSample], path: str) -> None:
    """One flat JSON object per line; images are regenerated on read."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "index": s.index,
                "shape": s.scene.shape,
                "color": s.scene.color,
                "row": s.scene.row,
                "col": s.scene.col,
                "seed": s.seed,
                "response_ids": s.response_ids,
            }
            fh.write(json.dumps(record) + "\n")


def read_dataset(path: str, spec: DatasetSpec | None = None) -> list[MultimodalSample]:
    """Parse a ``.vdsl`` file and re-render its images.

    ``spec`` supplies image dimensions and noise; defaults match the
    generator defaults. Malformed records raise ParseError with the
    offending line number.
    """
    if spec is None:
        spec = DatasetSpec(size=1)
    samples: list[MultimodalSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                scene = SyntheticScene(shape=rec["shape"], color=rec["color"],
                                       row=rec["row"], col=rec["col"])
                sample = MultimodalSample(
                    index=rec["index"],
                    scene=scene,
                    image=render_scene(scene, rec["seed"], spec),
                    prompt_ids=[DESCRIBE],
                    response_ids=list(rec["response_ids"]),
                    seed=rec["seed"],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ParseError) as exc:
                raise ParseError(f"{path}: bad record on line {lineno}: {exc}") from exc
            if sample.response_ids != caption(scene):
                raise ParseError(f"{path}: line {lineno}: response_ids do not match the scene")
            samples.append(sample)
    return samples
