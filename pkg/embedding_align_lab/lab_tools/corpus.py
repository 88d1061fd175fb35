"""Procedural shapes corpus, vocabulary and tokenizer."""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..config import CorpusConfig
from ..errors import ConfigurationError
from .encoders import PAD_ID, UNK_ID

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross")

PALETTE: Dict[str, tuple] = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.30, 0.85),
    "yellow": (0.92, 0.85, 0.15),
    "purple": (0.55, 0.20, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "magenta": (0.85, 0.20, 0.70),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
}

BACKGROUND = 0.5
SUPERSAMPLE = 4
COLOR_JITTER = 0.04

# words beyond colors and shapes so short free-form target texts stay in-vocabulary
FILLER_WORDS = (
    "a", "an", "the", "of", "photo", "picture", "drawing", "image", "small", "large", "big", "tiny",
    "bright", "dark", "shape", "on", "with", "and", "gray", "background", "centered", "outlined",
    "solid", "pale",
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class CorpusItem:
    item_id: int
    image: np.ndarray
    caption: str
    class_id: int
    split: str  # "train" or "held-out"


@dataclass(frozen=True)
class Vocabulary:
    """Token string to id map; ids 0 and 1 are reserved for pad and unknown."""
    tokens: tuple

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN) or len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocabulary must start with <pad>, <unk> and hold unique tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        unique = sorted({w.lower() for w in words} - {PAD_TOKEN, UNK_TOKEN})
        return cls(tokens=(PAD_TOKEN, UNK_TOKEN, *unique))

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls.from_words([*FILLER_WORDS, *PALETTE, *SHAPES])

    def __len__(self):
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        return self.tokens[token_id]


def tokenize(caption: str, vocab: Vocabulary, max_length: int = 8, pad: bool = True) -> List[int]:
    """Lowercase whitespace split, unknown words -> <unk>, padded/truncated to max_length."""
    ids = [vocab.id_of(word) for word in caption.lower().split()][:max_length]
    if pad:
        ids += [PAD_ID] * (max_length - len(ids))
    return ids


def token_count(caption: str) -> int:
    return len(caption.split())


def caption_for(color: str, shape: str) -> str:
    return f"a {color} {shape}"


def class_captions(cfg: CorpusConfig) -> List[str]:
    """Caption of every class, indexed by class_id."""
    _validate(cfg)
    return [caption_for(color, shape) for shape in cfg.shapes for color in cfg.colors]


def _validate(cfg: CorpusConfig) -> None:
    if not cfg.shapes or not cfg.colors:
        raise ConfigurationError("corpus needs at least one shape and one color")
    unknown_shapes = [s for s in cfg.shapes if s not in SHAPES]
    unknown_colors = [c for c in cfg.colors if c not in PALETTE]
    if unknown_shapes or unknown_colors:
        raise ConfigurationError(f"unknown shapes {unknown_shapes} or colors {unknown_colors}")
    if len(set(cfg.shapes)) != len(cfg.shapes) or len(set(cfg.colors)) != len(cfg.colors):
        raise ConfigurationError("shape and color names must be unique")


def shape_mask(shape: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Fractional coverage of each pixel by the shape (supersampled)."""
    coords = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - cx, y - cy
    if shape == "circle":
        inside = dx ** 2 + dy ** 2 <= radius ** 2
    elif shape == "square":
        half = 0.85 * radius
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif shape == "triangle":
        base = 0.8 * radius
        # apex at dy = -radius, base at dy = +base with half-width radius
        inside = (dy <= base) & (np.abs(dx) * (base + radius) <= radius * (dy + radius))
    elif shape == "cross":
        arm = radius / 3.0
        inside = ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    else:
        raise ConfigurationError(f"unknown shape {shape}")
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render(shape: str, color: str, size: int, rng: np.random.Generator) -> np.ndarray:
    radius = rng.uniform(0.2, 0.33) * size
    margin = radius + 1.0
    cx, cy = rng.uniform(margin, size - margin, size=2)
    rgb = np.clip(np.asarray(PALETTE[color]) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0.0, 1.0)
    coverage = shape_mask(shape, size, cx, cy, radius)[:, :, None]
    image = BACKGROUND * (1.0 - coverage) + rgb[None, None, :] * coverage
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_corpus(cfg: CorpusConfig, image_size: int = 32) -> List[CorpusItem]:
    """|shapes|·|colors| classes × per_class items, deterministic in cfg.seed.

    Each item draws from its own generator seeded by (seed, class, index), so
    items can be rendered in any order or in parallel with identical bytes.
    """
    captions = class_captions(cfg)
    held_out = int(round(cfg.per_class * cfg.held_out_fraction))
    items = []
    for class_id, caption in enumerate(captions):
        shape = cfg.shapes[class_id // len(cfg.colors)]
        color = cfg.colors[class_id % len(cfg.colors)]
        split_rng = np.random.default_rng([cfg.seed, class_id, 1_000_003])
        held = set(split_rng.permutation(cfg.per_class)[:held_out].tolist())
        for index in range(cfg.per_class):
            rng = np.random.default_rng([cfg.seed, class_id, index])
            items.append(CorpusItem(
                item_id=len(items),
                image=render(shape, color, image_size, rng),
                caption=caption,
                class_id=class_id,
                split="held-out" if index in held else "train",
            ))
    logger.info(f"Generated {len(items)} items over {len(captions)} classes "
                f"({sum(i.split == 'held-out' for i in items)} held out)")
    return items


def split_items(items: Sequence[CorpusItem], split: str) -> List[CorpusItem]:
    return [item for item in items if item.split == split]
