"""Synthetic single-image stand-ins with separable content and style.

A sample lives on a ``grid x grid`` token lattice. Content is a binary shape
mask over the tokens; style is a two-colour palette (foreground, background)
in token space. The target paints the mask with the palette, so content is
purely spatial and style is purely channel-wise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvariantError
from ..tensor import Rng

_CONTENT_STREAM = 1
_STYLE_STREAM = 2
_NOISE_STREAM = 3


@dataclass(frozen=True)
class SyntheticSample:
    content_field: np.ndarray  # (tokens,) 0/1 mask
    style_field: np.ndarray    # (2, token_dim) foreground / background colours
    target: np.ndarray         # (tokens, token_dim)
    content_label: int
    style_label: int
    seed: int = 0

    @property
    def grid(self) -> int:
        return math.isqrt(self.target.shape[0])


def content_mask(label: int, tokens: int, seed: int = 0) -> np.ndarray:
    """Half the tokens on, chosen by a permutation keyed on (seed, label)."""
    order = Rng(seed).child(_CONTENT_STREAM, label).permutation(tokens)
    mask = np.zeros(tokens)
    mask[order[: tokens // 2]] = 1.0
    return mask


def style_palette(label: int, token_dim: int, seed: int = 0) -> np.ndarray:
    return Rng(seed).child(_STYLE_STREAM, label).normal((2, token_dim))


def compose(mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    return np.outer(mask, palette[0]) + np.outer(1.0 - mask, palette[1])


def make_sample(content_label: int, style_label: int, *, grid: int = 4, token_dim: int = 16,
                seed: int = 0) -> SyntheticSample:
    if grid < 1:
        raise InvariantError("grid must be >= 1")
    mask = content_mask(content_label, grid * grid, seed)
    palette = style_palette(style_label, token_dim, seed)
    return SyntheticSample(mask, palette, compose(mask, palette), content_label, style_label, seed)


def noise_latent(tokens: int, token_dim: int, seed: int = 0) -> np.ndarray:
    return Rng(seed).child(_NOISE_STREAM).normal((tokens, token_dim))


def noised_input(target: np.ndarray, noise: np.ndarray, level: float) -> np.ndarray:
    """``sqrt(1 - level^2) * target + level * noise``; ``level=1`` is pure noise."""
    if not 0.0 <= level <= 1.0:
        raise InvariantError(f"noise level must be in [0, 1], got {level}")
    return math.sqrt(1.0 - level * level) * target + level * noise


def center_crop(grid_tokens: np.ndarray, side: int) -> np.ndarray:
    """Central ``side x side`` window of a square token grid (row-major tokens)."""
    n = math.isqrt(grid_tokens.shape[0])
    if n * n != grid_tokens.shape[0] or not 1 <= side <= n:
        raise InvariantError(f"cannot crop a {grid_tokens.shape[0]}-token grid to {side}x{side}")
    lo = (n - side) // 2
    rows = [r * n + c for r in range(lo, lo + side) for c in range(lo, lo + side)]
    return grid_tokens[rows]
