"""Prompt conditioning via a fixed lookup table standing in for a text encoder.

Each class id maps to a frozen vector; the empty prompt has its own row.
Class ids factor as (attribute_a, attribute_b) = (id // 4, id % 4) — for the
toy dataset, shape and colour — and the table encodes the two factors in
disjoint coordinate blocks. Sharing the factor directions across classes
means each direction is trained by every sample carrying that factor (4x the
data a joint one-hot row would see), which is what lets the small denoiser
pick up both attributes. When the width cannot hold the factored layout,
frozen random rows are used instead. The table is deterministic in
(num_classes, width, seed), so two processes built with the same arguments
agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_COND_WIDTH = 32

# Scale of the embedding entries. Large enough that the additive injection
# into the denoiser's hidden layer carries a clear class signal.
_EMBED_SCALE = 3.0

# Classes factor into two four-valued attributes (shape x colour in the toy
# dataset); the factored layout needs 4 + 4 dims plus one for the null row.
_FACTOR_BASE = 4


@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    prompt_id: int


@dataclass(frozen=True)
class NullEmbedding:
    """Embedding of the empty prompt."""

    vector: np.ndarray


class PromptTable:
    """Deterministic class-id -> embedding lookup."""

    def __init__(
        self,
        num_classes: int,
        width: int = DEFAULT_COND_WIDTH,
        seed: int = 7,
    ):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if width < 1:
            raise ValueError("width must be >= 1")
        # Row `num_classes` is the empty-prompt embedding.
        factored_dims = 2 * _FACTOR_BASE + 1
        if width >= factored_dims and num_classes <= _FACTOR_BASE**2:
            rows = np.zeros((num_classes + 1, width))
            ids = np.arange(num_classes)
            rows[ids, ids // _FACTOR_BASE] = _EMBED_SCALE
            rows[ids, _FACTOR_BASE + ids % _FACTOR_BASE] = _EMBED_SCALE
            rows[num_classes, 2 * _FACTOR_BASE] = _EMBED_SCALE
        else:
            rng = np.random.default_rng(seed)
            rows = rng.standard_normal((num_classes + 1, width)) * _EMBED_SCALE
        self._rows = rows
        self.num_classes = num_classes
        self.width = width
        self.seed = seed

    def embed(self, prompt_id: int) -> PromptEmbedding:
        if not 0 <= prompt_id < self.num_classes:
            raise ValueError(f"prompt_id {prompt_id} outside [0, {self.num_classes})")
        return PromptEmbedding(self._rows[prompt_id].copy(), prompt_id)

    def null(self) -> NullEmbedding:
        return NullEmbedding(self._rows[self.num_classes].copy())
