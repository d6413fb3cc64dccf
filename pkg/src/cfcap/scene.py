"""Scene grids, caption samples and counterfactual tuples.

A scene image is an H x W grid of cell ids; "features" are whatever embedding
table the model currently assigns to those ids, so they are always derived,
never stored. Masking a region rewrites its cells to the reserved MASK id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import BACKGROUND, EOS, MASK


@dataclass(frozen=True)
class SceneImage:
    """Grid of cell ids. Immutable; masking returns a new image."""

    grid: np.ndarray  # (H, W) int64

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.int64)
        if g.ndim != 2:
            raise ValueError("grid must be 2-D")
        if (g < 0).any():
            raise ValueError("negative cell id")
        object.__setattr__(self, "grid", g)
        g.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def n_cells(self) -> int:
        return self.grid.size

    def flat(self) -> np.ndarray:
        """Row-major cell ids, shape (H*W,)."""
        return self.grid.reshape(-1)

    def features(self, cell_embeddings: np.ndarray) -> np.ndarray:
        """(H, W, D) embedding per cell; a pure function of grid and table."""
        return cell_embeddings[self.grid]

    def mask_cells(self, cells) -> "SceneImage":
        """Return a copy with the given row-major cell indices set to MASK."""
        cells = np.asarray(list(cells), dtype=np.int64)
        if cells.size == 0:
            raise ValueError("empty cell set")
        if (cells < 0).any() or (cells >= self.n_cells).any():
            raise ValueError("cell index out of grid bounds")
        flat = self.grid.copy().reshape(-1)
        flat[cells] = MASK
        return SceneImage(grid=flat.reshape(self.grid.shape))

    def __eq__(self, other):
        return isinstance(other, SceneImage) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash(self.grid.tobytes())


@dataclass(frozen=True)
class EntitySpan:
    """A caption phrase tied to its grid region.

    start/length index into the caption token sequence; cells are row-major
    grid indices of the phrase's region.
    """

    start: int
    length: int
    cells: tuple[int, ...]

    def __post_init__(self):
        if self.start < 0 or self.length < 1:
            raise ValueError("span must have start >= 0 and length >= 1")
        if len(self.cells) == 0:
            raise ValueError("span has an empty cell list")
        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class CaptionSample:
    """Token sequence with entity spans; the ground-truth side of a sample."""

    tokens: tuple[int, ...]
    entity_spans: tuple[EntitySpan, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "entity_spans", tuple(self.entity_spans))
        if len(self.tokens) == 0:
            raise ValueError("empty caption")
        L = len(self.tokens)
        seen_forms = set()
        covered = set()
        for span in self.entity_spans:
            if span.stop > L:
                raise ValueError(f"span {span} exceeds caption length {L}")
            form = self.tokens[span.start : span.stop]
            if form in seen_forms:
                raise ValueError(f"duplicate entity surface form {form}")
            seen_forms.add(form)
            pos = set(range(span.start, span.stop))
            if covered & pos:
                raise ValueError("entity spans overlap")
            covered |= pos

    def span_tokens(self, span_index: int) -> tuple[int, ...]:
        span = self.entity_spans[span_index]
        return self.tokens[span.start : span.stop]

    def __len__(self) -> int:
        return len(self.tokens)


def validate_cells_in_grid(caption: CaptionSample, image: SceneImage) -> None:
    for span in caption.entity_spans:
        for c in span.cells:
            if not 0 <= c < image.n_cells:
                raise ValueError(f"span cell {c} outside grid of {image.n_cells} cells")


def mask_span(image: SceneImage, caption: CaptionSample, span_index: int) -> SceneImage:
    """Counterfactual image: the span's whole region replaced by MASK."""
    if not 0 <= span_index < len(caption.entity_spans):
        raise ValueError(f"invalid span index {span_index}")
    return image.mask_cells(caption.entity_spans[span_index].cells)


@dataclass(frozen=True)
class CounterfactualSample:
    """The (I, S, S-tilde, I*, S*) tuple used by the regularizers."""

    factual_image: SceneImage
    factual_caption: CaptionSample
    target_span: int
    cf_image: SceneImage
    cf_caption: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "cf_caption", tuple(int(t) for t in self.cf_caption))
        if not 0 <= self.target_span < len(self.factual_caption.entity_spans):
            raise ValueError(f"target_span {self.target_span} out of range")
        span = self.factual_caption.entity_spans[self.target_span]
        # cf_image is the factual image with the span's region masked; the
        # null intervention (no cell changed) is allowed for diagnostics.
        diff = np.flatnonzero(self.cf_image.flat() != self.factual_image.flat())
        if not set(diff.tolist()) <= set(span.cells):
            raise ValueError("cf_image differs from factual_image outside the target span")
        if diff.size and not (self.cf_image.flat()[diff] == MASK).all():
            raise ValueError("cf_image changes must set cells to MASK")
        if len(self.cf_caption) == 0:
            raise ValueError("cf_caption is empty")
        if self.cf_caption[-1] != EOS:
            raise ValueError("cf_caption must end with EOS")

    @property
    def span(self) -> EntitySpan:
        return self.factual_caption.entity_spans[self.target_span]

    @property
    def target_tokens(self) -> tuple[int, ...]:
        return self.factual_caption.span_tokens(self.target_span)


def background_fraction(image: SceneImage) -> float:
    return float(np.mean(image.flat() == BACKGROUND))
