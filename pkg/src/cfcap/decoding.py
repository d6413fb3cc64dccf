"""Decoding strategies: beam, greedy, top-K and nucleus sampling.

All strategies emit EOS deterministically at the final permitted step, so
every decoded sequence ends with EOS and has length <= max_len. Beam search
keeps completed hypotheses in the candidate pool, scores by the raw sum of
token log-probs (no length normalization) and breaks ties lexicographically
by token ids.

Sampling uses one uniform draw per step mapped through the inverse CDF in
natural token-id order; with p=1 the nucleus spans the full vocabulary and
the draw coincides exactly with unrestricted ancestral sampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .scene import SceneImage
from .vocab import EOS

STRATEGIES = ("beam", "greedy", "top_k", "nucleus")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"
    beam_width: int = 5
    top_k: int = 10
    top_p: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must be in (0, 1]")


@dataclass
class CandidateList:
    """Ranked distinct captions; `complete` is False if fewer than requested."""

    items: list  # [(tokens tuple, log_prob)], log_prob descending
    requested: int

    @property
    def complete(self) -> bool:
        return len(self.items) >= self.requested


def _grid_of(image) -> np.ndarray:
    if isinstance(image, SceneImage):
        return image.flat()
    return np.asarray(image, dtype=np.int64).reshape(-1)


def decode(model, image, config: DecodeConfig):
    """Decode one caption; returns a tuple of token ids ending in EOS."""
    if config.strategy == "beam":
        return beam_search_batch(model, [_grid_of(image)], config.beam_width)[0].items[0][0]
    if config.strategy == "greedy":
        return _sample_one(model, _grid_of(image), mode="greedy", config=config)
    return _sample_one(model, _grid_of(image), mode=config.strategy, config=config)


def _restrict(probs: np.ndarray, mode: str, config: DecodeConfig) -> np.ndarray:
    """Zero out tokens excluded by the strategy; keep-set ties favor low ids."""
    if mode == "top_k":
        k = min(config.top_k, probs.size)
        order = np.lexsort((np.arange(probs.size), -probs))
        keep = order[:k]
        out = np.zeros_like(probs)
        out[keep] = probs[keep]
        return out
    if mode == "nucleus":
        if config.top_p >= 1.0:
            return probs  # full support; bit-identical to unrestricted sampling
        order = np.lexsort((np.arange(probs.size), -probs))
        csum = np.cumsum(probs[order])
        cutoff = int(np.searchsorted(csum, config.top_p - 1e-12)) + 1
        if cutoff >= probs.size:
            return probs
        keep = order[:cutoff]
        out = np.zeros_like(probs)
        out[keep] = probs[keep]
        return out
    raise AssertionError(mode)


def _sample_one(model, grid, mode: str, config: DecodeConfig) -> tuple:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    tokens: list[int] = []
    grid = grid[None, :]
    for step in range(model.max_len):
        if step == model.max_len - 1:
            tokens.append(EOS)
            break
        logp = model.next_log_probs_batch(grid, np.asarray([tokens], dtype=np.int64))[0]
        if mode == "greedy":
            nxt = int(np.argmax(logp))
        else:
            probs = np.exp(logp)
            probs = _restrict(probs, mode, config)
            csum = np.cumsum(probs)
            u = rng.random() * csum[-1]
            nxt = int(np.searchsorted(csum, u, side="right"))
            nxt = min(nxt, probs.size - 1)
        tokens.append(nxt)
        if nxt == EOS:
            break
    return tuple(tokens)


def ancestral_sample(model, image, seed: int) -> tuple:
    """Unrestricted ancestral sampling; reference twin of nucleus p=1."""
    return _sample_one(model, _grid_of(image), mode="nucleus", config=DecodeConfig(strategy="nucleus", top_p=1.0, seed=seed))


class _Beam:
    """Per-image beam state: live prefixes plus the completed pool."""

    __slots__ = ("live", "done")

    def __init__(self):
        self.live = [((), 0.0)]
        self.done: list[tuple[tuple, float]] = []

    def select(self, candidates, width):
        # candidates: (tokens, score); completed pool competes each round
        candidates.sort(key=lambda c: (-c[1], c[0]))
        pool = candidates[:width]
        self.done = [c for c in pool if c[0] and c[0][-1] == EOS]
        self.live = [c for c in pool if not (c[0] and c[0][-1] == EOS)]


def beam_search_batch(model, grids, width: int, n_keep: int | None = None) -> list[CandidateList]:
    """Lockstep beam search over many images at once.

    Returns one CandidateList per image holding up to `n_keep` (default
    `width`) distinct completed captions sorted by score then token ids.
    """
    if width < 1:
        raise ConfigError("beam width must be >= 1")
    n_keep = width if n_keep is None else n_keep
    grids = [np.asarray(g, dtype=np.int64).reshape(-1) for g in grids]
    beams = [_Beam() for _ in grids]

    for step in range(model.max_len):
        rows_grid, rows_prefix, owners = [], [], []
        for i, beam in enumerate(beams):
            for hyp in beam.live:
                rows_grid.append(grids[i])
                rows_prefix.append(hyp[0])
                owners.append((i, hyp))
        if not rows_grid:
            break
        prefixes = np.asarray(rows_prefix, dtype=np.int64).reshape(len(rows_grid), -1)
        logp = model.next_log_probs_batch(np.asarray(rows_grid), prefixes)

        forced = step == model.max_len - 1
        expansions: dict[int, list] = {i: list(b.done) for i, b in enumerate(beams)}
        for r, (i, (toks, score)) in enumerate(owners):
            if forced:
                expansions[i].append((toks + (EOS,), score + float(logp[r, EOS])))
            else:
                for tok in range(logp.shape[1]):
                    expansions[i].append((toks + (tok,), score + float(logp[r, tok])))
        for i, beam in enumerate(beams):
            if expansions[i]:
                beam.select(expansions[i], width)

    out = []
    for beam in beams:
        done = sorted(set(beam.done), key=lambda c: (-c[1], c[0]))
        out.append(CandidateList(items=done[:n_keep], requested=n_keep))
    return out


def beam_search(model, image, width: int) -> tuple:
    """Single-image beam decode; returns the best completed caption."""
    return beam_search_batch(model, [_grid_of(image)], width)[0].items[0][0]


def top_n_captions(model, image, n: int) -> CandidateList:
    """The n highest-scoring distinct captions (beam of width n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    result = beam_search_batch(model, [_grid_of(image)], n)[0]
    if not result.complete:
        warnings.warn(f"only {len(result.items)} of {n} captions completable", RuntimeWarning)
    return result


def sequence_log_prob(model, image, tokens) -> float:
    """Teacher-forced log-probability of a full caption under any model."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty token sequence")
    if hasattr(model, "sequence_log_prob"):
        return model.sequence_log_prob(_as_image(image), tokens)
    grid = _grid_of(image)
    total = 0.0
    for i, tok in enumerate(tokens):
        logp = model.next_log_probs_batch(grid[None, :], np.asarray([tokens[:i]], dtype=np.int64))[0]
        total += float(logp[tok])
    return total


def _as_image(image) -> SceneImage:
    if isinstance(image, SceneImage):
        return image
    g = np.asarray(image, dtype=np.int64)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    return SceneImage(grid=g)
