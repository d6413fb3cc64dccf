"""Synthetic scene-grid worlds: generation, planted co-occurrence shortcuts,
counterfactual masking, and biased splits.

Scenes place distinct objects on distinct grid cells; the caption is the fixed
template "a <name> and a <name> ... ." listing objects in row-major placement
order, so every noun phrase has an exact token span and an exact cell region.
Everything is a pure function of (config, scene index): each scene gets its own
PCG64 stream spawned from the world seed, and only integers()/random() draws
are used so the byte stream is stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .scene import CaptionSample, EntitySpan, SceneImage, mask_span
from .vocab import BACKGROUND, EOS, Vocabulary, build_vocabulary


@dataclass(frozen=True)
class WorldConfig:
    grid_h: int = 5
    grid_w: int = 5
    objects: tuple = ()  # (name, cells_per_instance) pairs
    co_occurrence: tuple = ()  # (trigger name, companion name, rho)
    objects_per_scene: tuple[int, int] = (2, 3)
    split_sizes: tuple[int, int, int] = (1000, 100, 100)
    seed: int = 0

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError("grid dimensions must be positive")
        if not self.objects:
            raise ConfigError("world needs at least one object")
        object.__setattr__(self, "objects", tuple((str(n), int(s)) for n, s in self.objects))
        object.__setattr__(self, "co_occurrence", tuple((str(a), str(b), float(r)) for a, b, r in self.co_occurrence))
        object.__setattr__(self, "objects_per_scene", tuple(int(x) for x in self.objects_per_scene))
        object.__setattr__(self, "split_sizes", tuple(int(x) for x in self.split_sizes))
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi <= len(self.objects):
            raise ConfigError("objects_per_scene range invalid for this vocabulary")
        names = [n for n, _ in self.objects]
        for trig, comp, rho in self.co_occurrence:
            if trig not in names or comp not in names:
                raise ConfigError(f"co-occurrence rule names unknown object ({trig}, {comp})")
            if trig == comp:
                raise ConfigError("co-occurrence trigger and companion must differ")
            if not 0.0 <= rho <= 1.0:
                raise ConfigError("co-occurrence probability must be in [0, 1]")
            if hi < 2:
                raise ConfigError("co-occurrence rules need objects_per_scene max >= 2")
        max_cells = sorted((s for _, s in self.objects), reverse=True)[:hi]
        if sum(max_cells) > self.grid_h * self.grid_w:
            raise ConfigError("grid too small for the requested objects")
        if any(s < 1 for s in self.split_sizes):
            raise ConfigError("split sizes must be positive")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def vocabulary(self) -> Vocabulary:
        return build_vocabulary([n for n, _ in self.objects], [s for _, s in self.objects])

    def to_dict(self) -> dict:
        return {
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "objects": [[n, s] for n, s in self.objects],
            "co_occurrence": [[a, b, r] for a, b, r in self.co_occurrence],
            "objects_per_scene": list(self.objects_per_scene),
            "split_sizes": list(self.split_sizes),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(
            grid_h=d["grid_h"],
            grid_w=d["grid_w"],
            objects=tuple((n, s) for n, s in d["objects"]),
            co_occurrence=tuple((a, b, r) for a, b, r in d["co_occurrence"]),
            objects_per_scene=tuple(d["objects_per_scene"]),
            split_sizes=tuple(d["split_sizes"]),
            seed=d["seed"],
        )


@dataclass(frozen=True)
class BiasSpec:
    """Two interchangeable categories with an imbalanced train split and the
    reverse imbalance at evaluation (the male/female construction analog)."""

    category_a: str
    category_b: str
    train_counts: tuple[int, int]  # (#A, #B), e.g. (500, 100) for 5:1
    eval_counts: tuple[int, int]  # reversed ratio, e.g. (100, 500)

    def __post_init__(self):
        object.__setattr__(self, "train_counts", tuple(int(x) for x in self.train_counts))
        object.__setattr__(self, "eval_counts", tuple(int(x) for x in self.eval_counts))
        if self.category_a == self.category_b:
            raise ConfigError("bias categories must differ")
        if any(c < 1 for c in self.train_counts + self.eval_counts):
            raise ConfigError("bias class counts must be positive")
        ta, tb = self.train_counts
        ea, eb = self.eval_counts
        if ta * ea != tb * eb:
            raise ConfigError("eval ratio must be the reverse of the train ratio")

    def to_dict(self) -> dict:
        return {
            "category_a": self.category_a,
            "category_b": self.category_b,
            "train_counts": list(self.train_counts),
            "eval_counts": list(self.eval_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        return cls(
            category_a=d["category_a"],
            category_b=d["category_b"],
            train_counts=tuple(d["train_counts"]),
            eval_counts=tuple(d["eval_counts"]),
        )


def _scene_rng(seed: int, scene_index: int, stream: int = 0) -> np.random.Generator:
    # stream 0 drives scene assembly, stream 1 the target-span choice
    key = (scene_index,) if stream == 0 else (scene_index, stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def _draw_without_replacement(rng, items, k):
    pool = list(items)
    out = []
    for _ in range(k):
        out.append(pool.pop(int(rng.integers(0, len(pool)))))
    return out


def _apply_co_occurrence(rng, chosen, config, name_index):
    hi = config.objects_per_scene[1]
    n_objects = len(config.objects)
    for trig, comp, rho in config.co_occurrence:
        ti, ci = name_index[trig], name_index[comp]
        if ti not in chosen:
            continue
        accompany = rng.random() < rho
        if accompany and ci not in chosen:
            if len(chosen) < hi:
                chosen.append(ci)
            else:
                candidates = [x for x in chosen if x != ti]
                victim = candidates[int(rng.integers(0, len(candidates)))]
                chosen[chosen.index(victim)] = ci
        elif not accompany and ci in chosen:
            others = [x for x in range(n_objects) if x not in chosen]
            if not others:
                raise ConfigError("cannot exclude companion: no replacement object available")
            chosen[chosen.index(ci)] = others[int(rng.integers(0, len(others)))]
    return chosen


def _assemble_scene(rng, config: WorldConfig, vocab: Vocabulary, chosen) -> tuple[SceneImage, CaptionSample]:
    flat = np.full(config.n_cells, BACKGROUND, dtype=np.int64)
    free = list(range(config.n_cells))
    placements = {}
    for idx in chosen:
        obj = vocab.objects[idx]
        cells = sorted(_draw_without_replacement(rng, free, obj.cells_per_instance))
        placements[idx] = cells
        flat[cells] = obj.cell_id
    order = sorted(chosen, key=lambda i: placements[i][0])

    a_tok, and_tok, period_tok = vocab.token("a"), vocab.token("and"), vocab.token(".")
    tokens: list[int] = []
    spans = []
    for m, idx in enumerate(order):
        obj = vocab.objects[idx]
        tokens.append(a_tok)
        spans.append(EntitySpan(start=len(tokens), length=len(obj.name_tokens), cells=tuple(placements[idx])))
        tokens.extend(obj.name_tokens)
        if m < len(order) - 1:
            tokens.append(and_tok)
    tokens.extend([period_tok, EOS])
    image = SceneImage(grid=flat.reshape(config.grid_h, config.grid_w))
    return image, CaptionSample(tokens=tuple(tokens), entity_spans=tuple(spans))


def generate_scene(config: WorldConfig, vocab: Vocabulary, scene_index: int) -> tuple[SceneImage, CaptionSample]:
    """Deterministic scene + caption for one scene index."""
    rng = _scene_rng(config.seed, scene_index)
    lo, hi = config.objects_per_scene
    k = lo + int(rng.integers(0, hi - lo + 1))
    name_index = {n: i for i, (n, _) in enumerate(config.objects)}
    chosen = _draw_without_replacement(rng, range(len(config.objects)), k)
    chosen = _apply_co_occurrence(rng, chosen, config, name_index)
    return _assemble_scene(rng, config, vocab, chosen)


def generate_class_scene(
    config: WorldConfig,
    vocab: Vocabulary,
    scene_index: int,
    forced: str,
    excluded: str,
) -> tuple[SceneImage, CaptionSample]:
    """Scene guaranteed to contain `forced` and not `excluded` (biased worlds)."""
    rng = _scene_rng(config.seed, scene_index)
    lo, hi = config.objects_per_scene
    k = lo + int(rng.integers(0, hi - lo + 1))
    name_index = {n: i for i, (n, _) in enumerate(config.objects)}
    if forced not in name_index or excluded not in name_index:
        raise ConfigError(f"bias categories must be world objects ({forced}, {excluded})")
    pool = [i for i in range(len(config.objects)) if i not in (name_index[forced], name_index[excluded])]
    if k - 1 > len(pool):
        raise ConfigError("not enough non-class objects for the requested scene size")
    chosen = _draw_without_replacement(rng, pool, k - 1)
    chosen.append(name_index[forced])
    return _assemble_scene(rng, config, vocab, chosen)


def build_counterfactual(image: SceneImage, caption: CaptionSample, span_index: int) -> SceneImage:
    """Counterfactual image: the span's whole region set to MASK."""
    return mask_span(image, caption, span_index)


def target_span_for_scene(config: WorldConfig, caption: CaptionSample, scene_index: int) -> int:
    """Uniform per-scene span choice, from its own derived stream."""
    rng = _scene_rng(config.seed, scene_index, stream=1)
    return int(rng.integers(0, len(caption.entity_spans)))


def span_index_of_object(vocab: Vocabulary, caption: CaptionSample, name: str) -> int:
    """Index of the entity span whose surface form is the named object."""
    target = vocab.object_by_name(name).name_tokens
    for i, span in enumerate(caption.entity_spans):
        if caption.tokens[span.start : span.stop] == target:
            return i
    raise ValueError(f"caption does not mention {name!r}")
