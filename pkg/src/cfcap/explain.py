"""Region-contribution interpretability probes.

The contribution of a grid region to a caption phrase is the increase in the
phrase's teacher-forced loss when the region is masked:

    contribution = phrase_nll(region masked) - phrase_nll(original image)

where phrase_nll scores the span's tokens at their caption positions. A probe
pits the phrase's own region (positive) against 4 random same-size regions
disjoint from it; a model counts as interpretable on the probe when the
positive's contribution is strictly the largest (ties are failures).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CaptionSample, SceneImage

N_NEGATIVES = 4


@dataclass(frozen=True)
class RegionProbe:
    span_index: int
    positive: tuple[int, ...]
    negatives: tuple[tuple[int, ...], ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(int(c) for c in self.positive))
        object.__setattr__(self, "negatives", tuple(tuple(int(c) for c in n) for n in self.negatives))
        if len(self.negatives) != N_NEGATIVES:
            raise ValueError(f"probe needs exactly {N_NEGATIVES} negative regions")
        pos = set(self.positive)
        for neg in self.negatives:
            if len(neg) != len(self.positive):
                raise ValueError("negative region size mismatch")
            if pos & set(neg):
                raise ValueError("negative region overlaps the positive region")

    @property
    def regions(self) -> list:
        return [self.positive, *self.negatives]


def _rectangle_candidates(grid_shape, size, excluded) -> list:
    h, w = grid_shape
    out = []
    for rh in range(1, h + 1):
        if size % rh:
            continue
        rw = size // rh
        if rw > w:
            continue
        for r0 in range(h - rh + 1):
            for c0 in range(w - rw + 1):
                cells = tuple(
                    (r0 + r) * w + (c0 + c) for r in range(rh) for c in range(rw)
                )
                if not excluded & set(cells):
                    out.append(cells)
    return out


def make_probe(image: SceneImage, caption: CaptionSample, span_index: int, seed: int) -> RegionProbe:
    """Build the 1-positive / 4-negatives probe for one caption span.

    Negatives are contiguous rectangles of matching cell count when the grid
    offers at least 4 disjoint-from-positive placements, arbitrary distinct
    cell sets otherwise.
    """
    span = caption.entity_spans[span_index]
    positive = tuple(sorted(span.cells))
    size = len(positive)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed)))

    candidates = _rectangle_candidates(image.shape, size, set(positive))
    negatives = []
    if len(candidates) >= N_NEGATIVES:
        pool = list(candidates)
        for _ in range(N_NEGATIVES):
            negatives.append(pool.pop(int(rng.integers(0, len(pool)))))
    else:
        available = [c for c in range(image.n_cells) if c not in positive]
        if len(available) < size:
            raise ValueError("grid too small for a disjoint negative region")
        seen = set()
        guard = 0
        while len(negatives) < N_NEGATIVES:
            guard += 1
            if guard > 10000:
                raise ValueError("cannot find 4 distinct negative regions")
            pool = list(available)
            cells = []
            for _ in range(size):
                cells.append(pool.pop(int(rng.integers(0, len(pool)))))
            region = tuple(sorted(cells))
            if region not in seen:
                seen.add(region)
                negatives.append(region)
    return RegionProbe(span_index=span_index, positive=positive, negatives=tuple(negatives), seed=seed)


def phrase_nll(model, image: SceneImage, caption: CaptionSample, span_index: int) -> float:
    """-sum of log-probs of the span tokens at their caption positions."""
    span = caption.entity_spans[span_index]
    logp = model.prefix_log_probs(image.flat(), caption.tokens)
    pos = np.arange(span.start, span.stop)
    toks = np.asarray(caption.tokens[span.start : span.stop])
    return float(-logp[pos, toks].sum())


def region_contribution(model, image: SceneImage, caption: CaptionSample, span_index: int, region) -> float:
    """Loss change from masking the region; 0 if the output cannot depend on it."""
    region = tuple(region)
    if len(region) == 0:
        raise ValueError("empty region")
    base = phrase_nll(model, image, caption, span_index)
    masked = phrase_nll(model, image.mask_cells(region), caption, span_index)
    return masked - base


def _probe_contributions(model, image, caption, probe: RegionProbe) -> np.ndarray:
    span = caption.entity_spans[probe.span_index]
    grids = np.stack([image.flat()] + [image.mask_cells(r).flat() for r in probe.regions])
    if hasattr(model, "prefix_log_probs_batch"):
        logp = model.prefix_log_probs_batch(grids, caption.tokens)
    else:
        logp = np.stack([model.prefix_log_probs(g, caption.tokens) for g in grids])
    pos = np.arange(span.start, span.stop)
    toks = np.asarray(caption.tokens[span.start : span.stop])
    nlls = -logp[:, pos, toks].sum(axis=1)
    return nlls[1:] - nlls[0]


def rank_regions(model, probe: RegionProbe, image: SceneImage, caption: CaptionSample) -> list:
    """All 5 regions sorted by contribution descending, region index breaking
    ties (the positive is region 0). Returns [(region_index, contribution)]."""
    contribs = _probe_contributions(model, image, caption, probe)
    order = sorted(range(len(contribs)), key=lambda i: (-contribs[i], i))
    return [(i, float(contribs[i])) for i in order]


def probe_success(model, probe: RegionProbe, image, caption) -> bool:
    """True when the positive region's contribution is strictly the largest."""
    contribs = _probe_contributions(model, image, caption, probe)
    return bool(contribs[0] > contribs[1:].max())


def interpretability_accuracy(model, items, probes_per_sample: int, seed: int, return_records: bool = False):
    """Fraction of probes whose positive region is strictly top-ranked.

    items: iterable of (SceneImage, CaptionSample). Each probe draws its span
    and negative regions from a stream derived from (seed, sample, probe).
    """
    items = list(items)
    if not items:
        raise ValueError("empty dataset")
    if probes_per_sample < 1:
        raise ValueError("probes_per_sample must be >= 1")

    successes, total = 0, 0
    records = []
    for si, (image, caption) in enumerate(items):
        n_spans = len(caption.entity_spans)
        if n_spans == 0:
            continue
        for q in range(probes_per_sample):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(si, q))
            rng = np.random.Generator(np.random.PCG64(ss))
            span_index = int(rng.integers(0, n_spans))
            probe_seed = int(rng.integers(0, 2**31 - 1))
            probe = make_probe(image, caption, span_index, probe_seed)
            ranking = rank_regions(model, probe, image, caption)
            top_region, top_value = ranking[0]
            second_value = ranking[1][1]
            ok = top_region == 0 and top_value > second_value
            successes += ok
            total += 1
            if return_records:
                records.append(
                    {
                        "sample": si,
                        "span": span_index,
                        "contributions": [v for _, v in sorted(ranking)],
                        "rank_of_positive": next(r for r, (idx, _) in enumerate(ranking) if idx == 0) + 1,
                        "success": bool(ok),
                    }
                )
    if total == 0:
        raise ValueError("no probes could be built")
    accuracy = successes / total
    if return_records:
        return accuracy, records
    return accuracy
