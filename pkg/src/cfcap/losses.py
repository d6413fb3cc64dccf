"""Training objectives: NLL, the total-effect and natural-direct-effect
regularizers, and their alpha-weighted aggregate.

Conventions (0-based, with S the factual caption, S* the counterfactual
caption and s~ the target-span tokens at position p):

  nll  = -sum_t log f(S_t | I, S_<t)
  te   = -sum_j [ log f(s~_j | I, S_<p+j)
                  - (1/L*) sum_i floor(log f(s~_j | I*, S*_<i)) ]
  nde  = -sum_j (1/L*) sum_i [ floor(log f(s~_j | I, S*_<i))
                               - floor(log f(s~_j | I*, S*_<i)) ]

floor() clamps at log_prob_floor to keep the regularizers bounded as
counterfactual probabilities collapse. In the NDE both bracket terms are
clamped (they score the same prefixes, so a null intervention cancels
exactly); in the TE only the counterfactual term is clamped. Gradients flow
through both terms of each regularizer; clamped entries get zero gradient.

Batch losses are plain sums over samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, backward_batch, score_batch
from .scene import CounterfactualSample, SceneImage
from .vocab import EOS

LOG_PROB_FLOOR = math.log(1e-8)

VARIANTS = ("te", "nde")


@dataclass(frozen=True)
class RegularizationConfig:
    alpha: float
    variant: str = "nde"
    log_prob_floor: float = LOG_PROB_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if not self.log_prob_floor < 0:
            raise ConfigError("log_prob_floor must be negative")


def aggregate_loss(nll: float, reg: float, config: RegularizationConfig) -> float:
    """alpha*nll + (1-alpha)*reg; bit-exactly nll at alpha=1, reg at alpha=0."""
    a = config.alpha
    if a == 1.0:
        return nll
    if a == 0.0:
        return reg
    return a * nll + (1.0 - a) * reg


def te_from_logprobs(factual_lp, cf_lp, floor: float = LOG_PROB_FLOOR) -> float:
    """TE loss from raw log-probs: factual_lp (m,), cf_lp (L*, m)."""
    factual_lp = np.asarray(factual_lp, dtype=np.float64)
    cf_lp = np.asarray(cf_lp, dtype=np.float64)
    if factual_lp.ndim != 1 or cf_lp.ndim != 2 or cf_lp.shape[1] != factual_lp.size:
        raise ValueError("expected factual_lp (m,) and cf_lp (L*, m)")
    cf_mean = np.maximum(cf_lp, floor).mean(axis=0)
    return float(-(factual_lp - cf_mean).sum())


def nde_from_logprobs(fact_img_lp, cf_img_lp, floor: float = LOG_PROB_FLOOR) -> float:
    """NDE loss from raw log-probs, both shaped (L*, m)."""
    a = np.maximum(np.asarray(fact_img_lp, dtype=np.float64), floor)
    b = np.maximum(np.asarray(cf_img_lp, dtype=np.float64), floor)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("expected two (L*, m) arrays of matching shape")
    return float(-(a - b).mean(axis=0).sum())


def _as_grid(image) -> np.ndarray:
    if isinstance(image, SceneImage):
        return image.flat()
    return np.asarray(image, dtype=np.int64).reshape(-1)


def pad_batch(seqs) -> tuple[np.ndarray, list[int]]:
    """Stack variable-length token tuples, EOS-padded; returns (B, T) + lengths."""
    lengths = [len(s) for s in seqs]
    T = max(lengths)
    out = np.full((len(seqs), T), EOS, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def _check_sample(sample: CounterfactualSample) -> None:
    if sample.span.length < 1:
        raise ValueError("zero-length target span")
    if len(sample.cf_caption) == 0:
        raise ValueError("zero-length cf_caption")


# ---------------------------------------------------------------------------
# NLL


def _nll_forward(config, params, items, need_cache):
    grids = np.stack([_as_grid(img) for img, _ in items])
    for _, toks in items:
        if len(toks) == 0:
            raise ValueError("empty caption in batch")
    tokens, lengths = pad_batch([tuple(t) for _, t in items])
    res = score_batch(config, params, grids, tokens, need_cache=need_cache)
    logp, cache = res if need_cache else (res, None)
    value = 0.0
    for b, n in enumerate(lengths):
        value -= logp[b, np.arange(n), tokens[b, :n]].sum()
    return float(value), logp, cache, tokens, lengths


def nll_loss(config: ModelConfig, params: dict, items) -> float:
    """items: list of (image, token sequence) pairs. Formula: -sum log f."""
    if len(items) == 0:
        raise ValueError("empty batch")
    value, _, _, _, _ = _nll_forward(config, params, items, need_cache=False)
    return value


def nll_loss_and_grad(config: ModelConfig, params: dict, items):
    if len(items) == 0:
        raise ValueError("empty batch")
    value, logp, cache, tokens, lengths = _nll_forward(config, params, items, need_cache=True)
    dlogp = np.zeros_like(logp)
    for b, n in enumerate(lengths):
        dlogp[b, np.arange(n), tokens[b, :n]] = -1.0
    grads = backward_batch(config, params, cache, dlogp)
    return value, grads


# ---------------------------------------------------------------------------
# Regularizers

def _gather_span_lp(logp_row, positions, span_tokens):
    """logp_row (T, V) -> (len(positions), len(span_tokens)) gathered lps."""
    return logp_row[np.ix_(positions, span_tokens)]


def _te_pieces(config, params, sample, floor, need_cache):
    _check_sample(sample)
    span = sample.span
    span_toks = np.asarray(sample.target_tokens, dtype=np.int64)
    S = np.asarray(sample.factual_caption.tokens, dtype=np.int64)
    Sstar = np.asarray(sample.cf_caption, dtype=np.int64)

    res_f = score_batch(config, params, _as_grid(sample.factual_image)[None], S[None], need_cache=need_cache)
    res_c = score_batch(config, params, _as_grid(sample.cf_image)[None], Sstar[None], need_cache=need_cache)
    logp_f, cache_f = res_f if need_cache else (res_f, None)
    logp_c, cache_c = res_c if need_cache else (res_c, None)

    pos = np.arange(span.start, span.stop)
    fact_lp = logp_f[0][pos, span_toks]
    cf_lp = _gather_span_lp(logp_c[0], np.arange(len(Sstar)), span_toks)
    return fact_lp, cf_lp, (logp_f, cache_f, S), (logp_c, cache_c, Sstar), span_toks, pos


def te_loss(config: ModelConfig, params: dict, sample: CounterfactualSample, floor: float = LOG_PROB_FLOOR) -> float:
    fact_lp, cf_lp, *_ = _te_pieces(config, params, sample, floor, need_cache=False)
    return te_from_logprobs(fact_lp, cf_lp, floor)


def te_loss_and_grad(config, params, sample, floor: float = LOG_PROB_FLOOR):
    fact_lp, cf_lp, (logp_f, cache_f, _S), (logp_c, cache_c, Sstar), span_toks, pos = _te_pieces(
        config, params, sample, floor, need_cache=True
    )
    value = te_from_logprobs(fact_lp, cf_lp, floor)

    dlogp_f = np.zeros_like(logp_f)
    for j, tok in enumerate(span_toks):
        dlogp_f[0, pos[j], tok] += -1.0
    Lst = len(Sstar)
    dlogp_c = np.zeros_like(logp_c)
    open_mask = cf_lp > floor  # clamped entries get zero gradient
    for j, tok in enumerate(span_toks):
        dlogp_c[0, :Lst, tok] += open_mask[:, j] / Lst

    grads = backward_batch(config, params, cache_f, dlogp_f)
    for k, g in backward_batch(config, params, cache_c, dlogp_c).items():
        grads[k] += g
    return value, grads


def _nde_pieces(config, params, sample, need_cache):
    _check_sample(sample)
    span_toks = np.asarray(sample.target_tokens, dtype=np.int64)
    Sstar = np.asarray(sample.cf_caption, dtype=np.int64)

    res_a = score_batch(config, params, _as_grid(sample.factual_image)[None], Sstar[None], need_cache=need_cache)
    res_b = score_batch(config, params, _as_grid(sample.cf_image)[None], Sstar[None], need_cache=need_cache)
    logp_a, cache_a = res_a if need_cache else (res_a, None)
    logp_b, cache_b = res_b if need_cache else (res_b, None)

    rows = np.arange(len(Sstar))
    a_lp = _gather_span_lp(logp_a[0], rows, span_toks)
    b_lp = _gather_span_lp(logp_b[0], rows, span_toks)
    return a_lp, b_lp, (logp_a, cache_a), (logp_b, cache_b), span_toks, len(Sstar)


def nde_loss(config: ModelConfig, params: dict, sample: CounterfactualSample, floor: float = LOG_PROB_FLOOR) -> float:
    a_lp, b_lp, *_ = _nde_pieces(config, params, sample, need_cache=False)
    return nde_from_logprobs(a_lp, b_lp, floor)


def nde_loss_and_grad(config, params, sample, floor: float = LOG_PROB_FLOOR):
    a_lp, b_lp, (logp_a, cache_a), (logp_b, cache_b), span_toks, Lst = _nde_pieces(
        config, params, sample, need_cache=True
    )
    value = nde_from_logprobs(a_lp, b_lp, floor)

    dlogp_a = np.zeros_like(logp_a)
    dlogp_b = np.zeros_like(logp_b)
    mask_a = a_lp > floor
    mask_b = b_lp > floor
    for j, tok in enumerate(span_toks):
        dlogp_a[0, :Lst, tok] += -mask_a[:, j] / Lst
        dlogp_b[0, :Lst, tok] += mask_b[:, j] / Lst

    grads = backward_batch(config, params, cache_a, dlogp_a)
    for k, g in backward_batch(config, params, cache_b, dlogp_b).items():
        grads[k] += g
    return value, grads


def reg_loss(config, params, sample, reg_config: RegularizationConfig) -> float:
    fn = te_loss if reg_config.variant == "te" else nde_loss
    return fn(config, params, sample, reg_config.log_prob_floor)


def reg_loss_batch(config, params, samples, reg_config: RegularizationConfig) -> float:
    """Plain sum over samples (the outer dataset sum of the loss formulas)."""
    return float(sum(reg_loss(config, params, s, reg_config) for s in samples))


def stage2_loss_and_grad(config, params, samples, reg_config: RegularizationConfig):
    """One stage-2 step objective over a batch of counterfactual samples.

    Returns (nll, reg, aggregate, grads) where grads are of the aggregate.
    The NLL term comes from each sample's factual half. At alpha=1 this is
    the plain NLL path, bit-for-bit (the regularizer is skipped outright, so
    a vanilla run on the same batches produces the same trajectory).
    """
    if len(samples) == 0:
        raise ValueError("empty batch")
    factual_items = [(s.factual_image, s.factual_caption.tokens) for s in samples]
    alpha = reg_config.alpha
    if alpha == 1.0:
        nll, grads = nll_loss_and_grad(config, params, factual_items)
        return nll, 0.0, nll, grads

    for s in samples:
        _check_sample(s)
    floor = reg_config.log_prob_floor
    B = len(samples)

    grids_f = np.stack([_as_grid(s.factual_image) for s in samples])
    tokens_f, lens_f = pad_batch([s.factual_caption.tokens for s in samples])
    logp_f, cache_f = score_batch(config, params, grids_f, tokens_f, need_cache=True)

    grids_cf = np.stack([_as_grid(s.cf_image) for s in samples])
    tokens_star, lens_star = pad_batch([s.cf_caption for s in samples])
    logp_cf, cache_cf = score_batch(config, params, grids_cf, tokens_star, need_cache=True)

    nll = 0.0
    dlogp_f = np.zeros_like(logp_f)
    for b, n in enumerate(lens_f):
        nll -= logp_f[b, np.arange(n), tokens_f[b, :n]].sum()
        dlogp_f[b, np.arange(n), tokens_f[b, :n]] += -alpha
    nll = float(nll)

    reg = 0.0
    dlogp_cf = np.zeros_like(logp_cf)
    w = 1.0 - alpha

    if reg_config.variant == "te":
        for b, s in enumerate(samples):
            span = s.span
            toks = np.asarray(s.target_tokens, dtype=np.int64)
            pos = np.arange(span.start, span.stop)
            fact_lp = logp_f[b][pos, toks]
            cf_lp = _gather_span_lp(logp_cf[b], np.arange(lens_star[b]), toks)
            reg += te_from_logprobs(fact_lp, cf_lp, floor)
            for j, tok in enumerate(toks):
                dlogp_f[b, pos[j], tok] += -w
                dlogp_cf[b, : lens_star[b], tok] += w * (cf_lp[:, j] > floor) / lens_star[b]
        grads = backward_batch(config, params, cache_f, dlogp_f)
        for k, g in backward_batch(config, params, cache_cf, dlogp_cf).items():
            grads[k] += g
    else:
        logp_fs, cache_fs = score_batch(config, params, grids_f, tokens_star, need_cache=True)
        dlogp_fs = np.zeros_like(logp_fs)
        for b, s in enumerate(samples):
            toks = np.asarray(s.target_tokens, dtype=np.int64)
            rows = np.arange(lens_star[b])
            a_lp = _gather_span_lp(logp_fs[b], rows, toks)
            b_lp = _gather_span_lp(logp_cf[b], rows, toks)
            reg += nde_from_logprobs(a_lp, b_lp, floor)
            for j, tok in enumerate(toks):
                dlogp_fs[b, rows, tok] += -w * (a_lp[:, j] > floor) / lens_star[b]
                dlogp_cf[b, rows, tok] += w * (b_lp[:, j] > floor) / lens_star[b]
        grads = backward_batch(config, params, cache_f, dlogp_f)
        for k, g in backward_batch(config, params, cache_fs, dlogp_fs).items():
            grads[k] += g
        for k, g in backward_batch(config, params, cache_cf, dlogp_cf).items():
            grads[k] += g

    reg = float(reg)
    return nll, reg, aggregate_loss(nll, reg, reg_config), grads
