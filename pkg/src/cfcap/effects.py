"""Diagnostic causal-effect estimates in probability space.

For a target token s~ under a factual/counterfactual image pair:

  TE  = Y_{I,M_I}    - Y_{I*,M_{I*}}
  NDE = Y_{I,M_{I*}} - Y_{I*,M_{I*}}
  TIE = TE - NDE  (always computed as the difference)

Counterfactual outcomes average the token's probability over all L* prefixes
of S*. The factual outcome Y_{I,M_I} follows `position_policy`:

  "factual_position": probability at the token's position in the factual
      caption (the default; matches the losses' first-term convention);
  "prefix_average": averaged over all prefixes of the factual caption, the
      symmetric convention under which a null intervention yields (0, 0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CounterfactualSample

POSITION_POLICIES = ("factual_position", "prefix_average")


@dataclass(frozen=True)
class EffectEstimate:
    te: float
    nde: float
    tie: float
    target_token: int


def _target_position(sample: CounterfactualSample, target_token: int) -> int:
    span = sample.span
    toks = sample.target_tokens
    if target_token in toks:
        return span.start + toks.index(target_token)
    caption = sample.factual_caption.tokens
    if target_token in caption:
        return caption.index(target_token)
    raise ValueError(f"target token {target_token} does not occur in the factual caption")


def estimate_effects(
    model,
    sample: CounterfactualSample,
    target_token: int,
    position_policy: str = "factual_position",
) -> EffectEstimate:
    if position_policy not in POSITION_POLICIES:
        raise ValueError(f"position_policy must be one of {POSITION_POLICIES}")
    if not 0 <= target_token < model.vocab_size:
        raise ValueError(f"invalid target token {target_token}")

    fact_grid = sample.factual_image.flat()
    cf_grid = sample.cf_image.flat()
    S = sample.factual_caption.tokens
    Sstar = sample.cf_caption

    p_cf_rows = np.exp(model.prefix_log_probs(cf_grid, Sstar)[:, target_token])
    p_mix_rows = np.exp(model.prefix_log_probs(fact_grid, Sstar)[:, target_token])
    y_cf = float(p_cf_rows.mean())
    y_mix = float(p_mix_rows.mean())

    fact_rows = np.exp(model.prefix_log_probs(fact_grid, S)[:, target_token])
    if position_policy == "factual_position":
        y_fact = float(fact_rows[_target_position(sample, target_token)])
    else:
        y_fact = float(fact_rows.mean())

    te = y_fact - y_cf
    nde = y_mix - y_cf
    return EffectEstimate(te=te, nde=nde, tie=te - nde, target_token=int(target_token))
