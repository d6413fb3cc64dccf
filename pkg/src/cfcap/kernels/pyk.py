"""Pure-numpy kernels; reference fallback for the compiled extension.

Every function here has a signature-identical twin in `_ck.pyx`. All arrays
are C-contiguous float64. Backward passes consume the tensors stashed by the
matching forward.
"""

from __future__ import annotations

import numpy as np


def causal_attn_fwd(q, k, v):
    """Masked self-attention.

    q, k, v: (B, nh, T, dh). Returns (out, probs) with probs[b,h,i,j] = 0 for
    j > i and softmax over j <= i of q_i . k_j / sqrt(dh).
    """
    B, nh, T, dh = q.shape
    scale = 1.0 / np.sqrt(dh)
    scores = np.einsum("bhid,bhjd->bhij", q, k) * scale
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.einsum("bhij,bhjd->bhid", probs, v)
    return out, probs


def causal_attn_bwd(q, k, v, probs, d_out):
    """Gradients of causal_attn_fwd w.r.t. q, k, v."""
    dh = q.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    dv = np.einsum("bhij,bhid->bhjd", probs, d_out)
    dprobs = np.einsum("bhid,bhjd->bhij", d_out, v)
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dprobs - inner)
    dq = np.einsum("bhij,bhjd->bhid", dscores, k) * scale
    dk = np.einsum("bhij,bhid->bhjd", dscores, q) * scale
    return dq, dk, dv


def attn_last_fwd(q, k, v):
    """Single-query attention over all keys; the decode step.

    q: (R, nh, dh); k, v: (R, nh, T, dh). Returns out (R, nh, dh).
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("bhd,bhjd->bhj", q, k) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.einsum("bhj,bhjd->bhd", probs, v)


def additive_attn_fwd(hu, cw, va):
    """Additive (tanh) attention of decoder states over cell features.

    hu: (B, T, Da) projected states; cw: (B, N, Da) projected cells; va: (Da,).
    Returns (probs, th): probs (B, T, N) softmax over cells, th the
    (B, T, N, Da) tanh pre-activation kept for the backward pass.
    """
    th = np.tanh(hu[:, :, None, :] + cw[:, None, :, :])
    scores = th @ va
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs, th


def additive_attn_probs(hu, cw, va):
    """Forward-only additive attention (decode path; no tanh tensor kept)."""
    th = np.tanh(hu[:, :, None, :] + cw[:, None, :, :])
    scores = th @ va
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def additive_attn_bwd(probs, th, va, dprobs):
    """Gradients of additive_attn_fwd w.r.t. hu, cw and va."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dprobs - inner)
    dth = dscores[..., None] * va * (1.0 - th * th)
    dhu = dth.sum(axis=2)
    dcw = dth.sum(axis=1)
    dva = np.einsum("btna,btn->a", th, dscores)
    return dhu, dcw, dva


def log_softmax_fwd(logits):
    """Row-wise log-softmax over the last axis. logits: (..., V)."""
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def log_softmax_bwd(logp, dlogp):
    """d logits given d logp."""
    return dlogp - np.exp(logp) * dlogp.sum(axis=-1, keepdims=True)
