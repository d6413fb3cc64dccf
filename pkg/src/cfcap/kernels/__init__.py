"""Kernel backend selection.

The compiled extension is preferred when importable; set CFCAP_KERNELS to
"python" or "compiled" to force one. All kernel arrays are C-contiguous
float64; log-softmax kernels take 2-D (rows, vocab) inputs.
"""

import os

_requested = os.environ.get("CFCAP_KERNELS", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(f"CFCAP_KERNELS must be auto|compiled|python, got {_requested!r}")

if _requested == "python":
    from . import pyk as _impl

    BACKEND = "python"
else:
    try:
        from . import _ck as _impl

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from . import pyk as _impl

        BACKEND = "python"

causal_attn_fwd = _impl.causal_attn_fwd
causal_attn_bwd = _impl.causal_attn_bwd
attn_last_fwd = _impl.attn_last_fwd
additive_attn_fwd = _impl.additive_attn_fwd
additive_attn_probs = _impl.additive_attn_probs
additive_attn_bwd = _impl.additive_attn_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd

__all__ = [
    "BACKEND",
    "causal_attn_fwd",
    "causal_attn_bwd",
    "attn_last_fwd",
    "additive_attn_fwd",
    "additive_attn_probs",
    "additive_attn_bwd",
    "log_softmax_fwd",
    "log_softmax_bwd",
]
