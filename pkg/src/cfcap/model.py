"""The trainable captioner: a single-layer causal self-attention decoder with
additive attention over grid-cell embeddings.

Token flow for scoring a caption (s_1..s_L): decoder inputs are
(BOS, s_1, .., s_{L-1}); the output row at position t is the next-token
log-distribution that scores s_{t+1}. All math is float64 and routed through
cfcap.kernels so the compiled and pure-python backends share one code path.

The output head is zero-initialized, so a fresh model emits the uniform
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import CapacityError, ConfigError
from .scene import SceneImage
from .vocab import BOS

PARAM_NAMES = (
    "cell_emb",
    "cell_pos",
    "tok_emb",
    "pos_emb",
    "wq",
    "wk",
    "wv",
    "wo",
    "ua",
    "wa",
    "va",
    "w1",
    "w2",
    "b1",
    "wout",
    "bout",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_cell_ids: int
    n_cells: int  # H*W, fixed per world
    embed_dim: int = 32
    attn_dim: int = 32
    ff_dim: int = 64
    n_heads: int = 2
    max_len: int = 20

    def __post_init__(self):
        for name in ("vocab_size", "n_cell_ids", "n_cells", "embed_dim", "attn_dim", "ff_dim", "n_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_cell_ids": self.n_cell_ids,
            "n_cells": self.n_cells,
            "embed_dim": self.embed_dim,
            "attn_dim": self.attn_dim,
            "ff_dim": self.ff_dim,
            "n_heads": self.n_heads,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    D, Da, F = config.embed_dim, config.attn_dim, config.ff_dim
    return {
        "cell_emb": (config.n_cell_ids, D),
        "cell_pos": (config.n_cells, D),
        "tok_emb": (config.vocab_size, D),
        "pos_emb": (config.max_len, D),
        "wq": (D, D),
        "wk": (D, D),
        "wv": (D, D),
        "wo": (D, D),
        "ua": (D, Da),
        "wa": (D, Da),
        "va": (Da,),
        "w1": (D, F),
        "w2": (D, F),
        "b1": (F,),
        "wout": (F, config.vocab_size),
        "bout": (config.vocab_size,),
    }


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Random init; output head zeroed so logits start at exactly zero."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if name in ("wout", "bout", "b1"):
            params[name] = np.zeros(shape)
        elif name in ("cell_emb", "cell_pos", "tok_emb", "pos_emb"):
            params[name] = rng.standard_normal(shape) * 0.3
        elif name == "va":
            params[name] = rng.standard_normal(shape) * (1.0 / np.sqrt(shape[0]))
        else:
            params[name] = rng.standard_normal(shape) * (1.0 / np.sqrt(shape[0]))
    return params


def zeros_like_params(params: dict) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def flatten_params(params: dict) -> np.ndarray:
    """Deterministic flattening in PARAM_NAMES order (gradient checks)."""
    return np.concatenate([np.asarray(params[k]).ravel() for k in PARAM_NAMES])


def unflatten_params(config: ModelConfig, vec: np.ndarray) -> dict[str, np.ndarray]:
    shapes = param_shapes(config)
    out, i = {}, 0
    for name in PARAM_NAMES:
        n = int(np.prod(shapes[name]))
        out[name] = vec[i : i + n].reshape(shapes[name]).copy()
        i += n
    if i != vec.size:
        raise ValueError("flat vector has wrong size")
    return out


def _split_heads(x, n_heads):
    B, T, D = x.shape
    return np.ascontiguousarray(x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3))


def _merge_heads(x):
    B, nh, T, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, T, nh * dh)


def _validate_tokens(config, tokens):
    t = np.asarray(tokens)
    if t.size and (t.min() < 0 or t.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")


def _shift_inputs(tokens):
    """(B, T) targets -> (B, T) decoder inputs (BOS, s_1, .., s_{T-1})."""
    inputs = np.empty_like(tokens)
    inputs[:, 0] = BOS
    inputs[:, 1:] = tokens[:, :-1]
    return inputs


def score_batch(config: ModelConfig, params: dict, grids: np.ndarray, tokens: np.ndarray, need_cache: bool = False):
    """Teacher-forced scoring of whole captions.

    grids: (B, N) row-major cell ids; tokens: (B, T) target tokens, padded
    arbitrarily past each caption's true length (padded rows are valid
    distributions that callers must ignore). Returns logp (B, T, V), plus the
    forward cache when a backward pass will follow.
    """
    grids = np.ascontiguousarray(grids, dtype=np.int64)
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    B, T = tokens.shape
    if T > config.max_len:
        raise CapacityError(f"caption length {T} exceeds max_len {config.max_len}")
    if T < 1:
        raise ValueError("empty token batch")
    _validate_tokens(config, tokens)
    if grids.shape != (B, config.n_cells):
        raise ValueError("grids shape mismatch")

    inputs = _shift_inputs(tokens)
    X = params["tok_emb"][inputs] + params["pos_emb"][:T]
    Q4 = _split_heads(X @ params["wq"], config.n_heads)
    K4 = _split_heads(X @ params["wk"], config.n_heads)
    V4 = _split_heads(X @ params["wv"], config.n_heads)
    A4, P = K.causal_attn_fwd(Q4, K4, V4)
    A = _merge_heads(A4)
    H = X + A @ params["wo"]

    C = params["cell_emb"][grids] + params["cell_pos"]
    HU = np.ascontiguousarray(H @ params["ua"])
    CW = np.ascontiguousarray(C @ params["wa"])
    Pa, TH = K.additive_attn_fwd(HU, CW, params["va"])
    CTX = np.einsum("btn,bnd->btd", Pa, C)

    Zpre = H @ params["w1"] + CTX @ params["w2"] + params["b1"]
    Z = np.tanh(Zpre)
    logits = Z @ params["wout"] + params["bout"]
    logp = K.log_softmax_fwd(np.ascontiguousarray(logits.reshape(B * T, -1))).reshape(B, T, -1)

    if not need_cache:
        return logp
    cache = {
        "grids": grids, "inputs": inputs, "X": X, "Q4": Q4, "K4": K4, "V4": V4,
        "P": P, "A": A, "H": H, "C": C, "Pa": Pa, "TH": TH, "CTX": CTX,
        "Z": Z, "logp": logp,
    }
    return logp, cache


def backward_batch(config: ModelConfig, params: dict, cache: dict, dlogp: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients of sum(dlogp * logp) for the cached forward."""
    B, T, V = dlogp.shape
    logp, Z, H, CTX, C, Pa, TH = (cache[k] for k in ("logp", "Z", "H", "CTX", "C", "Pa", "TH"))

    dlogits = K.log_softmax_bwd(
        np.ascontiguousarray(logp.reshape(B * T, V)),
        np.ascontiguousarray(dlogp.reshape(B * T, V)),
    ).reshape(B, T, V)

    grads = {}
    grads["wout"] = np.einsum("btf,btv->fv", Z, dlogits)
    grads["bout"] = dlogits.sum(axis=(0, 1))
    dZ = dlogits @ params["wout"].T
    dZpre = dZ * (1.0 - Z * Z)
    grads["w1"] = np.einsum("btd,btf->df", H, dZpre)
    grads["w2"] = np.einsum("btd,btf->df", CTX, dZpre)
    grads["b1"] = dZpre.sum(axis=(0, 1))
    dH = dZpre @ params["w1"].T
    dCTX = dZpre @ params["w2"].T

    dPa = np.einsum("btd,bnd->btn", dCTX, C)
    dC = np.einsum("btn,btd->bnd", Pa, dCTX)
    dHU, dCW, dva = K.additive_attn_bwd(Pa, TH, params["va"], np.ascontiguousarray(dPa))
    grads["va"] = dva
    dH += dHU @ params["ua"].T
    grads["ua"] = np.einsum("btd,bta->da", H, dHU)
    dC += dCW @ params["wa"].T
    grads["wa"] = np.einsum("bnd,bna->da", C, dCW)

    grads["cell_emb"] = np.zeros_like(params["cell_emb"])
    np.add.at(grads["cell_emb"], cache["grids"].reshape(-1), dC.reshape(-1, dC.shape[-1]))
    grads["cell_pos"] = dC.sum(axis=0)

    dA = dH @ params["wo"].T
    grads["wo"] = np.einsum("btd,bte->de", cache["A"], dH)
    dA4 = _split_heads(dA, config.n_heads)
    dQ4, dK4, dV4 = K.causal_attn_bwd(cache["Q4"], cache["K4"], cache["V4"], cache["P"], dA4)
    dQf, dKf, dVf = _merge_heads(dQ4), _merge_heads(dK4), _merge_heads(dV4)

    X = cache["X"]
    dX = dH + dQf @ params["wq"].T + dKf @ params["wk"].T + dVf @ params["wv"].T
    grads["wq"] = np.einsum("btd,bte->de", X, dQf)
    grads["wk"] = np.einsum("btd,bte->de", X, dKf)
    grads["wv"] = np.einsum("btd,bte->de", X, dVf)

    grads["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(grads["tok_emb"], cache["inputs"].reshape(-1), dX.reshape(-1, dX.shape[-1]))
    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:T] = dX.sum(axis=0)
    return grads


def next_logp_batch(config: ModelConfig, params: dict, grids: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
    """Next-token log-distributions after the given prefixes.

    grids: (R, N); prefixes: (R, t) with a shared length t (possibly 0).
    Only the final decoder position is pushed through the image-attention
    and output head, which is what keeps lockstep beam search cheap.
    """
    grids = np.ascontiguousarray(grids, dtype=np.int64)
    prefixes = np.ascontiguousarray(prefixes, dtype=np.int64).reshape(len(grids), -1)
    R, t = prefixes.shape
    if t >= config.max_len:
        raise CapacityError(f"prefix length {t} must be < max_len {config.max_len}")
    _validate_tokens(config, prefixes)

    inputs = np.concatenate([np.full((R, 1), BOS, dtype=np.int64), prefixes], axis=1)
    T = t + 1
    X = params["tok_emb"][inputs] + params["pos_emb"][:T]
    K4 = _split_heads(X @ params["wk"], config.n_heads)
    V4 = _split_heads(X @ params["wv"], config.n_heads)
    q_last = np.ascontiguousarray(
        (X[:, -1] @ params["wq"]).reshape(R, config.n_heads, config.head_dim)
    )
    a_last = K.attn_last_fwd(q_last, K4, V4).reshape(R, config.embed_dim)
    h_last = X[:, -1] + a_last @ params["wo"]

    C = params["cell_emb"][grids] + params["cell_pos"]
    hu = np.ascontiguousarray((h_last @ params["ua"])[:, None, :])
    CW = np.ascontiguousarray(C @ params["wa"])
    Pa = K.additive_attn_probs(hu, CW, params["va"])
    ctx = np.einsum("bn,bnd->bd", Pa[:, 0], C)

    Z = np.tanh(h_last @ params["w1"] + ctx @ params["w2"] + params["b1"])
    logits = Z @ params["wout"] + params["bout"]
    return K.log_softmax_fwd(np.ascontiguousarray(logits))


class NeuralCaptioner:
    """Bundles (config, params) behind the CaptionModel protocol.

    Protocol methods:
      next_log_probs_batch(grids (R,N), prefixes (R,t)) -> (R, V)
      prefix_log_probs(grid, tokens) -> (L, V) next-token log-probs,
        row i conditioned on tokens[:i]
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_len(self) -> int:
        return self.config.max_len

    def next_log_probs_batch(self, grids, prefixes):
        return next_logp_batch(self.config, self.params, grids, prefixes)

    def forward(self, image: SceneImage, prefix) -> np.ndarray:
        """Next-token log-distribution for one image/prefix pair."""
        prefix = np.asarray(list(prefix), dtype=np.int64).reshape(1, -1)
        return self.next_log_probs_batch(image.flat()[None, :], prefix)[0]

    def prefix_log_probs(self, grid, tokens) -> np.ndarray:
        grid = np.asarray(grid, dtype=np.int64).reshape(1, -1)
        tokens = np.asarray(list(tokens), dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("empty token sequence")
        return score_batch(self.config, self.params, grid, tokens[None, :])[0]

    def prefix_log_probs_batch(self, grids, tokens) -> np.ndarray:
        """Same caption scored under several grids at once. Returns (R, L, V)."""
        grids = np.asarray(grids, dtype=np.int64)
        tokens = np.asarray(list(tokens), dtype=np.int64)
        tiled = np.broadcast_to(tokens, (len(grids), tokens.size))
        return score_batch(self.config, self.params, grids, np.ascontiguousarray(tiled))

    def sequence_log_prob(self, image: SceneImage, tokens) -> float:
        """Teacher-forced sum of per-token log-probs."""
        tokens = np.asarray(list(tokens), dtype=np.int64)
        logp = self.prefix_log_probs(image.flat(), tokens)
        return float(logp[np.arange(len(tokens)), tokens].sum())
