"""Local multi-head self-attention over k x k pixel neighborhoods.

Each output pixel attends to its spatial neighborhood through projected
queries, keys, and values plus a learned relative-position table indexed by
the neighbor offset. The content logit is scaled by 1/sqrt(c_out) and the
positional logit by 1/c_out**0.25 (switchable to 1/sqrt(c_out) for
ablation). Out-of-image neighborhood slots are excluded from the softmax,
so boundary pixels renormalize over real neighbors only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

_MASK_CACHE: dict = {}
_NEG = -1e9


@dataclass
class AttentionLayerParams:
    """Trainable state of one local self-attention layer.

    w_q, w_k, w_v are (c_in, c_out) so projection size does not depend on
    the spatial extent. rel_pos is (heads, 2k-1, 2k-1, c_out/heads),
    indexed by the neighbor offset shifted by k-1; a k x k neighborhood
    touches only the central band of the table.
    """

    c_in: int
    c_out: int
    heads: int
    extent: int
    stride: int = 1
    pos_scale: str = "fourth-root"
    w_q: Tensor = field(repr=False, default=None)
    w_k: Tensor = field(repr=False, default=None)
    w_v: Tensor = field(repr=False, default=None)
    rel_pos: Tensor = field(repr=False, default=None)

    def __post_init__(self):
        if self.c_out % self.heads != 0:
            raise ConfigError(f"c_out={self.c_out} not divisible by heads={self.heads}")
        if self.extent < 1 or self.extent % 2 == 0:
            raise ConfigError(f"extent must be odd and positive, got {self.extent}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.pos_scale not in ("fourth-root", "sqrt"):
            raise ConfigError(f"unknown pos_scale {self.pos_scale!r}")

    @property
    def head_dim(self) -> int:
        return self.c_out // self.heads

    def tensors(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "rel_pos": self.rel_pos}


def init_attention_params(
    c_in: int,
    c_out: int,
    heads: int,
    extent: int,
    rng: np.random.Generator,
    stride: int = 1,
    pos_scale: str = "fourth-root",
) -> AttentionLayerParams:
    """Fan-in uniform projections, normal(0, head_dim**-0.5) positions."""
    p = AttentionLayerParams(c_in, c_out, heads, extent, stride, pos_scale)
    bound = 1.0 / np.sqrt(c_in)
    dt = T.default_dtype()
    for name in ("w_q", "w_k", "w_v"):
        setattr(p, name, Tensor(rng.uniform(-bound, bound, (c_in, c_out)).astype(dt), requires_grad=True))
    span = 2 * extent - 1
    p.rel_pos = Tensor(
        (rng.standard_normal((heads, span, span, p.head_dim)) * p.head_dim**-0.5).astype(dt),
        requires_grad=True,
    )
    return p


def attention_param_count(params: AttentionLayerParams) -> int:
    """Trainable scalars: 3*c_in*c_out projections + (2k-1)^2*c_out positions."""
    return 3 * params.c_in * params.c_out + (2 * params.extent - 1) ** 2 * params.c_out


def neighborhood_extract(x: Tensor, k: int):
    """Gather k x k neighborhoods of an NCHW map, with a validity mask.

    Returns (patches, valid): patches is (B, H, W, k*k, C) with exact zeros
    at out-of-image slots, valid is a boolean (H, W, k*k) array marking
    in-bounds entries.
    """
    if k % 2 == 0:
        raise ContractError(f"neighborhood extent must be odd, got {k}")
    B, C, H, W = x.shape
    bhwc = T.transpose(x, (0, 2, 3, 1))
    patches = T.window_gather(bhwc, k)
    valid = T.window_validity(H, W, k).reshape(H, W, k * k)
    return patches, valid


def _mask_bias(h: int, w: int, k: int, dtype) -> np.ndarray:
    key = (h, w, k, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        valid = T.window_validity(h, w, k)
        bias = np.where(valid, 0.0, _NEG).astype(dtype)
        _MASK_CACHE[key] = bias[None, :, None, :]  # (1, P, 1, K)
    return _MASK_CACHE[key]


def _central_band(k: int) -> np.ndarray:
    """Flat indices into the (2k-1)^2 offset table used by a k x k window."""
    span = 2 * k - 1
    half = k // 2
    idx = [
        (di + k - 1) * span + (dj + k - 1)
        for di in range(-half, half + 1)
        for dj in range(-half, half + 1)
    ]
    return np.asarray(idx, dtype=np.int64)


def local_self_attention(x: Tensor, params: AttentionLayerParams, return_weights: bool = False):
    """Windowed attention: per head, softmax over the valid neighborhood
    of content plus positional logits, then a convex mix of the values.

    Output is (B, c_out, H, W); a stride-2 layer mean-pools 2x2 afterwards.
    """
    B, c_in, H, W = x.shape
    if c_in != params.c_in:
        raise ShapeError(f"input has {c_in} channels, layer expects {params.c_in}")
    k, N = params.extent, params.heads
    c_out, ch = params.c_out, params.head_dim
    P, K = H * W, k * k

    flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B * P, c_in))
    q = T.matmul(flat, params.w_q)
    keys = T.matmul(flat, params.w_k)
    vals = T.matmul(flat, params.w_v)

    # head-major layouts: q (B,P,N,c), gathered keys/values (B,P,N,K,c)
    q4 = T.reshape(q, (B, P, N, ch))
    kn = T.transpose(T.reshape(T.window_gather(T.reshape(keys, (B, H, W, c_out)), k),
                               (B, P, K, N, ch)), (0, 1, 3, 2, 4))
    vn = T.transpose(T.reshape(T.window_gather(T.reshape(vals, (B, H, W, c_out)), k),
                               (B, P, K, N, ch)), (0, 1, 3, 2, 4))

    content = T.scale(T.nbhd_dot(q4, kn), 1.0 / np.sqrt(c_out))
    pos_div = np.sqrt(c_out) if params.pos_scale == "sqrt" else c_out**0.25
    span = 2 * k - 1
    table = T.reshape(params.rel_pos, (N, span * span, ch))
    band = T.gather(table, _central_band(k), axis=1)  # (N, K, ch)
    positional = T.scale(T.relpos_dot(q4, band), 1.0 / pos_div)

    logits = T.add(T.add(content, positional), _mask_bias(H, W, k, x.dtype))
    attn = T.softmax(logits, axis=3)  # over the K neighborhood slots
    mixed = T.nbhd_mix(attn, vn)  # (B, P, N, ch)
    y = T.transpose(T.reshape(mixed, (B, H, W, c_out)), (0, 3, 1, 2))
    if params.stride == 2:
        y = T.avg_pool2(y)
    if return_weights:
        return y, attn
    return y
