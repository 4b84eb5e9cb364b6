"""Multi-head self-attention over a token-free sequence of embeddings.

There is deliberately no positional encoding anywhere in this module: the
attention is purely content-based, which makes every operation permutation
equivariant over the sequence axis.  Two execution paths share the same
math: a recorded path that keeps the caches needed for the manual backward
pass, and a blocked inference path that bounds peak memory so sequences of
16k+ rows fit comfortably in RAM.
"""
from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np

from ..errors import InvalidConfig, InvalidShape
from .ops import softmax_rows

if TYPE_CHECKING:
    from .layer import LayerParams

# Row-block size for the memory-bounded inference path.  Small blocks keep
# the score buffers inside cache-friendly, allocator-reusable sizes, which
# measures faster than full (L, L) score materialization from ~100 rows up.
_BLOCK_ROWS = 256
_BLOCKED_THRESHOLD = 64


def _split_heads(x: np.ndarray, head_count: int) -> np.ndarray:
    length, dim = x.shape
    head_dim = dim // head_count
    return x.reshape(length, head_count, head_dim).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    head_count, length, head_dim = x.shape
    return x.transpose(1, 0, 2).reshape(length, head_count * head_dim)


def _check_input(x: np.ndarray, params: "LayerParams") -> None:
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidShape(f"attention expects a non-empty (L, d) matrix, got {x.shape}")
    dim = params.w_q.shape[0]
    if x.shape[1] != dim:
        raise InvalidShape(f"attention input has dim {x.shape[1]}, params expect {dim}")
    if dim % params.head_count != 0:
        raise InvalidConfig(
            f"model_dim {dim} not divisible by head_count {params.head_count}")


def multi_head_self_attention(x: np.ndarray, params: "LayerParams") -> np.ndarray:
    """Full bidirectional scaled dot-product attention, output-projected."""
    _check_input(x, params)
    if x.shape[0] > _BLOCKED_THRESHOLD:
        return _attention_blocked(x, params)
    y, _ = attention_forward(x, params)
    return y


def attention_forward(x: np.ndarray, params: "LayerParams"):
    """Recorded forward: returns the output and the cache for backward."""
    _check_input(x, params)
    h = params.head_count
    head_dim = x.shape[1] // h
    scale = 1.0 / math.sqrt(head_dim)

    q = x @ params.w_q + params.b_q
    k = x @ params.w_k + params.b_k
    v = x @ params.w_v + params.b_v
    qh, kh, vh = (_split_heads(a, h) for a in (q, k, v))

    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    attn = softmax_rows(scores)
    out = _merge_heads(attn @ vh)
    y = out @ params.w_o + params.b_o
    cache = (x, qh, kh, vh, attn, out, params, scale)
    return y, cache


def attention_backward(dy: np.ndarray, cache):
    """Gradients w.r.t. the input and the four projections."""
    x, qh, kh, vh, attn, out, params, scale = cache
    h = params.head_count

    d_out = dy @ params.w_o.T
    grads = {
        "w_o": out.T @ dy,
        "b_o": dy.sum(axis=0),
    }
    d_outh = _split_heads(d_out, h)

    d_attn = d_outh @ vh.transpose(0, 2, 1)
    d_vh = attn.transpose(0, 2, 1) @ d_outh
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_qh = (d_scores @ kh) * scale
    d_kh = (d_scores.transpose(0, 2, 1) @ qh) * scale

    d_q = _merge_heads(d_qh)
    d_k = _merge_heads(d_kh)
    d_v = _merge_heads(d_vh)

    grads["w_q"] = x.T @ d_q
    grads["b_q"] = d_q.sum(axis=0)
    grads["w_k"] = x.T @ d_k
    grads["b_k"] = d_k.sum(axis=0)
    grads["w_v"] = x.T @ d_v
    grads["b_v"] = d_v.sum(axis=0)

    dx = d_q @ params.w_q.T + d_k @ params.w_k.T + d_v @ params.w_v.T
    return dx, grads


def _attention_blocked(x: np.ndarray, params: "LayerParams") -> np.ndarray:
    """Inference path processing query rows in blocks per head.

    Identical math to :func:`attention_forward`; only the evaluation order
    differs, keeping peak memory at O(block * L) instead of O(L * L).
    """
    h = params.head_count
    length, dim = x.shape
    head_dim = dim // h
    scale = 1.0 / math.sqrt(head_dim)

    q = x @ params.w_q + params.b_q
    k = x @ params.w_k + params.b_k
    v = x @ params.w_v + params.b_v

    out = np.empty_like(q)
    for i in range(h):
        lo, hi = i * head_dim, (i + 1) * head_dim
        qi = np.ascontiguousarray(q[:, lo:hi])
        kit = np.ascontiguousarray(k[:, lo:hi]).T
        vi = np.ascontiguousarray(v[:, lo:hi])
        for start in range(0, length, _BLOCK_ROWS):
            stop = min(start + _BLOCK_ROWS, length)
            scores = (qi[start:stop] @ kit) * scale
            out[start:stop, lo:hi] = softmax_rows(scores) @ vi
    return out @ params.w_o + params.b_o
