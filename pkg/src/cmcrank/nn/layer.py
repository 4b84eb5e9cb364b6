"""Post-norm transformer encoder layer with manually derived gradients.

Sublayer order is attention -> add&norm -> GELU feed-forward -> add&norm.
``encoder_layer_forward`` is the pure inference entry point; training code
uses the recorded variant whose tape feeds ``encoder_layer_backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..errors import InvalidConfig, InvalidShape
from . import ops
from .attention import attention_backward, attention_forward, multi_head_self_attention

#: Names of the array-valued fields of LayerParams, in serialization order.
LAYER_ARRAY_FIELDS = (
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
    "w_1", "b_1", "w_2", "b_2",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)


@dataclass
class LayerParams:
    """All weights of one encoder layer.

    Projection matrices are stored (in_features, out_features) so the
    forward pass is plain ``x @ w + b``.
    """

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    head_count: int

    @classmethod
    def init(cls, model_dim: int, head_count: int, ffn_dim: int | None = None,
             rng: np.random.Generator | None = None) -> "LayerParams":
        """Random-normal init (std 0.02) with identity layer norms."""
        if model_dim < 1 or head_count < 1:
            raise InvalidConfig("model_dim and head_count must be positive")
        if model_dim % head_count != 0:
            raise InvalidConfig(
                f"model_dim {model_dim} not divisible by head_count {head_count}")
        if ffn_dim is None:
            ffn_dim = 4 * model_dim
        rng = rng if rng is not None else np.random.default_rng(0)

        def w(rows: int, cols: int) -> np.ndarray:
            return (0.02 * rng.standard_normal((rows, cols))).astype(np.float32)

        def zeros(n: int) -> np.ndarray:
            return np.zeros(n, dtype=np.float32)

        return cls(
            w_q=w(model_dim, model_dim), b_q=zeros(model_dim),
            w_k=w(model_dim, model_dim), b_k=zeros(model_dim),
            w_v=w(model_dim, model_dim), b_v=zeros(model_dim),
            w_o=w(model_dim, model_dim), b_o=zeros(model_dim),
            w_1=w(model_dim, ffn_dim), b_1=zeros(ffn_dim),
            w_2=w(ffn_dim, model_dim), b_2=zeros(model_dim),
            ln1_gain=np.ones(model_dim, dtype=np.float32), ln1_bias=zeros(model_dim),
            ln2_gain=np.ones(model_dim, dtype=np.float32), ln2_bias=zeros(model_dim),
            head_count=head_count,
        )

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.w_1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array view of every parameter buffer (live, not copies)."""
        return {name: getattr(self, name) for name in LAYER_ARRAY_FIELDS}

    def validate(self) -> None:
        d, f = self.model_dim, self.ffn_dim
        expected = {
            "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
            "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,),
            "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,),
            "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise InvalidShape(f"LayerParams.{name} has shape {got}, expected {shape}")
        if d % self.head_count != 0:
            raise InvalidConfig(
                f"model_dim {d} not divisible by head_count {self.head_count}")

    def copy(self) -> "LayerParams":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in LAYER_ARRAY_FIELDS:
            kwargs[name] = kwargs[name].copy()
        return LayerParams(**kwargs)


class GradientSet(dict):
    """Mapping from parameter-buffer name to its gradient buffer.

    Shape-congruent with the parameter set it was built from; keys may be
    namespaced (``layers.0.w_q``) when several layers contribute.
    """

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "GradientSet":
        return cls({name: np.zeros_like(a) for name, a in arrays.items()})

    def accumulate(self, other: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, grad in other.items():
            key = prefix + name
            if key in self:
                self[key] = self[key] + grad
            else:
                self[key] = grad

    def scale(self, factor: float) -> None:
        for name in self:
            self[name] = self[name] * factor

    def reset(self) -> None:
        for name in self:
            self[name][...] = 0


def encoder_layer_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Deterministic forward through one post-norm encoder layer."""
    if np.ndim(x) != 2 or np.shape(x)[0] < 1:
        raise InvalidShape(f"encoder layer expects a non-empty (L, d) matrix, got {np.shape(x)}")
    a = multi_head_self_attention(x, params)
    u = ops.layer_norm(x + a, params.ln1_gain, params.ln1_bias)
    h1, _ = ops.linear_forward(u, params.w_1, params.b_1)
    h2, _ = ops.linear_forward(ops.gelu(h1), params.w_2, params.b_2)
    return ops.layer_norm(u + h2, params.ln2_gain, params.ln2_bias)


def encoder_layer_forward_recorded(x: np.ndarray, params: LayerParams):
    """Forward keeping every intermediate needed by the backward pass."""
    if np.ndim(x) != 2 or np.shape(x)[0] < 1:
        raise InvalidShape(f"encoder layer expects a non-empty (L, d) matrix, got {np.shape(x)}")
    a, attn_cache = attention_forward(x, params)
    u, ln1_cache = ops.layer_norm_forward(x + a, params.ln1_gain, params.ln1_bias)
    h1, lin1_cache = ops.linear_forward(u, params.w_1, params.b_1)
    g = ops.gelu(h1)
    h2, lin2_cache = ops.linear_forward(g, params.w_2, params.b_2)
    y, ln2_cache = ops.layer_norm_forward(u + h2, params.ln2_gain, params.ln2_bias)
    tape = (attn_cache, ln1_cache, h1, g, lin1_cache, lin2_cache, ln2_cache)
    return y, tape


def encoder_layer_backward(dy: np.ndarray, tape):
    """Gradients of one encoder layer; returns (dx, GradientSet)."""
    attn_cache, ln1_cache, h1, g, lin1_cache, lin2_cache, ln2_cache = tape

    d_s2, d_ln2_gain, d_ln2_bias = ops.layer_norm_backward(dy, ln2_cache)
    d_u = d_s2
    d_g, d_w2, d_b2 = ops.linear_backward(d_s2, lin2_cache)
    d_h1 = ops.gelu_backward(d_g, h1)
    d_u2, d_w1, d_b1 = ops.linear_backward(d_h1, lin1_cache)
    d_u = d_u + d_u2

    d_s1, d_ln1_gain, d_ln1_bias = ops.layer_norm_backward(d_u, ln1_cache)
    dx_attn, attn_grads = attention_backward(d_s1, attn_cache)
    dx = d_s1 + dx_attn

    grads = GradientSet(attn_grads)
    grads.update({
        "w_1": d_w1, "b_1": d_b1, "w_2": d_w2, "b_2": d_b2,
        "ln1_gain": d_ln1_gain, "ln1_bias": d_ln1_bias,
        "ln2_gain": d_ln2_gain, "ln2_bias": d_ln2_bias,
    })
    return dx, grads
