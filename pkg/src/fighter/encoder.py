"""Reference single-head Transformer encoder and its reorganized form.

Hidden layer ``l`` of the encoder is

    X_att = smx(d^-1/2 X Wq (X Wk)^T) X Wv
    X_ffn = sigma(X_att W1 + b1) W2 + b2

and the last layer is the linear map ``X W``. Without biases the value and
first FFN projections collapse into one matrix ``Wv1 = Wv W1``, so a layer
reads ``sigma(P X Wv1) W2`` with ``P`` the attention matrix. That form is
what makes the layer a single-hop GCN with adjacency ``P``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DomainError, ShapeError, activation, as_matrix, glorot, row_softmax


@dataclass(frozen=True, eq=False)
class EncoderConfig:
    widths: tuple[int, ...]
    p: int
    v: Optional[int] = None  # defaults to the layer's output width
    use_bias: bool = False
    activation: str = "relu"
    mask: Optional[np.ndarray] = None
    scale: str = "input"  # "input": 1/sqrt(h_{l-1}); "key": 1/sqrt(p)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(h) for h in self.widths))
        if len(self.widths) < 2 or any(h < 1 for h in self.widths):
            raise DomainError(f"invalid widths {self.widths}")
        if self.p < 1 or (self.v is not None and self.v < 1):
            raise DomainError("attention dims p and v must be >= 1")
        if self.scale not in ("input", "key"):
            raise DomainError(f"scale must be 'input' or 'key', got {self.scale!r}")
        if self.mask is not None:
            m = as_matrix(self.mask, "mask")
            if m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
                raise DomainError("mask must be a finite square matrix")
        activation(self.activation)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def value_dim(self, layer: int) -> int:
        return self.v if self.v is not None else self.widths[layer]

    def d_scale(self, layer: int) -> int:
        return self.widths[layer - 1] if self.scale == "input" else self.p


def attention_matrix(x, wq, wk, d_scale: int, mask=None) -> np.ndarray:
    """Row-stochastic ``smx(d^-1/2 X Wq (X Wk)^T + M)``."""
    return row_softmax(attention_logits(x, wq, wk, d_scale, mask))


def attention_logits(x, wq, wk, d_scale: int, mask=None) -> np.ndarray:
    x = as_matrix(x, "x")
    wq = as_matrix(wq, "wq")
    wk = as_matrix(wk, "wk")
    if wq.shape[0] != x.shape[1] or wk.shape != wq.shape:
        raise ShapeError(f"query/key weights {wq.shape}, {wk.shape} do not fit input {x.shape}")
    logits = (x @ wq) @ (x @ wk).T / np.sqrt(d_scale)
    if mask is not None:
        m = as_matrix(mask, "mask")
        if m.shape != logits.shape:
            raise ShapeError(f"mask shape {m.shape}, expected {logits.shape}")
        logits = logits + m
    return logits


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    params = {}
    L = cfg.n_layers
    for l in range(1, L):
        h_in, h_out, v = cfg.widths[l - 1], cfg.widths[l], cfg.value_dim(l)
        params[f"l{l}.wq"] = glorot(rng, h_in, cfg.p)
        params[f"l{l}.wk"] = glorot(rng, h_in, cfg.p)
        params[f"l{l}.wv"] = glorot(rng, h_in, v)
        params[f"l{l}.ffn1"] = glorot(rng, v, h_out)
        params[f"l{l}.ffn2"] = glorot(rng, h_out, h_out)
        if cfg.use_bias:
            params[f"l{l}.b1"] = np.zeros((1, h_out))
            params[f"l{l}.b2"] = np.zeros((1, h_out))
    params[f"l{L}.w"] = glorot(rng, cfg.widths[L - 1], cfg.widths[L])
    return params


def _get(params: dict, key: str, shape: tuple[int, int], layer: int) -> np.ndarray:
    if key not in params:
        raise ShapeError(f"layer {layer}: missing parameter {key!r}")
    w = as_matrix(params[key], key)
    if w.shape != shape:
        raise ShapeError(f"layer {layer}: {key} has shape {w.shape}, expected {shape}")
    return w


@dataclass
class EncoderTrace:
    inputs: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    x_att: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    x_ffn: list = field(default_factory=list)


def _check_input(x0, cfg: EncoderConfig) -> np.ndarray:
    x = as_matrix(x0, "x0")
    if x.shape[1] != cfg.widths[0]:
        raise ShapeError(f"layer 1: input width {x.shape[1]}, expected {cfg.widths[0]}")
    if cfg.mask is not None and as_matrix(cfg.mask).shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"mask shape {as_matrix(cfg.mask).shape} does not fit sequence length {x.shape[0]}")
    return x


def encoder_forward(x0, cfg: EncoderConfig, params: dict):
    """Full encoder recursion with optional biases. Returns ``(output, trace)``."""
    x = _check_input(x0, cfg)
    sigma, _ = activation(cfg.activation)
    L = cfg.n_layers
    trace = EncoderTrace()
    for l in range(1, L):
        h_in, h_out, v = cfg.widths[l - 1], cfg.widths[l], cfg.value_dim(l)
        wq = _get(params, f"l{l}.wq", (h_in, cfg.p), l)
        wk = _get(params, f"l{l}.wk", (h_in, cfg.p), l)
        wv = _get(params, f"l{l}.wv", (h_in, v), l)
        w1 = _get(params, f"l{l}.ffn1", (v, h_out), l)
        w2 = _get(params, f"l{l}.ffn2", (h_out, h_out), l)
        p = attention_matrix(x, wq, wk, cfg.d_scale(l), cfg.mask)
        x_att = p @ x @ wv
        pre = x_att @ w1
        if cfg.use_bias:
            pre = pre + _get(params, f"l{l}.b1", (1, h_out), l)
        out = sigma(pre) @ w2
        if cfg.use_bias:
            out = out + _get(params, f"l{l}.b2", (1, h_out), l)
        trace.inputs.append(x)
        trace.attention.append(p)
        trace.x_att.append(x_att)
        trace.pre_activations.append(pre)
        trace.x_ffn.append(out)
        x = out
    w = _get(params, f"l{L}.w", (cfg.widths[L - 1], cfg.widths[L]), L)
    trace.inputs.append(x)
    return x @ w, trace


def consolidate_params(params: dict, cfg: EncoderConfig) -> dict:
    """Replace each layer's ``wv`` and ``ffn1`` by their product ``wv1``."""
    out = {}
    for l in range(1, cfg.n_layers):
        out[f"l{l}.wq"] = params[f"l{l}.wq"]
        out[f"l{l}.wk"] = params[f"l{l}.wk"]
        out[f"l{l}.wv1"] = params[f"l{l}.wv"] @ params[f"l{l}.ffn1"]
        out[f"l{l}.ffn2"] = params[f"l{l}.ffn2"]
    L = cfg.n_layers
    out[f"l{L}.w"] = params[f"l{L}.w"]
    return out


def encoder_forward_reorganized(x0, cfg: EncoderConfig, params: dict):
    """Bias-free encoder written as ``sigma(P X Wv1) W2`` per hidden layer.

    ``params`` holds ``l{l}.wq``, ``l{l}.wk``, ``l{l}.wv1`` and ``l{l}.ffn2``
    for hidden layers and ``l{L}.w`` for the output layer.
    Returns ``(output, trace)``; ``trace.x_att`` holds ``P X`` per layer.
    """
    if cfg.use_bias:
        raise DomainError("the reorganized encoder is bias-free")
    x = _check_input(x0, cfg)
    sigma, _ = activation(cfg.activation)
    L = cfg.n_layers
    trace = EncoderTrace()
    for l in range(1, L):
        h_in, h_out = cfg.widths[l - 1], cfg.widths[l]
        wq = _get(params, f"l{l}.wq", (h_in, cfg.p), l)
        wk = _get(params, f"l{l}.wk", (h_in, cfg.p), l)
        wv1 = _get(params, f"l{l}.wv1", (h_in, h_out), l)
        w2 = _get(params, f"l{l}.ffn2", (h_out, h_out), l)
        p = attention_matrix(x, wq, wk, cfg.d_scale(l), cfg.mask)
        px = p @ x
        pre = px @ wv1
        out = sigma(pre) @ w2
        trace.inputs.append(x)
        trace.attention.append(p)
        trace.x_att.append(px)
        trace.pre_activations.append(pre)
        trace.x_ffn.append(out)
        x = out
    w = _get(params, f"l{L}.w", (cfg.widths[L - 1], cfg.widths[L]), L)
    trace.inputs.append(x)
    return x @ w, trace
