"""Fighter: the streamlined multi-hop graph-convolutional transformer.

Each layer replaces the value projection, the first FFN projection and the
(removed) second FFN projection by a single matrix ``W`` and aggregates over
several hops of the attention matrix::

    X_l = sigma(P^[k] @ blkdiag(X_{l-1}; k) @ W_l),   P = smx(d^-1/2 X Wq (X Wk)^T)

Optional enhancements follow the usual pre-norm layout: the layer input is
layer-normalized before queries, keys and aggregation, heads are stacked
along the feature axis before ``W``, and a residual adds the (normalized)
layer input after the activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .encoder import attention_logits
from .tensor import (
    DomainError,
    ShapeError,
    activation,
    as_matrix,
    block_diag_replicate,
    glorot,
    hop_concat_powers,
    matrix_powers,
    row_softmax,
)

LN_EPS = 1e-5


class ConfigError(DomainError):
    """The model configuration is internally inconsistent."""


@dataclass(frozen=True, eq=False)
class FighterConfig:
    widths: tuple[int, ...]
    p: int
    hop_list: tuple[int, ...]
    heads: int = 1
    use_layernorm: bool = False
    use_residual: bool = False
    final_residual: bool = False
    final_kappa_one: bool = False
    hop_start: int = 0
    mask: Optional[np.ndarray] = None
    activation: str = "relu"
    scale: str = "input"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(h) for h in self.widths))
        object.__setattr__(self, "hop_list", tuple(int(k) for k in self.hop_list))
        if len(self.widths) < 2 or any(h < 1 for h in self.widths):
            raise ConfigError(f"invalid widths {self.widths}")
        if len(self.hop_list) != self.n_layers:
            raise ConfigError(f"hop_list has {len(self.hop_list)} entries for {self.n_layers} layers")
        if any(k < 1 for k in self.hop_list):
            raise ConfigError(f"hop counts must be >= 1: {self.hop_list}")
        if self.hop_start not in (0, 1):
            raise ConfigError(f"hop_start must be 0 or 1, got {self.hop_start}")
        if self.heads < 1 or self.p < 1:
            raise ConfigError("heads and p must be >= 1")
        if self.scale not in ("input", "key"):
            raise ConfigError(f"scale must be 'input' or 'key', got {self.scale!r}")
        if self.use_residual:
            for l in range(1, self.n_layers):
                if self.widths[l] != self.widths[l - 1]:
                    raise ConfigError(
                        f"residual needs equal widths, layer {l} maps {self.widths[l - 1]} -> {self.widths[l]}"
                    )
        if self.final_residual and self.widths[-1] != self.widths[-2]:
            raise ConfigError("final residual needs h_L == h_{L-1}")
        if self.mask is not None:
            m = as_matrix(self.mask, "mask")
            if m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
                raise ConfigError("mask must be a finite square matrix")
        activation(self.activation)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def kappa(self, layer: int) -> int:
        if layer == self.n_layers and self.final_kappa_one:
            return 1
        return self.hop_list[layer - 1]

    def first_power(self, layer: int) -> int:
        """Lowest attention power aggregated at ``layer``.

        Hidden layers start at ``hop_start``; with ``hop_start=1`` a one-hop
        layer aggregates with ``P`` itself, which is the Transformer layer.
        The output layer always starts at ``P^0``, matching the linear
        output layer of the encoder when its hop count is 1.
        """
        return 0 if layer == self.n_layers else self.hop_start

    def d_scale(self, layer: int) -> int:
        return self.widths[layer - 1] if self.scale == "input" else self.p

    def weight_shape(self, layer: int) -> tuple[int, int]:
        return (self.heads * self.kappa(layer) * self.widths[layer - 1], self.widths[layer])

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "p": self.p,
            "hop_list": list(self.hop_list),
            "heads": self.heads,
            "use_layernorm": self.use_layernorm,
            "use_residual": self.use_residual,
            "final_residual": self.final_residual,
            "final_kappa_one": self.final_kappa_one,
            "hop_start": self.hop_start,
            "activation": self.activation,
            "scale": self.scale,
        }


def init_fighter_params(cfg: FighterConfig, rng: np.random.Generator) -> dict:
    params = {}
    for l in range(1, cfg.n_layers + 1):
        h_in = cfg.widths[l - 1]
        for h in range(cfg.heads):
            params[f"l{l}.wq{h}"] = glorot(rng, h_in, cfg.p)
            params[f"l{l}.wk{h}"] = glorot(rng, h_in, cfg.p)
        params[f"l{l}.w"] = glorot(rng, *cfg.weight_shape(l))
        if cfg.use_layernorm:
            params[f"l{l}.ln_g"] = np.ones((1, h_in))
            params[f"l{l}.ln_b"] = np.zeros((1, h_in))
    return params


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    """Per-row normalization. Returns ``(y, xhat, rstd)``."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gain + bias, xhat, rstd


def raised_attention(x, wq, wk, kappa: int, mask=None, d_scale: Optional[int] = None) -> np.ndarray:
    """``P^[kappa] = [I, P, ..., P^(kappa-1)]`` for the attention matrix of ``x``."""
    x = as_matrix(x, "x")
    if d_scale is None:
        d_scale = x.shape[1]
    p = row_softmax(attention_logits(x, wq, wk, d_scale, mask))
    return hop_concat_powers(p, kappa)


@dataclass
class LayerTrace:
    x_in: np.ndarray
    x_tilde: np.ndarray
    kappa: int
    first_power: int = 0
    xhat: Optional[np.ndarray] = None
    rstd: Optional[np.ndarray] = None
    attention: list = field(default_factory=list)  # P per head
    powers: list = field(default_factory=list)  # [I, P, ..., P^(s+k-1)] per head
    aggregated: Optional[np.ndarray] = None
    pre_activation: Optional[np.ndarray] = None


@dataclass
class FighterTrace:
    layers: list = field(default_factory=list)
    fingerprint: Optional[str] = None


def _param(params: dict, key: str, shape: tuple[int, int], layer: int) -> np.ndarray:
    if key not in params:
        raise ShapeError(f"layer {layer}: missing parameter {key!r}")
    w = as_matrix(params[key], key)
    if w.shape != shape:
        raise ShapeError(f"layer {layer}: {key} has shape {w.shape}, expected {shape}")
    return w


def fighter_forward(x0, cfg: FighterConfig, params: dict, frozen_attention=None):
    """Fighter forward pass. Returns ``(output, trace)``.

    ``frozen_attention`` optionally supplies one attention matrix per layer
    (or per layer and head), bypassing the query/key computation. With it
    the network is exactly a flexible GCN whose adjacency is the supplied P.
    """
    x = as_matrix(x0, "x0")
    S = x.shape[0]
    if x.shape[1] != cfg.widths[0]:
        raise ShapeError(f"layer 1: input width {x.shape[1]}, expected {cfg.widths[0]}")
    if cfg.mask is not None and as_matrix(cfg.mask).shape != (S, S):
        raise ShapeError(f"mask shape {as_matrix(cfg.mask).shape} does not fit sequence length {S}")
    sigma, _ = activation(cfg.activation)
    trace = FighterTrace()
    L = cfg.n_layers
    for l in range(1, L + 1):
        h_in = cfg.widths[l - 1]
        k = cfg.kappa(l)
        s0 = cfg.first_power(l)
        lt = LayerTrace(x_in=x, x_tilde=x, kappa=k, first_power=s0)
        if cfg.use_layernorm:
            g = _param(params, f"l{l}.ln_g", (1, h_in), l)
            b = _param(params, f"l{l}.ln_b", (1, h_in), l)
            lt.x_tilde, lt.xhat, lt.rstd = layer_norm(x, g, b)
        xt = lt.x_tilde
        blocks = []
        for h in range(cfg.heads):
            if frozen_attention is not None:
                fa = frozen_attention[l - 1]
                p = as_matrix(fa[h] if isinstance(fa, (list, tuple)) else fa, "frozen attention")
                if p.shape != (S, S):
                    raise ShapeError(f"layer {l}: frozen attention shape {p.shape}, expected {(S, S)}")
            else:
                wq = _param(params, f"l{l}.wq{h}", (h_in, cfg.p), l)
                wk = _param(params, f"l{l}.wk{h}", (h_in, cfg.p), l)
                p = row_softmax(attention_logits(xt, wq, wk, cfg.d_scale(l), cfg.mask))
            powers = matrix_powers(p, s0 + k)
            lt.attention.append(p)
            lt.powers.append(powers)
            blocks.append(np.hstack(powers[s0:]) @ block_diag_replicate(xt, k))
        agg = np.hstack(blocks)
        w = _param(params, f"l{l}.w", cfg.weight_shape(l), l)
        z = agg @ w
        lt.aggregated = agg
        lt.pre_activation = z
        if l < L:
            x = sigma(z)
            if cfg.use_residual:
                x = x + xt
        else:
            x = z
            if cfg.final_residual:
                x = x + xt
        trace.layers.append(lt)
    return x, trace


def attention_heatmap_slice(p, k: int = 64) -> np.ndarray:
    """Top-left ``k x k`` block of an attention matrix, ``k`` clamped to S."""
    p = as_matrix(p, "attention")
    k = max(1, min(int(k), p.shape[0], p.shape[1]))
    return p[:k, :k].copy()
