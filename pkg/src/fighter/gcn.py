"""Flexible multi-hop GCN, its single-hop restriction and two-layer gradients.

Layer ``l`` of the flexible GCN computes

    X_l = sigma(A^[k_l] @ blkdiag(X_{l-1}; k_l) @ W_l)

where ``A^[k] = [I, A, ..., A^(k-1)]``. Every hop gets its own block of
rows in ``W_l``, so ``W_l`` has shape ``(k_l * h_{l-1}, h_l)``. The last
layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DomainError,
    ShapeError,
    activation,
    as_matrix,
    block_diag_replicate,
    glorot,
    hop_concat_powers,
)


@dataclass(frozen=True)
class GcnConfig:
    layer_widths: tuple[int, ...]
    hop_list: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(h) for h in self.layer_widths))
        object.__setattr__(self, "hop_list", tuple(int(k) for k in self.hop_list))
        if len(self.layer_widths) < 2:
            raise DomainError("need at least input and output widths")
        if any(h < 1 for h in self.layer_widths):
            raise DomainError(f"widths must be positive: {self.layer_widths}")
        if len(self.hop_list) != self.n_layers:
            raise DomainError(
                f"hop_list has {len(self.hop_list)} entries for {self.n_layers} layers"
            )
        if any(k < 1 for k in self.hop_list):
            raise DomainError(f"hop counts must be >= 1: {self.hop_list}")
        activation(self.activation)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def weight_shape(self, layer: int, single_hop: bool = False) -> tuple[int, int]:
        """Shape of ``W_layer`` (1-based layer index)."""
        k = 1 if single_hop else self.hop_list[layer - 1]
        return (k * self.layer_widths[layer - 1], self.layer_widths[layer])


@dataclass
class GcnTrace:
    inputs: list = field(default_factory=list)
    aggregated: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    adjacency: list = field(default_factory=list)


def init_gcn_params(cfg: GcnConfig, rng: np.random.Generator, single_hop: bool = False) -> dict:
    return {
        f"w{l}": glorot(rng, *cfg.weight_shape(l, single_hop))
        for l in range(1, cfg.n_layers + 1)
    }


def _layer_adjacency(a, layer: int, n: int) -> np.ndarray:
    if isinstance(a, (list, tuple)):
        if len(a) < layer:
            raise ShapeError(f"layer {layer}: no adjacency supplied")
        m = as_matrix(a[layer - 1], f"adjacency for layer {layer}")
    else:
        m = as_matrix(a, "adjacency")
    if m.shape != (n, n):
        raise ShapeError(f"layer {layer}: adjacency shape {m.shape}, expected {(n, n)}")
    return m


def _check_weight(params: dict, cfg: GcnConfig, layer: int, single_hop: bool) -> np.ndarray:
    w = as_matrix(params[f"w{layer}"], f"w{layer}")
    expected = cfg.weight_shape(layer, single_hop)
    if w.shape != expected:
        raise ShapeError(f"layer {layer}: weight shape {w.shape}, expected {expected}")
    return w


def gcn_forward(x0, a, cfg: GcnConfig, params: dict):
    """Multi-hop forward pass. ``a`` is one adjacency or one per layer.

    Returns ``(output, trace)``.
    """
    x = as_matrix(x0, "x0")
    n = x.shape[0]
    if x.shape[1] != cfg.layer_widths[0]:
        raise ShapeError(f"layer 1: input width {x.shape[1]}, expected {cfg.layer_widths[0]}")
    sigma, _ = activation(cfg.activation)
    trace = GcnTrace()
    for l in range(1, cfg.n_layers + 1):
        adj = _layer_adjacency(a, l, n)
        w = _check_weight(params, cfg, l, single_hop=False)
        k = cfg.hop_list[l - 1]
        agg = hop_concat_powers(adj, k) @ block_diag_replicate(x, k)
        z = agg @ w
        trace.inputs.append(x)
        trace.adjacency.append(adj)
        trace.aggregated.append(agg)
        trace.pre_activations.append(z)
        x = z if l == cfg.n_layers else sigma(z)
    return x, trace


def gcn_forward_single_hop(x0, a, cfg: GcnConfig, params: dict):
    """Single-hop GCN: hidden layers ``sigma(A X W)``, final layer ``X W``.

    The final layer uses only the A^0 term, the convention under which a
    Transformer's linear output layer lines up with a GCN layer.
    """
    x = as_matrix(x0, "x0")
    n = x.shape[0]
    if x.shape[1] != cfg.layer_widths[0]:
        raise ShapeError(f"layer 1: input width {x.shape[1]}, expected {cfg.layer_widths[0]}")
    sigma, _ = activation(cfg.activation)
    trace = GcnTrace()
    for l in range(1, cfg.n_layers + 1):
        w = _check_weight(params, cfg, l, single_hop=True)
        trace.inputs.append(x)
        if l == cfg.n_layers:
            agg = x
            trace.adjacency.append(None)
        else:
            adj = _layer_adjacency(a, l, n)
            agg = adj @ x
            trace.adjacency.append(adj)
        z = agg @ w
        trace.aggregated.append(agg)
        trace.pre_activations.append(z)
        x = z if l == cfg.n_layers else sigma(z)
    return x, trace


def gcn_two_layer_grads(
    x0,
    a,
    params: dict,
    kappa1: int,
    kappa2: int,
    activation_name: str = "relu",
    single_hop: bool = False,
):
    """Closed-form Jacobians of a two-layer scalar GCN.

    Row ``j`` of each returned matrix is the derivative of output ``j``
    (the network output is ``n x 1``) with respect to the parameter.

    Returns ``(dW2, dW1_columns)``. In the multi-hop form ``dW2`` is
    ``A^[k2] blkdiag(sigma(A^[k1] blkdiag(X0; k1) W1); k2)`` with shape
    ``(n, k2*h1)`` and ``dW1_columns[i]`` is ``(n, k1*h0)``. With
    ``single_hop`` the first layer aggregates with ``A`` alone and the
    second layer uses ``A^0`` only, giving ``dW2 = sigma(A X0 W1)`` and
    ``dW1_columns[i] = sigma_dot_i * (A X0) * W2[i]``.
    """
    x0 = as_matrix(x0, "x0")
    a = as_matrix(a, "adjacency")
    w1 = as_matrix(params["w1"], "w1")
    w2 = as_matrix(params["w2"], "w2")
    if w2.shape[1] != 1:
        raise DomainError(
            f"closed-form GCN gradients need a scalar output (h2 == 1), got h2 = {w2.shape[1]}"
        )
    sigma, sigma_dot = activation(activation_name)
    h1 = w1.shape[1]

    if single_hop:
        ax = a @ x0
        if w1.shape[0] != ax.shape[1] or w2.shape[0] != h1:
            raise ShapeError(f"single-hop weights {w1.shape}, {w2.shape} do not fit input {x0.shape}")
        z = ax @ w1
        ds = sigma_dot(z)
        dw2 = sigma(z)
        dw1 = [ds[:, [i]] * ax * w2[i, 0] for i in range(h1)]
        return dw2, dw1

    if w1.shape[0] != kappa1 * x0.shape[1] or w2.shape[0] != kappa2 * h1:
        raise ShapeError(
            f"weights {w1.shape}, {w2.shape} do not fit kappa1={kappa1}, kappa2={kappa2}, input {x0.shape}"
        )
    m1 = hop_concat_powers(a, kappa1) @ block_diag_replicate(x0, kappa1)
    z = m1 @ w1
    ds = sigma_dot(z)
    a2 = hop_concat_powers(a, kappa2)
    dw2 = a2 @ block_diag_replicate(sigma(z), kappa2)
    dw1 = []
    for i in range(h1):
        local = ds[:, [i]] * m1
        stacked = np.vstack([local * w2[m * h1 + i, 0] for m in range(kappa2)])
        dw1.append(a2 @ stacked)
    return dw2, dw1
