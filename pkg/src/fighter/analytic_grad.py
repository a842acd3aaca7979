"""Closed-form and reverse-mode gradients, plus the finite-difference oracle.

Three independent routes to the same derivatives live here:

* closed forms for the two-layer scalar attention model (feature, query and
  key parameters), written row by row the way they are derived by hand;
* a reverse-mode backward pass for the Fighter, encoder and GCN forward
  passes, composed from primitive adjoints (matmul, row softmax, matrix
  power chains, block-diagonal replication, layer norm, residual);
* central finite differences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .encoder import EncoderConfig, EncoderTrace, encoder_forward
from .gcn import GcnConfig, GcnTrace, gcn_forward
from .network import FighterConfig, FighterTrace, fighter_forward
from .tensor import DomainError, activation, as_matrix, row_softmax


class StaleTraceError(RuntimeError):
    """A cached forward trace does not belong to the given inputs/params."""


class EvaluationError(RuntimeError):
    """A loss closure returned a non-finite value."""


# ---------------------------------------------------------------------------
# Two-layer scalar attention model
# ---------------------------------------------------------------------------


@dataclass
class TwoLayerScalarModel:
    """``sigma(smx(d^-1/2 X Wq (X Wk)^T) X Wv) W2`` with ``W2`` of width 1."""

    x0: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w2: np.ndarray
    activation: str = "relu"
    d_scale: Optional[int] = None

    def __post_init__(self):
        self.x0 = as_matrix(self.x0, "x0")
        self.wq = as_matrix(self.wq, "wq")
        self.wk = as_matrix(self.wk, "wk")
        self.wv = as_matrix(self.wv, "wv")
        self.w2 = as_matrix(self.w2, "w2")
        d = self.x0.shape[1]
        if self.wq.shape[0] != d or self.wk.shape != self.wq.shape:
            raise DomainError(f"query/key weights {self.wq.shape}, {self.wk.shape} do not fit d={d}")
        if self.wv.shape[0] != d or self.w2.shape != (self.wv.shape[1], 1):
            raise DomainError(f"value/output weights {self.wv.shape}, {self.w2.shape} are inconsistent")
        if self.d_scale is None:
            self.d_scale = d

    @property
    def params(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "w2": self.w2}

    def with_params(self, params: dict) -> "TwoLayerScalarModel":
        return TwoLayerScalarModel(
            self.x0, params["wq"], params["wk"], params["wv"], params["w2"],
            self.activation, self.d_scale,
        )

    def parts(self):
        q = self.x0 @ self.wq
        k = self.x0 @ self.wk
        p = row_softmax(q @ k.T / np.sqrt(self.d_scale))
        z = p @ self.x0 @ self.wv
        return q, k, p, z

    def forward(self) -> np.ndarray:
        sigma, _ = activation(self.activation)
        *_, z = self.parts()
        return sigma(z) @ self.w2


def grad_feature_params(model: TwoLayerScalarModel):
    """Jacobians of the ``S x 1`` output w.r.t. ``W2`` and each column of ``Wv``.

    ``dW2`` is ``sigma(P X0 Wv)`` (row j is d out_j / d W2). Column ``i`` of
    ``Wv`` gets ``sigma_dot[:, i] * (P X0) * W2[i]``.
    """
    sigma, sigma_dot = activation(model.activation)
    _, _, p, z = model.parts()
    px = p @ model.x0
    ds = sigma_dot(z)
    dw2 = sigma(z)
    dwv = [ds[:, [i]] * px * model.w2[i, 0] for i in range(model.wv.shape[1])]
    return dw2, dwv


def _softmax_jvp_rows(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row j is ``(diag(s_j) - s_j^T s_j) v[:, j]`` with ``s_j = p[j]``."""
    pv = p * v.T
    return pv - p * pv.sum(axis=1, keepdims=True)


def grad_query_key(model: TwoLayerScalarModel):
    """Jacobians of the ``S x 1`` output w.r.t. each column of ``Wq`` and ``Wk``.

    Row ``j`` of the query Jacobian for column ``i`` is
    ``X0[j] * omega_j / sqrt(d)`` with
    ``omega_j = K[:, i]^T (diag(s_j) - s_j^T s_j) X0 Wv (sigma_dot_j * W2)``,
    ``s_j`` being row j of the attention matrix. The key Jacobian swaps the
    roles: row j is ``Q[j, i] / sqrt(d) * g_j^T X0`` where ``g_j`` is the
    bracketed S-vector before contraction with ``K[:, i]``.
    """
    _, sigma_dot = activation(model.activation)
    q, k, p, z = model.parts()
    scale = np.sqrt(model.d_scale)
    u = sigma_dot(z) * model.w2[:, 0]  # row j: sigma_dot_j (.) W2
    v = model.x0 @ model.wv @ u.T  # column j: X0 Wv u_j
    g = _softmax_jvp_rows(p, v)  # row j: g_j
    gx = g @ model.x0
    dwq, dwk = [], []
    for i in range(q.shape[1]):
        omega = g @ k[:, i]
        dwq.append(model.x0 * omega[:, None] / scale)
        dwk.append(q[:, [i]] * gx / scale)
    return dwq, dwk


def grad_query_key_per_coordinate(model: TwoLayerScalarModel):
    """Query/key Jacobians with the softmax taken over the i-th coordinate only.

    This is the per-coordinate shorthand in which the logits of row ``j``
    are replaced by ``xi = Q[j, i] K[:, i]^T / sqrt(d)`` and the activation
    derivative is a scalar per row. It equals :func:`grad_query_key` only
    when ``p == 1`` and ``h1 == 1`` for the query path; kept for comparison.
    """
    if model.wv.shape[1] != 1:
        raise DomainError("the per-coordinate form treats sigma_dot_j as a scalar (needs h1 == 1)")
    _, sigma_dot = activation(model.activation)
    q, k, _, z = model.parts()
    scale = np.sqrt(model.d_scale)
    ds = sigma_dot(z)[:, 0]
    r = model.x0 @ model.wv @ model.w2  # S x 1
    S = q.shape[0]
    dwq, dwk = [], []
    for i in range(q.shape[1]):
        rq = np.zeros_like(model.x0)
        rk = np.zeros_like(model.x0)
        for j in range(S):
            s = row_softmax((q[j, i] * k[:, i] / scale)[None, :])
            jac = np.diag(s[0]) - s.T @ s
            rq[j] = ds[j] / scale * model.x0[j] * (k[:, i] @ jac @ r)[0]
            rk[j] = ds[j] / scale * model.x0[j] * (q[:, i] @ jac @ r)[0]
        dwq.append(rq)
        dwk.append(rk)
    return dwq, dwk


def columns_to_matrix(columns: list) -> np.ndarray:
    """Stack per-column Jacobians ``(S, d)`` into an ``(S, d, n_cols)`` array."""
    return np.stack(columns, axis=2)


# ---------------------------------------------------------------------------
# Primitive adjoints
# ---------------------------------------------------------------------------


def softmax_vjp(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row softmax adjoint: ``(g - (g . s) 1) * s`` per row."""
    return (g - (g * s).sum(axis=1, keepdims=True)) * s


def power_chain_vjp(powers: list, grads: list) -> np.ndarray:
    """Adjoint of ``[I, P, ..., P^(k-1)]`` built as ``P^i = P P^(i-1)``.

    ``grads[i]`` is the upstream gradient for ``P^i``; returns ``dL/dP``.
    """
    k = len(powers)
    p = powers[1] if k > 1 else None
    g_acc = [g.copy() for g in grads]
    gp = np.zeros_like(powers[0])
    for i in range(k - 1, 0, -1):
        gp += g_acc[i] @ powers[i - 1].T
        g_acc[i - 1] += p.T @ g_acc[i]
    return gp


def layer_norm_vjp(g: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray):
    """Returns ``(dx, dgain, dbias)`` for ``y = xhat * gain + bias``."""
    dgain = (g * xhat).sum(axis=0, keepdims=True)
    dbias = g.sum(axis=0, keepdims=True)
    gx = g * gain
    dx = rstd * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
    return dx, dgain, dbias


def _attention_vjp(gp, p, xt, wq, wk, d_scale):
    """Push ``dL/dP`` back through softmax and the query/key projections."""
    glog = softmax_vjp(p, gp) / np.sqrt(d_scale)
    q = xt @ wq
    k = xt @ wk
    gq = glog @ k
    gk = glog.T @ q
    return xt.T @ gq, xt.T @ gk, gq @ wq.T + gk @ wk.T


# ---------------------------------------------------------------------------
# Reverse-mode backward passes
# ---------------------------------------------------------------------------


def fingerprint(x0, params: dict) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(as_matrix(x0)).tobytes())
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def fighter_backward(cfg: FighterConfig, params: dict, trace: FighterTrace, upstream) -> dict:
    _, sigma_dot = activation(cfg.activation)
    grads = {}
    gout = as_matrix(upstream, "upstream")
    L = cfg.n_layers
    for l in range(L, 0, -1):
        lt = trace.layers[l - 1]
        h_in = cfg.widths[l - 1]
        k = lt.kappa
        s0 = lt.first_power
        xt = lt.x_tilde
        if l == L:
            gz = gout
            gxt = gout.copy() if cfg.final_residual else np.zeros_like(xt)
        else:
            gz = gout * sigma_dot(lt.pre_activation)
            gxt = gout.copy() if cfg.use_residual else np.zeros_like(xt)
        w = params[f"l{l}.w"]
        grads[f"l{l}.w"] = lt.aggregated.T @ gz
        gagg = gz @ w.T
        for h in range(cfg.heads):
            powers = lt.powers[h]
            gpow = [np.zeros_like(xt @ xt.T) for _ in range(s0)]
            for i in range(k):
                c0 = (h * k + i) * h_in
                gblock = gagg[:, c0:c0 + h_in]
                gxt += powers[s0 + i].T @ gblock
                gpow.append(gblock @ xt.T)
            gp = power_chain_vjp(powers, gpow)
            wq, wk = params[f"l{l}.wq{h}"], params[f"l{l}.wk{h}"]
            gwq, gwk, gx_att = _attention_vjp(gp, lt.attention[h], xt, wq, wk, cfg.d_scale(l))
            grads[f"l{l}.wq{h}"] = gwq
            grads[f"l{l}.wk{h}"] = gwk
            gxt += gx_att
        if cfg.use_layernorm:
            gx, gg, gb = layer_norm_vjp(gxt, lt.xhat, lt.rstd, params[f"l{l}.ln_g"])
            grads[f"l{l}.ln_g"] = gg
            grads[f"l{l}.ln_b"] = gb
        else:
            gx = gxt
        gout = gx
    grads["__input__"] = gout
    return grads


def encoder_backward(cfg: EncoderConfig, params: dict, trace: EncoderTrace, upstream) -> dict:
    sigma, sigma_dot = activation(cfg.activation)
    grads = {}
    L = cfg.n_layers
    g = as_matrix(upstream, "upstream")
    x_last = trace.inputs[L - 1]
    grads[f"l{L}.w"] = x_last.T @ g
    g = g @ params[f"l{L}.w"].T
    for l in range(L - 1, 0, -1):
        x = trace.inputs[l - 1]
        p = trace.attention[l - 1]
        pre = trace.pre_activations[l - 1]
        x_att = trace.x_att[l - 1]
        hid = sigma(pre)
        grads[f"l{l}.ffn2"] = hid.T @ g
        if cfg.use_bias:
            grads[f"l{l}.b2"] = g.sum(axis=0, keepdims=True)
        gpre = (g @ params[f"l{l}.ffn2"].T) * sigma_dot(pre)
        grads[f"l{l}.ffn1"] = x_att.T @ gpre
        if cfg.use_bias:
            grads[f"l{l}.b1"] = gpre.sum(axis=0, keepdims=True)
        gxatt = gpre @ params[f"l{l}.ffn1"].T
        px = p @ x
        grads[f"l{l}.wv"] = px.T @ gxatt
        gpx = gxatt @ params[f"l{l}.wv"].T
        gx = p.T @ gpx
        gwq, gwk, gx_att = _attention_vjp(gpx @ x.T, p, x, params[f"l{l}.wq"], params[f"l{l}.wk"], cfg.d_scale(l))
        grads[f"l{l}.wq"] = gwq
        grads[f"l{l}.wk"] = gwk
        g = gx + gx_att
    grads["__input__"] = g
    return grads


def gcn_backward(cfg: GcnConfig, params: dict, trace: GcnTrace, upstream) -> dict:
    _, sigma_dot = activation(cfg.activation)
    grads = {}
    L = cfg.n_layers
    g = as_matrix(upstream, "upstream")
    for l in range(L, 0, -1):
        z = trace.pre_activations[l - 1]
        gz = g if l == L else g * sigma_dot(z)
        grads[f"w{l}"] = trace.aggregated[l - 1].T @ gz
        gagg = gz @ params[f"w{l}"].T
        h_in = cfg.layer_widths[l - 1]
        adj = trace.adjacency[l - 1]
        gx = np.zeros_like(trace.inputs[l - 1])
        power = np.eye(adj.shape[0])
        for i in range(cfg.hop_list[l - 1]):
            gx += power.T @ gagg[:, i * h_in:(i + 1) * h_in]
            power = adj @ power
        g = gx
    grads["__input__"] = g
    return grads


_FORWARD = {
    "fighter": lambda cfg, params, x0, adjacency: fighter_forward(x0, cfg, params),
    "encoder": lambda cfg, params, x0, adjacency: encoder_forward(x0, cfg, params),
    "gcn": lambda cfg, params, x0, adjacency: gcn_forward(x0, adjacency, cfg, params),
}
_BACKWARD = {"fighter": fighter_backward, "encoder": encoder_backward, "gcn": gcn_backward}


def run_forward(model_kind: str, cfg, params: dict, x0, adjacency=None):
    """Forward pass that tags its trace for later staleness checks."""
    if model_kind not in _FORWARD:
        raise DomainError(f"unknown model kind {model_kind!r}")
    out, trace = _FORWARD[model_kind](cfg, params, x0, adjacency)
    trace.fingerprint = fingerprint(x0, params)
    return out, trace


def backprop(model_kind: str, cfg, params: dict, x0, upstream, trace=None, adjacency=None) -> dict:
    """Gradients of ``sum(upstream * output)`` for every parameter.

    The returned dict also carries ``"__input__"``, the gradient w.r.t. ``x0``.
    """
    if trace is None:
        _, trace = run_forward(model_kind, cfg, params, x0, adjacency)
    elif getattr(trace, "fingerprint", None) != fingerprint(x0, params):
        raise StaleTraceError("trace was produced by a different input or parameter set")
    return _BACKWARD[model_kind](cfg, params, trace, upstream)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


@dataclass
class GradEntry:
    max_abs_error: float
    max_rel_error: float
    analytic: Optional[np.ndarray]
    fd: np.ndarray


@dataclass
class GradReport:
    entries: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries.values()), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def rows(self, size: str = "", seed="") -> list:
        return [(name, size, seed, e.max_rel_error) for name, e in self.entries.items()]


def compare(analytic, fd) -> tuple[float, float]:
    """``(max_abs, max_abs / max(|analytic|_inf, |fd|_inf, 1e-8))``."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(fd, dtype=np.float64)
    err = float(np.max(np.abs(a - f))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(f), initial=0.0)), 1e-8)
    return err, err / scale


def _perturbed(params: dict, name: str, idx, delta: float) -> dict:
    out = dict(params)
    arr = np.array(params[name], dtype=np.float64, copy=True)
    arr[idx] += delta
    out[name] = arr
    return out


def fd_gradient(closure: Callable, params: dict, epsilon: float = 1e-5, names=None) -> dict:
    """Central-difference derivative of ``closure(params)`` per parameter.

    ``closure`` may return a scalar or an array; the result for parameter
    ``name`` has shape ``output.shape + params[name].shape``.
    """
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    base = np.asarray(closure(params), dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise EvaluationError("loss is not finite at the evaluation point")
    out = {}
    for name in names if names is not None else list(params):
        arr = np.asarray(params[name], dtype=np.float64)
        grad = np.zeros(base.shape + arr.shape)
        for idx in np.ndindex(arr.shape):
            fp = np.asarray(closure(_perturbed(params, name, idx, epsilon)), dtype=np.float64)
            fm = np.asarray(closure(_perturbed(params, name, idx, -epsilon)), dtype=np.float64)
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise EvaluationError(f"loss is not finite when perturbing {name}{list(idx)}")
            grad[(Ellipsis,) + idx] = (fp - fm) / (2 * epsilon)
        out[name] = grad
    return out


def fd_check(closure: Callable, params: dict, epsilon: float = 1e-5, analytic: Optional[dict] = None) -> GradReport:
    """Compare ``analytic`` gradients with central differences of ``closure``.

    Only names present in both ``analytic`` and ``params`` are checked.
    Without ``analytic`` the report holds only the numerical gradients
    (errors are zero).
    """
    names = [n for n in analytic if n in params] if analytic is not None else list(params)
    fd = fd_gradient(closure, params, epsilon, names)
    report = GradReport()
    for name in names:
        if analytic is None:
            report.entries[name] = GradEntry(0.0, 0.0, None, fd[name])
            continue
        a = np.asarray(analytic[name], dtype=np.float64)
        err, rel = compare(a, fd[name])
        report.entries[name] = GradEntry(err, rel, a, fd[name])
    return report


# ---------------------------------------------------------------------------
# Two-layer model checks
# ---------------------------------------------------------------------------


def closed_form_jacobians(model: TwoLayerScalarModel) -> dict:
    """All closed-form Jacobians as ``(S, *param.shape)`` arrays."""
    dw2, dwv = grad_feature_params(model)
    dwq, dwk = grad_query_key(model)
    return {
        "wq": columns_to_matrix(dwq),
        "wk": columns_to_matrix(dwk),
        "wv": columns_to_matrix(dwv),
        "w2": dw2[:, :, None],
    }


def two_layer_jacobian_report(model: TwoLayerScalarModel, epsilon: float = 1e-5) -> GradReport:
    """Closed forms against central differences of the full ``S x 1`` output."""
    analytic = closed_form_jacobians(model)

    def closure(p):
        return model.with_params(p).forward()[:, 0]

    return fd_check(closure, model.params, epsilon, analytic)


def two_layer_sum_report(model: TwoLayerScalarModel, epsilon: float = 1e-5) -> GradReport:
    """Closed forms summed over rows against differences of ``1^T output``."""
    analytic = {name: jac.sum(axis=0) for name, jac in closed_form_jacobians(model).items()}

    def closure(p):
        return float(model.with_params(p).forward().sum())

    return fd_check(closure, model.params, epsilon, analytic)


def two_layer_as_fighter(model: TwoLayerScalarModel):
    """The same model expressed as a two-layer Fighter with all hops 1."""
    d, p = model.wq.shape
    h1 = model.wv.shape[1]
    cfg = FighterConfig(widths=(d, h1, 1), p=p, hop_list=(1, 1), hop_start=1, activation=model.activation)
    params = {
        "l1.wq0": model.wq,
        "l1.wk0": model.wk,
        "l1.w": model.wv,
        # final-layer attention is unused with one hop
        "l2.wq0": np.zeros((h1, p)),
        "l2.wk0": np.zeros((h1, p)),
        "l2.w": model.w2,
    }
    return cfg, params


def min_abs_preactivation(model: TwoLayerScalarModel) -> float:
    *_, z = model.parts()
    return float(np.min(np.abs(z)))


def random_two_layer_model(
    rng: np.random.Generator,
    S: int,
    d: int,
    p: int,
    h1: int,
    activation_name: str = "relu",
    margin: float = 1e-3,
    max_tries: int = 1000,
    max_attention: float = 0.999,
) -> TwoLayerScalarModel:
    """Random model away from the points where finite differences are unreliable.

    Pre-activations stay ``margin`` away from the ReLU kink, and no attention
    entry exceeds ``max_attention``: a saturated softmax row has query/key
    derivatives near 1e-8, below what central differences resolve.
    """
    for _ in range(max_tries):
        model = TwoLayerScalarModel(
            rng.normal(size=(S, d)),
            rng.normal(size=(d, p)),
            rng.normal(size=(d, p)),
            rng.normal(size=(d, h1)),
            rng.normal(size=(h1, 1)),
            activation_name,
        )
        if model.parts()[2].max() > max_attention:
            continue
        if activation_name != "relu" or min_abs_preactivation(model) > margin:
            return model
    raise DomainError("could not sample a well-conditioned model")
