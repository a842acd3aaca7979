"""Forecasting data pipeline, losses, Adam, the training loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analytic_grad import backprop, run_forward
from .encoder import EncoderConfig, init_encoder_params
from .gcn import GcnConfig, init_gcn_params
from .network import FighterConfig, init_fighter_params
from .tensor import DomainError, ShapeError, glorot

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DataError(ValueError):
    """Input data could not be read or is unusable."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass
class SeriesTable:
    values: np.ndarray  # T x C
    channel_names: list
    timestamps: Optional[list] = None
    dropped_rows: int = 0

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def ingest_csv(path, has_header: bool = True, timestamp_col: Optional[int] = None) -> SeriesTable:
    """Read a comma-separated numeric table.

    Rows containing NaN are dropped (with a warning); ragged rows and
    non-numeric cells raise :class:`DataError` with the line number.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        names = None
        rows, stamps = [], []
        width = None
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if has_header and names is None:
                names = [c.strip() for c in row]
                width = len(row)
                continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            cells = list(row)
            if timestamp_col is not None:
                stamps.append(cells.pop(timestamp_col).strip())
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DataError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    if names is not None and timestamp_col is not None:
        names.pop(timestamp_col)
    if names is None:
        names = [f"c{i}" for i in range(values.shape[1])]
    keep = ~np.isnan(values).any(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) containing NaN", stacklevel=2)
        values = values[keep]
        if stamps:
            stamps = [s for s, k in zip(stamps, keep) if k]
        if values.shape[0] == 0:
            raise DataError(f"{path}: no data rows after dropping NaN")
    log.info("read %s: %d rows x %d channels", path, values.shape[0], values.shape[1])
    return SeriesTable(values, names, stamps or None, dropped)


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def write_csv(table: SeriesTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        ts = table.timestamps
        w.writerow((["date"] if ts else []) + list(table.channel_names))
        for i, row in enumerate(table.values):
            w.writerow(([ts[i]] if ts else []) + [repr(float(v)) for v in row])


def select_top_variance(table: SeriesTable, k: int) -> SeriesTable:
    """Keep the ``k`` highest-variance channels, in their original order."""
    C = table.n_channels
    if k < 1 or k > C:
        raise DomainError(f"k must be in [1, {C}], got {k}")
    var = table.values.var(axis=0)
    order = sorted(range(C), key=lambda i: (-var[i], i))
    keep = sorted(order[:k])
    return SeriesTable(
        table.values[:, keep].copy(),
        [table.channel_names[i] for i in keep],
        table.timestamps,
        table.dropped_rows,
    )


def make_synthetic_series(n_steps: int = 1000, n_channels: int = 4, seed: int = 0, lag: int = 24) -> SeriesTable:
    """Seeded AR series: a component depending on steps ``t-1`` and ``t-lag``
    plus a slowly drifting per-channel level."""
    rng = np.random.default_rng(seed)
    burn = 4 * lag
    n = n_steps + burn
    s = np.zeros((n, n_channels))
    level = np.zeros((n, n_channels))
    for t in range(lag, n):
        s[t] = 0.5 * s[t - 1] + 0.4 * s[t - lag] + 0.3 * rng.normal(size=n_channels)
        level[t] = 0.995 * level[t - 1] + 0.1 * rng.normal(size=n_channels)
    x = (s + level)[burn:] + np.arange(1, n_channels + 1)
    stamps = [f"t{i:06d}" for i in range(n_steps)]
    return SeriesTable(x, [f"ch{i}" for i in range(n_channels)], stamps)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    learning_rate: float = 1e-3
    seed: int = 0
    input_len: int = 96
    pred_len: int = 96
    kappa_list: tuple = (3,)
    n_blocks: int = 1
    loss: str = "mse"
    attention_dim: int = 16
    heads: int = 1
    use_layernorm: bool = False
    use_residual: bool = True

    def __post_init__(self):
        self.kappa_list = tuple(int(k) for k in self.kappa_list)
        for name in ("batch_size", "input_len", "pred_len", "n_blocks", "attention_dim", "heads"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise DomainError("epochs must be >= 0 and learning_rate > 0")
        if not self.kappa_list or any(k < 1 for k in self.kappa_list):
            raise DomainError(f"invalid kappa list {self.kappa_list}")
        if self.loss != "mse":
            raise DomainError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kappa_list"] = list(self.kappa_list)
        return d


SPLITS = ("train", "val", "test")


@dataclass
class WindowedDataset:
    data: np.ndarray  # standardized T x C
    raw: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    channel_names: list
    input_len: int
    pred_len: int
    bounds: dict  # split -> (start_row, end_row)
    starts: dict = field(default_factory=dict)  # split -> window start rows

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    def n_samples(self, split: str) -> int:
        return len(self.starts[split])

    def window_ranges(self, split: str) -> list:
        span = self.input_len + self.pred_len
        return [(int(s), int(s) + span) for s in self.starts[split]]

    def sample(self, split: str, i: int):
        s = int(self.starts[split][i])
        x = self.data[s:s + self.input_len]
        y = self.data[s + self.input_len:s + self.input_len + self.pred_len]
        return x, y

    def arrays(self, split: str):
        xs, ys = zip(*(self.sample(split, i) for i in range(self.n_samples(split)))) if self.n_samples(split) else ((), ())
        C = self.n_channels
        X = np.array(xs).reshape(-1, self.input_len, C)
        Y = np.array(ys).reshape(-1, self.pred_len, C)
        return X, Y

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def split_and_window(table: SeriesTable, cfg: TrainConfig, ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> WindowedDataset:
    """Chronological split, stride-1 windows inside each split, train-fitted scaling."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DomainError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    T = table.n_steps
    n_train = int(math.floor(ratios[0] * T + 1e-9))
    n_val = int(math.floor(ratios[1] * T + 1e-9))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, T)}
    span = cfg.input_len + cfg.pred_len
    starts = {}
    for split, ratio in zip(SPLITS, ratios):
        lo, hi = bounds[split]
        n = hi - lo - span + 1
        if ratio == 0 or hi == lo:
            if ratio > 0:
                raise DomainError(f"{split} split is empty ({T} rows)")
            warnings.warn(f"{split} split is empty", stacklevel=2)
            starts[split] = np.arange(0)
            continue
        if n < 1:
            raise DomainError(f"{split} split has {hi - lo} rows, fewer than one window ({span})")
        starts[split] = np.arange(lo, lo + n)

    raw = table.values
    train = raw[bounds["train"][0]:bounds["train"][1]]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    keep = std > 0
    if not keep.all():
        dropped = [n for n, k in zip(table.channel_names, keep) if not k]
        warnings.warn(f"dropping zero-variance channels {dropped}", stacklevel=2)
        if not keep.any():
            raise DataError("every channel has zero variance on the train split")
    raw = raw[:, keep]
    mean, std = mean[keep], std[keep]
    data = (raw - mean) / std
    names = [n for n, k in zip(table.channel_names, keep) if k]
    return WindowedDataset(data, raw, mean, std, names, cfg.input_len, cfg.pred_len, bounds, starts)


# ---------------------------------------------------------------------------
# Losses and optimizer
# ---------------------------------------------------------------------------


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in params.items()},
                   {k: np.zeros_like(w) for k, w in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    b1, b2 = betas
    t = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new_params[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Models for forecasting
# ---------------------------------------------------------------------------


def temporal_adjacency(n: int) -> np.ndarray:
    """Row-stochastic lag-1 chain used as the graph of a GCN forecaster."""
    a = np.eye(n)
    a[1:, :-1] += np.eye(n - 1)
    return a / a.sum(axis=1, keepdims=True)


def forecast_readout(y: np.ndarray, pred_len: int, n_channels: int) -> np.ndarray:
    """Average the ``S x (pred_len*C)`` output over positions -> ``pred_len x C``."""
    return y.mean(axis=0).reshape(pred_len, n_channels)


def forecast_readout_vjp(g: np.ndarray, n_rows: int) -> np.ndarray:
    return np.repeat(g.reshape(1, -1) / n_rows, n_rows, axis=0)


def expand_head(w: np.ndarray, n_channels: int) -> np.ndarray:
    """Channel-shared head ``(R, pred_len)`` -> dense ``(R*C, pred_len*C)``.

    Entry ``[r*C + c, t*C + c']`` is ``w[r, t]`` when ``c == c'`` and zero
    otherwise, so every channel is forecast from its own features with the
    same weights.
    """
    return np.kron(w, np.eye(n_channels))


def contract_head_grad(g: np.ndarray, n_channels: int) -> np.ndarray:
    C = n_channels
    r, t = g.shape[0] // C, g.shape[1] // C
    return np.einsum("acbc->ab", g.reshape(r, C, t, C))


@dataclass(frozen=True, eq=False)
class Forecaster:
    """A model plus the window interface: ``input_len x C`` in, ``pred_len x C`` out.

    Parameters are held with the output weight in compact channel-shared
    form; :meth:`expand` produces the dense set the model functions use.
    """

    kind: str
    config: object
    n_channels: int
    pred_len: int
    adjacency: Optional[np.ndarray] = None

    @property
    def head_key(self) -> str:
        L = self.config.n_layers
        return f"w{L}" if self.kind == "gcn" else f"l{L}.w"

    def expand(self, params: dict) -> dict:
        full = dict(params)
        full[self.head_key] = expand_head(params[self.head_key], self.n_channels)
        return full

    def forward(self, params: dict, x: np.ndarray):
        return run_forward(self.kind, self.config, self.expand(params), x, self.adjacency)

    def predict(self, params: dict, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(params, x)
        return forecast_readout(out, self.pred_len, self.n_channels)

    def loss_and_grads(self, params: dict, x: np.ndarray, y: np.ndarray):
        full = self.expand(params)
        out, trace = run_forward(self.kind, self.config, full, x, self.adjacency)
        err = forecast_readout(out, self.pred_len, self.n_channels) - y
        upstream = forecast_readout_vjp(2.0 * err / err.size, out.shape[0])
        grads = backprop(self.kind, self.config, full, x, upstream, trace, self.adjacency)
        grads.pop("__input__")
        grads[self.head_key] = contract_head_grad(grads[self.head_key], self.n_channels)
        return float(np.mean(err ** 2)), grads

    def init_params(self, rng: np.random.Generator) -> dict:
        init = {"fighter": init_fighter_params, "encoder": init_encoder_params, "gcn": init_gcn_params}
        params = init[self.kind](self.config, rng)
        rows = params[self.head_key].shape[0] // self.n_channels
        params[self.head_key] = glorot(rng, rows, self.pred_len)
        return params


def _hops(cfg: TrainConfig) -> tuple:
    hops = list(cfg.kappa_list)
    hops += [hops[-1]] * max(0, cfg.n_blocks + 1 - len(hops))
    return tuple(hops[:cfg.n_blocks + 1])


def build_forecaster(model_kind: str, n_channels: int, cfg: TrainConfig) -> Forecaster:
    """Hidden layers keep width ``C``; the output layer is the channel-shared head.

    The hop list is ``kappa_list`` padded with its last entry to one value
    per layer, the output layer included.
    """
    C = n_channels
    widths = (C,) * (cfg.n_blocks + 1) + (cfg.pred_len * C,)
    if model_kind == "fighter":
        mcfg = FighterConfig(
            widths=widths, p=cfg.attention_dim, hop_list=_hops(cfg), heads=cfg.heads,
            use_layernorm=cfg.use_layernorm, use_residual=cfg.use_residual,
        )
        return Forecaster(model_kind, mcfg, C, cfg.pred_len)
    if model_kind == "encoder":
        mcfg = EncoderConfig(widths=widths, p=cfg.attention_dim, use_bias=True)
        return Forecaster(model_kind, mcfg, C, cfg.pred_len)
    if model_kind == "gcn":
        mcfg = GcnConfig(widths, _hops(cfg))
        return Forecaster(model_kind, mcfg, C, cfg.pred_len, temporal_adjacency(cfg.input_len))
    raise DomainError(f"unknown model kind {model_kind!r}")


def model_config_to_dict(model_kind: str, mcfg) -> dict:
    if model_kind == "fighter":
        return mcfg.to_dict()
    if model_kind == "encoder":
        return {"widths": list(mcfg.widths), "p": mcfg.p, "v": mcfg.v, "use_bias": mcfg.use_bias,
                "activation": mcfg.activation, "scale": mcfg.scale}
    return {"layer_widths": list(mcfg.layer_widths), "hop_list": list(mcfg.hop_list),
            "activation": mcfg.activation}


def model_config_from_dict(model_kind: str, d: dict):
    if model_kind == "fighter":
        return FighterConfig(**d)
    if model_kind == "encoder":
        return EncoderConfig(**d)
    if model_kind == "gcn":
        return GcnConfig(**d)
    raise DomainError(f"unknown model kind {model_kind!r}")


def evaluate(model: Forecaster, params: dict, dataset: WindowedDataset, split: str) -> dict:
    """MSE/MAE in standardized and raw units over every window of ``split``."""
    n = dataset.n_samples(split)
    if n == 0:
        return {"mse": math.nan, "mae": math.nan, "mse_raw": math.nan, "mae_raw": math.nan}
    full = model.expand(params)
    sums = np.zeros(4)
    count = 0
    for i in range(n):
        x, y = dataset.sample(split, i)
        out, _ = run_forward(model.kind, model.config, full, x, model.adjacency)
        pred = forecast_readout(out, model.pred_len, model.n_channels)
        err = pred - y
        err_raw = err * dataset.std
        sums += [(err ** 2).sum(), np.abs(err).sum(), (err_raw ** 2).sum(), np.abs(err_raw).sum()]
        count += err.size
    mse_, mae_, mse_raw, mae_raw = (sums / count).tolist()
    return {"mse": mse_, "mae": mae_, "mse_raw": mse_raw, "mae_raw": mae_raw}


@dataclass
class TrainResult:
    params: dict  # best-validation parameters
    final_params: dict
    metrics: list  # one dict per epoch
    checkpoint: dict
    model: Forecaster
    best_epoch: int


def train(model_kind: str, model_cfg, dataset: WindowedDataset, train_cfg: TrainConfig,
          params: Optional[dict] = None) -> TrainResult:
    """Mini-batch Adam on the window MSE with deterministic shuffling.

    ``model_cfg`` may be ``None`` (built from ``train_cfg``), a model config
    or a ready :class:`Forecaster`. Keeps the parameters of the epoch with
    the lowest validation MSE, or train MSE when there is no validation split.
    """
    if dataset.n_samples("train") == 0:
        raise DataError("training split has no windows")
    if isinstance(model_cfg, Forecaster):
        model = model_cfg
    elif model_cfg is None:
        model = build_forecaster(model_kind, dataset.n_channels, train_cfg)
    else:
        adj = temporal_adjacency(dataset.input_len) if model_kind == "gcn" else None
        model = Forecaster(model_kind, model_cfg, dataset.n_channels, dataset.pred_len, adj)
    if params is None:
        params = model.init_params(np.random.default_rng(train_cfg.seed))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    state = AdamState.zeros(params)
    metrics = []
    best, best_score, best_epoch = {k: v.copy() for k, v in params.items()}, math.inf, 0
    n = dataset.n_samples("train")
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size), start=1):
            idx = order[start:start + train_cfg.batch_size]
            total = {k: np.zeros_like(w) for k, w in params.items()}
            batch_loss = 0.0
            for i in idx:  # fixed order keeps the reduction deterministic
                loss, grads = model.loss_and_grads(params, *dataset.sample("train", int(i)))
                batch_loss += loss
                for k in total:
                    total[k] += grads[k]
            if not math.isfinite(batch_loss):
                raise DivergenceError(epoch, b, batch_loss)
            grads = {k: g / len(idx) for k, g in total.items()}
            params, state = adam_step(params, grads, state, train_cfg.learning_rate)
            loss_sum += batch_loss
        val = evaluate(model, params, dataset, "val")
        row = {"epoch": epoch, "train_mse": loss_sum / n, "val_mse": val["mse"], "val_mae": val["mae"]}
        metrics.append(row)
        log.info("epoch %d train_mse %.6f val_mse %.6f", epoch, row["train_mse"], row["val_mse"])
        score = val["mse"] if math.isfinite(val["mse"]) else row["train_mse"]
        if score < best_score:
            best, best_score, best_epoch = {k: v.copy() for k, v in params.items()}, score, epoch
    ckpt = make_checkpoint(model, best, train_cfg, dataset.channel_names)
    return TrainResult(best, params, metrics, ckpt, model, best_epoch)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def make_checkpoint(model: Forecaster, params: dict, train_cfg: TrainConfig, channel_names=None) -> dict:
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_kind": model.kind,
        "model_config": model_config_to_dict(model.kind, model.config),
        "n_channels": model.n_channels,
        "pred_len": model.pred_len,
        "train_config": train_cfg.to_dict(),
        "param_names": list(params),
        "channel_names": list(channel_names) if channel_names is not None else None,
    }
    return {"meta": meta, "params": {k: np.array(v) for k, v in params.items()}}


def save_checkpoint(ckpt: dict, path) -> None:
    arrays = {f"param:{k}": v for k, v in ckpt["params"].items()}
    arrays["__meta__"] = np.array(json.dumps(ckpt["meta"], sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k: params[k] for k in meta["param_names"]}
    except DataError:
        raise
    except Exception as exc:  # zip, JSON and key errors all mean a bad file
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    return {"meta": meta, "params": params}


def checkpoint_model(ckpt: dict):
    """``(forecaster, params, train_config)`` rebuilt from a checkpoint."""
    meta = ckpt["meta"]
    kind = meta["model_kind"]
    tcfg = TrainConfig(**meta["train_config"])
    mcfg = model_config_from_dict(kind, meta["model_config"])
    adj = temporal_adjacency(tcfg.input_len) if kind == "gcn" else None
    return Forecaster(kind, mcfg, meta["n_channels"], meta["pred_len"], adj), ckpt["params"], tcfg
