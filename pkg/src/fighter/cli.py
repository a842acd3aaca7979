"""Command-line interface: train, gradcheck, equiv, sweep, heatmap, synth.

Exit codes: 0 success, 1 configuration or check failure, 2 data/I-O error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .analytic_grad import (
    backprop,
    compare,
    fd_gradient,
    random_two_layer_model,
    run_forward,
    two_layer_jacobian_report,
)
from .encoder import EncoderConfig, consolidate_params, encoder_forward, encoder_forward_reorganized, init_encoder_params
from .gcn import GcnConfig, gcn_forward, gcn_forward_single_hop, gcn_two_layer_grads, init_gcn_params
from .network import FighterConfig, attention_heatmap_slice, fighter_forward, init_fighter_params
from .tensor import DomainError, ShapeError

log = logging.getLogger("fighter")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
FLOAT_FMT = "%.17g"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # flag errors are configuration errors (exit 1), not argparse's default 2
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", EXIT_CONFIG)


def fmt(x: float) -> str:
    return FLOAT_FMT % x


def _int_list(text: str) -> list:
    try:
        out = [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return out


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def read_config_file(path) -> list:
    """``[(lineno, key, value)]`` from ``key = value`` lines with ``#`` comments."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_DATA) from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((lineno, key.replace("-", "_"), value))
    return entries


def _apply_config(parser: argparse.ArgumentParser, argv: list, path) -> argparse.Namespace:
    """Use config entries as defaults, so explicit flags still win."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for lineno, key, value in read_config_file(path):
        action = actions.get(key)
        if action is None:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = _bool(value)
            else:
                defaults[key] = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    parser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_table(args) -> pl.SeriesTable:
    if args.data is None:
        return pl.make_synthetic_series(args.synth_steps, args.synth_channels, args.seed, args.synth_lag)
    try:
        table = pl.ingest_csv(args.data, has_header=not args.no_header, timestamp_col=args.timestamp_col)
    except pl.DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if args.top_k is not None:
        table = pl.select_top_variance(table, args.top_k)
    return table


def _train_config(args, **override) -> pl.TrainConfig:
    fields = dict(
        batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
        input_len=args.input_len, pred_len=args.pred_len, kappa_list=tuple(args.kappa_list),
        n_blocks=args.blocks, attention_dim=args.attention_dim, heads=args.heads,
        use_layernorm=args.layernorm, use_residual=not args.no_residual,
    )
    fields.update(override)
    return pl.TrainConfig(**fields)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV (synthetic series when omitted)")
    p.add_argument("--no-header", action="store_true", help="the CSV has no header row")
    p.add_argument("--timestamp-col", type=int, default=None, help="index of a timestamp column to ignore")
    p.add_argument("--top-k", type=int, default=None, help="keep the k highest-variance channels")
    p.add_argument("--synth-steps", type=int, default=1000)
    p.add_argument("--synth-channels", type=int, default=4)
    p.add_argument("--synth-lag", type=int, default=24)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = pl.TrainConfig()
    p.add_argument("--input-len", type=int, default=d.input_len)
    p.add_argument("--pred-len", type=int, default=d.pred_len)
    p.add_argument("--kappa-list", type=_int_list, default=list(d.kappa_list), help="e.g. 3 or 3,2")
    p.add_argument("--blocks", type=int, default=d.n_blocks)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--attention-dim", type=int, default=d.attention_dim)
    p.add_argument("--heads", type=int, default=d.heads)
    p.add_argument("--layernorm", action="store_true", help="pre-normalize each layer input")
    p.add_argument("--no-residual", action="store_true")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    tcfg = _train_config(args)
    table = _load_table(args)
    ds = pl.split_and_window(table, tcfg)
    result = pl.train(args.model, None, ds, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", ["epoch", "train_mse", "val_mse", "val_mae"],
               [[m["epoch"], m["train_mse"], m["val_mse"], m["val_mae"]] for m in result.metrics])
    pl.save_checkpoint(result.checkpoint, out / "checkpoint.npz")
    test = pl.evaluate(result.model, result.params, ds, "test")
    _write_csv(out / "test_metrics.csv", ["split", "mse", "mae", "mse_raw", "mae_raw"],
               [["test", test["mse"], test["mae"], test["mse_raw"], test["mae_raw"]]])
    print(f"trained {args.model} for {tcfg.epochs} epoch(s); best epoch {result.best_epoch}; "
          f"test mse {test['mse']:.6g} mae {test['mae']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def two_layer_grid(sizes, seeds, activations=("relu", "identity")):
    for seed in seeds:
        for S in sizes:
            for d in (2, 4):
                for p in (1, 2):
                    for h1 in (1, 3):
                        for act in activations:
                            yield seed, S, d, p, h1, act


def gradcheck_rows(seeds, sizes, eps: float = 1e-5) -> list:
    """``(param, size, seed, max_rel_err)`` rows over every gradient family.

    Each row is the worst relative error over the inner grid for that
    parameter, size and seed.
    """
    worst = {}

    def note(param, size, seed, err):
        key = (param, size, seed)
        worst[key] = max(worst.get(key, 0.0), err)

    for seed, S, d, p, h1, act in two_layer_grid(sizes, seeds):
        rng = np.random.default_rng([seed, S, d, p, h1, act == "relu"])
        model = random_two_layer_model(rng, S, d, p, h1, act)
        for name, entry in two_layer_jacobian_report(model, eps).entries.items():
            note(f"two_layer.{name}", f"S={S}", seed, entry.max_rel_error)

    for seed in seeds:
        for S in sizes:
            rng = np.random.default_rng([seed, S, 99])
            for k1 in (1, 2, 3):
                for k2 in (1, 2, 3):
                    for single in (False, True):
                        err = gcn_grad_error(rng, S, k1, k2, single, eps)
                        tag = "gcn_single_hop" if single else "gcn_multi_hop"
                        for name, e in err.items():
                            note(f"{tag}.{name}", f"S={S}", seed, e)
                        if single:
                            break  # the single-hop form has no hop counts
    for seed in seeds:
        for name, e in fighter_grad_error(seed, eps).items():
            note(f"fighter.{name}", "S=8", seed, e)
    return [(k[0], k[1], k[2], v) for k, v in worst.items()]


def gcn_grad_error(rng, S, k1, k2, single_hop, eps, d=3, h1=2, act="relu") -> dict:
    x0 = rng.normal(size=(S, d))
    a = rng.uniform(size=(S, S))
    a /= a.sum(axis=1, keepdims=True)
    kk1, kk2 = (1, 1) if single_hop else (k1, k2)
    cfg = GcnConfig((d, h1, 1), (kk1, kk2), act)
    params = init_gcn_params(cfg, rng, single_hop=single_hop)
    params = {k: v * 2.0 for k, v in params.items()}
    fwd = gcn_forward_single_hop if single_hop else gcn_forward
    dw2, dw1_cols = gcn_two_layer_grads(x0, a, params, kk1, kk2, act, single_hop=single_hop)
    fd = fd_gradient(lambda q: fwd(x0, a, cfg, q)[0][:, 0], params, eps)
    dw1 = np.stack(dw1_cols, axis=-1)  # S x rows x h1
    return {"w1": compare(dw1, fd["w1"])[1], "w2": compare(dw2, fd["w2"][..., 0])[1]}


def fighter_grad_error(seed: int, eps: float, S: int = 8, d: int = 4) -> dict:
    """Backprop vs FD for a Fighter block with layernorm and residual."""
    rng = np.random.default_rng([seed, 7])
    cfg = FighterConfig((d, d, 2), p=3, hop_list=(3, 3), use_layernorm=True, use_residual=True)
    params = init_fighter_params(cfg, rng)
    params = {k: v + (0.1 * rng.normal(size=v.shape) if ".ln_" in k else 0.0) for k, v in params.items()}
    x0 = rng.normal(size=(S, d))
    up = rng.normal(size=(S, 2))
    grads = backprop("fighter", cfg, params, x0, up)
    fd = fd_gradient(lambda q: float(np.sum(up * fighter_forward(x0, cfg, q)[0])), params, eps)
    return {k: compare(grads[k], fd[k])[1] for k in params}


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise CliError("gradcheck needs at least one seed")
    if args.eps <= 0:
        raise CliError("--eps must be positive")
    rows = gradcheck_rows(range(args.seeds), args.sizes, args.eps)
    if args.report:
        try:
            _write_csv(args.report, ["param", "size", "seed", "max_rel_err"], rows)
        except OSError as exc:
            raise CliError(f"cannot write {args.report}: {exc.strerror}", EXIT_DATA) from exc
    bad = sorted((r for r in rows if not r[3] < args.tol), key=lambda r: -r[3])
    worst = max(r[3] for r in rows)
    if bad:
        print(f"gradcheck FAILED: {len(bad)} of {len(rows)} rows at or above {args.tol:g}", file=sys.stderr)
        for param, size, seed, err in bad[:10]:
            print(f"  {param} {size} seed={seed} max_rel_err={err:.3e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"gradcheck ok: {len(rows)} rows, worst relative error {worst:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# equiv
# ---------------------------------------------------------------------------


def equivalence_deviations(seeds=range(20)) -> dict:
    """Max absolute deviation per identity across seeds."""
    out = {"reorganization": 0.0, "frozen_attention_gcn": 0.0, "fighter_kappa1_encoder": 0.0}
    for seed in seeds:
        rng = np.random.default_rng([seed, 31])
        S, d = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        x0 = rng.normal(size=(S, d))

        ecfg = EncoderConfig((d, 3, 4, 2), p=2, v=3)
        eparams = init_encoder_params(ecfg, rng)
        full, _ = encoder_forward(x0, ecfg, eparams)
        reorg, _ = encoder_forward_reorganized(x0, ecfg, consolidate_params(eparams, ecfg))
        out["reorganization"] = max(out["reorganization"], float(np.max(np.abs(full - reorg))))

        # one encoder layer with its attention frozen is a single-hop GCN on A = P
        ecfg1 = EncoderConfig((d, 3, 2), p=2)
        ep1 = consolidate_params(init_encoder_params(ecfg1, rng), ecfg1)
        enc_out, trace = encoder_forward_reorganized(x0, ecfg1, ep1)
        P = trace.attention[0]
        gcfg = GcnConfig((d, 3, 2), (1, 1))
        # the GCN's first layer carries Wv1, its output layer carries W2 @ W
        gparams = {"w1": ep1["l1.wv1"], "w2": ep1["l1.ffn2"] @ ep1["l2.w"]}
        g_out, _ = gcn_forward_single_hop(x0, P, gcfg, gparams)
        out["frozen_attention_gcn"] = max(out["frozen_attention_gcn"], float(np.max(np.abs(enc_out - g_out))))

        # Fighter, one hop per layer, equals the reorganized encoder with W2 = I
        widths = (d, 3, 3, 2)
        fcfg = FighterConfig(widths, p=2, hop_list=(1, 1, 1), hop_start=1)
        fparams = init_fighter_params(fcfg, rng)
        rcfg = EncoderConfig(widths, p=2)
        rparams = {}
        for l in range(1, 3):
            rparams[f"l{l}.wq"] = fparams[f"l{l}.wq0"]
            rparams[f"l{l}.wk"] = fparams[f"l{l}.wk0"]
            rparams[f"l{l}.wv1"] = fparams[f"l{l}.w"]
            rparams[f"l{l}.ffn2"] = np.eye(widths[l])
        rparams["l3.w"] = fparams["l3.w"]
        f_out, _ = fighter_forward(x0, fcfg, fparams)
        r_out, _ = encoder_forward_reorganized(x0, rcfg, rparams)
        out["fighter_kappa1_encoder"] = max(out["fighter_kappa1_encoder"], float(np.max(np.abs(f_out - r_out))))
    return out


def checkpoint_replay_deviation(ckpt: dict, seed: int = 0) -> float:
    """Forward with frozen attention vs the free forward for a saved model."""
    model, params, tcfg = pl.checkpoint_model(ckpt)
    full = model.expand(params)
    x = np.random.default_rng(seed).normal(size=(tcfg.input_len, model.n_channels))
    out, trace = run_forward(model.kind, model.config, full, x, model.adjacency)
    if model.kind != "fighter":
        again, _ = run_forward(model.kind, model.config, full, x, model.adjacency)
        return float(np.max(np.abs(out - again)))
    frozen = [lt.attention for lt in trace.layers]
    replay, _ = fighter_forward(x, model.config, full, frozen_attention=frozen)
    return float(np.max(np.abs(out - replay)))


def cmd_equiv(args) -> int:
    devs = equivalence_deviations(range(args.seeds))
    if args.checkpoint:
        try:
            ckpt = pl.load_checkpoint(args.checkpoint)
        except pl.DataError as exc:
            raise CliError(str(exc), EXIT_DATA) from exc
        devs["checkpoint_attention_replay"] = checkpoint_replay_deviation(ckpt)
    for name, dev in devs.items():
        if args.verbose:
            print(f"{name}: max abs deviation {dev:.3e}")
        if not dev < args.tol:
            print(f"equivalence failed: {name} deviates by {dev:.3e} (tolerance {args.tol:g})", file=sys.stderr)
            return EXIT_CONFIG
    print(f"all {len(devs)} identities hold within {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def sweep_rows(table, base: pl.TrainConfig, kappas, baseline: bool = True) -> list:
    ds = pl.split_and_window(table, base)
    runs = [("fighter", k) for k in kappas] + ([("transformer", "")] if baseline else [])
    rows = []
    for kind, k in runs:
        cfg = pl.TrainConfig(**{**base.to_dict(), "kappa_list": (k,) if k != "" else base.kappa_list})
        model_kind = "fighter" if kind == "fighter" else "encoder"
        try:
            res = pl.train(model_kind, None, ds, cfg)
            test = pl.evaluate(res.model, res.params, ds, "test")
            rows.append([kind, k, test["mse"], test["mae"], "ok"])
        except pl.DivergenceError:
            rows.append([kind, k, math.nan, math.nan, "diverged"])
        except (DomainError, ShapeError) as exc:
            log.warning("kappa %s failed: %s", k, exc)
            rows.append([kind, k, math.nan, math.nan, "error"])
    return rows


def describe_trend(rows) -> str:
    pts = [(r[1], r[2]) for r in rows if r[0] == "fighter" and r[4] == "ok"]
    if not pts:
        return "no successful runs"
    best_k, best = min(pts, key=lambda t: t[1])
    shape = "interior minimum" if best_k not in (pts[0][0], pts[-1][0]) else "minimum at an endpoint"
    msg = f"best kappa {best_k} (test mse {best:.6g}); {shape}"
    base = [r for r in rows if r[0] == "transformer" and r[4] == "ok"]
    if base:
        msg += f"; transformer test mse {base[0][2]:.6g}"
    return msg


def cmd_sweep(args) -> int:
    if args.kappa_min < 1 or args.kappa_min > args.kappa_max:
        raise CliError(f"need 1 <= --kappa-min <= --kappa-max, got {args.kappa_min} and {args.kappa_max}")
    base = _train_config(args)
    table = _load_table(args)
    rows = sweep_rows(table, base, range(args.kappa_min, args.kappa_max + 1), not args.no_baseline)
    _write_csv(args.out, ["model", "kappa", "test_mse", "test_mae", "status"], rows)
    print(describe_trend(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


def pgm_text(block: np.ndarray) -> str:
    """ASCII graymap with each pixel ``round(255 * p / max)``."""
    rows, cols = block.shape
    peak = float(block.max()) if block.size else 0.0
    pix = np.zeros(block.shape, dtype=int) if peak <= 0 else np.rint(255.0 * block / peak).astype(int)
    lines = ["P2", f"{cols} {rows}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    return "\n".join(lines) + "\n"


def cmd_heatmap(args) -> int:
    try:
        ckpt = pl.load_checkpoint(args.checkpoint)
    except pl.DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    model, params, tcfg = pl.checkpoint_model(ckpt)
    if model.kind not in ("fighter", "encoder"):
        raise CliError(f"a {model.kind} checkpoint has no attention")
    n_att = model.config.n_layers if model.kind == "fighter" else model.config.n_layers - 1
    if not 1 <= args.layer <= n_att:
        raise CliError(f"--layer must be in [1, {n_att}], got {args.layer}")
    args.seed = tcfg.seed
    ds = pl.split_and_window(_load_table(args), tcfg)
    split = "test" if ds.n_samples("test") else "train"
    x, _ = ds.sample(split, 0)
    _, trace = model.forward(params, x)
    if model.kind == "fighter":
        heads = trace.layers[args.layer - 1].attention
        if not 0 <= args.head < len(heads):
            raise CliError(f"--head must be in [0, {len(heads) - 1}]")
        P = heads[args.head]
    else:
        P = trace.attention[args.layer - 1]
    if args.k > P.shape[0]:
        warnings.warn(f"k={args.k} exceeds sequence length {P.shape[0]}; clamped", stacklevel=1)
    block = attention_heatmap_slice(P, args.k)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(f"{prefix}.csv", block, fmt=FLOAT_FMT, delimiter=",")
    Path(f"{prefix}.pgm").write_text(pgm_text(block), encoding="ascii")
    print(f"wrote {prefix}.csv and {prefix}.pgm ({block.shape[0]}x{block.shape[1]})")
    return EXIT_OK


def cmd_synth(args) -> int:
    table = pl.make_synthetic_series(args.steps, args.channels, args.seed, args.lag)
    pl.write_csv(table, args.out)
    print(f"wrote {args.out}: {args.steps} rows x {args.channels} channels")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fighter", description="Multi-hop graph-convolutional transformer toolkit")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a forecaster")
    p.add_argument("--config", help="key = value file; flags override it")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--model", choices=("fighter", "encoder", "gcn"), default="fighter")
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--sizes", type=_int_list, default=[3, 5, 8], help="sequence lengths")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--report", help="CSV report path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equiv", help="encoder/GCN/Fighter equivalence identities")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--checkpoint", help="also replay a saved model's attention")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("sweep", help="train one Fighter per hop count plus a transformer baseline")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--kappa-min", type=int, default=1)
    p.add_argument("--kappa-max", type=int, default=8)
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", help="export an attention slice as CSV and PGM")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--out-prefix", default="heatmap")
    p.set_defaults(func=cmd_heatmap, seed=0)

    p = sub.add_parser("synth", help="write the seeded synthetic series as CSV")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lag", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            sub = parser._subparsers._group_actions[0].choices[args.command]
            top = vars(args)
            args = _apply_config(sub, argv[argv.index(args.command) + 1:], args.config)
            args.command, args.verbose_log = top["command"], top["verbose_log"]
        logging.basicConfig(level=logging.INFO if args.verbose_log else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except pl.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except pl.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DomainError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
