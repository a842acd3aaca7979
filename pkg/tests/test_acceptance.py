"""Acceptance criteria 1-8, one test each, with a printed pass/fail line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed
even without ``-s``).
"""

import csv
import time

import numpy as np

import fighter.pipeline as pl
from fighter.analytic_grad import (
    backprop,
    closed_form_jacobians,
    random_two_layer_model,
    two_layer_as_fighter,
    two_layer_jacobian_report,
)
from fighter.cli import equivalence_deviations, fighter_grad_error, gcn_grad_error, main, two_layer_grid
from fighter.network import raised_attention
from fighter.tensor import block_diag_replicate, hop_concat_powers, row_softmax

SEEDS = range(20)
GRAD_TOL = 1e-5


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_criterion_1_two_layer_gradients(capsys):
    start = time.perf_counter()
    worst, count = 0.0, 0
    for seed, S, d, p, h1, act in two_layer_grid((3, 5, 8), SEEDS):
        rng = np.random.default_rng([seed, S, d, p, h1, act == "relu"])
        model = random_two_layer_model(rng, S, d, p, h1, act)
        worst = max(worst, two_layer_jacobian_report(model, 1e-5).max_rel_error)
        count += 1
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_TOL and elapsed < 60
    report(capsys, 1, ok, f"{count} models, worst relative error {worst:.2e} (< {GRAD_TOL:g}), {elapsed:.1f}s (< 60s)")


def test_criterion_2_gcn_gradients(capsys):
    start = time.perf_counter()
    worst_multi = worst_single = 0.0
    for seed in SEEDS:
        for S in (3, 5, 8):
            rng = np.random.default_rng([seed, S, 99])
            for k1 in (1, 2, 3):
                for k2 in (1, 2, 3):
                    worst_multi = max(worst_multi, *gcn_grad_error(rng, S, k1, k2, False, 1e-5).values())
            worst_single = max(worst_single, *gcn_grad_error(rng, S, 1, 1, True, 1e-5).values())
    elapsed = time.perf_counter() - start
    ok = max(worst_multi, worst_single) < GRAD_TOL and elapsed < 30
    report(capsys, 2, ok, f"multi-hop worst {worst_multi:.2e}, single-hop worst {worst_single:.2e}, {elapsed:.1f}s (< 30s)")


def test_criterion_3_equivalences(capsys):
    devs = equivalence_deviations(SEEDS)
    ok = all(v < 1e-12 for v in devs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in devs.items())
    report(capsys, 3, ok, f"max abs deviations over 20 seeds: {detail} (< 1e-12)")


def test_criterion_4_backprop(capsys):
    start = time.perf_counter()
    worst_closed = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng([seed, 4])
        model = random_two_layer_model(rng, 6, 3, 2, 3, "relu" if seed % 2 else "identity")
        cfg, params = two_layer_as_fighter(model)
        jac = closed_form_jacobians(model)
        names = {"wq": "l1.wq0", "wk": "l1.wk0", "wv": "l1.w", "w2": "l2.w"}
        S = model.x0.shape[0]
        for j in range(S):
            up = np.zeros((S, 1))
            up[j] = 1.0
            grads = backprop("fighter", cfg, params, model.x0, up)
            for short, long in names.items():
                worst_closed = max(worst_closed, float(np.max(np.abs(grads[long] - jac[short][j]))))
    worst_fd = max(max(fighter_grad_error(seed, 1e-5).values()) for seed in range(5))
    elapsed = time.perf_counter() - start
    ok = worst_closed < 1e-10 and worst_fd < GRAD_TOL and elapsed < 60
    report(capsys, 4, ok, f"backprop vs closed forms {worst_closed:.1e} (< 1e-10); Fighter kappa=3 LN+residual "
                          f"S=8 d=4 vs FD {worst_fd:.1e} (< 1e-5); {elapsed:.1f}s")


def test_criterion_5_structural_invariants(capsys, tmp_path):
    checks = {}
    rng = np.random.default_rng(5)
    stoch = shift = 0.0
    place_ok = True
    for seed in SEEDS:
        rng = np.random.default_rng([seed, 5])
        S = int(rng.integers(1, 10))
        x = rng.normal(size=(S, 3))
        raised = raised_attention(x, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 4)
        for i in range(4):
            stoch = max(stoch, float(np.max(np.abs(raised[:, i * S:(i + 1) * S].sum(axis=1) - 1))))
        m = rng.normal(size=(S, 5)) * 10
        shift = max(shift, float(np.max(np.abs(row_softmax(m + rng.normal() * 100) - row_softmax(m)))))
        k = int(rng.integers(1, 4))
        bd = block_diag_replicate(x, k)
        for i in range(k):
            for j in range(k):
                blk = bd[i * S:(i + 1) * S, j * 3:(j + 1) * 3]
                place_ok &= bool(np.array_equal(blk, x if i == j else np.zeros_like(x)))
        a = row_softmax(rng.normal(size=(S, S)))
        hc = hop_concat_powers(a, k)
        place_ok &= all(np.allclose(hc[:, i * S:(i + 1) * S], np.linalg.matrix_power(a, i), atol=1e-12) for i in range(k))
    checks["row-stochastic"] = stoch < 1e-9
    checks["shift-invariant"] = shift < 1e-12
    checks["block placement"] = place_ok

    path = tmp_path / "series.csv"
    assert main(["synth", "--steps", "1000", "--channels", "4", "--out", str(path)]) == 0
    table = pl.ingest_csv(path, timestamp_col=0)
    ds = pl.split_and_window(table, pl.TrainConfig(input_len=96, pred_len=24))
    train = ds.data[slice(*ds.bounds["train"])]
    mu, sd = float(np.max(np.abs(train.mean(axis=0)))), float(np.max(np.abs(train.std(axis=0) - 1)))
    checks["standardized"] = mu < 1e-9 and sd < 1e-9
    leaks = sum(1 for s in pl.SPLITS for a, b in ds.window_ranges(s) if not (ds.bounds[s][0] <= a and b <= ds.bounds[s][1]))
    n_windows = sum(ds.n_samples(s) for s in pl.SPLITS)
    checks["no leakage"] = leaks == 0
    ok = all(checks.values())
    report(capsys, 5, ok, f"stochastic err {stoch:.1e}, shift err {shift:.1e}, placement {place_ok}, "
                          f"train mean {mu:.1e} std-1 {sd:.1e}, {n_windows} windows with {leaks} leaks")


def test_criterion_6_training_reduces_loss(capsys):
    # 1000 steps leave 150 validation rows, so the horizon is 24 rather than 96
    cfg = pl.TrainConfig(epochs=25, batch_size=32, kappa_list=(3,), n_blocks=1, input_len=96, pred_len=24, seed=0)
    ds = pl.split_and_window(pl.make_synthetic_series(1000, 4, seed=0, lag=24), cfg)
    start = time.perf_counter()
    res = pl.train("fighter", None, ds, cfg)
    elapsed = time.perf_counter() - start
    first, last = res.metrics[0]["train_mse"], res.metrics[-1]["train_mse"]
    short = pl.TrainConfig(**{**cfg.to_dict(), "epochs": 2})
    repeat_ok = pl.train("fighter", None, ds, short).metrics == pl.train("fighter", None, ds, short).metrics
    repeat_ok &= res.metrics[:2] == pl.train("fighter", None, ds, short).metrics
    ok = last < 0.5 * first and elapsed < 120 and repeat_ok
    report(capsys, 6, ok, f"train mse epoch 1 {first:.4f} -> epoch 25 {last:.4f} (ratio {last / first:.3f} < 0.5), "
                          f"{elapsed:.1f}s (< 120s), deterministic {repeat_ok}")


def test_criterion_7_kappa_sweep(capsys, tmp_path):
    out = tmp_path / "sweep.csv"
    start = time.perf_counter()
    code = main(["sweep", "--kappa-min", "1", "--kappa-max", "8", "--epochs", "5",
                 "--input-len", "96", "--pred-len", "24", "--out", str(out)])
    elapsed = time.perf_counter() - start
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    header_ok = rows[0] == ["model", "kappa", "test_mse", "test_mae", "status"]
    body = rows[1:]
    kappas = [int(r[1]) for r in body if r[0] == "fighter"]
    shape_ok = kappas == list(range(1, 9)) and [r[0] for r in body].count("transformer") == 1
    values_ok = all(r[4] == "ok" and np.isfinite(float(r[2])) and np.isfinite(float(r[3])) for r in body)
    ok = code == 0 and header_ok and shape_ok and values_ok and elapsed < 600
    trend = ", ".join(f"k={r[1]}:{float(r[2]):.3f}" for r in body if r[0] == "fighter")
    base = next(float(r[2]) for r in body if r[0] == "transformer")
    report(capsys, 7, ok, f"{len(body)} rows in {elapsed:.0f}s (< 600s); test mse {trend}; transformer {base:.3f} "
                          f"(trend reported, not asserted)")


def test_criterion_8_determinism_and_io(capsys, tmp_path):
    base = ["--input-len", "24", "--pred-len", "8", "--epochs", "2", "--synth-steps", "400"]
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name)] + base) == 0
    metrics_same = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    ckpt = pl.load_checkpoint(tmp_path / "a/checkpoint.npz")
    pl.save_checkpoint(ckpt, tmp_path / "again.npz")
    again = pl.load_checkpoint(tmp_path / "again.npz")
    ckpt_same = again["meta"] == ckpt["meta"] and all(
        again["params"][k].tobytes() == v.tobytes() and again["params"][k].shape == v.shape for k, v in ckpt["params"].items()
    )

    data = tmp_path / "s.csv"
    assert main(["synth", "--out", str(data), "--steps", "400"]) == 0
    prefix = tmp_path / "hm"
    assert main(["heatmap", "--checkpoint", str(tmp_path / "a/checkpoint.npz"), "--data", str(data),
                 "--timestamp-col", "0", "--k", "16", "--out-prefix", str(prefix)]) == 0
    model, params, tcfg = pl.checkpoint_model(ckpt)
    ds = pl.split_and_window(pl.ingest_csv(data, timestamp_col=0), tcfg)
    _, trace = model.forward(params, ds.sample("test", 0)[0])
    expected = trace.layers[0].attention[0][:16, :16]
    back = pl.ingest_csv(f"{prefix}.csv", has_header=False).values
    heat_same = back.tobytes() == expected.tobytes()
    header = (tmp_path / "hm.pgm").read_text().splitlines()[:3]
    pgm_ok = header == ["P2", "16 16", "255"]
    ok = metrics_same and ckpt_same and heat_same and pgm_ok
    report(capsys, 8, ok, f"metrics CSV byte-identical {metrics_same}, checkpoint bitwise {ckpt_same}, "
                          f"heatmap CSV bitwise {heat_same}, PGM header {header}")
