"""Acceptance criteria, one test each; results are echoed in the terminal summary."""

import csv
import json
import math
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

import reference_model as ref
from conftest import record_acceptance, rel_err
from odefuse import diffcore as dc
from odefuse import features as F
from odefuse import pipeline
from odefuse.explain import Attribution, shapley_exact, shapley_sampled, waterfall_export
from odefuse.graph import adjacency_from_features
from odefuse.metrics import IntervalModel, basic_metrics, coverage_95, error_analysis, theils_u
from odefuse.model import ABLATIONS, ModelConfig, init_params, load_params, predict
from odefuse.odesolve import SolverConfig, integrate
from odefuse.selection import select_features
from odefuse.train import TrainConfig, fit, loss_and_grads
from oracles import adjacency_loop, expanding_loop, lag_loop, metrics_loop, rolling_loop

pytestmark = pytest.mark.slow


def check(number, ok, detail):
    record_acceptance(number, bool(ok), detail)
    assert ok, detail


# -- 1 -------------------------------------------------------------------------


def test_criterion_01_gradients():
    start = time.monotonic()
    worst, worst_seed = 0.0, None
    for seed in range(20):
        r = np.random.default_rng(seed)
        cfg = ModelConfig(hidden_dim=16, dropout_rate=0.0)
        P = init_params(6, cfg, seed)
        # generic parameter point: zero biases and unit gains are a measure-zero corner
        for k in P.arrays:
            P.arrays[k] = P.arrays[k] + r.uniform(-0.1, 0.1, P.arrays[k].shape)
        A = adjacency_from_features(r.normal(size=(30, 6)) + r.normal(size=(30, 1)))
        X, y = r.uniform(-1, 1, size=(4, 6)), r.uniform(-1, 1, size=4)
        _, g = loss_and_grads(P, X, y, A, cfg)
        fd = ref.fd_gradients(X, y, A.A, P.arrays, step=1e-5)
        err = max(rel_err(g[k], fd[k]) for k in P.arrays)
        if err > worst:
            worst, worst_seed = err, seed
    elapsed = time.monotonic() - start
    check(1, worst < 1e-4 and elapsed < 60,
          f"max rel err {worst:.2e} (seed {worst_seed}) over 20 seeds, {elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_rk4_order():
    start = time.monotonic()
    h0 = np.array([1.0, -0.5, 2.0])

    def err(dt):
        steps = int(round(0.08 / dt))
        h = integrate(lambda v: dc.scale(v, -1.0), h0, SolverConfig(dt, steps)).value
        return np.abs(h - h0 * math.exp(-0.08)).max()

    errs = [err(0.08 / 2 ** k) for k in range(4)]
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    elapsed = time.monotonic() - start
    ok = all(abs(r / 16 - 1) <= 0.2 for r in ratios) and elapsed < 1
    check(2, ok, "ratios " + ", ".join(f"{r:.3f}" for r in ratios) + f", {elapsed:.2f}s")


# -- 3 -------------------------------------------------------------------------


def test_criterion_03_adjacency():
    start = time.monotonic()
    r = np.random.default_rng(3)
    worst, structure_ok, props_ok = 0.0, True, True
    for _ in range(50):
        X = r.normal(size=(30, 6)) + 0.7 * r.normal(size=(30, 1))
        A = adjacency_from_features(X, 0.3).A
        O = adjacency_loop(X, 0.3)
        structure_ok &= np.array_equal(A > 0, O > 0)
        worst = max(worst, float(np.abs(A - O).max()))
        off = A[~np.eye(6, dtype=bool)]
        props_ok &= np.array_equal(A, A.T) and (np.diag(A) == 1).all() \
            and ((off == 0) | (off > 0.3)).all()
    elapsed = time.monotonic() - start
    check(3, structure_ok and props_ok and worst < 1e-12 and elapsed < 5,
          f"edge sets identical={structure_ok}, max |diff| {worst:.1e}, {elapsed:.2f}s")


# -- 4 -------------------------------------------------------------------------


def test_criterion_04_features():
    start = time.monotonic()
    r = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        y = list(r.normal(size=60) * 5 + 20)
        for lag in (1, 2, 3, 7):
            got = F.lag_features(y, [lag])[f"y_lag_{lag}"].to_numpy()
            worst = max(worst, float(np.abs(got - lag_loop(y, lag)).max()))
        for w in (3, 7, 24):
            for stat in ("mean", "std", "min", "max", "var", "skew", "median"):
                got = F.rolling_stats(y, w, [stat])[f"y_rolling_{stat}_{w}"].to_numpy()
                worst = max(worst, float(np.abs(got - rolling_loop(y, w, stat)).max()))
        ex = F.expanding_stats(y)
        for stat in ("mean", "std", "min", "max"):
            worst = max(worst, float(np.abs(ex[f"y_expanding_{stat}"] - expanding_loop(y, stat)).max()))
        vals = r.integers(0, 24, size=30)
        s, c = F.cyclical_encode(vals, 24)
        loop = [(math.sin(2 * math.pi * v / 24), math.cos(2 * math.pi * v / 24)) for v in vals]
        worst = max(worst, float(np.abs(np.column_stack([s, c]) - np.array(loop)).max()))
    n_ett, n_eia = len(F.ett_manifest("OT")), len(F.eia_manifest("Value"))
    elapsed = time.monotonic() - start
    check(4, worst < 1e-10 and n_ett == 51 and n_eia == 14 and elapsed < 10,
          f"max |diff| {worst:.1e}, ETT {n_ett} / EIA {n_eia} columns, {elapsed:.1f}s")


# -- 5 -------------------------------------------------------------------------


def test_criterion_05_selection():
    start = time.monotonic()
    clean, sizes_ok = 0, True
    for seed in range(20):
        r = np.random.default_rng(seed)
        X = r.normal(size=(200, 15))
        y = X[:, :10] @ np.linspace(1.0, 2.0, 10) + 0.1 * r.normal(size=200)
        names = [f"inf{i}" for i in range(10)] + [f"noise{i}" for i in range(5)]
        res = select_features(X, y, names)
        sizes_ok &= len(res.selected) == 8
        clean += not any(n.startswith("noise") for n in res.selected)
    elapsed = time.monotonic() - start
    check(5, clean >= 18 and sizes_ok and elapsed < 120,
          f"{clean}/20 runs excluded all noise, |S*|=8 always: {sizes_ok}, {elapsed:.1f}s")


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_overfit():
    start = time.monotonic()
    r = np.random.default_rng(6)
    X = r.normal(size=(64, 6))
    y = 0.3 * X @ r.normal(size=6)
    A = adjacency_from_features(X).A
    cfg = ModelConfig(hidden_dim=16, dropout_rate=0.0)
    # plateau rules disabled: this checks capacity and optimiser, not the schedule
    tc = TrainConfig(learning_rate=1e-3, batch_size=64, epochs=2000,
                     early_stop_patience=2000, lr_reduce_patience=2000, seed=6)
    _, hist = fit(X, y, A, cfg, tc, validation=(X, y))
    below = [i for i, v in enumerate(hist.val_loss) if v < 1e-3]
    elapsed = time.monotonic() - start
    reached = below[0] + 1 if below else None
    check(6, reached is not None and elapsed < 180,
          f"train MSE < 1e-3 at epoch {reached}, final {hist.val_loss[-1]:.2e}, {elapsed:.1f}s")


# -- shared pipeline runs ---------------------------------------------------------


@pytest.fixture(scope="module")
def bundled_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundled")
    config = pipeline.PipelineConfig()
    start = time.monotonic()
    pipeline.cmd_prepare(config, out)
    pipeline.cmd_select(config, out)
    pipeline.cmd_train(config, out)
    report = pipeline.cmd_evaluate(config, out)
    return config, out, report, time.monotonic() - start


# -- 7 -------------------------------------------------------------------------


def test_criterion_07_forecast_quality(bundled_run):
    config, out, report, elapsed = bundled_run
    n = json.loads((out / "prepare.json").read_text())["rows"]["series"]
    n_sel = len(json.loads((out / "selection.json").read_text())["selected"])
    check(7, report.r2 > 0.95 and report.theils_u < 0.5 and n == 600 and n_sel == 8
          and elapsed < 300,
          f"R2 {report.r2:.4f}, Theil's U {report.theils_u:.4f}, {elapsed:.1f}s")


# -- 8 -------------------------------------------------------------------------


def test_criterion_08_metrics():
    start = time.monotonic()
    r = np.random.default_rng(8)
    worst = 0.0
    for n in (2, 5, 50, 333, 1000):
        for _ in range(4):
            y, yhat = r.normal(size=n), r.normal(size=n)
            mse, rmse, mae, r2 = basic_metrics(y, yhat)
            got = {"mse": mse, "rmse": rmse, "mae": mae, "r2": r2,
                   **error_analysis(y, yhat), "theils_u": theils_u(y, yhat)}
            for k, v in metrics_loop(list(y), list(yhat)).items():
                worst = max(worst, abs(got[k] - v))
    walk = np.cumsum(r.normal(size=200))
    u_perfect = theils_u(walk, walk)
    u_persist = theils_u(walk, np.concatenate([[walk[0]], walk[:-1]]))
    interval = IntervalModel.fit(r.normal(scale=0.5, size=10_000))
    truth = r.normal(size=10_000)
    cov = coverage_95(truth, truth + r.normal(scale=0.5, size=10_000), interval)
    elapsed = time.monotonic() - start
    ok = worst < 1e-12 and u_perfect == 0 and abs(u_persist - 1) < 1e-12 \
        and 93 <= cov <= 97 and elapsed < 10
    check(8, ok, f"max |diff| {worst:.1e}, U perfect {u_perfect}, U persistence "
                 f"{u_persist:.12f}, coverage {cov:.2f}%, {elapsed:.2f}s")


# -- 9 -------------------------------------------------------------------------


def test_criterion_09_shapley(bundled_run):
    start = time.monotonic()
    config, out, _, _ = bundled_run
    r = np.random.default_rng(9)
    w = r.normal(size=8)
    b = r.normal(size=(1, 8))
    x = r.normal(size=8)
    lin = shapley_exact(lambda Z: Z @ w, b, x)
    lin_err = float(np.abs(lin.phi - w * (x - b[0])).max())

    params, mcfg, _ = load_params(out / "params.zip")
    prep = pipeline.load_prepared(out, config)
    names = json.loads((out / "selection.json").read_text())["selected"]
    tr, te = prep.train.select(names), prep.test.select(names)
    A = adjacency_from_features(tr.X, mcfg.tau)
    f = lambda Z: predict(Z, A, params, mcfg)
    bg = tr.X[np.sort(r.choice(len(tr.X), 100, replace=False))]
    worst_local, worst_dev = 0.0, 0.0
    for i in range(5):
        exact = shapley_exact(f, bg, te.X[i])
        worst_local = max(worst_local, abs(exact.residual))
        # 4096 coalitions x 100 background rows is ~25 s of forwards per instance
        if i < 2:
            sampled = shapley_sampled(f, bg, te.X[i], 4096, seed=i)
            dev = float(np.abs(sampled.phi - exact.phi).mean() / np.abs(exact.phi).max())
            worst_dev = max(worst_dev, dev)
    published_row = Attribution(0.0, np.array([-0.105012]), np.array([0.0]), -0.105012)
    rows, _ = waterfall_export(published_row, ["OT_lag_1"], feature_values=[3.939])
    impact = round(rows[0]["Contribution Impact"], 6)
    elapsed = time.monotonic() - start
    ok = lin_err < 1e-8 and worst_local < 1e-6 and worst_dev < 0.05 \
        and impact == -0.413642 and elapsed < 120
    check(9, ok, f"linear err {lin_err:.1e}, local acc {worst_local:.1e}, sampled dev "
                 f"{100 * worst_dev:.2f}% of max|phi|, impact {impact}, {elapsed:.1f}s")


# -- 10 ------------------------------------------------------------------------


def _ablation(out):
    with open(out / "ablation.csv") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ablations(tmp_path_factory, bundled_run):
    config, prepared, _, _ = bundled_run
    runs = {}
    for seed in (0, 1, 2):
        out = tmp_path_factory.mktemp(f"ablate{seed}")
        cfg = replace(config, seed=seed)
        pipeline.cmd_prepare(cfg, out)
        pipeline.cmd_select(cfg, out)
        start = time.monotonic()
        pipeline.cmd_ablate(cfg, out)
        runs[seed] = (out, time.monotonic() - start)
    return runs


def test_criterion_10_ablation(bundled_run, ablations):
    config, out, report, _ = bundled_run
    rows = _ablation(ablations[0][0])
    names_ok = [row["Configuration"] for row in rows] == list(ABLATIONS)
    cols_ok = tuple(rows[0]) == pipeline.ABLATION_COLUMNS
    full = rows[0]
    full_ok = float(full["R2"]) == report.r2 and float(full["MSE"]) == report.mse \
        and float(full["Theil's U"]) == report.theils_u
    wins = 0
    for seed, (path, _) in ablations.items():
        by = {row["Configuration"]: row for row in _ablation(path)}
        wins += float(by["Full Model"]["R2"]) >= float(by["Only ODE"]["R2"])
    elapsed = sum(t for _, t in ablations.values())
    soft = "holds" if wins >= 2 else "does not hold (soft, not failing)"
    if wins < 2:
        warnings.warn(f"Full >= Only-ODE R2 in only {wins}/3 seeds")
    check(10, names_ok and cols_ok and full_ok and elapsed < 900,
          f"6 rows={names_ok}, columns={cols_ok}, Full row equals standalone run={full_ok}; "
          f"Full R2 >= Only-ODE R2 in {wins}/3 seeds, majority {soft}; {elapsed:.1f}s")


# -- 11 ------------------------------------------------------------------------


def _strip_timing(text):
    rows = list(csv.DictReader(text.splitlines()))
    return [{k: v for k, v in row.items() if k not in pipeline.TIMING_COLUMNS} for row in rows]


def test_criterion_11_determinism(tmp_path, bundled_run, ablations):
    config = pipeline.PipelineConfig(explain=pipeline.ExplainConfig(instances=5))
    dirs = [tmp_path / "a", tmp_path / "b"]
    for out in dirs:
        pipeline.cmd_prepare(config, out)
        pipeline.cmd_select(config, out)
        pipeline.cmd_train(config, out)
        pipeline.cmd_evaluate(config, out)
        pipeline.cmd_explain(config, out, 0)
    names = sorted(p.name for p in dirs[0].iterdir())
    same = names == sorted(p.name for p in dirs[1].iterdir())
    differing = [n for n in names if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes()]
    # the ablation harness is compared modulo its wall-clock columns
    first = ablations[0][0]
    again = tmp_path / "ablate_again"
    pipeline.cmd_prepare(config, again)
    pipeline.cmd_select(config, again)
    pipeline.cmd_ablate(config, again)
    abl_same = _strip_timing((first / "ablation.csv").read_text()) == \
        _strip_timing((again / "ablation.csv").read_text())
    check(11, same and not differing and abl_same,
          f"{len(names)} artifacts byte-identical={not differing}, "
          f"ablation identical modulo timing={abl_same}")
