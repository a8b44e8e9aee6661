"""Acceptance gate: one PASS/FAIL line per criterion.

The lines are printed straight to the terminal, so they show up in a plain
``pytest -v`` run.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import caudg.losses as losses
from caudg import nncore as nn
from caudg.data import sliding_window, window_stride
from caudg.hsic import hsic
from caudg.ids import SampledStyle, fit_style_gaussian, ids, ids_transform, sample_styles, spatial_stats
from caudg.losses import LossWeights, loss_con, total_loss
from caudg.metrics import accuracy, macro_f1
from caudg.model import ArchConfig, build, forward_train
from caudg.pipeline import TrainConfig, apply_variant, make_augmenter, train_step

from . import benchmark
from .oracles import hsic_oracle, window_count_bruteforce
from .test_pipeline import erm_reference_grads

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(num: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
        assert ok, detail

    return emit


# 1 ---------------------------------------------------------------------------


def test_criterion_01_hsic_oracle(report):
    r = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        B, Dc, Dd = r.integers(2, 9), r.integers(1, 6), r.integers(1, 6)
        Fc, Fd = r.standard_normal((B, Dc)), r.standard_normal((B, Dd))
        ref = hsic_oracle(Fc, Fd)
        worst = max(worst, abs(hsic(Fc, Fd).item() - ref) / max(abs(ref), 1e-12))
    secs = time.perf_counter() - t0
    report(1, worst <= 1e-9 and secs < 1.0, f"HSIC vs explicit-matrix oracle, max rel err {worst:.2e}, {secs:.2f} s")


# 2 ---------------------------------------------------------------------------


def test_criterion_02_hsic_properties(report):
    r = np.random.default_rng(101)
    errs = []
    const = np.tile(r.standard_normal(3), (7, 1))
    errs.append(abs(hsic(const, r.standard_normal((7, 2))).item()))
    for B in range(2, 9):
        Q, _ = np.linalg.qr(r.standard_normal((B, B)))
        errs.append(abs(hsic(Q, Q).item() - 1.0 / (B - 1)))
    for _ in range(100):
        B = int(r.integers(2, 9))
        Fc, Fd = r.uniform(-10, 10, (B, 3)), r.uniform(-10, 10, (B, 2))
        base = hsic(Fc, Fd).item()
        perm = r.permutation(B)
        scale = r.uniform(0.01, 100, (B, 1))
        errs += [abs(hsic(Fd, Fc).item() - base), abs(hsic(Fc[perm], Fd[perm]).item() - base),
                 abs(hsic(Fc * scale, Fd).item() - base), abs(hsic(Fc, Fd * scale).item() - base)]
    worst = max(errs)
    report(2, worst <= 1e-12, f"constant/orthonormal/symmetry/permutation/scaling, max deviation {worst:.2e}")


# 3 ---------------------------------------------------------------------------


def toy_arch() -> ArchConfig:
    return ArchConfig(in_channels=2, width=16, num_classes=2, num_domains=2, base_filters=3, base_kernel=3,
                      branch_filters=4, branch_kernel=3, cdpl_hidden=5)


def frozen_margin(out, reduce="mean") -> float:
    """A margin sitting in the widest gap between non-causal distances, away from every hinge kink."""
    d1, d2 = losses._noncausal_distances(out, reduce)
    d = np.sort(np.concatenate([d1.data, d2.data]))
    gaps = np.diff(d)
    i = int(gaps.argmax())
    return float((d[i] + d[i + 1]) / 2)


def layer_errors(r) -> dict:
    errs = {}
    x = r.standard_normal((3, 2, 1, 11))
    w = r.standard_normal((4, 2, 1, 3))
    b = r.standard_normal(4)
    g = r.standard_normal((3, 4, 1, 9))
    errs["conv1d/input"] = nn.finite_difference_check(lambda t: nn.tsum(nn.conv1d(t, w, b) * g), x)
    errs["conv1d/weight"] = nn.finite_difference_check(lambda t: nn.tsum(nn.conv1d(x, t, b) * g), w)
    errs["conv1d/bias"] = nn.finite_difference_check(lambda t: nn.tsum(nn.conv1d(x, w, t) * g), b)
    # distinct values keep pooling and ReLU away from ties and kinks
    xp = r.permutation(np.linspace(-3, 3, 3 * 2 * 10)).reshape(3, 2, 1, 10)
    gp = r.standard_normal((3, 2, 1, 5))
    errs["maxpool1d"] = nn.finite_difference_check(lambda t: nn.tsum(nn.maxpool1d(t, 2) * gp), xp)
    errs["relu"] = nn.finite_difference_check(lambda t: nn.tsum(nn.relu(t) * xp), xp + 0.025)
    xf, wf, bf, gf = r.standard_normal((5, 4)), r.standard_normal((3, 4)), r.standard_normal(3), r.standard_normal((5, 3))
    errs["fully_connected/input"] = nn.finite_difference_check(lambda t: nn.tsum(nn.fully_connected(t, wf, bf) * gf), xf)
    errs["fully_connected/weight"] = nn.finite_difference_check(
        lambda t: nn.tsum(nn.fully_connected(xf, t, bf) * gf), wf)
    gamma, beta = r.uniform(0.5, 2, 4), r.standard_normal(4)
    gb = r.standard_normal((5, 4))
    bn = lambda t, gm=gamma, bt=beta: nn.batch_norm(t, gm, bt, True, np.zeros(4), np.ones(4))
    errs["batch_norm/input"] = nn.finite_difference_check(lambda t: nn.tsum(bn(t) * gb), xf)
    errs["batch_norm/gamma"] = nn.finite_difference_check(lambda t: nn.tsum(bn(xf, t) * gb), gamma)
    errs["batch_norm/beta"] = nn.finite_difference_check(lambda t: nn.tsum(bn(xf, gamma, t) * gb), beta)
    errs["softmax_cross_entropy"] = nn.finite_difference_check(
        lambda t: nn.softmax_cross_entropy(t, np.array([0, 2, 1, 1, 0])), r.standard_normal((5, 3)))
    Fd = r.standard_normal((6, 3))
    errs["hsic"] = nn.finite_difference_check(lambda t: hsic(t, Fd), r.standard_normal((6, 4)))
    return errs


def loss_con_errors(r) -> dict:
    cfg = toy_arch()
    model = build(cfg, 0)
    x = r.standard_normal((6, 2, 1, 16))
    out = forward_train(model, x, lambda z: z * 1.3 + 0.2)
    m = frozen_margin(out)
    errs = {}
    for mode in ("symmetric-sum", "literal"):
        for field in ("Fc_x", "cdpl_c_a", "Fd_x", "cdpl_d_x"):
            def fn(t, field=field, mode=mode):
                o = forward_train(model, x, lambda z: z * 1.3 + 0.2)
                setattr(o, field, t)
                return loss_con(o, mode, margin=m)

            errs[f"loss_con[{mode}]/{field}"] = nn.finite_difference_check(fn, getattr(out, field).data)
    return errs


def total_loss_errors(r, monkeypatch) -> dict:
    cfg = toy_arch()
    model = build(cfg, 0)
    x = r.standard_normal((6, 2, 1, 16))
    y, d = np.array([0, 1, 0, 1, 1, 0]), np.array([0, 0, 0, 1, 1, 1])
    # IDS draws and the batch margin are constants of the objective: freeze them at the starting point
    base = model.base_features(x).data
    stats = spatial_stats(base)
    style = sample_styles(stats, 1e-4, np.random.default_rng(0))
    augment = lambda z: ids_transform(z, stats, style)
    m = frozen_margin(forward_train(model, x, augment))
    monkeypatch.setattr(losses, "batch_margin", lambda out, reduce="mean": m)
    errs = {}
    for mode in ("symmetric-sum", "literal"):
        fn = lambda mode=mode: total_loss(forward_train(model, x, augment), y, d, LossWeights(1.0, 0.1),
                                          con_mode=mode).graph
        for name, e in nn.check_parameter_gradients(fn, model.parameters()).items():
            errs[f"total_loss[{mode}]/{name}"] = e
    return errs


def test_criterion_03_gradient_suite(report, monkeypatch):
    t0 = time.perf_counter()
    r = np.random.default_rng(102)
    errs = {**layer_errors(r), **loss_con_errors(r), **total_loss_errors(r, monkeypatch)}
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    report(3, errs[worst] < 1e-4 and secs < 30,
           f"{len(errs)} gradient checks, worst {worst} rel err {errs[worst]:.2e}, {secs:.1f} s")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_ids_postconditions(report):
    eps = 1e-4
    tail_ok, stats_err, accepted = True, 0.0, 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        z = r.standard_normal((16, 4, 1, 20)) * r.uniform(0.5, 2.0, (16, 4, 1, 1)) + r.normal(0, 1, (16, 4, 1, 1))
        stats = spatial_stats(z)
        out, style = ids(z, eps, np.random.default_rng(seed), return_style=True)
        for vec, fallback, fitted in (
            (style.mu_bar, style.fallback_mu, stats.mu),
            (style.sigma_bar, style.fallback_sigma, np.sqrt(stats.sigma2)),
        ):
            g = fit_style_gaussian(fitted.reshape(16, 4))
            dens = g.log_density(vec.reshape(16, 4))
            ok_rows = ~fallback
            if vec is style.sigma_bar:
                # floored rows no longer equal the raw draw
                ok_rows &= (vec.reshape(16, 4) > 1e-3).all(axis=1)
            accepted += int(ok_rows.sum())
            tail_ok &= bool((dens[ok_rows] < math.log(eps)).all())
        s = spatial_stats(out)
        stats_err = max(stats_err, np.abs(s.mu - style.mu_bar).max(), np.abs(np.sqrt(s.sigma2) - style.sigma_bar).max())
    r = np.random.default_rng(7)
    z = r.standard_normal((8, 4, 1, 20)) * r.uniform(1.5, 4.0, (8, 4, 1, 1)) + r.normal(0, 2, (8, 4, 1, 1))
    s = spatial_stats(z)
    ident = np.abs(ids_transform(z, s, SampledStyle(mu_bar=s.mu, sigma_bar=np.sqrt(s.sigma2))).data - z).max()
    report(4, tail_ok and stats_err <= 1e-4 and ident <= 1e-6,
           f"{accepted} accepted draws in the tail, restyled-stat err {stats_err:.1e}, identity err {ident:.1e}")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_window_counts(report):
    r = np.random.default_rng(103)
    bad, n = 0, 0
    while n < 1000:
        T, W, ov = int(r.integers(1, 500)), int(r.integers(1, 150)), float(r.uniform(0, 0.95))
        try:
            stride = window_stride(W, ov)
        except ValueError:
            continue
        n += 1
        got = sliding_window(np.zeros((1, T)), W, ov).shape[0]
        formula = (T - W) // stride + 1 if T >= W else 0
        bad += int(got != window_count_bruteforce(T, W, stride) or got != formula)
    report(5, bad == 0, f"{n} fuzzed (T, W, overlap) triples, {bad} mismatches against enumeration")


# 6 ---------------------------------------------------------------------------


def test_criterion_06_metric_oracles(report):
    f1 = macro_f1(np.array([[1, 1], [0, 2]]))
    r = np.random.default_rng(104)
    worst = 0.0
    for _ in range(500):
        K = int(r.integers(1, 10))
        cm = r.integers(0, 30, (K, K))
        cm[0, 0] += 1
        worst = max(worst, abs(accuracy(cm) - sum(cm[i, i] for i in range(K)) / cm.sum()))
    report(6, abs(f1 - 11 / 15) < 1e-12 and worst == 0.0, f"macro-F1 {f1:.4f} (11/15), accuracy max err {worst}")


# 7 ---------------------------------------------------------------------------


def test_criterion_07_erm_equivalence(report):
    from caudg.data import SynthConfig, synth_generate

    ds = synth_generate(SynthConfig(samples_per_class=2))
    cfg = apply_variant(TrainConfig(), "erm")
    model = build(cfg.arch_config(ds), 0)
    x = np.random.default_rng(105).standard_normal((12, 3, 1, 48))
    y = np.arange(12) % 4
    params = {k: p.data.copy() for k, p in model.named_parameters().items()}
    lb = train_step(model, nn.Adam(model.parameters(), lr=0.0), cfg, x, y, np.zeros(12, dtype=int),
                    make_augmenter(cfg, np.random.default_rng(0)))
    loss, ref = erm_reference_grads(params, x, y)
    worst = max(float(np.abs(p.grad - ref[k]).max()) for k, p in model.named_parameters().items())
    ok = set(ref) == set(params) and abs(lb.total - loss) <= 1e-12 and worst <= 1e-12
    report(7, ok, f"one ERM step vs standalone numpy, max grad diff {worst:.1e}, loss diff {abs(lb.total - loss):.1e}")


# 8 / 9 ---------------------------------------------------------------------------

_bench: dict = {}


def bench() -> dict:
    if not _bench:
        _bench.update(benchmark.run())
    return _bench


@pytest.mark.slow
def test_criterion_08_synthetic_generalization(report):
    b = bench()
    res = b["results"]
    means = {v: benchmark.mean_acc(res, v) for v in res}
    ablations = ("no-ind", "no-con", "no-ids", "no-cdpl")
    gain = means["full"] - means["erm"]
    ok = gain >= 0.10 and all(means["full"] >= means[v] for v in ablations) and b["seconds"] < 300
    detail = ", ".join(f"{v} {100 * m:.1f}" for v, m in means.items())
    report(8, ok, f"mean target acc % ({detail}); full - ERM = {100 * gain:.1f} pts; {b['seconds']:.0f} s")


@pytest.mark.slow
def test_criterion_09_determinism(report):
    first = bench()["results"]
    proc = subprocess.run([sys.executable, "-m", "tests.benchmark"], cwd=ROOT, capture_output=True, text=True,
                          check=True)
    second = json.loads(proc.stdout)["results"]
    report(9, first == second, "re-running the synthetic benchmark in a fresh process gives identical metrics")


def test_criterion_10_optional_reproduction():
    pytest.skip("criterion 10 needs the downloaded public datasets; not part of the desk-scale gate")
