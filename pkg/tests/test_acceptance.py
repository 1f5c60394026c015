"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` or
``python3 tests/test_acceptance.py``.
"""

import filecmp
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fedrisk.experiments import (
    CONDITIONS,
    ExperimentConfig,
    accountant_query,
    emit_reports,
    prepare_sites,
    run_condition,
)
from fedrisk.fed import FederationConfig, SiteArrays, average, initial_params, run_federated
from fedrisk.metrics import auc, delong_diff, delong_estimate
from fedrisk.models import ModelSpec, ParamVector, grad, logits, loss_from_logits
from fedrisk.optim import clip_rows, clip_to_norm, dp_aggregate
from fedrisk.privacy import DEFAULT_ORDERS, compose, rdp_step, step_curve, to_eps_delta
from fedrisk.estimators import RiskClassifier
from oracles import auc_by_pairs, eps_by_grid, finite_difference_grad, rdp_by_quadrature

SNAPSHOT = Path(__file__).parent / "snapshots" / "benchmark_seed0.json"


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        assert ok, detail
    return emit


def test_c01_full_batch_closed_form(report):
    start = time.perf_counter()
    worst = 0.0
    for z in (0.5, 1.0, 2.0):
        for steps in (1, 10, 100):
            curve = compose(step_curve(1.0, z, DEFAULT_ORDERS), steps)
            for alpha, eps in curve.as_dict().items():
                worst = max(worst, abs(eps - steps * alpha / (2 * z * z)))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-12 and elapsed < 1.0,
           f"max |eps(a) - T a/(2z^2)| = {worst:.3g} (tol 1e-12), {elapsed:.3f}s (limit 1s)")


def test_c02_conversion_anchor(report):
    eps, order = to_eps_delta(step_curve(1.0, 1.0), 1e-5)
    ref_eps, ref_order = eps_by_grid({a: a / 2 for a in range(2, 65)}, 1e-5)
    ok = abs(eps - 5.302585) <= 1e-5 and order == 6 == ref_order and abs(eps - ref_eps) <= 1e-12
    report(2, ok, f"eps = {eps!r} at order {order} (grid oracle {ref_eps!r} at {ref_order})")


def test_c03_accountant_vs_quadrature(report):
    worst = 0.0
    for q in (0.01, 0.05):
        for z in (0.5, 1.0, 2.0):
            for alpha in (2, 8, 32):
                ref = rdp_by_quadrature(q, z, alpha)
                worst = max(worst, abs(rdp_step(q, z, alpha) - ref) / ref)
    report(3, worst <= 1e-3, f"max relative error vs quadrature = {worst:.3g} (tol 1e-3)")


def test_c04_gradients(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for kind in ("logistic", "mlp"):
        for _ in range(20):
            d = int(rng.integers(2, 10))
            spec = ModelSpec(kind, d, int(rng.integers(2, 8)) if kind == "mlp" else None)
            params = ParamVector(rng.normal(0, 0.7, spec.n_params), spec.layout)
            B = int(rng.integers(1, 17))
            X = rng.integers(0, 2, size=(B, d)).astype(float)
            y = rng.integers(0, 2, size=B).astype(float)
            numeric = finite_difference_grad(
                lambda v: loss_from_logits(logits(spec, params.replace(v), X), y), params.values, h=1e-6)
            analytic = grad(spec, params, X, y).values
            worst = max(worst, np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
    report(4, worst <= 1e-5, f"max relative error analytic vs finite differences = {worst:.3g} (tol 1e-5)")


def test_c05_clipping(report):
    rng = np.random.default_rng(5)
    G = rng.normal(0, 3, size=(10_000, 10)) * rng.uniform(0, 5, size=(10_000, 1))
    worst, unchanged = 0.0, True
    for S in (0.1, 1.0, 10.0):
        C = clip_rows(G, S)
        worst = max(worst, float(np.max(np.linalg.norm(C, axis=1) / S)))
        inside = np.linalg.norm(G, axis=1) <= S
        unchanged &= bool(np.array_equal(C[inside], G[inside]))
        for row in np.flatnonzero(inside)[:50]:
            g = ParamVector(G[row], (("g", (10,)),))
            unchanged &= clip_to_norm(g, S) is g
    ok = worst <= 1 + 1e-12 and unchanged
    report(5, ok, f"max post-clip norm / S = {worst!r} (limit 1+1e-12), in-norm inputs unchanged: {unchanged}")


def test_c06_noise_statistics(report):
    rng = np.random.default_rng(6)
    layout = (("g", (3,)),)
    zero = np.zeros((10, 3))
    draws = np.array([dp_aggregate(zero, 1.0, 1.0, 10, rng, layout).values for _ in range(100_000)])
    expected = (1.0 * 1.0 / 10) ** 2
    rel = np.abs(draws.var(axis=0, ddof=1) - expected) / expected
    report(6, bool(np.all(rel <= 0.05)), f"per-coordinate variance relative error {np.round(rel, 4).tolist()} (tol 0.05)")


def test_c07_delong(report):
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(100):
        n = int(rng.integers(4, 51))
        y = np.zeros(n, dtype=int)
        y[rng.choice(n, int(rng.integers(1, n)), replace=False)] = 1
        s = rng.integers(0, 6, size=n) / 5.0
        exact &= auc(s, y) == auc_by_pairs(s, y)
    hand = delong_estimate([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0])
    s = rng.random(40)
    y = np.r_[np.ones(20), np.zeros(20)]
    self_diff = delong_diff(s, s, y)
    ok = (exact and hand.auc == 0.75 and abs(hand.variance - 0.125) <= 1e-15
          and (self_diff.ci_low, self_diff.ci_high) == (0.0, 0.0))
    report(7, ok, f"brute force exact: {exact}; hand case auc={hand.auc!r} var={hand.variance!r}; "
                  f"self-difference CI=({self_diff.ci_low!r}, {self_diff.ci_high!r})")


def _bench_sites():
    return prepare_sites(ExperimentConfig(condition="local"))


def test_c08_federation_degeneracies(report):
    site = SiteArrays.from_site(_bench_sites()[0], "mortality")
    spec = ModelSpec("mlp", site.X_train.shape[1], 32)
    rounds = 5
    _, _, fed_final = run_federated(FederationConfig(spec, rounds=rounds, lr=1e-2, batch_size=64, seed=0), [site])
    local = RiskClassifier(model="mlp", hidden_dim=32, learning_rate=1e-2, batch_size=64, max_epochs=rounds,
                           early_stopping=False, random_state=0, site_id=site.site_id)
    local.fit(site.X_train, site.y_train)
    identical = bool(np.array_equal(fed_final.values, local.final_params_.values))
    vec = lambda v: ParamVector(np.asarray(v, float), (("w", (2,)),))
    avg_exact = average([vec([0, 2]), vec([2, 4])]) == vec([1, 3])
    sites = [SiteArrays.from_site(s, "mortality") for s in _bench_sites()[:3]]
    _, log, _ = run_federated(FederationConfig(spec, rounds=10, lr=0.0, seed=0), sites)
    constant = all(len(set(log.aucs(s.site_id))) == 1 and len(log.aucs(s.site_id)) == 10 for s in sites)
    report(8, identical and avg_exact and constant,
           f"single-site == local (bit-identical): {identical}; uniform average exact: {avg_exact}; "
           f"lr=0 AUCs constant over 10 rounds: {constant}")


def _best_val(trajectories, task):
    best = {}
    for _, _, val, site, t in trajectories:
        if t == task:
            best[site] = max(best.get(site, -np.inf), val)
    return best


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    start = time.perf_counter()
    config = ExperimentConfig(condition="federated")
    sites = prepare_sites(config)
    fed = run_condition(config, sites)
    local = run_condition(ExperimentConfig(condition="local"), sites)
    elapsed = time.perf_counter() - start
    out = tmp_path_factory.mktemp("bench")
    paths = emit_reports(fed.rows, fed.trajectories, out / "first")
    return dict(config=config, fed=fed, local=local, elapsed=elapsed, paths=paths, out=out)


def _snapshot_values(bench):
    values = {}
    for task in bench["config"].tasks:
        values[task] = {
            "federated_val": _best_val(bench["fed"].trajectories, task),
            "local_val": _best_val(bench["local"].trajectories, task),
            "federated_test": {r.site_id: r.auc for r in bench["fed"].rows if r.task == task},
            "local_test": {r.site_id: r.auc for r in bench["local"].rows if r.task == task},
        }
    return values


@pytest.mark.slow
def test_c09_desk_scale_benchmark(report, benchmark):
    lines, ok = [], benchmark["elapsed"] <= 300
    values = _snapshot_values(benchmark)
    for task, v in values.items():
        fed = float(np.mean(list(v["federated_val"].values())))
        loc = float(np.mean(list(v["local_val"].values())))
        ok &= fed >= loc - 0.01
        lines.append(f"{task}: federated val {fed:.4f} vs local val {loc:.4f} "
                     f"(test {np.mean(list(v['federated_test'].values())):.4f} vs "
                     f"{np.mean(list(v['local_test'].values())):.4f})")
    snapshot = json.loads(SNAPSHOT.read_text())
    matches = snapshot == json.loads(json.dumps(values))
    ok &= matches
    report(9, ok, "; ".join(lines) + f"; runtime {benchmark['elapsed']:.1f}s (limit 300s); "
                  f"seed-locked snapshot matches: {matches}")


def test_c10_central_dp_trajectory(report):
    config = ExperimentConfig(condition="central_dp", tasks=("mortality",), noise_grid=(1.0,), clip_grid=(10.0,),
                              model_kinds=("logistic",), lr_grid=(1e-2,), batch_grid=(64,), dp_epochs=25)
    sites = prepare_sites(config)
    result = run_condition(config, sites)
    n = sum(len(s.train) for s in sites)
    q, per_epoch = min(1.0, 64 / n), math.ceil(n / 64)
    eps = [t[1] for t in result.trajectories]
    nondecreasing = all(b >= a for a, b in zip(eps, eps[1:]))
    worst = max(abs(e - accountant_query(q, 1.0, t[0] * per_epoch, 1e-5)) for e, t in zip(eps, result.trajectories))
    ok = len(eps) == 25 and nondecreasing and worst <= 1e-9
    report(10, ok, f"{len(eps)} epochs, eps {eps[0]:.4f} -> {eps[-1]:.4f}, nondecreasing: {nondecreasing}, "
                   f"max |eps - accountant_query| = {worst:.3g} (tol 1e-9)")


@pytest.mark.slow
def test_c11_determinism(report, benchmark, tmp_path):
    small = dict(n_sites=2, site_size=400, n_features=8, min_train=100, incidence_mortality=0.2,
                 model_kinds=["logistic", "mlp"], hidden_sizes=[4], lr_grid=[0.05], batch_grid=[32],
                 epochs=2, dp_epochs=2, rounds=2, noise_grid=[1.0], clip_grid=[1.0], fed_dp_select_epochs=1)
    same = {}
    for condition in CONDITIONS:
        mapping = {k: v for k, v in small.items()
                   if condition in ("central_dp", "federated_dp") or k not in ("noise_grid", "clip_grid", "fed_dp_select_epochs")}
        config = ExperimentConfig.from_mapping({**mapping, "condition": condition})
        outs = []
        for name in ("a", "b"):
            result = run_condition(config)
            outs.append(emit_reports(result.rows, result.trajectories, tmp_path / condition / name))
        same[condition] = all(filecmp.cmp(outs[0][k], outs[1][k], shallow=False) for k in outs[0])
    rerun = run_condition(benchmark["config"])
    second = emit_reports(rerun.rows, rerun.trajectories, benchmark["out"] / "second")
    same["benchmark"] = all(filecmp.cmp(benchmark["paths"][k], second[k], shallow=False) for k in second)
    report(11, all(same.values()), f"byte-identical reruns: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
