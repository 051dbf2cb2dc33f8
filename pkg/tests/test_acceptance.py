"""End-to-end acceptance checks. Each test prints one PASS/FAIL line on the
real stdout so the summary survives pytest capture."""
import copy
import itertools
import sys
import time

import numpy as np
import pytest

import mdprune.mirror
from mdprune import harness as H
from mdprune.config import DEFAULT_CONFIG, prune_config
from mdprune.corpus import build_sequences, generate_corpus, split_calibration
from mdprune.diagnostics import (descent_check, descent_constant,
                                 estimate_lipschitz, stationarity_trend,
                                 step_size_bound)
from mdprune.masks import (budget_from_sparsity, export_nm,
                           export_unstructured, sparsity_sweep, validate_nm)
from mdprune.mirror import (PruneConfig, SearchDiverged, r24_penalty,
                            r24_prox_step, run_search, soft_threshold)
from mdprune.model import (ModelConfig, build_toy_model,
                           collect_activation_stats, freeze_pretrained,
                           load_model, pretrain, w0_checksum)
from mdprune.saliency import MetricConfig

from test_autodiff import build_random_graph, central_difference
from test_mirror import grid_argmin


@pytest.fixture(autouse=True)
def _expose_capture_manager(request):
    report.capman = request.config.pluginmanager.getplugin("capturemanager")


def report(name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    line = f"{tag}: {name}" + (f"  [{detail}]" if detail else "")
    capman = getattr(report, "capman", None)
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print(line, file=sys.stderr, flush=True)
    else:
        print(line, file=sys.__stdout__, flush=True)
    assert ok, f"{name} {detail}"


def trained_toy(seed, n_docs=12, doc_len=96, depth=2, width=16):
    docs = generate_corpus(seed, n_docs=n_docs, doc_len=doc_len)
    full = build_sequences(docs, 16)
    calib, held = split_calibration(full, 0.1)
    model = build_toy_model(ModelConfig(depth=depth, width=width, seed=seed))
    pretrain(model, calib, steps=300, lr=0.2, batch_size=8, seed=seed)
    freeze_pretrained(model)
    collect_activation_stats(model, calib)
    return model, calib, held


def test_autodiff_matches_finite_differences():
    t0 = time.time()
    rng = np.random.default_rng(99)
    worst = 0.0
    for seed in range(100):
        run, leaves = build_random_graph(seed)
        _, grads = run(leaves)
        for _ in range(2):
            li = int(rng.integers(len(leaves)))
            idx = tuple(int(rng.integers(s)) for s in leaves[li].shape)
            fd = central_difference(run, leaves, li, idx, h=1e-5)
            got = grads[li][idx]
            if abs(fd) < 1e-7 and abs(got) < 1e-7:
                continue
            worst = max(worst, abs(fd - got) / max(1.0, abs(fd)))
    elapsed = time.time() - t0
    report("autodiff gradients vs central differences (100 networks)",
           worst <= 1e-4 and elapsed < 10,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_soft_threshold_matches_grid_oracle():
    t0 = time.time()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        z = float(rng.uniform(-4, 4))
        t = float(rng.uniform(0, 2))
        got = float(soft_threshold(np.array([z]), t)[0])
        worst = max(worst, abs(got - grid_argmin(z, t)))
    elapsed = time.time() - t0
    report("soft threshold vs grid-search argmin (1000 samples)",
           worst < 1e-6 and elapsed < 5,
           f"worst gap {worst:.2e}, {elapsed:.1f}s")


def test_two_four_regularizer_properties():
    grid = [-2.0, -0.5, 0.5, 2.0]
    zero_ok = True
    for support in itertools.product([0, 1], repeat=4):
        slots = [i for i in range(4) if support[i]]
        for vals in itertools.product(grid, repeat=len(slots)):
            block = np.zeros(4)
            for i, v in zip(slots, vals):
                block[i] = v
            p = r24_penalty(block)
            zero_ok &= (p == 0.0) if len(slots) <= 2 else (p > 0.0)
    rng = np.random.default_rng(6)
    descent_ok = True
    for _ in range(1000):
        block = rng.normal(size=4) * rng.uniform(0.2, 3)
        eta = rng.uniform(1e-4, 0.1)
        descent_ok &= r24_penalty(r24_prox_step(block, eta)) \
            <= r24_penalty(block) + 1e-12
    report("2:4 penalty zero pattern + prox monotonicity",
           zero_ok and descent_ok)


def run_descent_trial(seed, alpha_factor):
    model, calib, _ = trained_toy(seed)
    l_w, l_s = estimate_lipschitz(model, calib, probes=10,
                                  metric=MetricConfig(kind="stochria", seed=seed))
    rho, kappa = 1.0, 1.0
    amax = step_size_bound(l_w, l_s, rho, kappa)
    alpha = alpha_factor * amax
    cfg = PruneConfig(rho=rho, kappa=kappa, lam=1e-3, alpha=alpha, steps=100,
                      batch_size=None, seed=seed,
                      metric=MetricConfig(kind="stochria", seed=seed))
    try:
        result = run_search(model, calib, cfg)
        trace = result.trace
    except SearchDiverged as e:
        trace = e.trace
    rd = descent_constant(kappa, alpha, l_w, l_s, rho)
    return trace, rd


def test_sufficient_descent_and_negative_control():
    t0 = time.time()
    rates = []
    traces = []
    for seed in range(5):
        trace, rd = run_descent_trial(seed, 0.5)
        rep = descent_check(trace, rd, slack=1e-8)
        rates.append(rep.pass_rate)
        traces.append(trace)
    neg_trace, neg_rd = run_descent_trial(0, 10.0)
    neg_violations = True
    if len(neg_trace) >= 3:
        neg_violations = descent_check(neg_trace, neg_rd).violations > 0
    elapsed = time.time() - t0
    ok = all(r >= 0.95 for r in rates) and neg_violations and elapsed < 120
    report("Lyapunov sufficient descent at 0.5*alpha_max (5 seeds) "
           "+ violations at 10*alpha_max", ok,
           f"pass rates {['%.2f' % r for r in rates]}, {elapsed:.0f}s")
    test_sufficient_descent_and_negative_control.traces = traces


def test_stationarity_running_mean_decays():
    traces = getattr(test_sufficient_descent_and_negative_control, "traces", None)
    if traces is None:
        traces = []
        for seed in range(5):
            trace, _ = run_descent_trial(seed, 0.5)
            traces.append(trace)
    ratios = []
    for trace in traces:
        first, second = stationarity_trend(trace)
        ratios.append(second / first)
    ok = all(r <= 0.5 for r in ratios)
    report("step-to-step movement decays (second-half mean <= 0.5 * first)",
           ok, "ratios " + str(["%.3f" % r for r in ratios]))


def test_mask_exactness_and_nm_oracle():
    t0 = time.time()
    rng = np.random.default_rng(7)
    gammas = {"a": rng.normal(size=(30, 40)), "b": rng.normal(size=(20, 64))}
    total = sum(g.size for g in gammas.values())
    exact_ok, nested_ok = True, True
    for scope in ("global", "per-layer"):
        budgets = [total // 10, total // 4, total // 2]
        masks = sparsity_sweep(gammas, budgets, scope)
        for b, m in zip(budgets, masks):
            exact_ok &= m.kept_count() == b
        for small, big in zip(masks, masks[1:]):
            for n in gammas:
                nested_ok &= bool(np.all(small.layers[n] <= big.layers[n]))

    nm_ok = True
    for n, m in ((2, 4), (1, 4), (3, 8), (4, 8)):
        blocks = rng.normal(size=(2500, m))
        mask = export_nm({"w": blocks}, n, m)
        nm_ok &= validate_nm(mask, n, m)
        combos = np.array(list(itertools.combinations(range(m), n)))
        sums = np.abs(blocks)[:, combos].sum(axis=2)
        best = combos[np.argmax(sums, axis=1)]  # first max = lowest lex combo
        kept = np.where(mask.layers["w"], np.abs(blocks), -np.inf)
        got = np.argsort(-kept, axis=1, kind="stable")[:, :n]
        nm_ok &= bool(np.all(np.sort(got, axis=1) == best))
    elapsed = time.time() - t0
    report("mask budgets exact, nested; N:M matches C(M,N) brute force "
           "(10^4 blocks)", exact_ok and nested_ok and nm_ok and elapsed < 30,
           f"{elapsed:.1f}s")


def test_one_search_serves_multiple_sparsities(monkeypatch):
    model, calib, held = trained_toy(1)
    cfg = PruneConfig(rho=0.01, lam=1e-3, alpha=0.05, steps=60, batch_size=16,
                      metric=MetricConfig(kind="stochria", seed=1))
    result = run_search(model, calib, cfg)
    assert result.steps_run == 60

    calls = {"n": 0}
    real = mdprune.mirror.task_gradients

    def counting(*a, **k):
        calls["n"] += 1
        return real(*a, **k)

    monkeypatch.setattr(mdprune.mirror, "task_gradients", counting)
    budgets = sorted(budget_from_sparsity(result.gamma_star, s)
                     for s in (0.7, 0.6, 0.5))
    masks = sparsity_sweep(result.gamma_star, budgets, "per-layer")
    rows = [{"sparsity": 1.0 - b / masks[0].total(),
             "ppl": H.evaluate_perplexity(model, mask, held)}
            for b, mask in zip(budgets, masks)]
    ok = (len(masks) == 3 and calls["n"] == 0
          and all(np.isfinite(r["ppl"]) for r in rows)
          and all(m.kept_count() == b for b, m in zip(budgets, masks)))
    report("one search run serves {50,60,70}% budgets with zero extra "
           "search steps", ok)


def ablation_config(seed):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for k in ("model", "pretrain", "search"):
        cfg[k]["seed"] = seed
    cfg["corpus"]["generator"]["seed"] = seed
    cfg["search"]["metric"]["seed"] = seed
    cfg["search"]["batch_size"] = 32
    cfg["search"]["rho"] = 0.01
    cfg["export"]["sparsities"] = [0.6]
    return cfg


def test_ablation_ordering_at_sixty_percent():
    t0 = time.time()
    sums = {"mirror": [], "no-mirror": [], "random": []}
    for seed in range(5):
        cfg = ablation_config(seed)
        docs = generate_corpus(seed, cfg["corpus"]["generator"]["docs"],
                               cfg["corpus"]["generator"]["doc_len"])
        calib, held = H.build_splits(cfg, docs)
        model = build_toy_model(ModelConfig(**cfg["model"]))
        p = cfg["pretrain"]
        pretrain(model, calib, p["steps"], p["lr"], p["batch_size"], p["seed"])
        freeze_pretrained(model)
        collect_activation_stats(model, calib)
        for row in H.ablation_no_mirror(cfg, model, calib, held):
            sums[row["variant"]].append(row["ppl@60"])
    mirror = float(np.mean(sums["mirror"]))
    direct = float(np.mean(sums["no-mirror"]))
    rand = float(np.mean(sums["random"]))
    elapsed = time.time() - t0
    margin = (direct - mirror) / direct
    ok = mirror < direct <= rand and margin >= 0.01 and elapsed < 600
    report("ablation ordering at 60% sparsity (5 seeds): search < direct "
           "penalty <= random", ok,
           f"ppl {mirror:.2f} / {direct:.2f} / {rand:.2f}, "
           f"margin {margin:.1%}, {elapsed:.0f}s")


def test_frozen_weights_survive_full_pipeline(tmp_path):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["corpus"]["generator"] = {"seed": 2, "docs": 10, "doc_len": 64}
    cfg["model"]["depth"] = 1
    cfg["pretrain"]["steps"] = 60
    cfg["search"].update({"alpha": 0.02, "steps": 30, "batch_size": 8})
    cfg["output"]["dir"] = str(tmp_path / "run")
    manifest = H.RunManifest(cfg["output"]["dir"], cfg)
    model = H.stage_pretrain(cfg, manifest)
    before = w0_checksum(model)
    manifest2, _ = H.run_pipeline(cfg)
    after_live = w0_checksum(model)
    after_disk = w0_checksum(load_model(manifest2.artifact("model.mdpt")))
    ok = before == after_live == after_disk == manifest2.doc["w0_checksum"]
    report("frozen pretrained weights unchanged across the pipeline", ok,
           before[:12])
