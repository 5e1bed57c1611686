"""Acceptance gate: every release criterion, one test each, fixed tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion.
"""

import time

import numpy as np

from adaptfly.cmaes import CmaConfig, optimize_svp, run_benchmark
from adaptfly.distill import (
    DistillConfig,
    closed_form_solution,
    distill_iterative,
    distill_objective,
    prompt_data_bytes,
)
from adaptfly.drift import (
    ActivationStats,
    DriftTracker,
    calibrate_threshold,
    detect,
    divergence,
    kl_gaussian,
)
from adaptfly.fleet import (
    InprocClient,
    MecServer,
    ProvenanceLog,
    Query,
    RefineTick,
    UploadPrompt,
    metrics_csv,
    reference_config,
    run_scenario,
)
from adaptfly.fleet.messages import decode_message, encode_message
from adaptfly.memory import PoolConfig, PromptPool
from adaptfly.oracle import DomainSpec, make_toy_oracle, render_frame
from adaptfly.prompts import SparseVisualPrompt, TokenPrompt, place_mask, sparsity_budget

from test_messages import random_message


def report(name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {name}: {status}  {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_optimizer_regression():
    start = time.monotonic()
    sphere_hits = rosen_hits = 0
    for seed in range(5):
        r = run_benchmark("sphere", 20, "full-cma", seed,
                          max_evaluations=10_000, target=1e-8)
        sphere_hits += r.best_fitness < 1e-8 and r.evaluations <= 10_000
    for seed in range(5):
        r = run_benchmark("rosenbrock", 10, "full-cma", seed,
                          max_evaluations=50_000, target=1e-4)
        rosen_hits += r.best_fitness < 1e-4 and r.evaluations <= 50_000
    elapsed = time.monotonic() - start
    report(
        "1 optimizer-regression",
        sphere_hits >= 4 and rosen_hits >= 4 and elapsed < 60.0,
        f"sphere {sphere_hits}/5, rosenbrock {rosen_hits}/5, {elapsed:.1f}s",
    )


def test_criterion_2_literal_elite_mode():
    oracle = make_toy_oracle(seed=7)
    domain = DomainSpec(id="shift", gain=(0.75, 0.8, 0.72), bias=(-0.15, 0.12, -0.1),
                        noise_scale=0.01, seed=4)
    frame = render_frame(oracle, domain, 0)
    umap = oracle.uncertainty_map(frame, passes=4, dropout_rate=0.1, seed=9)
    coords = place_mask(umap, sparsity_budget(0.05, 32, 32))
    cfg = CmaConfig(dimension=3 * coords.shape[0], population=16, elite=4,
                    generations=30, sigma0=0.3, mode="elite-eda", seed=1)
    result = optimize_svp(oracle, frame, coords, cfg)
    monotone = all(a >= b for a, b in zip(result.history, result.history[1:]))
    rel = (result.baseline_fitness - result.best_fitness) / result.baseline_fitness

    # never-worse guarantee on a clean frame (nothing to gain)
    clean = oracle.base_image()
    clean_coords = place_mask(oracle.uncertainty_map(clean, 1, 0.0, 0), coords.shape[0])
    clean_cfg = CmaConfig(dimension=3 * coords.shape[0], population=16, elite=4,
                          generations=10, sigma0=0.3, mode="elite-eda", seed=2)
    clean_result = optimize_svp(oracle, clean, clean_coords, clean_cfg)
    never_worse = clean_result.best_fitness <= clean_result.baseline_fitness

    report(
        "2 literal-elite-mode",
        monotone and rel >= 0.02 and never_worse and len(result.history) <= 30,
        f"relative entropy reduction {100 * rel:.2f}%, generations {len(result.history)}",
    )


def test_criterion_3_drift_detection():
    channels, warmup, n_frames, inject_at = 8, 10, 1000, 500
    rng = np.random.default_rng(42)
    base_mean = rng.uniform(-1, 1, channels)
    base_std = rng.uniform(0.5, 1.5, channels)

    def stream(shift_size=0.0):
        r = np.random.default_rng(7)
        frames = []
        for t in range(n_frames):
            means = base_mean + 0.02 * base_std * r.standard_normal(channels)
            stds = base_std * (1 + 0.01 * r.standard_normal(channels))
            if t >= inject_at:
                means = means + shift_size
            frames.append(ActivationStats(means, stds))
        return frames

    clean = stream()
    calib = DriftTracker(smoothing=0.1, threshold=1.0, warmup=warmup)
    calib_scores = [detect(calib, f)[1] for f in clean[:inject_at]][warmup:]
    z = calibrate_threshold(calib_scores, 0.99)

    pooled = float(np.mean(np.std([f.means for f in clean[:inject_at]], axis=0)))
    shifted = stream(shift_size=5 * pooled)
    tracker = DriftTracker(smoothing=0.1, threshold=z, warmup=warmup)
    flags = [detect(tracker, f)[0] for f in shifted]
    fpr = sum(flags[:inject_at]) / inject_at
    first = next((i for i in range(inject_at, n_frames) if flags[i]), None)
    latency_ok = first is not None and first - inject_at <= 3

    # exact simplified-КL substitution values: 0.5 per direction per channel
    exact = all(
        kl_gaussian((m, s), (m, s), "simplified") == 0.5
        for m, s in ((0.0, 1.0), (2.5, 0.3), (-4.0, 7.0))
    )
    stats = ActivationStats(rng.normal(size=5), rng.uniform(0.5, 2.0, 5))
    exact = exact and divergence(stats, stats, "simplified") == 1.0

    report(
        "3 drift-detection",
        fpr <= 0.01 and latency_ok and exact,
        f"fpr {100 * fpr:.2f}%, latency {None if first is None else first - inject_at} frames",
    )


def test_criterion_4_retrieval_matches_brute_force():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        dim = int(rng.integers(2, 8))
        count = int(rng.integers(1, 24))
        pool = PromptPool(PoolConfig(capacity=64, merge_threshold=1.0))
        keys = []
        for i in range(count):
            k = rng.normal(size=dim)
            if keys and rng.random() < 0.25:
                k = keys[rng.integers(0, len(keys))].copy()  # cosine ties
            keys.append(k)
            pool.insert(k, TokenPrompt(np.zeros((1, 2))), timestamp=i, agent_id="a")
        pool.refine()
        q = rng.normal(size=dim)
        n = int(rng.integers(1, 8))
        got = [e.entry_id for e in pool.query_topn(q, n)]
        qn = q / np.linalg.norm(q)
        entries = pool.entries()
        want = [
            e.entry_id
            for e in sorted(entries, key=lambda e: (-float(qn @ e.key), e.entry_id))
        ][: min(n, len(entries))]
        mismatches += got != want
    report("4 retrieval-oracle-equivalence", mismatches == 0,
           f"{1000 - mismatches}/1000 pools exact")


def test_criterion_5_distillation():
    oracle = make_toy_oracle(seed=7)
    rng = np.random.default_rng(11)
    worst_rel = 0.0
    failures = 0
    domain = DomainSpec(id="d", gain=(0.8, 0.78, 0.85), bias=(-0.2, 0.15, 0.1),
                        noise_scale=0.01, seed=5)
    frames = [render_frame(oracle, domain, i) for i in range(2)]
    cfg = DistillConfig(rows=8, steps=8, precision="f32")
    for _ in range(100):
        k = int(rng.integers(5, 60))
        flat = rng.choice(1024, size=k, replace=False)
        coords = np.stack([flat // 32, flat % 32], axis=1)
        svp = SparseVisualPrompt(coords, rng.normal(scale=0.25, size=(k, 3)), (32, 32))
        f_iter = distill_objective(
            oracle, frames, svp,
            np.asarray(distill_iterative(oracle, frames, svp, cfg).values, dtype=np.float64),
        )
        f_closed = distill_objective(
            oracle, frames, svp, closed_form_solution(oracle, frames, svp, rows=8)
        )
        rel = (f_iter - f_closed) / max(f_closed, 1e-300)
        worst_rel = max(worst_rel, rel)
        failures += rel > 1e-3

    sizes_ok = (
        prompt_data_bytes(TokenPrompt.zeros(8, 768), "f32") == 24576
        and prompt_data_bytes(TokenPrompt.zeros(8, 768), "f16") == 12288
    )
    report(
        "5 distillation",
        failures == 0 and sizes_ok,
        f"worst relative objective gap {worst_rel:.2e}; sizes 24576/12288 bytes",
    )


def test_criterion_6_consolidation():
    rng = np.random.default_rng(99)
    bad = 0
    for trial in range(500):
        dim = 4
        count = int(rng.integers(2, 14))
        cap = int(rng.integers(2, 8))
        entries = []
        for i in range(count):
            key = rng.normal(size=dim)
            if entries and rng.random() < 0.4:
                key = entries[rng.integers(0, len(entries))][0] + rng.normal(
                    scale=0.01, size=dim
                )
            entries.append((key, float(i)))

        def build(refine_points, capacity):
            pool = PromptPool(PoolConfig(capacity=capacity, merge_threshold=0.95,
                                         merge_weight=0.3))
            for i, (key, fill) in enumerate(entries):
                pool.insert(key, TokenPrompt(np.full((2, 3), fill)), timestamp=i,
                            agent_id=f"a{i}")
                if i in refine_points:
                    pool.refine()
            pool.refine()
            return pool

        # deterministic merge ordering under interleaving (capacity unbound)
        reference = build(set(), 1000)
        ref_state = [
            (e.entry_id, tuple(np.round(e.key, 10)), e.timestamp, e.agent_id)
            for e in reference.entries()
        ]
        points = set(int(x) for x in rng.choice(count, size=count // 2, replace=False))
        other = build(points, 1000)
        state = [
            (e.entry_id, tuple(np.round(e.key, 10)), e.timestamp, e.agent_id)
            for e in other.entries()
        ]
        bad += state != ref_state

        # idempotence
        before = [(e.entry_id, e.timestamp) for e in other.entries()]
        other.refine()
        bad += [(e.entry_id, e.timestamp) for e in other.entries()] != before

        # capacity enforcement
        capped = build(set(), cap)
        bad += capped.refined_size > cap

    # upload becomes query-visible after the next refine tick
    oracle = make_toy_oracle(seed=7)
    pool = PromptPool(PoolConfig())
    server = MecServer(pool, oracle, DistillConfig(rows=4), ProvenanceLog())
    client = InprocClient(server)
    key = tuple(np.eye(oracle.token_dim)[0])
    client.send(UploadPrompt(key=key, value=TokenPrompt(np.ones((2, 4))),
                             timestamp=0, agent_id="h"))
    invisible = client.request(Query(query=key, n=1, request_id=1)).entries == ()
    client.send(RefineTick())
    visible = len(client.request(Query(query=key, n=1, request_id=2)).entries) == 1

    report("6 consolidation", bad == 0 and invisible and visible,
           f"{500 - bad}/500 randomized sequences clean; tick visibility ok")


def test_criterion_7_fleet_benefit():
    start = time.monotonic()
    failures = []
    for seed in range(5):
        result = run_scenario(reference_config(seed=seed))
        for agent_id, agent in result.summary["agents"].items():
            if agent["kind"] != "limited":
                continue
            for dom in ("dusk", "fog", "rain"):
                d = agent["domains"][dom]
                pre = d["pre_adaptation_mean_entropy"]
                post = d["post_adaptation_mean_entropy"]
                if pre is None or post is None or not post < pre:
                    failures.append((seed, agent_id, dom, pre, post))
    elapsed = time.monotonic() - start
    report(
        "7 fleet-benefit",
        not failures and elapsed < 120.0,
        f"5/5 seeds, 2 limited agents x 3 shifted domains each, {elapsed:.1f}s"
        + (f"; failures: {failures}" if failures else ""),
    )


def test_criterion_8_protocol():
    rng = np.random.default_rng(31337)
    bad = sum(
        decode_message(encode_message(m)) != m
        for m in (random_message(rng) for _ in range(10_000))
    )
    a = run_scenario(reference_config(seed=2, transport="inproc"))
    b = run_scenario(reference_config(seed=2, transport="stream"))
    identical = metrics_csv(a.records) == metrics_csv(b.records)
    report("8 protocol", bad == 0 and identical,
           f"{10_000 - bad}/10000 round trips; stream==inproc metrics {identical}")
