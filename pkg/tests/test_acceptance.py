"""Acceptance gate: one recorded verdict per criterion (see the terminal summary).

The trend checks (7, 8) train every regime on five seeds of the default
2000-frame corpus and take roughly 20 minutes on one CPU core.
"""
import math
import time

import numpy as np
import pytest

from radcon import diffcore as dc
from radcon.clustering import DbscanParams, dbscan
from radcon.config import TrainConfig
from radcon.contrastive import info_nce_batch, info_nce_point
from radcon.experiments import corpus_splits, run_trend_study
from radcon.metrics import map_at_iou, mean_coverage
from radcon.netmodel import ModelConfig, classify, extract_features, init_model, project
from radcon.pipeline import infer
from radcon.selection import FeatureQueue, SelectionError, select_balanced
from radcon.synthdata import generate_corpus, mask_labels, split_dataset
from radcon.trainer import run_regime

from oracles import ap_reference, coverage_reference, dbscan_reference, partition_of, random_scene

SEEDS = (0, 1, 2, 3, 4)
TINY = ModelConfig(local_widths=(6, 8), global_widths=(8, 6), proj_hidden=6, proj_dim=4, cls_hidden=6, n_class=3)
FAST = dict(n_minibatch=16, n_sample=40, n_point=25, steps_per_epoch=4, batch_size=256,
            epochs_representation=2, epochs_finetune=2, epochs_joint=2, epochs_supervised=2)
GRID = (DbscanParams(1.0, 1, 0.0), DbscanParams(2.0, 2, 0.0))


# 1 ------------------------------------------------------------------------------------

def test_gradients_match_finite_differences(criterion):
    # Checked at generic points: zero-initialised biases can park a unit
    # exactly on a ReLU kink, where central differences straddle two slopes.
    # The 1e-6 floor covers structurally zero gradients (a bias feeding
    # batch norm), whose analytic and numeric values are both rounding noise.
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    labels = np.tile([0, 1, 2], 4)
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        params = init_model(TINY, seed)
        arrays = {k: v + rng.normal(0.0, 0.1, v.shape) for k, v in params.arrays().items()}
        pts = rng.normal(size=(1, 12, 4))

        def loss_fn(tensors, params=params, pts=pts, seed=seed):
            feats = extract_features(params, pts, tensors)
            nce = info_nce_batch(project(params, feats, tensors), labels, 0.1)
            logits = classify(params, feats, True, np.random.default_rng(seed), tensors)
            return nce + dc.cross_entropy(logits, labels) * 0.5

        errors = dc.check_gradients(loss_fn, arrays, step=1e-5, floor=1e-6)
        name = max(errors, key=errors.get)
        if errors[name] > worst:
            worst, worst_name = errors[name], name
    seconds = time.perf_counter() - t0
    ok = worst < 1e-4 and seconds < 120
    criterion("1", ok, f"max relative error {worst:.2e} (< 1e-4, at {worst_name}) over extractor, both heads, "
                       f"CE and InfoNCE paths, 5 seeds, {seconds:.1f}s (< 120s)")
    assert ok


# 2 ------------------------------------------------------------------------------------

def test_info_nce_analytic_cases(criterion):
    worst = 0.0
    v = np.array([0.6, 0.8])
    for m in (1, 4, 200):
        for tau in (0.07, 0.1, 0.5):
            worst = max(worst, abs(info_nce_point(v, np.tile(v, (2, 1)), np.tile(v, (m, 1)), tau) - math.log(1 + m)))
    rng = np.random.default_rng(0)
    exact = True
    for _ in range(200):
        f = rng.normal(size=(12, 3))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        neg = f[3:]
        base = info_nce_point(f[0], f[1:3], neg, 0.1)
        exact &= info_nce_point(f[0], f[1:3], neg[rng.permutation(len(neg))], 0.1) == base
    ok = worst < 1e-9 and exact
    criterion("2", ok, f"|L - log(1+|N|)| max {worst:.1e} (< 1e-9); negative permutations bit-exact: {exact}")
    assert ok


# 3 ------------------------------------------------------------------------------------

def test_dbscan_matches_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        n, d = int(rng.integers(1, 201)), int(rng.choice([2, 3]))
        pts = rng.uniform(0, 10, size=(n, d))
        eps, min_pts = float(rng.uniform(0.2, 2.0)), int(rng.integers(1, 7))
        clusters, noise = dbscan_reference(pts, eps, min_pts)
        expected = (sorted(sorted(c) for c in clusters), noise)
        mismatches += partition_of(dbscan(pts, eps, min_pts)) != expected
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < 60
    criterion("3", ok, f"{100 - mismatches}/100 partitions identical to the oracle, {seconds:.1f}s (< 60s)")
    assert ok


# 4 ------------------------------------------------------------------------------------

def test_metrics_match_oracle(criterion):
    worst = 0.0
    for seed in range(50):
        gt, pred = random_scene(np.random.default_rng(seed), n_frames=3)
        worst = max(worst, abs(mean_coverage(gt, pred)[1] - coverage_reference(gt, pred)[1]),
                    abs(map_at_iou(gt, pred)[1] - ap_reference(gt, pred)[1]))
    gt = [[(0, [0, 1, 2]), (1, [3, 4])], [(2, [0, 1])]]
    perfect = [[(c, idx, 0.5) for c, idx in f] for f in gt]
    wrong = [[((c + 1) % 3, idx, 0.5) for c, idx in f] for f in gt]
    ends = (mean_coverage(gt, perfect)[1], map_at_iou(gt, perfect)[1], mean_coverage(gt, [[], []])[1],
            map_at_iou(gt, [[], []])[1], mean_coverage(gt, wrong)[1], map_at_iou(gt, wrong)[1])
    ok = worst <= 1e-12 and ends == (1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    criterion("4", ok, f"max |package - oracle| {worst:.1e} (<= 1e-12) on 50 scenes; endpoints {ends}")
    assert ok


# 5 ------------------------------------------------------------------------------------

def test_selection_invariants(criterion):
    rng = np.random.default_rng(5)
    n_class, per_class, capacity = 5, 50, 1024
    queue = FeatureQueue(n_class, capacity)
    violations, selections, raised = 0, 0, 0
    for _ in range(10_000):
        mix = rng.dirichlet(np.full(n_class, 0.7))
        labels = rng.choice(n_class, size=int(rng.integers(20, 400)), p=mix)
        feats = rng.normal(size=(len(labels), 4))
        counts = np.bincount(labels, minlength=n_class)
        have = queue.counts()
        feasible = np.all(counts + have >= per_class)
        try:
            sel = select_balanced(feats, labels, queue, per_class, rng)
        except SelectionError:
            raised += 1
            violations += feasible
        else:
            selections += 1
            violations += not feasible
            for c in range(n_class):
                mine = sel.labels == c
                violations += mine.sum() != per_class
                violations += sel.from_queue[mine].sum() != max(0, per_class - counts[c])
        queue.update(feats, labels)
        violations += any(queue.count(c) > capacity for c in range(n_class))
    ok = violations == 0 and selections > 9_000
    criterion("5", ok, f"{selections} selections + {raised} refused shortfalls, {violations} invariant violations")
    assert ok


# 6 ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    train, val, test = split_dataset(generate_corpus(200, seed=11), seed=11)
    return mask_labels(train, 0.5, seed=11), val, test


def test_freeze_and_path_invariants(criterion, small_corpus):
    train, val, test = small_corpus
    cfg = TrainConfig(**FAST)
    nonjoint = run_regime(cfg, train, val, test, grid=GRID)
    rep = nonjoint.checkpoints["representation"]
    frozen = all(nonjoint.model.extractor[k].tobytes() == v.tobytes() for k, v in rep.extractor.items())

    base = infer(nonjoint.model, test, nonjoint.clustering)
    shaken = nonjoint.model.copy()
    for k in shaken.projection:
        shaken.projection[k] = shaken.projection[k] + np.random.default_rng(1).normal(size=shaken.projection[k].shape)
    moved = infer(shaken, test, nonjoint.clustering)
    same_path = all(a.classes.tobytes() == b.classes.tobytes() and a.instances.tobytes() == b.instances.tobytes()
                    and a.confidences == b.confidences for a, b in zip(base, moved))

    joint = run_regime(cfg.replace(regime="joint_full", alpha=0.7), train, val, test, grid=GRID)
    additive = all(r["l_total"] == r["l_nce"] + 0.7 * r["l_ce"] for r in joint.trace)
    ok = frozen and same_path and additive
    criterion("6", ok, f"fine-tune extractor bytes unchanged: {frozen}; inference independent of projection "
                       f"head: {same_path}; joint rows additive: {additive} ({len(joint.trace)} rows)")
    assert ok


# 7, 8, 9 ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def study():
    return run_trend_study(SEEDS)


def _fmt(values):
    return " ".join(f"{100 * values[s]:.2f}" for s in sorted(values))


def test_contrastive_beats_supervised(criterion, study):
    sup, non = study.mean("supervised", 0.05), study.mean("nonjoint_full", 0.05)
    ok = non > sup
    criterion("7a", ok, f"nonjoint_full {100 * non:.2f} > supervised {100 * sup:.2f} "
                        f"(seeds: {_fmt(study.values('nonjoint_full', 0.05))} vs {_fmt(study.values('supervised', 0.05))})")
    assert ok


def test_semi_keeps_up(criterion, study):
    non, semi = study.values("nonjoint_full", 0.05), study.values("nonjoint_semi", 0.05)
    m_non, m_semi = study.mean("nonjoint_full", 0.05), study.mean("nonjoint_semi", 0.05)
    wins = sum(semi[s] > non[s] for s in SEEDS)
    ok = m_semi >= m_non - 0.005 and wins >= 3
    criterion("7b", ok, f"nonjoint_semi {100 * m_semi:.2f} >= nonjoint_full {100 * m_non:.2f} - 0.5, "
                        f"higher in {wins}/5 seeds (needs 3; seeds: {_fmt(semi)})")
    assert ok


def test_joint_keeps_up(criterion, study):
    non, joint = study.mean("nonjoint_full", 0.05), study.mean("joint_full", 0.05)
    ok = joint >= non - 0.005
    criterion("7c", ok, f"joint_full {100 * joint:.2f} >= nonjoint_full {100 * non:.2f} - 0.5 "
                        f"(seeds: {_fmt(study.values('joint_full', 0.05))})")
    assert ok


def test_regime_runtime(criterion, study):
    longest = {}
    for r in study.results:
        longest[r.regime] = max(longest.get(r.regime, 0.0), r.seconds)
    # the semi run reuses a finished non-joint model; charge its training time too
    semi_total = max(r.seconds + n.seconds for r in study.results if r.regime == "nonjoint_semi"
                     for n in study.results if n.regime == "nonjoint_full" and n.seed == r.seed
                     and n.labeled_fraction == r.labeled_fraction)
    worst = max(max(longest.values()), semi_total)
    ok = worst < 15 * 60
    criterion("7d", ok, f"slowest regime run {worst:.0f}s (< 900s)")
    assert ok


def test_label_budget_is_monotone(criterion, study):
    means = [study.mean("nonjoint_full", p) for p in (0.05, 0.2, 1.0)]
    ok = all(b >= a - 0.005 for a, b in zip(means, means[1:]))
    criterion("8", ok, "nonjoint_full mAP over p = 0.05, 0.2, 1.0: " + " -> ".join(f"{100 * m:.2f}" for m in means))
    assert ok


def test_reruns_are_bit_identical(criterion, study, small_corpus, tmp_path):
    # default configuration: rerun two regimes of seed 0 and compare against the study
    train, val, test = corpus_splits(0, 2000, 0.05)
    rerun = {r: run_regime(TrainConfig(regime=r), train, val, test).metrics for r in ("supervised", "joint_full")}
    full_ok = all(rerun[r].map50 == study.values(r, 0.05)[0] for r in rerun)
    # every regime, twice, at reduced size: compare the written metrics bytes
    train, val, test = small_corpus
    same = []
    for regime in ("supervised", "nonjoint_full", "nonjoint_semi", "joint_full", "joint_semi"):
        cfg = TrainConfig(regime=regime, threshold=0.21, **FAST)
        for tag in ("a", "b"):
            run_regime(cfg, train, val, test, tmp_path / f"{regime}_{tag}", grid=GRID)
        same.append((tmp_path / f"{regime}_a/metrics.jsonl").read_bytes()
                    == (tmp_path / f"{regime}_b/metrics.jsonl").read_bytes())
    ok = full_ok and all(same)
    criterion("9", ok, f"default-size reruns identical: {full_ok}; all 5 regimes rerun identical: {all(same)}")
    assert ok
