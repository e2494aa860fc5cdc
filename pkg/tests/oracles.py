"""Brute-force reference implementations used only by the tests.

They share no code with the package: plain Python loops and full distance
matrices, written from the definitions.
"""
import math

import mpmath
import numpy as np


def info_nce_reference(anchor, positives, negatives, tau, dps=50):
    """Direct evaluation of the per-anchor loss in extended precision."""
    mpmath.mp.dps = dps
    tau = mpmath.mpf(tau)

    def dot(u, v):
        return sum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(u, v))

    negsum = sum(mpmath.e ** (dot(anchor, n) / tau) for n in negatives)
    total = mpmath.mpf(0)
    for p in positives:
        e = mpmath.e ** (dot(anchor, p) / tau)
        total += -mpmath.log(e / (e + negsum))
    return float(total / len(positives))


def dbscan_reference(points, eps, min_pts):
    """Density-connectivity by transitive closure over the core-point graph.

    Border points take the component of their lowest-index core neighbour.
    Returns a list of cluster sets and the noise set.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return [], set()
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    near = dist <= eps
    core = near.sum(1) >= min_pts
    reach = near & core[:, None] & core[None, :]
    closure = reach.copy()
    for k in range(n):
        closure |= closure[:, k:k + 1] & closure[k:k + 1, :]
    comp = {}
    for i in range(n):
        if core[i]:
            comp[i] = min(j for j in range(n) if closure[i, j])
    clusters = {}
    noise = set()
    for i in range(n):
        if core[i]:
            clusters.setdefault(comp[i], set()).add(i)
        else:
            cores = [j for j in range(n) if near[i, j] and core[j]]
            if cores:
                clusters.setdefault(comp[min(cores)], set()).add(i)
            else:
                noise.add(i)
    return list(clusters.values()), noise


def partition_of(labels):
    labels = list(labels)
    groups = {}
    for i, l in enumerate(labels):
        if l >= 0:
            groups.setdefault(l, set()).add(i)
    return sorted(map(sorted, groups.values())), {i for i, l in enumerate(labels) if l < 0}


def _iou(a, b):
    a, b = set(a), set(b)
    return len(a & b) / len(a | b)


def coverage_reference(gt_frames, pred_frames):
    per_class = {}
    for gt, pred in zip(gt_frames, pred_frames):
        for cls, g in gt:
            best = 0.0
            for c, p, _conf in pred:
                if c == cls:
                    best = max(best, _iou(g, p))
            per_class.setdefault(cls, []).append(best)
    means = {c: sum(v) / len(v) for c, v in per_class.items()}
    return means, (sum(means.values()) / len(means) if means else 0.0)


def ap_reference(gt_frames, pred_frames, threshold=0.5):
    classes = sorted({c for gt in gt_frames for c, _ in gt})
    aps = {}
    for cls in classes:
        n_gt = sum(1 for gt in gt_frames for c, _ in gt if c == cls)
        preds = []
        for f, pred in enumerate(pred_frames):
            for k, (c, p, conf) in enumerate(pred):
                if c == cls:
                    preds.append((conf, f, k, p))
        preds.sort(key=lambda t: (-t[0], t[1], t[2]))
        used = set()
        hits = []
        for conf, f, k, p in preds:
            options = [(j, _iou(g, p)) for j, (c, g) in enumerate(gt_frames[f])
                       if c == cls and (f, j) not in used]
            if options:
                j, best = max(options, key=lambda t: (t[1], -t[0]))
                if best >= threshold:
                    used.add((f, j))
                    hits.append(True)
                    continue
            hits.append(False)
        # precision at every rank, then integrate the upper envelope over recall
        precisions, recalls, tp = [], [], 0
        for r, h in enumerate(hits, 1):
            tp += h
            precisions.append(tp / r)
            recalls.append(tp / n_gt)
        ap = 0.0
        prev_recall = 0.0
        for r, h in enumerate(hits):
            if h:
                ap += (recalls[r] - prev_recall) * max(precisions[r:])
                prev_recall = recalls[r]
        aps[cls] = ap
    return aps, (sum(aps.values()) / len(aps) if aps else 0.0)


def random_scene(rng, n_frames=2, max_inst=5, max_points=60, n_class=3):
    """Ground truth and noisy predictions over random point partitions."""
    gts, preds = [], []
    for _ in range(n_frames):
        n_points = int(rng.integers(5, max_points + 1))
        k = int(rng.integers(1, max_inst + 1))
        owner = rng.integers(0, k, size=n_points)
        gt = []
        for inst in range(k):
            idx = np.flatnonzero(owner == inst).tolist()
            if idx:
                gt.append((int(rng.integers(0, n_class)), idx))
        pred = []
        for _ in range(int(rng.integers(0, max_inst + 2))):
            size = int(rng.integers(1, n_points + 1))
            idx = sorted(rng.choice(n_points, size=size, replace=False).tolist())
            if rng.random() < 0.5 and gt:
                base = gt[int(rng.integers(0, len(gt)))]
                keep = [i for i in base[1] if rng.random() < 0.8] or base[1][:1]
                pred.append((base[0] if rng.random() < 0.8 else int(rng.integers(0, n_class)), keep,
                             float(rng.random())))
            else:
                pred.append((int(rng.integers(0, n_class)), idx, float(rng.random())))
        gts.append(gt)
        preds.append(pred)
    return gts, preds


def central_difference(f, x, step=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)


__all__ = [name for name in dir() if not name.startswith("_") and name not in ("math", "mpmath", "np")]
