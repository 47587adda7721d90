"""Point-cloud and range-image evaluation metrics.

Conventions: Chamfer distance uses unsquared Euclidean nearest-neighbor
distances averaged in both directions with a 1/2 factor. Inner Chamfer keeps
only source points within a planar radius of the sensor, matching against the
full other cloud. AbsRel is reported in percent. Metrics that are undefined on
a given input (empty filtered sets, zero-mean series) return ``None`` rather
than raising, so callers can mark the record as absent.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

EMD_EXACT_LIMIT = 64
EMD_SUBSAMPLE_CAP = 256


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {p.shape}")
    return p


def chamfer(p, q) -> float:
    """Symmetric Chamfer distance in meters between two non-empty clouds."""
    p, q = _as_points(p), _as_points(q)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer requires non-empty clouds")
    d_pq = cKDTree(q).query(p)[0]
    d_qp = cKDTree(p).query(q)[0]
    return 0.5 * (d_pq.mean() + d_qp.mean())


def chamfer_inner(p, q, radius: float = 10.0) -> float | None:
    """Chamfer restricted to points within planar ``radius`` of the sensor.

    Each direction filters its own source set; targets stay unfiltered.
    Returns None when both filtered sets are empty.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    p, q = _as_points(p), _as_points(q)
    p_in = p[np.hypot(p[:, 0], p[:, 1]) <= radius]
    q_in = q[np.hypot(q[:, 0], q[:, 1]) <= radius]
    terms = []
    if len(p_in) and len(q):
        terms.append(cKDTree(q).query(p_in)[0].mean())
    if len(q_in) and len(p):
        terms.append(cKDTree(p).query(q_in)[0].mean())
    if not terms:
        return None
    return 0.5 * sum(terms) if len(terms) == 2 else 0.5 * terms[0]


def depth_errors(r, r_hat, valid=None) -> tuple[float, float] | None:
    """(L1 meters, AbsRel percent) over mutually valid pixels; None if none."""
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r.shape != r_hat.shape:
        raise ValueError("range grids must share a shape")
    mask = np.ones(r.shape, dtype=bool) if valid is None else np.asarray(valid, bool)
    if not mask.any():
        return None
    diff = np.abs(r[mask] - r_hat[mask])
    return float(diff.mean()), float(100.0 * (diff / r[mask]).mean())


def stability_ratio(errs) -> float | None:
    """|1 - median/mean| of an error series; None when the mean is zero."""
    errs = np.asarray(errs, dtype=np.float64)
    if errs.size == 0:
        raise ValueError("empty error series")
    mean = errs.mean()
    if mean == 0.0:
        return None
    return float(abs(1.0 - np.median(errs) / mean))


def bev_histogram(points, bins: int = 100, extent: float = 100.0) -> np.ndarray:
    """Unnormalized B x B occupancy counts over an ego-centered square extent."""
    p = _as_points(points)
    half = extent / 2.0
    edges = np.linspace(-half, half, bins + 1)
    hist, _, _ = np.histogram2d(p[:, 0], p[:, 1], bins=(edges, edges))
    return hist


def _normalize(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        raise ValueError("histogram has zero total mass")
    return h / total


def jsd(h1, h2) -> float:
    """Base-2 Jensen-Shannon divergence between two histograms, in [0, 1]."""
    p = _normalize(h1).ravel()
    q = _normalize(h2).ravel()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def mmd(gen_histograms, ref_histograms) -> float:
    """Mean over reference histograms of the min squared-L2 gap to any generated one.

    Histograms are normalized before comparison. Reports multiply this by 1e4
    (the conventional "MMD x 1e-4" column); the raw value is returned here.
    """
    gen = [_normalize(h).ravel() for h in gen_histograms]
    ref = [_normalize(h).ravel() for h in ref_histograms]
    if not gen or not ref:
        raise ValueError("mmd requires non-empty histogram sets")
    gen_mat = np.stack(gen)
    total = 0.0
    for r in ref:
        total += float(np.min(np.sum((gen_mat - r) ** 2, axis=1)))
    return total / len(ref)


class EmdResult(NamedTuple):
    meters: float
    exact: bool


def emd_small(p, q, cap: int = EMD_SUBSAMPLE_CAP, seed: int = 0) -> EmdResult:
    """Earth mover's distance via minimum-cost perfect matching, mean meters.

    Both clouds are uniformly subsampled to min(|P|, |Q|, cap) points. The
    assignment is exact (Hungarian) up to EMD_EXACT_LIMIT points; above that a
    greedy matching refined by pairwise swaps is used and flagged inexact.
    """
    p, q = _as_points(p), _as_points(q)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("emd_small requires non-empty clouds")
    n = min(len(p), len(q), cap)
    rng = np.random.default_rng(seed)
    if len(p) > n:
        p = p[rng.choice(len(p), size=n, replace=False)]
    if len(q) > n:
        q = q[rng.choice(len(q), size=n, replace=False)]

    cost = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    if n <= EMD_EXACT_LIMIT:
        rows, cols = linear_sum_assignment(cost)
        return EmdResult(float(cost[rows, cols].mean()), True)
    return EmdResult(_greedy_refined_matching(cost), False)


def _greedy_refined_matching(cost: np.ndarray, sweeps: int = 2) -> float:
    n = cost.shape[0]
    match = np.full(n, -1, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    # greedy: cheapest available column per row, rows in random-free order
    order = np.argsort(cost.min(axis=1))
    for i in order:
        c = np.where(used, np.inf, cost[i])
        j = int(np.argmin(c))
        match[i] = j
        used[j] = True
    # 2-swap refinement
    for _ in range(sweeps):
        improved = False
        for i in range(n):
            for k in range(i + 1, n):
                a, b = match[i], match[k]
                if cost[i, b] + cost[k, a] < cost[i, a] + cost[k, b] - 1e-15:
                    match[i], match[k] = b, a
                    improved = True
        if not improved:
            break
    return float(cost[np.arange(n), match].mean())
