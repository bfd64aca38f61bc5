"""Evaluation: oriented boundary precision/recall, depth metrics and depth-edge metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

ORIENTATION_TOL = math.pi / 2


def default_thresholds(n: int = 99) -> np.ndarray:
    """``n`` uniform thresholds strictly inside (0, 1)."""
    return np.arange(1, n + 1) / (n + 1)


def default_tolerance(shape) -> float:
    return 0.0075 * math.hypot(*shape)


@dataclass
class Correspondence:
    pairs: np.ndarray  # (n, 2, 2) matched (pred_yx, gt_yx)
    distances: np.ndarray
    unmatched_pred: np.ndarray  # (k, 2) yx
    unmatched_gt: np.ndarray

    @property
    def n_matched(self) -> int:
        return len(self.distances)


def match_boundaries(pred, gt, tol: float) -> Correspondence:
    """Greedy one-to-one matching of boundary pixels by increasing distance (<= tol).

    Ties in distance are broken by (pred index, gt index) in row-major order.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"size mismatch: {pred.shape} vs {gt.shape}")
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    P = np.argwhere(pred)
    G = np.argwhere(gt)
    empty2 = np.zeros((0, 2), dtype=int)
    if len(P) == 0 or len(G) == 0:
        return Correspondence(np.zeros((0, 2, 2), dtype=int), np.zeros(0), P if len(P) else empty2,
                              G if len(G) else empty2)
    sdm = cKDTree(P).sparse_distance_matrix(cKDTree(G), tol, output_type="ndarray")
    i, j, d = sdm["i"], sdm["j"], sdm["v"]
    mi, mj, md = _greedy(i.astype(np.int64), j.astype(np.int64), d, len(P), len(G))
    used_p = np.zeros(len(P), dtype=bool)
    used_g = np.zeros(len(G), dtype=bool)
    used_p[mi] = True
    used_g[mj] = True
    pairs = np.stack([P[mi], G[mj]], axis=1) if len(mi) else np.zeros((0, 2, 2), dtype=int)
    return Correspondence(pairs, md, P[~used_p], G[~used_g])


def _greedy(i, j, d, n_pred, n_gt):
    """Greedy matching over candidate edges sorted by (distance, i, j).

    Evaluated in rounds: an edge that ranks first among the remaining edges
    of both its endpoints is taken by the sequential greedy pass too, so
    taking all such edges at once gives the same matching.
    """
    order = np.lexsort((j, i, d))
    i, j, d = i[order], j[order], d[order]
    rank = np.arange(len(d))
    alive = np.ones(len(d), dtype=bool)
    out = []
    while alive.any():
        ii, jj, rr = i[alive], j[alive], rank[alive]
        best_p = np.full(n_pred, len(d))
        best_g = np.full(n_gt, len(d))
        np.minimum.at(best_p, ii, rr)
        np.minimum.at(best_g, jj, rr)
        take = (best_p[ii] == rr) & (best_g[jj] == rr)
        taken = rr[take]
        out.append(taken)
        free_p = np.ones(n_pred, dtype=bool)
        free_g = np.ones(n_gt, dtype=bool)
        free_p[i[taken]] = False
        free_g[j[taken]] = False
        alive &= free_p[i] & free_g[j]
    sel = np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=int)
    return i[sel], j[sel], d[sel].astype(np.float64)


@dataclass
class PRPoint:
    threshold: float
    matched_pred: int
    pred_total: int
    matched_gt_orient_ok: int
    gt_total: int

    @property
    def recall(self) -> float:
        return self.matched_pred / self.gt_total if self.gt_total else 0.0

    @property
    def precision(self) -> float:
        return self.matched_gt_orient_ok / self.pred_total if self.pred_total else 0.0

    @property
    def f_measure(self) -> float:
        return f_measure(self.precision, self.recall)


def f_measure(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def angular_distance(a, b):
    d = np.abs(np.mod(a - b + np.pi, 2 * np.pi) - np.pi)
    return d


def opr_curve(pred_b, pred_o, gt_b, gt_o, thresholds=None, tol=None) -> list:
    """Occlusion precision/recall at each threshold.

    ``pred_b`` is a (NMS-thinned) probability map, ``gt_b`` a hard mask,
    ``*_o`` orientation angle maps (NaN where undefined).  Recall counts
    matched ground-truth pixels; precision counts matched predictions whose
    orientation is within pi/2 of the matched ground-truth orientation.
    """
    pred_b = np.asarray(pred_b, dtype=np.float64)
    gt_b = np.asarray(gt_b) > 0
    if pred_b.shape != gt_b.shape:
        raise ValueError(f"size mismatch: {pred_b.shape} vs {gt_b.shape}")
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    tol = default_tolerance(gt_b.shape) if tol is None else tol
    gt_total = int(gt_b.sum())
    curve = []
    for t in thresholds:
        det = pred_b >= t
        corr = match_boundaries(det, gt_b, tol)
        ok = 0
        if corr.n_matched and (pred_o is None or gt_o is None):
            ok = corr.n_matched
        elif corr.n_matched:
            pp, gg = corr.pairs[:, 0], corr.pairs[:, 1]
            a = pred_o[pp[:, 0], pp[:, 1]]
            b = gt_o[gg[:, 0], gg[:, 1]]
            with np.errstate(invalid="ignore"):
                good = np.isfinite(a) & np.isfinite(b) & (angular_distance(a, b) <= ORIENTATION_TOL)
            ok = int(good.sum())
        curve.append(PRPoint(float(t), corr.n_matched, int(det.sum()), ok, gt_total))
    return curve


@dataclass
class EvalSummary:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    curves: list = field(default_factory=list, repr=False)

    def report(self) -> dict:
        return {"ODS": self.ods, "OIS": self.ois, "AP": self.ap, "ODS_threshold": self.ods_threshold}


def _aggregate(curves):
    n = len(curves[0])
    agg = []
    for k in range(n):
        pts = [c[k] for c in curves]
        agg.append(PRPoint(pts[0].threshold, sum(p.matched_pred for p in pts), sum(p.pred_total for p in pts),
                           sum(p.matched_gt_orient_ok for p in pts), sum(p.gt_total for p in pts)))
    return agg


def average_precision(points) -> float:
    """Trapezoidal area under P(R) over the achieved recalls.

    Thresholds with no detections carry no precision and are skipped; the
    curve is extended flat from its lowest achieved recall down to recall 0.
    """
    pts = sorted(((p.recall, p.precision) for p in points if p.pred_total > 0))
    if not pts:
        return 0.0
    r = np.array([0.0] + [a for a, _ in pts])
    pr = np.array([pts[0][1]] + [b for _, b in pts])
    return float(np.sum(np.diff(r) * (pr[1:] + pr[:-1]) / 2))


def summarize(curves) -> EvalSummary:
    if not curves:
        raise ValueError("need at least one image")
    if len({len(c) for c in curves}) != 1:
        raise ValueError("all curves must share the threshold grid")
    agg = _aggregate(curves)
    fs = [p.f_measure for p in agg]
    k = int(np.argmax(fs))
    ois = float(np.mean([max(p.f_measure for p in c) for c in curves]))
    return EvalSummary(float(fs[k]), ois, average_precision(agg), agg[k].threshold, list(curves))


@dataclass
class DepthMetrics:
    rel: float
    log10: float
    rmse_lin: float
    rmse_log: float
    sigma1: float
    sigma2: float
    sigma3: float

    def report(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt) -> DepthMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"size mismatch: {pred.shape} vs {gt.shape}")
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(pred) & np.isfinite(gt) & (pred > 0) & (gt > 0)
    if not ok.any():
        raise ValueError("no jointly valid pixel")
    p, g = pred[ok], gt[ok]
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rmse_lin=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        sigma1=float(np.mean(ratio < 1.25)),
        sigma2=float(np.mean(ratio < 1.25**2)),
        sigma3=float(np.mean(ratio < 1.25**3)),
    )


@dataclass
class EdgeMetrics:
    eps_acc: float
    eps_comp: float

    def report(self) -> dict:
        return asdict(self)


def edge_metrics(pred_edges, gt_edges, trunc: float = 10.0) -> EdgeMetrics:
    """Mean truncated Euclidean distances pred->gt (accuracy) and gt->pred (completion)."""
    pred = np.asarray(pred_edges) > 0
    gt = np.asarray(gt_edges) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"size mismatch: {pred.shape} vs {gt.shape}")
    if not trunc > 0:
        raise ValueError("truncation must be positive")
    if not gt.any():
        raise ValueError("ground truth has no edge pixel")
    dt_gt = ndimage.distance_transform_edt(~gt)
    acc = float(np.mean(np.minimum(dt_gt[pred], trunc))) if pred.any() else float(trunc)
    if pred.any():
        dt_pred = ndimage.distance_transform_edt(~pred)
        comp = float(np.mean(np.minimum(dt_pred[gt], trunc)))
    else:
        comp = float(trunc)
    return EdgeMetrics(acc, comp)


def format_report(values: dict) -> str:
    """``name=value`` lines, one metric per line, in insertion order."""
    return "".join(f"{k}={v!r}\n" for k, v in values.items())


def format_table(values: dict) -> str:
    width = max(len(k) for k in values) if values else 0
    rows = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
    rows += [f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}" for k, v in values.items()]
    return "\n".join(rows) + "\n"
