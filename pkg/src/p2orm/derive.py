"""Occlusion boundaries and orientations derived from relation maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .relation import ABSENT, ProbRelationMap, RelationMap, pair_slices

NMS_SIGMA = 2.0
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class BoundaryMap:
    values: np.ndarray
    hard: bool

    def __post_init__(self):
        v = self.values
        if v.size and (np.nanmin(v) < 0 or np.nanmax(v) > 1):
            raise ValueError("boundary values must lie in [0, 1]")
        if self.hard and not np.isin(v, (0.0, 1.0)).all():
            raise ValueError("hard boundary maps hold only 0 and 1")

    @property
    def mask(self) -> np.ndarray:
        return self.values > 0

    @classmethod
    def from_mask(cls, mask):
        return cls(np.asarray(mask, dtype=bool).astype(np.float64), True)


@dataclass(frozen=True)
class OrientationMap:
    """Angles in (-pi, pi]; NaN where the accumulated direction vanishes."""

    theta: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.theta)


def boundary_from_relation(rel: RelationMap) -> BoundaryMap:
    """Mark every pixel that takes part in an occluding pair (2-pixel-wide boundary)."""
    b = np.zeros(rel.shape, dtype=bool)
    for incl in rel.inclinations:
        sp, sq = pair_slices(incl, rel.shape)
        nz = rel.nonzero(incl)[sp]
        b[sp] |= nz
        b[sq] |= nz
    return BoundaryMap.from_mask(b)


def boundary_from_prob_relation(rel: ProbRelationMap) -> BoundaryMap:
    """Mean occlusion probability ``P(-1) + P(+1)`` over the present neighbor pairs."""
    total = np.zeros(rel.shape)
    count = np.zeros(rel.shape)
    for incl in rel.inclinations:
        sp, sq = pair_slices(incl, rel.shape)
        pr = rel.probs[incl][sp]
        ok = np.isfinite(pr).all(axis=-1)
        occ = np.where(ok, pr[..., 0] + pr[..., 2], 0.0)
        for s in (sp, sq):
            total[s] += occ
            count[s] += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return BoundaryMap(np.clip(w, 0.0, 1.0), False)


def _wrap(theta):
    # map to (-pi, pi]
    t = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    return np.where(t <= -np.pi, t + 2 * np.pi, t)


def direction_sums(rel, mode: str = "argmax") -> np.ndarray:
    """Accumulated unit directions ``v_p``, shape (H, W, 2) as (x, y)."""
    if isinstance(rel, ProbRelationMap):
        if mode == "argmax":
            weights = {i: _masked(rel.argmax().labels[i]) for i in rel.inclinations}
        elif mode == "expected":
            weights = {i: np.nan_to_num(rel.expected(i)) for i in rel.inclinations}
        else:
            raise ValueError(f"mode must be 'argmax' or 'expected', got {mode!r}")
    else:
        weights = {i: _masked(rel.labels[i]) for i in rel.inclinations}
    v = np.zeros(rel.shape + (2,))
    for incl, wgt in weights.items():
        sp, sq = pair_slices(incl, rel.shape)
        u = np.array(incl.displacement, dtype=np.float64) / incl.length
        lab = wgt[sp]
        # from p: +label towards q; from q: -label towards p, i.e. +label * u again
        v[sp] += lab[..., None] * u
        v[sq] += lab[..., None] * u
    return v


def _masked(lab):
    return np.where(lab == ABSENT, 0, lab).astype(np.float64)


def orientation_from_relation(rel, mode: str = "argmax") -> OrientationMap:
    """Per-pixel occlusion orientation ``atan2(u_y, u_x) - pi/2`` (image axes, y down)."""
    v = direction_sums(rel, mode)
    norm = np.hypot(v[..., 0], v[..., 1])
    defined = norm > 1e-12
    theta = np.arctan2(v[..., 1], v[..., 0]) - math.pi / 2
    return OrientationMap(np.where(defined, _wrap(theta), np.nan))


def _bilinear(img, x, y):
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2)
    y0 = np.minimum(np.floor(y).astype(int), h - 2)
    fx = x - x0
    fy = y - y0
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x0 + 1] * fx * (1 - fy)
            + img[y0 + 1, x0] * (1 - fx) * fy + img[y0 + 1, x0 + 1] * fx * fy)


def edge_normals(values: np.ndarray, sigma: float = NMS_SIGMA) -> np.ndarray:
    """Unit vectors across the edges (dominant structure-tensor eigenvector), (H, W, 2)."""
    gy, gx = np.gradient(values)
    jxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    ang = 0.5 * np.arctan2(2 * jxy, jxx - jyy)
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def nms_thin(b: BoundaryMap, sigma: float = NMS_SIGMA) -> BoundaryMap:
    """Keep only pixels not exceeded by either bilinear neighbor across the edge."""
    e = np.asarray(b.values, dtype=np.float64)
    nrm = edge_normals(e, sigma)
    h, w = e.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    a = _bilinear(e, xs + nrm[..., 0], ys + nrm[..., 1])
    c = _bilinear(e, xs - nrm[..., 0], ys - nrm[..., 1])
    keep = (e >= a) & (e >= c)
    return BoundaryMap(np.where(keep, e, 0.0), b.hard)


def threshold_boundary(b: BoundaryMap, t: float = DEFAULT_THRESHOLD) -> BoundaryMap:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return BoundaryMap.from_mask(b.values >= t)


def boundary_pipeline(rel: ProbRelationMap, t: float = DEFAULT_THRESHOLD, nms: bool = True) -> BoundaryMap:
    b = boundary_from_prob_relation(rel)
    if nms:
        b = nms_thin(b)
    return threshold_boundary(b, t)


def depth_edges(depth, normals, K, delta: float = None) -> BoundaryMap:
    """Depth-discontinuity edges: the occlusion boundary of the order-1 map of ``depth``.

    Unlike order-0 labels, this ignores steep but continuous surfaces.
    """
    from .relation import DEFAULT_DELTA, compute_p2orm

    rel = compute_p2orm(depth, normals, K, DEFAULT_DELTA if delta is None else delta)
    return boundary_from_relation(rel)
