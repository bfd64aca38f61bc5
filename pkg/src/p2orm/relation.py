"""Pixel-pair occlusion relation maps (P2ORM).

A relation map stores, for each inclination ``i`` and each pixel ``p``, the
label of the pair ``(p, p + i)``: +1 if ``p`` occludes ``p + i``, -1 if it is
occluded by it, 0 if neither.  Pairs leaving the image or touching an invalid
pixel hold :data:`ABSENT`.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._parallel import worker_count
from .geometry import CameraIntrinsics, orient_normals, ray_plane_distances

ABSENT = np.int8(-128)
DEFAULT_DELTA = 0.03


class Inclination(enum.Enum):
    H = "h"
    V = "v"
    D = "d"
    A = "a"

    @property
    def displacement(self) -> tuple[int, int]:
        return _DISPLACEMENTS[self]

    @property
    def dx(self) -> int:
        return _DISPLACEMENTS[self][0]

    @property
    def dy(self) -> int:
        return _DISPLACEMENTS[self][1]

    @property
    def length(self) -> float:
        return math.hypot(*_DISPLACEMENTS[self])


_DISPLACEMENTS = {
    Inclination.H: (1, 0),
    Inclination.V: (0, 1),
    Inclination.D: (1, 1),
    Inclination.A: (1, -1),
}

I2 = (Inclination.H, Inclination.V)
I4 = (Inclination.H, Inclination.V, Inclination.D, Inclination.A)


def inclinations_for(connectivity: int) -> tuple[Inclination, ...]:
    if connectivity == 4:
        return I2
    if connectivity == 8:
        return I4
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def pair_slices(incl: Inclination, shape) -> tuple[tuple[slice, slice], tuple[slice, slice]]:
    """Slices selecting anchors ``p`` and partners ``p + i`` that are both in bounds."""
    h, w = shape
    dx, dy = incl.displacement
    sp = (slice(max(0, -dy), h - max(0, dy)), slice(max(0, -dx), w - max(0, dx)))
    sq = (slice(max(0, dy), h + min(0, dy)), slice(max(0, dx), w + min(0, dx)))
    return sp, sq


def _resolve_pair(p, q):
    """Inclination and orientation of the neighbor pair (p, q).

    Returns ``(incl, anchor, sign)``: the stored entry lives at ``anchor`` and
    the label seen from ``p`` is ``sign * stored``.
    """
    dx, dy = q[0] - p[0], q[1] - p[1]
    for incl in I4:
        if (dx, dy) == incl.displacement:
            return incl, p, 1
        if (-dx, -dy) == incl.displacement:
            return incl, q, -1
    raise ValueError(f"pixels {p} and {q} are not 8-neighbors")


@dataclass(frozen=True)
class RelationMap:
    labels: dict
    connectivity: int
    delta: float
    order: int = 1

    def __post_init__(self):
        for incl in inclinations_for(self.connectivity):
            if incl not in self.labels:
                raise ValueError(f"missing inclination {incl.value}")
        for arr in self.labels.values():
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.labels.values())).shape

    @property
    def inclinations(self) -> tuple[Inclination, ...]:
        return inclinations_for(self.connectivity)

    def present(self, incl: Inclination) -> np.ndarray:
        return self.labels[incl] != ABSENT

    def nonzero(self, incl: Inclination) -> np.ndarray:
        lab = self.labels[incl]
        return (lab != ABSENT) & (lab != 0)

    def count_nonzero(self) -> int:
        return int(sum(self.nonzero(i).sum() for i in self.inclinations))

    def label(self, p, q):
        """Label of ``p`` w.r.t. ``q`` (``None`` when absent)."""
        incl, anchor, sign = _resolve_pair(p, q)
        if incl not in self.labels:
            raise ValueError(f"inclination {incl.value} not stored at connectivity {self.connectivity}")
        h, w = self.shape
        x, y = anchor
        if not (0 <= x < w and 0 <= y < h):
            return None
        v = self.labels[incl][y, x]
        if v == ABSENT:
            return None
        return sign * int(v)

    def equals(self, other: "RelationMap") -> bool:
        return self.connectivity == other.connectivity and all(
            np.array_equal(self.labels[i], other.labels[i]) for i in self.inclinations
        )


@dataclass(frozen=True)
class ProbRelationMap:
    """Per-pair class distributions ``(P(-1), P(0), P(+1))``; NaN rows are absent."""

    probs: dict
    connectivity: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for incl in inclinations_for(self.connectivity):
            if incl not in self.probs:
                raise ValueError(f"missing inclination {incl.value}")
            pr = self.probs[incl]
            ok = np.isfinite(pr).all(axis=-1)
            if (pr[ok] < 0).any() or not np.allclose(pr[ok].sum(axis=-1), 1.0, atol=1e-5):
                raise ValueError(f"inclination {incl.value}: probabilities must be non-negative and sum to 1")

    @property
    def shape(self):
        return next(iter(self.probs.values())).shape[:2]

    @property
    def inclinations(self):
        return inclinations_for(self.connectivity)

    def present(self, incl) -> np.ndarray:
        return np.isfinite(self.probs[incl]).all(axis=-1)

    @classmethod
    def from_hard(cls, rel: RelationMap) -> "ProbRelationMap":
        probs = {}
        for incl in rel.inclinations:
            lab = rel.labels[incl]
            pr = np.full(lab.shape + (3,), np.nan)
            ok = lab != ABSENT
            onehot = np.zeros((int(ok.sum()), 3))
            onehot[np.arange(onehot.shape[0]), lab[ok].astype(int) + 1] = 1.0
            pr[ok] = onehot
            probs[incl] = pr
        return cls(probs, rel.connectivity, {"delta": rel.delta, "order": rel.order})

    def argmax(self) -> RelationMap:
        labels = {}
        for incl in self.inclinations:
            pr = self.probs[incl]
            ok = self.present(incl)
            lab = np.full(pr.shape[:2], ABSENT, dtype=np.int8)
            lab[ok] = (np.argmax(pr[ok], axis=-1) - 1).astype(np.int8)
            labels[incl] = lab
        return RelationMap(labels, self.connectivity, self.meta.get("delta", DEFAULT_DELTA),
                           self.meta.get("order", 1))

    def expected(self, incl) -> np.ndarray:
        """Expected label ``P(+1) - P(-1)``; NaN where absent."""
        pr = self.probs[incl]
        return pr[..., 2] - pr[..., 0]


def pair_depth_rate(d_p: float, d_q: float, p, q) -> float:
    dist = math.hypot(q[0] - p[0], q[1] - p[1])
    if dist == 0:
        raise ValueError("p and q must be distinct pixels")
    return (d_q - d_p) / dist


def _depth_at(depth, p):
    v = depth[p[1], p[0]]
    return float(v) if np.isfinite(v) and v > 0 else None


def order0_relation(p, q, depth: np.ndarray, delta: float):
    if not delta > 0:
        raise ValueError("delta must be positive")
    dp, dq = _depth_at(depth, p), _depth_at(depth, q)
    if dp is None or dq is None:
        return None
    rate = pair_depth_rate(dp, dq, p, q)
    if rate >= delta:
        return 1
    if rate <= -delta:
        return -1
    return 0


def plane_condition_values(d_p, d_q, n_p, n_q, r_p, r_q, dist):
    """Normalized margins of the order-1 test for pairs (p, q).

    ``d_*`` ray distances, ``n_*`` camera-facing unit normals, ``r_*`` unit
    rays, ``dist = ||q - p||``; arrays broadcast over leading axes.  Returns
    ``(rate, front_at_p, front_at_q)``:

    * ``rate = (d_q - d_p) / dist``
    * ``front_at_p = (||Pi_q ^ L_p|| - d_p) / dist``
    * ``front_at_q = (d_q - ||Pi_p ^ L_q||) / dist``

    ``p`` occludes ``q`` when all three are >= delta and is occluded by it when
    all three are <= -delta.  Missing intersections give NaN, which fails
    both comparisons.
    """
    X_p = d_p[..., None] * r_p
    X_q = d_q[..., None] * r_q
    t_qp, _ = ray_plane_distances(r_p, X_q, n_q)
    t_pq, _ = ray_plane_distances(r_q, X_p, n_p)
    rate = (d_q - d_p) / dist
    return rate, (t_qp - d_p) / dist, (d_q - t_pq) / dist


def classify(rate, front_p=None, front_q=None, delta: float = DEFAULT_DELTA) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        fwd = rate >= delta
        bwd = rate <= -delta
        if front_p is not None:
            fwd = fwd & (front_p >= delta) & (front_q >= delta)
            bwd = bwd & (front_p <= -delta) & (front_q <= -delta)
    return np.where(fwd, 1, np.where(bwd, -1, 0)).astype(np.int8)


def order1_relation(p, q, depth, normals, K: CameraIntrinsics, delta: float):
    if not delta > 0:
        raise ValueError("delta must be positive")
    dp, dq = _depth_at(depth, p), _depth_at(depth, q)
    if dp is None or dq is None:
        return None
    n_p = np.asarray(normals[p[1], p[0]], dtype=np.float64)
    n_q = np.asarray(normals[q[1], q[0]], dtype=np.float64)
    if not (np.isfinite(n_p).all() and np.isfinite(n_q).all()):
        return None
    r_p, r_q = K.rays(*p), K.rays(*q)
    n_p = orient_normals(n_p, r_p)
    n_q = orient_normals(n_q, r_q)
    dist = math.hypot(q[0] - p[0], q[1] - p[1])
    if dist == 0:
        raise ValueError("p and q must be distinct pixels")
    vals = plane_condition_values(np.float64(dp), np.float64(dq), n_p, n_q, r_p, r_q, dist)
    return int(classify(*vals, delta=delta))


def _valid_inputs(depth, normals, order):
    valid = np.isfinite(depth) & (depth > 0)
    if order == 1:
        valid &= np.isfinite(normals).all(axis=-1)
    return valid


def _incl_labels(incl, depth, normals, rays, valid, delta, order):
    sp, sq = pair_slices(incl, depth.shape)
    lab = np.full(depth.shape, ABSENT, dtype=np.int8)
    ok = valid[sp] & valid[sq]
    if order == 0:
        rate = (depth[sq] - depth[sp]) / incl.length
        out = classify(rate, delta=delta)
    else:
        vals = plane_condition_values(depth[sp], depth[sq], normals[sp], normals[sq],
                                      rays[sp], rays[sq], incl.length)
        out = classify(*vals, delta=delta)
    lab[sp] = np.where(ok, out, ABSENT)
    return lab


def compute_p2orm(depth: np.ndarray, normals, K: CameraIntrinsics, delta: float = DEFAULT_DELTA,
                  connectivity: int = 8, order: int = 1) -> RelationMap:
    """Label every neighbor pair of a ray-distance map with its order-0 or order-1 relation."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != K.shape:
        raise ValueError(f"depth shape {depth.shape} does not match camera {K.shape}")
    if order not in (0, 1):
        raise ValueError(f"order must be 0 or 1, got {order}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    rays = None
    if order == 1:
        if normals is None:
            raise ValueError("order-1 relations require a normal map")
        normals = np.asarray(normals, dtype=np.float64)
        if normals.shape != depth.shape + (3,):
            raise ValueError(f"normal map shape {normals.shape} does not match depth {depth.shape}")
        rays = K.pixel_rays()
        normals = orient_normals(normals, rays)
    valid = _valid_inputs(depth, normals, order)
    incls = inclinations_for(connectivity)

    def job(incl):
        return _incl_labels(incl, depth, normals, rays, valid, delta, order)

    n = worker_count()
    if n > 1:
        with ThreadPoolExecutor(max_workers=min(n, len(incls))) as ex:
            results = list(ex.map(job, incls))
    else:
        results = [job(i) for i in incls]
    return RelationMap(dict(zip(incls, results)), connectivity, float(delta), order)


def estimate_normals(depth: np.ndarray, K: CameraIntrinsics, window: int = 5,
                     min_points: int = 3) -> np.ndarray:
    """Least-squares plane normals over a sliding window of back-projected points.

    Returns an (H, W, 3) map of camera-facing unit normals, NaN where the
    center pixel is invalid, fewer than ``min_points`` neighbors are valid,
    or the neighborhood is degenerate (collinear).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    rays = K.pixel_rays()
    X = np.where(valid[..., None], depth[..., None] * rays, 0.0)
    # center coordinates per pixel to limit cancellation in the moment sums
    ref = np.array([0.0, 0.0, np.nanmedian(np.where(valid, depth, np.nan))]) if valid.any() else np.zeros(3)
    Xc = np.where(valid[..., None], X - ref, 0.0)
    m = valid.astype(np.float64)
    area = float(window * window)

    def wsum(a):
        return ndimage.uniform_filter(a, size=window, mode="constant", cval=0.0) * area

    cnt = np.rint(wsum(m))
    s1 = np.stack([wsum(Xc[..., k]) for k in range(3)], axis=-1)
    s2 = np.empty(depth.shape + (3, 3))
    for a in range(3):
        for b in range(a, 3):
            s2[..., a, b] = s2[..., b, a] = wsum(Xc[..., a] * Xc[..., b])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / cnt[..., None]
        cov = s2 / cnt[..., None, None] - mean[..., :, None] * mean[..., None, :]
    ok = valid & (cnt >= min_points)
    cov = np.where(ok[..., None, None], cov, np.eye(3))
    w, v = np.linalg.eigh(cov)
    normal = v[..., :, 0]
    scale = np.maximum(w[..., 2], 1e-300)
    degenerate = w[..., 1] <= 1e-10 * scale
    ok &= ~degenerate
    normal = orient_normals(normal, rays)
    return np.where(ok[..., None], normal, np.nan)
