"""Relation classification loss and depth-refinement losses with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PARALLEL_EPS, CameraIntrinsics, NoIntersection, TangentPlane, orient_normals
from .geometry import ray_plane_distance, ray_through_pixel, mid_pixel
from .relation import ABSENT, DEFAULT_DELTA, I4, ProbRelationMap, RelationMap, pair_slices

LOG_EPS = 1e-12
RATE_CLAMP = 1e-6
BERHU_MIN_C = 1e-6
BERHU_FRACTION = 0.2

ALPHA_BSDS = 50.0
ALPHA_NYU = 10.0


@dataclass(frozen=True)
class RelLossConfig:
    alpha: float = ALPHA_NYU

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class RefineLossConfig:
    delta: float = DEFAULT_DELTA
    lam: float = 1.0
    # None: switch point 0.2 * max residual per term; a number fixes it
    berhu_c: float | None = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.berhu_c is not None and not self.berhu_c > 0:
            raise ValueError("berhu_c must be positive")


def class_balanced_ce(pred: ProbRelationMap, gt: RelationMap, alpha: float = ALPHA_NYU, split: bool = False):
    """Per-inclination mean of ``-alpha_r log P_hat(r_gt)`` summed over inclinations.

    With ``split=True`` returns ``(zero_class_part, nonzero_class_part)``.
    """
    RelLossConfig(alpha)
    if pred.shape != gt.shape or set(pred.inclinations) != set(gt.inclinations):
        raise ValueError("prediction and ground truth differ in shape or inclinations")
    zero_part = nonzero_part = 0.0
    for incl in gt.inclinations:
        lab = gt.labels[incl]
        ok = (lab != ABSENT) & pred.present(incl)
        n = int(ok.sum())
        if n == 0:
            continue
        r = lab[ok].astype(int)
        p = pred.probs[incl][ok][np.arange(n), r + 1]
        nll = -np.log(np.clip(p, LOG_EPS, 1.0))
        zero_part += float(nll[r == 0].sum()) / n
        nonzero_part += alpha * float(nll[r != 0].sum()) / n
    if split:
        return zero_part, nonzero_part
    return zero_part + nonzero_part


def berhu(a, b, c):
    """Reverse Huber: ``|a-b|`` up to ``c``, ``(r^2 + c^2) / 2c`` beyond."""
    if not np.all(np.asarray(c) > 0):
        raise ValueError("berHu switch point must be positive")
    r = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    out = np.where(r <= c, r, (r * r + c * c) / (2 * c))
    return float(out) if out.ndim == 0 else out


def _berhu_terms(r, fixed_c, c_gradient=True):
    """Values, d/dr, and the adaptive switch point's contribution for residuals ``r >= 0``.

    Returns ``(values, dvalue_dr, c)``; when ``c`` adapts to the maximum
    residual, its derivative is folded into that residual's ``dvalue_dr``.
    """
    if r.size == 0:
        return r.copy(), r.copy(), fixed_c or BERHU_MIN_C
    if fixed_c is not None:
        c = fixed_c
        adaptive = False
    else:
        k = int(np.argmax(r))
        c = max(BERHU_FRACTION * r[k], BERHU_MIN_C)
        adaptive = BERHU_FRACTION * r[k] > BERHU_MIN_C
    quad = r > c
    val = np.where(quad, (r * r + c * c) / (2 * c), r)
    dval = np.where(quad, r / c, 1.0)
    if adaptive and c_gradient:
        dc = float(np.sum(((c * c - r * r) / (2 * c * c))[quad]))
        dval[k] += BERHU_FRACTION * dc
    return val, dval, c


def midplane_rate(p, q, depth, normals, K: CameraIntrinsics):
    """Signed gap between the tangent planes of p and q along the mid-pixel ray,
    per unit pixel distance; ``None`` when an intersection does not exist."""
    dist = math.hypot(q[0] - p[0], q[1] - p[1])
    if dist == 0:
        raise ValueError("p and q must be distinct pixels")
    L = ray_through_pixel(mid_pixel(p, q), K)
    planes = []
    for pix in (p, q):
        X = depth[pix[1], pix[0]] * ray_through_pixel(pix, K).vector
        n = orient_normals(np.asarray(normals[pix[1], pix[0]], dtype=np.float64), X)
        planes.append(TangentPlane.from_arrays(X, n))
    try:
        tp = ray_plane_distance(L, planes[0])
        tq = ray_plane_distance(L, planes[1])
    except NoIntersection:
        return None
    return (tq - tp) / dist


@dataclass
class LossBreakdown:
    total: float
    occonsist: float
    regul: float
    n_contributing: int
    n_clamped: int
    n_case1: int
    n_case2: int


class RefineObjective:
    """Refinement objective as a function of log-depth ``u`` with fixed planes' normals.

    Pair geometry (mid-pixel ray factors) is computed once; tangent planes
    are re-anchored at the current 3D points on every evaluation.
    """

    def __init__(self, depth_input, normals, gt_rel: RelationMap, K: CameraIntrinsics,
                 cfg: RefineLossConfig = RefineLossConfig()):
        depth_input = np.asarray(depth_input, dtype=np.float64)
        if depth_input.shape != K.shape or gt_rel.shape != K.shape:
            raise ValueError("depth, relation map and camera sizes differ")
        if normals is not None and np.shape(normals) != K.shape + (3,):
            raise ValueError("normal map size differs from depth")
        self.K = K
        self.cfg = cfg
        self.shape = K.shape
        self.valid = np.isfinite(depth_input) & (depth_input > 0)
        self.u_input = np.where(self.valid, np.log(np.where(self.valid, depth_input, 1.0)), 0.0)
        rays = K.pixel_rays()
        if normals is not None:
            normals = orient_normals(np.asarray(normals, dtype=np.float64), rays)
        h, w = self.shape
        flat = np.arange(h * w).reshape(h, w)
        ip, iq, dist, kp, kq, mok, lab = [], [], [], [], [], [], []
        for incl in I4:
            sp, sq = pair_slices(incl, self.shape)
            if incl in gt_rel.labels:
                g = gt_rel.labels[incl][sp]
            else:
                g = np.zeros(self.valid[sp].shape, dtype=np.int8)
            ok = self.valid[sp] & self.valid[sq] & (g != ABSENT)
            ip.append(flat[sp][ok])
            iq.append(flat[sq][ok])
            dist.append(np.full(int(ok.sum()), incl.length))
            lab.append(g[ok].astype(np.int8))
            ys, xs = np.nonzero(ok)
            ys = ys + sp[0].start
            xs = xs + sp[1].start
            dx, dy = incl.displacement
            r_m = K.rays(xs + dx / 2.0, ys + dy / 2.0)
            if normals is None:
                kp.append(np.zeros(len(ys)))
                kq.append(np.zeros(len(ys)))
                mok.append(np.zeros(len(ys), dtype=bool))
                continue
            n_p = normals[ys, xs]
            n_q = normals[ys + dy, xs + dx]
            den_p = np.sum(n_p * r_m, axis=-1)
            den_q = np.sum(n_q * r_m, axis=-1)
            with np.errstate(invalid="ignore", divide="ignore"):
                k_p = np.sum(n_p * rays[ys, xs], axis=-1) / den_p
                k_q = np.sum(n_q * rays[ys + dy, xs + dx], axis=-1) / den_q
            good = (np.abs(den_p) >= PARALLEL_EPS) & (np.abs(den_q) >= PARALLEL_EPS) & (k_p > 0) & (k_q > 0)
            good &= np.isfinite(n_p).all(-1) & np.isfinite(n_q).all(-1)
            kp.append(np.where(good, k_p, 0.0))
            kq.append(np.where(good, k_q, 0.0))
            mok.append(good)
        self.ip = np.concatenate(ip)
        self.iq = np.concatenate(iq)
        self.dist = np.concatenate(dist)
        self.kp = np.concatenate(kp)
        self.kq = np.concatenate(kq)
        self.m_ok = np.concatenate(mok)
        self.label = np.concatenate(lab)
        self.n_valid = int(self.valid.sum())

    # -- occlusion consistency

    def occonsist(self, u, grad=False, c_gradient=True, n_fixed=None):
        d = np.exp(u)
        delta = self.cfg.delta
        dp = d[self.ip]
        dq = d[self.iq]
        s = self.dist
        rate = (dq - dp) / s
        m = (dq * self.kq - dp * self.kp) / s
        total = np.zeros_like(u) if grad else None
        owners, res, dpos, gpart, n_clamped, n1, n2 = [], [], [], [], 0, 0, 0
        for sign, lab_occ in ((1.0, 1), (-1.0, -1)):
            r_dir = sign * rate
            m_dir = sign * m
            use_m = self.m_ok & (m_dir < r_dir)
            D = np.where(use_m, m_dir, r_dir)
            occ = self.label == lab_occ
            c1 = np.nonzero(occ & (r_dir < delta))[0]
            c2 = np.nonzero(~occ & (D >= delta))[0]
            n1 += len(c1)
            n2 += len(c2)
            x1 = r_dir[c1]
            clamped = x1 < RATE_CLAMP
            n_clamped += int(clamped.sum())
            x1c = np.maximum(x1, RATE_CLAMP)
            x2 = D[c2]
            own = self.ip if sign > 0 else self.iq
            owners += [own[c1], own[c2]]
            res += [np.log(delta) - np.log(x1c), np.log(x2) - np.log(delta)]
            if grad:
                # d residual / d x, then d x / d(u_p, u_q)
                g1 = np.where(clamped, 0.0, -1.0 / x1c)
                g2 = 1.0 / x2
                gp1 = g1 * (-sign * dp[c1] / s[c1])
                gq1 = g1 * (sign * dq[c1] / s[c1])
                um = use_m[c2]
                gp2 = g2 * np.where(um, -sign * dp[c2] * self.kp[c2], -sign * dp[c2]) / s[c2]
                gq2 = g2 * np.where(um, sign * dq[c2] * self.kq[c2], sign * dq[c2]) / s[c2]
                dpos += [np.concatenate([self.ip[c1], self.ip[c2]]), np.concatenate([self.iq[c1], self.iq[c2]])]
                gpart += [np.concatenate([gp1, gp2]), np.concatenate([gq1, gq2])]
        owners = np.concatenate(owners)
        res = np.concatenate(res)
        val, dval, _ = _berhu_terms(res, self.cfg.berhu_c, c_gradient)
        n = int(np.count_nonzero(np.bincount(owners[val > 0], minlength=u.size)))
        info = dict(n_contributing=n, n_clamped=n_clamped, n_case1=n1, n_case2=n2)
        if n_fixed is not None:
            n = n_fixed
        if n == 0 or len(val) == 0:
            return 0.0, (np.zeros_like(u) if grad else None), info
        loss = float(np.sum(val)) / n
        if grad:
            # per-term chain rule; terms are ordered [dir+ c1, dir+ c2, dir- c1, dir- c2]
            # and the gradient pieces follow the same order within each direction
            wts = dval / n
            pos_p = np.concatenate(dpos[0::2])
            pos_q = np.concatenate(dpos[1::2])
            g_p = np.concatenate(gpart[0::2])
            g_q = np.concatenate(gpart[1::2])
            total += np.bincount(pos_p, wts * g_p, minlength=u.size)
            total += np.bincount(pos_q, wts * g_q, minlength=u.size)
        return loss, total, info

    # -- regularization

    def regul(self, u, grad=False, c_gradient=True):
        v = self.valid
        n = self.n_valid
        if n == 0:
            return 0.0, (np.zeros(self.shape) if grad else None)
        uu = u.reshape(self.shape)
        diff = np.where(v, uu - self.u_input, 0.0)
        r = np.abs(diff[v])
        val, dval, _ = _berhu_terms(r, self.cfg.berhu_c, c_gradient)
        loss = float(np.sum(val))
        g = np.zeros(self.shape) if grad else None
        if grad:
            g[v] = dval * np.sign(diff[v])
        for axis in (0, 1):
            a = [slice(None)] * 2
            b = [slice(None)] * 2
            a[axis] = slice(0, -1)
            b[axis] = slice(1, None)
            a, b = tuple(a), tuple(b)
            ok = v[a] & v[b]
            delta_g = np.where(ok, (self.u_input[b] - self.u_input[a]) - (uu[b] - uu[a]), 0.0)
            loss += float(np.sum(delta_g**2))
            if grad:
                g[b] += -2 * delta_g
                g[a] += 2 * delta_g
        loss /= n
        if grad:
            g = (g / n).ravel()
        return loss, g

    def evaluate(self, u, grad=False, c_gradient=True, n_fixed=None):
        """Loss breakdown, plus the gradient w.r.t. ``u`` when ``grad`` is set.

        ``c_gradient=False`` treats the adaptive berHu switch points as
        constants (the descent direction used by the optimizer); ``n_fixed``
        replaces the contributing-pixel count in the normalization.
        """
        u = np.asarray(u, dtype=np.float64).ravel()
        occ, g_occ, info = self.occonsist(u, grad, c_gradient, n_fixed)
        reg, g_reg = self.regul(u, grad, c_gradient)
        total = occ + self.cfg.lam * reg
        br = LossBreakdown(total, occ, reg, info["n_contributing"], info["n_clamped"],
                           info["n_case1"], info["n_case2"])
        if grad:
            g = g_occ + self.cfg.lam * g_reg
            g = np.where(self.valid.ravel(), g, 0.0)
            return br, g
        return br

    def log_depth(self, depth):
        depth = np.asarray(depth, dtype=np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.log(depth)
        return np.where(self.valid, u, 0.0).ravel()


def occlusion_consistency_loss(depth_refined, normals, gt_rel: RelationMap, K: CameraIntrinsics,
                               cfg: RefineLossConfig = RefineLossConfig()) -> float:
    obj = RefineObjective(depth_refined, normals, gt_rel, K, cfg)
    return obj.occonsist(obj.log_depth(depth_refined))[0]


def regularization_loss(depth_refined, depth_input, cfg: RefineLossConfig = RefineLossConfig()) -> float:
    depth_refined = np.asarray(depth_refined, dtype=np.float64)
    depth_input = np.asarray(depth_input, dtype=np.float64)
    if depth_refined.shape != depth_input.shape:
        raise ValueError("refined and input depth differ in size")
    valid = np.isfinite(depth_input) & (depth_input > 0) & np.isfinite(depth_refined) & (depth_refined > 0)
    n = int(valid.sum())
    if n == 0:
        return 0.0
    u = np.where(valid, np.log(np.where(valid, depth_refined, 1.0)), 0.0)
    ut = np.where(valid, np.log(np.where(valid, depth_input, 1.0)), 0.0)
    r = np.abs(u - ut)[valid]
    val, _, _ = _berhu_terms(r, cfg.berhu_c)
    loss = float(np.sum(val))
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        ok = valid[a] & valid[b]
        dg = np.where(ok, (ut[b] - ut[a]) - (u[b] - u[a]), 0.0)
        loss += float(np.sum(dg**2))
    return loss / n


def refine_loss(depth_refined, depth_input, normals, gt_rel: RelationMap, K: CameraIntrinsics,
                cfg: RefineLossConfig = RefineLossConfig()) -> LossBreakdown:
    obj = RefineObjective(depth_input, normals, gt_rel, K, cfg)
    return obj.evaluate(obj.log_depth(depth_refined))
