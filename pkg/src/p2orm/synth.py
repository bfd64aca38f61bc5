"""Analytic synthetic scenes: exact ray casting and brute-force occlusion ground truth."""

from __future__ import annotations

import math
import shlex
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._parallel import worker_count
from .geometry import BEHIND, CameraIntrinsics, ray_plane_distances
from .relation import ABSENT, DEFAULT_DELTA, RelationMap, inclinations_for, pair_slices

N_ORACLE_RAYS = 101


class SceneNotClosed(RuntimeError):
    pass


def _vec(v):
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return tuple(float(c) for c in a)


def _unit(v):
    a = np.asarray(v, dtype=np.float64)
    return _vec(a / np.linalg.norm(a))


@dataclass(frozen=True)
class Plane:
    """Infinite plane, optionally restricted to ``clip_normal . X >= clip_offset``."""

    point: tuple
    normal: tuple
    clip_normal: tuple | None = None
    clip_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "point", _vec(self.point))
        object.__setattr__(self, "normal", _unit(self.normal))
        if self.clip_normal is not None:
            object.__setattr__(self, "clip_normal", _vec(self.clip_normal))

    @property
    def kind(self):
        return "plane" if self.clip_normal is None else "halfplane"

    def intersect(self, rays):
        t, _ = ray_plane_distances(rays, np.asarray(self.point), np.asarray(self.normal))
        if self.clip_normal is not None:
            X = t[..., None] * rays
            keep = X @ np.asarray(self.clip_normal) >= self.clip_offset
            t = np.where(keep, t, np.nan)
        face = np.zeros(t.shape, dtype=np.int8)
        return t, face

    def face_plane(self, face):
        return np.asarray(self.point), np.asarray(self.normal)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= X <= hi``; faces numbered ``2 * axis + (0 for lo, 1 for hi)``."""

    lo: tuple
    hi: tuple

    kind = "box"

    def __post_init__(self):
        object.__setattr__(self, "lo", _vec(self.lo))
        object.__setattr__(self, "hi", _vec(self.hi))
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError("box lo must be strictly below hi on every axis")

    def intersect(self, rays):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo / rays
            t2 = hi / rays
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = rays == 0
        inside = (lo <= 0) & (hi >= 0)
        tnear = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tfar = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        axis = np.argmax(tnear, axis=-1)
        t_enter = np.take_along_axis(tnear, axis[..., None], -1)[..., 0]
        t_exit = tfar.min(axis=-1)
        hit = (t_enter <= t_exit) & (t_enter > 0)
        t = np.where(hit, t_enter, np.nan)
        comp = np.take_along_axis(rays, axis[..., None], -1)[..., 0]
        face = (2 * axis + (comp < 0)).astype(np.int8)
        return t, face

    def face_plane(self, face):
        axis, side = divmod(int(face), 2)
        n = np.zeros(3)
        n[axis] = 1.0 if side else -1.0
        point = np.asarray(self.hi if side else self.lo, dtype=np.float64)
        return point, n


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    name: str = "custom"
    delta: float = DEFAULT_DELTA

    def face_plane(self, prim, face):
        return self.primitives[prim].face_plane(face)


@dataclass(frozen=True)
class SceneRender:
    depth: np.ndarray
    normals: np.ndarray
    prim_id: np.ndarray
    face_id: np.ndarray
    K: CameraIntrinsics = field(repr=False)


def _render_rows(scene, rays):
    best_t = np.full(rays.shape[:-1], np.inf)
    prim = np.full(rays.shape[:-1], -1, dtype=np.int32)
    face = np.zeros(rays.shape[:-1], dtype=np.int8)
    for k, pr in enumerate(scene.primitives):
        t, f = pr.intersect(rays)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        prim = np.where(closer, k, prim)
        face = np.where(closer, f, face)
    return best_t, prim, face


def render(scene: Scene, K: CameraIntrinsics) -> SceneRender:
    """Closest positive intersection per pixel ray, with exact normals."""
    rays = K.pixel_rays()
    n = worker_count()
    if n > 1:
        bands = np.array_split(np.arange(K.height), min(n, K.height))
        with ThreadPoolExecutor(max_workers=n) as ex:
            parts = list(ex.map(lambda b: _render_rows(scene, rays[b[0] : b[-1] + 1]), bands))
        t, prim, face = (np.concatenate([p[i] for p in parts]) for i in range(3))
    else:
        t, prim, face = _render_rows(scene, rays)
    missed = prim < 0
    if missed.any():
        y, x = np.argwhere(missed)[0]
        raise SceneNotClosed(f"ray through pixel (x={x}, y={y}) hits no primitive; "
                             f"{int(missed.sum())} pixels uncovered")
    normals = np.empty(K.shape + (3,))
    for k, pr in enumerate(scene.primitives):
        for f in np.unique(face[prim == k]):
            sel = (prim == k) & (face == f)
            normals[sel] = pr.face_plane(f)[1]
    # camera-facing orientation
    flip = np.sum(normals * rays, axis=-1) > 0
    normals[flip] *= -1
    return SceneRender(t, normals, prim, face, K)


def _plane_dist_along(rays, point, normal):
    t, _ = ray_plane_distances(rays, point, normal)
    return t


def oracle_relation(scene: Scene, rend: SceneRender, K: CameraIntrinsics,
                    delta: float = DEFAULT_DELTA, connectivity: int = 8,
                    n_rays: int = N_ORACLE_RAYS) -> RelationMap:
    """Ground-truth relations from the scene surfaces by dense ray sampling.

    ``p`` occludes ``q`` iff ``(d_q - d_p)/||q-p|| >= delta`` and, on each of
    ``n_rays`` rays through pixels evenly spaced from ``p`` to ``q``, the
    surface hit at ``q`` (its face plane extended) lies behind the surface
    hit at ``p`` by at least ``delta * ||q-p||``.  Pairs on the same face are
    never occluding.
    """
    h, w = K.shape
    s = np.linspace(0.0, 1.0, n_rays)
    labels = {}
    for incl in inclinations_for(connectivity):
        sp, sq = pair_slices(incl, (h, w))
        lab = np.full((h, w), ABSENT, dtype=np.int8)
        lab[sp] = 0
        diff = (rend.prim_id[sp] != rend.prim_id[sq]) | (rend.face_id[sp] != rend.face_id[sq])
        ys, xs = np.nonzero(diff)
        if len(ys) == 0:
            labels[incl] = lab
            continue
        ys = ys + sp[0].start
        xs = xs + sp[1].start
        dx, dy = incl.displacement
        dist = incl.length
        d_p = rend.depth[ys, xs]
        d_q = rend.depth[ys + dy, xs + dx]
        rate = (d_q - d_p) / dist
        # sampled rays, shape (npairs, n_rays, 3)
        px = xs[:, None] + s[None, :] * dx
        py = ys[:, None] + s[None, :] * dy
        rays = K.rays(px, py)
        t_p = np.empty(px.shape)
        t_q = np.empty(px.shape)
        keys_p = list(zip(rend.prim_id[ys, xs], rend.face_id[ys, xs]))
        keys_q = list(zip(rend.prim_id[ys + dy, xs + dx], rend.face_id[ys + dy, xs + dx]))
        for keys, out in ((keys_p, t_p), (keys_q, t_q)):
            arr = np.array(keys)
            for key in {tuple(k) for k in arr}:
                sel = (arr[:, 0] == key[0]) & (arr[:, 1] == key[1])
                point, normal = scene.face_plane(*key)
                out[sel] = _plane_dist_along(rays[sel], point, normal)
        gap = (t_q - t_p) / dist
        with np.errstate(invalid="ignore"):
            fwd = (rate >= delta) & np.all(gap >= delta, axis=1)
            bwd = (rate <= -delta) & np.all(gap <= -delta, axis=1)
        lab[ys, xs] = np.where(fwd, 1, np.where(bwd, -1, 0))
        labels[incl] = lab
    return RelationMap(labels, connectivity, float(delta), order=1)


# ---------------------------------------------------------------- catalog


def _column_clip(K, column_edge, keep_left=True):
    """Half-space through the camera center whose boundary projects to image column ``column_edge``."""
    a = (column_edge - K.cx) / K.fx
    # points with X/Z <= a satisfy (-1, 0, a) . X >= 0
    n = np.array([-1.0, 0.0, a]) if keep_left else np.array([1.0, 0.0, -a])
    return n, 0.0


def _row_clip(K, row_edge, keep_below=True):
    b = (row_edge - K.cy) / K.fy
    n = np.array([0.0, 1.0, -b]) if keep_below else np.array([0.0, -1.0, b])
    return n, 0.0


def fronto_plane(K, distance=2.0):
    """Single plane facing the camera at z = ``distance``."""
    return Scene((Plane((0, 0, distance), (0, 0, -1)),), "fronto_plane")


def slanted_plane(K, angle=30.0, distance=25.0):
    """Plane through (0, 0, distance) with normal (0, sin a, -cos a)."""
    a = math.radians(angle)
    return Scene((Plane((0, 0, distance), (0, math.sin(a), -math.cos(a))),), "slanted_plane")


def step(K, height=0.5, column=None, distance=2.0):
    """Near fronto-parallel plane on columns <= ``column``, background ``height`` behind."""
    if column is None:
        column = K.width // 2 - 1
    cn, co = _column_clip(K, column + 0.5, keep_left=True)
    near = Plane((0, 0, distance), (0, 0, -1), cn, co)
    far = Plane((0, 0, distance + height), (0, 0, -1))
    return Scene((near, far), "step")


def small_step(K, offset=0.01, tilt=60.0, distance=3.0, row=None):
    """Two parallel slanted planes ``offset`` apart (a book on a table).

    The raised plane covers image rows > ``row``, where the slant makes the
    surface recede faster than the offset brings it closer, so the depth
    increase across the edge stays below the default margin although the
    raised plane lies in front of the lower one along every ray.
    """
    if row is None:
        row = int(round(K.height * 425 / 480))
    a = math.radians(tilt)
    n = np.array([0.0, math.sin(a), -math.cos(a)])
    base = Plane((0, 0, distance), n)
    # move towards the camera: n faces the camera, so shift along +n
    raised_point = np.array([0.0, 0.0, distance]) + offset * n
    cn, co = _row_clip(K, row + 0.5, keep_below=True)
    raised = Plane(raised_point, n, cn, co)
    return Scene((raised, base), "small_step")


def _wedge(K, angle, distance, column, salient):
    if column is None:
        column = K.width // 2 - 1
    a = math.radians(angle)
    xr = (column + 0.5 - K.cx) * distance / K.fx
    ridge = np.array([xr, 0.0, distance])
    # left face recedes (salient) or approaches (reentrant) leftwards
    sgn = -1.0 if salient else 1.0
    n_left = np.array([sgn * math.sin(a), 0.0, -math.cos(a)])
    n_right = np.array([-sgn * math.sin(a), 0.0, -math.cos(a)])
    cl, ol = _column_clip(K, column + 0.5, keep_left=True)
    cr, orr = _column_clip(K, column + 0.5, keep_left=False)
    return (Plane(ridge, n_left, cl, ol), Plane(ridge, n_right, cr, orr))


def salient_wedge(K, angle=30.0, distance=2.0, column=None):
    """Convex ridge at ``column``, both faces receding from it."""
    return Scene(_wedge(K, angle, distance, column, True), "salient_wedge")


def reentrant_wedge(K, angle=30.0, distance=2.0, column=None):
    """Concave valley at ``column``, both faces approaching away from it."""
    return Scene(_wedge(K, angle, distance, column, False), "reentrant_wedge")


def box_on_floor(K, floor=3.0, height=0.6, cols=(380, 520), rows=(90, 200)):
    """Box resting on a fronto-parallel floor seen from above.

    The top face projects to the given (half-pixel shifted) column and row
    ranges; the box is off-center so two side faces are visible.
    """
    top = floor - height
    x0 = (cols[0] + 0.5 - K.cx) * top / K.fx
    x1 = (cols[1] + 0.5 - K.cx) * top / K.fx
    y0 = (rows[0] + 0.5 - K.cy) * top / K.fy
    y1 = (rows[1] + 0.5 - K.cy) * top / K.fy
    box = Box((x0, y0, top), (x1, y1, floor))
    return Scene((box, Plane((0, 0, floor), (0, 0, -1))), "box_on_floor")


CATALOG = {
    "fronto_plane": fronto_plane,
    "slanted_plane": slanted_plane,
    "step": step,
    "small_step": small_step,
    "salient_wedge": salient_wedge,
    "reentrant_wedge": reentrant_wedge,
    "box_on_floor": box_on_floor,
}


def scene_catalog(K: CameraIntrinsics | None = None) -> dict:
    """Every catalog scene with default parameters."""
    K = K or CameraIntrinsics.from_fov()
    return {name: make(K) for name, make in CATALOG.items()}


def make_scene(name: str, K: CameraIntrinsics, **params) -> Scene:
    try:
        make = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown scene {name!r}; known: {', '.join(CATALOG)}") from None
    return make(K, **params)


# ------------------------------------------------------------ text format
#
# One primitive per line, ``kind key=v[,v...] ...``; '#' starts a comment.
#   plane     point=x,y,z normal=x,y,z
#   halfplane point=... normal=... clip_normal=... clip_offset=c
#   box       min=x,y,z max=x,y,z
# An optional ``delta=<value>`` line sets the scene's margin.


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def parse_scene(text: str, name: str = "custom") -> Scene:
    prims = []
    delta = DEFAULT_DELTA
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = shlex.split(line)
        if tokens[0].startswith("delta="):
            delta = float(tokens[0].split("=", 1)[1])
            continue
        kind, kv = tokens[0], {}
        for tok in tokens[1:]:
            if "=" not in tok:
                raise ValueError(f"line {lineno}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        try:
            if kind == "plane":
                prims.append(Plane(_floats(kv["point"]), _floats(kv["normal"])))
            elif kind == "halfplane":
                prims.append(Plane(_floats(kv["point"]), _floats(kv["normal"]),
                                   _floats(kv["clip_normal"]), float(kv.get("clip_offset", 0.0))))
            elif kind == "box":
                prims.append(Box(_floats(kv["min"]), _floats(kv["max"])))
            else:
                raise ValueError(f"line {lineno}: unknown primitive {kind!r}")
        except KeyError as e:
            raise ValueError(f"line {lineno}: missing field {e.args[0]!r}") from None
    if not prims:
        raise ValueError("scene has no primitives")
    return Scene(tuple(prims), name, delta)


def _fmt(v):
    return ",".join(repr(float(c)) for c in v)


def format_scene(scene: Scene) -> str:
    lines = [f"# scene {scene.name}", f"delta={scene.delta!r}"]
    for pr in scene.primitives:
        if isinstance(pr, Box):
            lines.append(f"box min={_fmt(pr.lo)} max={_fmt(pr.hi)}")
        elif pr.clip_normal is None:
            lines.append(f"plane point={_fmt(pr.point)} normal={_fmt(pr.normal)}")
        else:
            lines.append(f"halfplane point={_fmt(pr.point)} normal={_fmt(pr.normal)} "
                         f"clip_normal={_fmt(pr.clip_normal)} clip_offset={pr.clip_offset!r}")
    return "\n".join(lines) + "\n"


__all__ = [
    "BEHIND", "Box", "CATALOG", "Plane", "Scene", "SceneNotClosed", "SceneRender",
    "box_on_floor", "format_scene", "fronto_plane", "make_scene", "oracle_relation",
    "parse_scene", "reentrant_wedge", "render", "salient_wedge", "scene_catalog",
    "slanted_plane", "small_step", "step",
]
