import functools

import numpy as np
import pytest

from p2orm.geometry import CameraIntrinsics
from p2orm.relation import ABSENT, RelationMap, inclinations_for, pair_slices
from p2orm.synth import render, scene_catalog


@pytest.fixture(scope="session")
def K():
    return CameraIntrinsics.from_fov()


@functools.lru_cache(maxsize=None)
def _rendered(name):
    K = CameraIntrinsics.from_fov()
    scene = scene_catalog(K)[name]
    return scene, render(scene, K)


@pytest.fixture(scope="session")
def rendered():
    """``rendered(name) -> (scene, SceneRender)`` at 640x480, cached."""
    return _rendered


def random_relation(rng, shape, connectivity=8, p_absent=0.1, p_nonzero=0.3, delta=0.03):
    labels = {}
    for incl in inclinations_for(connectivity):
        sp, _ = pair_slices(incl, shape)
        lab = np.full(shape, ABSENT, dtype=np.int8)
        u = rng.random(shape)
        vals = np.where(u < p_nonzero / 2, -1, np.where(u < p_nonzero, 1, 0)).astype(np.int8)
        vals[rng.random(shape) < p_absent] = ABSENT
        lab[sp] = vals[sp]
        labels[incl] = lab
    return RelationMap(labels, connectivity, delta)


def single_pair_relation(shape, p, q, label, connectivity=8):
    """All-zero map except ``label`` for the pair (p, q) seen from p (points are (x, y))."""
    labels = {}
    for incl in inclinations_for(connectivity):
        sp, _ = pair_slices(incl, shape)
        lab = np.full(shape, ABSENT, dtype=np.int8)
        lab[sp] = 0
        labels[incl] = lab
    dx, dy = q[0] - p[0], q[1] - p[1]
    for incl in inclinations_for(connectivity):
        if incl.displacement == (dx, dy):
            labels[incl][p[1], p[0]] = label
        elif incl.displacement == (-dx, -dy):
            labels[incl][q[1], q[0]] = -label
    return RelationMap(labels, connectivity, 0.03)
