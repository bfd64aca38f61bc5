"""Depth refinement by direct minimization of the occlusion-consistency objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .derive import DEFAULT_THRESHOLD, boundary_pipeline
from .geometry import CameraIntrinsics
from .losses import LossBreakdown, RefineLossConfig, RefineObjective
from .relation import ABSENT, Inclination, ProbRelationMap, RelationMap, pair_slices

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


@dataclass(frozen=True)
class RefineConfig:
    loss: RefineLossConfig = field(default_factory=RefineLossConfig)
    step: float = 0.1
    max_iterations: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.step > 0:
            raise ValueError("step must be positive")


@dataclass
class RefineRun:
    config: RefineConfig
    trace: list  # LossBreakdown per accepted iterate, starting with the input
    depth: np.ndarray
    violations_before: int
    violations_after: int
    iterations: int = 0
    stop_reason: str = ""

    @property
    def initial_loss(self) -> float:
        return self.trace[0].total

    @property
    def final_loss(self) -> float:
        return self.trace[-1].total

    def trace_lines(self) -> list[str]:
        lines = ["iter,loss,occonsist,regul"]
        lines += [f"{k},{b.total!r},{b.occonsist!r},{b.regul!r}" for k, b in enumerate(self.trace)]
        return lines


# ------------------------------------------------------------ directional maps

ALL_DIRECTIONS = ("h", "v", "d", "a", "-h", "-v", "-d", "-a")


@dataclass(frozen=True)
class DirectionalMaps:
    """Pixelwise channels ``w^i_p = w_{p, p+i}`` for ``i`` in the stored directions."""

    channels: dict  # name -> int8 (H, W)

    def __getitem__(self, name):
        return self.channels[name]

    @property
    def names(self):
        return tuple(self.channels)

    def stack(self) -> np.ndarray:
        return np.stack([self.channels[n] for n in self.names])


def directional_maps(rel: RelationMap) -> DirectionalMaps:
    """Eight aligned channels for an 8-connected map (four for a 4-connected one)."""
    ch = {}
    for incl in rel.inclinations:
        lab = np.where(rel.labels[incl] == ABSENT, 0, rel.labels[incl]).astype(np.int8)
        ch[incl.value] = lab
    for incl in rel.inclinations:
        sp, sq = pair_slices(incl, rel.shape)
        back = np.zeros(rel.shape, dtype=np.int8)
        back[sq] = -ch[incl.value][sp]
        ch["-" + incl.value] = back
    order = [n for n in ALL_DIRECTIONS if n in ch]
    return DirectionalMaps({n: ch[n] for n in order})


def thin_directional_maps(dm: DirectionalMaps, rel: ProbRelationMap,
                          threshold: float = DEFAULT_THRESHOLD) -> DirectionalMaps:
    """Zero every channel off the NMS-thinned, thresholded boundary of ``rel``."""
    keep = boundary_pipeline(rel, threshold).mask
    return DirectionalMaps({n: np.where(keep, c, 0).astype(np.int8) for n, c in dm.channels.items()})


def relation_from_directional(dm: DirectionalMaps, delta: float, order: int = 1) -> RelationMap:
    """Pair labels back from the forward channels; a pair survives thinning if either side kept it."""
    incls = [Inclination(n) for n in dm.names if not n.startswith("-")]
    labels = {}
    shape = next(iter(dm.channels.values())).shape
    for incl in incls:
        sp, sq = pair_slices(incl, shape)
        fwd = dm[incl.value][sp]
        bwd = -dm["-" + incl.value][sq]
        lab = np.full(shape, ABSENT, dtype=np.int8)
        lab[sp] = np.where(fwd != 0, fwd, bwd)
        labels[incl] = lab
    return RelationMap(labels, 8 if len(incls) == 4 else 4, delta, order)


# ------------------------------------------------------------ optimizer


def count_violations(obj: RefineObjective, u) -> int:
    """Occluding ground-truth pairs whose depth rate falls below the margin."""
    return obj.evaluate(u).n_case1


def refine_depth(depth_input, normals, rel: RelationMap, K: CameraIntrinsics,
                 cfg: RefineConfig = RefineConfig()) -> RefineRun:
    """Gradient descent on log-depth with backtracking (step halved until the loss drops).

    Each iteration descends a local model of the loss in which the berHu
    switch points and the contributing-pixel count are frozen at the current
    iterate; the count otherwise jumps whenever a small violation is cleared,
    which stalls plain descent.  The returned depth is the iterate with the
    lowest true loss seen so far, and the trace records that loss after each
    iteration, so it never increases.
    """
    obj = RefineObjective(depth_input, normals, rel, K, cfg.loss)
    u = obj.u_input.ravel().copy()
    br = obj.evaluate(u)
    if not np.isfinite(br.total):
        _, g = obj.evaluate(u, grad=True)
        bad = np.argwhere(~np.isfinite(g.reshape(obj.shape)) & obj.valid)
        raise FloatingPointError(f"non-finite loss at start; offending pixels (y, x): {bad[:10].tolist()}")
    trace = [br]
    best, best_u = br, u
    before = br.n_case1
    stop = "max_iterations"
    it = 0
    trial = cfg.step
    for it in range(1, cfg.max_iterations + 1):
        if br.total == 0.0:
            stop = "zero_loss"
            it -= 1
            break
        n_fix = br.n_contributing
        local, g = obj.evaluate(u, grad=True, c_gradient=False, n_fixed=n_fix)
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g.reshape(obj.shape)))
            raise FloatingPointError(f"non-finite gradient; offending pixels (y, x): {bad[:10].tolist()}")
        # warm start: twice the last accepted step, never above the configured one
        step = trial
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            cand = u - step * g
            cl = obj.evaluate(cand, n_fixed=n_fix)
            if cl.total < local.total:
                accepted = cand
                break
            step /= 2
        if accepted is None:
            stop = "no_descent"
            it -= 1
            break
        trial = min(2 * step, cfg.step)
        u = accepted
        br = obj.evaluate(u)
        if br.total < best.total:
            best, best_u = br, u
        trace.append(best)
        if local.total - cl.total <= cfg.tol * abs(local.total):
            stop = "converged"
            break
    log.debug("refinement stopped after %d iterations (%s), loss %.6g -> %.6g",
              it, stop, trace[0].total, trace[-1].total)
    depth_input = np.asarray(depth_input, dtype=np.float64)
    if best is trace[0]:
        depth = depth_input.copy()
    else:
        depth = np.where(obj.valid, np.exp(best_u.reshape(obj.shape)), depth_input)
    return RefineRun(cfg, trace, depth, before, best.n_case1, it, stop)
