"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import contextlib
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from p2orm import io
from p2orm.cli import EXIT_OK, main
from p2orm.derive import (DEFAULT_THRESHOLD, BoundaryMap, boundary_from_relation, depth_edges,
                          orientation_from_relation, threshold_boundary)
from p2orm.geometry import ray_plane_distances
from p2orm.losses import ALPHA_BSDS, ALPHA_NYU, class_balanced_ce, occlusion_consistency_loss, refine_loss
from p2orm.metrics import depth_metrics, edge_metrics, opr_curve, summarize
from p2orm.refine import refine_depth
from p2orm.relation import I2, I4, Inclination, ProbRelationMap, classify, compute_p2orm, plane_condition_values
from p2orm.synth import CATALOG, oracle_relation, render, scene_catalog

from conftest import random_relation, single_pair_relation
from oracles import boundary_bruteforce

DELTA = 0.03


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(n, title):
        t0 = time.perf_counter()
        info = {}
        try:
            yield info
        except BaseException as e:
            status, detail = "FAIL", f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"
            raise
        else:
            status, detail = "PASS", info.get("detail", "")
        finally:
            with capsys.disabled():
                print(f"\n[criterion {n:2d}] {status}  {title}  ({time.perf_counter() - t0:.2f}s)  {detail}")
    return run


def test_criterion_01_order1_vs_order0(criterion, K):
    with criterion(1, "order-1 vs order-0 on slanted plane") as info:
        t0 = time.perf_counter()
        r = render(scene_catalog(K)["slanted_plane"], K)
        n0 = compute_p2orm(r.depth, None, K, DELTA, order=0).count_nonzero()
        n1 = compute_p2orm(r.depth, r.normals, K, DELTA, order=1).count_nonzero()
        elapsed = time.perf_counter() - t0
        info["detail"] = f"order0={n0} order1={n1}"
        assert n0 > 1000 and n1 == 0
        assert elapsed < 2.0, f"runtime {elapsed:.2f}s"


def _tie_band(depth, normals, K, incl, ys, xs, delta, eps=1e-6):
    rays = K.pixel_rays()
    dx, dy = incl.displacement
    vals = plane_condition_values(depth[ys, xs], depth[ys + dy, xs + dx], normals[ys, xs],
                                  normals[ys + dy, xs + dx], rays[ys, xs], rays[ys + dy, xs + dx], incl.length)
    near = np.zeros(len(ys), dtype=bool)
    for v in vals:
        near |= np.abs(np.abs(v) - delta) < eps
    return near


def test_criterion_02_oracle_equivalence(criterion, K):
    with criterion(2, "closed form equals dense-ray oracle on the catalog") as info:
        t0 = time.perf_counter()
        total = ties = 0
        for name, scene in scene_catalog(K).items():
            r = render(scene, K)
            a = compute_p2orm(r.depth, r.normals, K, scene.delta)
            b = oracle_relation(scene, r, K, scene.delta)
            for incl in I4:
                present = a.present(incl)
                assert np.array_equal(present, b.present(incl))
                total += int(present.sum())
                ys, xs = np.nonzero(present & (a.labels[incl] != b.labels[incl]))
                tie = _tie_band(r.depth, r.normals, K, incl, ys, xs, scene.delta)
                assert tie.all(), f"{name}/{incl.value}: {int((~tie).sum())} disagreements outside tie band"
                ties += len(ys)
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{len(CATALOG)} scenes, {total} pairs, {ties} in tie band"
        assert elapsed < 30.0, f"runtime {elapsed:.2f}s"


def test_criterion_03_dense_ray_closed_form(criterion, K):
    with criterion(3, "endpoint closed form vs 101-ray sampled test") as info:
        rng = np.random.default_rng(0)
        n = 10_000
        disp = np.array([I4[i].displacement for i in rng.integers(0, 4, n)], dtype=float)
        dist = np.linalg.norm(disp, axis=1)
        x = rng.integers(1, K.width - 1, n).astype(float)
        y = rng.integers(1, K.height - 1, n).astype(float)
        s = np.linspace(0.0, 1.0, 101)
        rays = K.rays(x[:, None] + s * disp[:, :1], y[:, None] + s * disp[:, 1:])
        r_p, r_q = rays[:, 0], rays[:, -1]

        def tangent_normals():
            t = np.radians(rng.uniform(0, 70, n))
            a = rng.uniform(0, 2 * np.pi, n)
            return np.stack([np.sin(t) * np.cos(a), np.sin(t) * np.sin(a), -np.cos(t)], axis=-1)

        n_p, n_q = tangent_normals(), tangent_normals()
        d_p = rng.uniform(1, 5, n)
        d_q = d_p + rng.normal(0, 0.2, n)
        rate, fp, fq = plane_condition_values(d_p, d_q, n_p, n_q, r_p, r_q, dist)
        closed = classify(rate, fp, fq, DELTA)
        t_p, _ = ray_plane_distances(rays, (d_p[:, None] * r_p)[:, None], n_p[:, None])
        t_q, _ = ray_plane_distances(rays, (d_q[:, None] * r_q)[:, None], n_q[:, None])
        gap = (t_q - t_p) / dist[:, None]
        with np.errstate(invalid="ignore"):
            fwd = (rate >= DELTA) & (gap >= DELTA).all(axis=1)
            bwd = (rate <= -DELTA) & (gap <= -DELTA).all(axis=1)
        sampled = np.where(fwd, 1, np.where(bwd, -1, 0))
        tie = np.isnan(gap).any(axis=1) | (np.abs(np.abs(gap) - DELTA) < 1e-6).any(axis=1)
        tie |= np.abs(np.abs(rate) - DELTA) < 1e-6
        bad = int((closed != sampled)[~tie].sum())
        info["detail"] = f"{n - int(tie.sum())} non-tie pairs, {int((closed != 0).sum())} occluding, {bad} disagree"
        assert bad == 0


def test_criterion_04_small_step_suppression(criterion, K, rendered):
    with criterion(4, "small step suppressed though plane conditions assert occlusion") as info:
        scene, r = rendered("small_step")
        rel = compute_p2orm(r.depth, r.normals, K, DELTA)
        rays = K.pixel_rays()
        would = 0
        for incl in I4:
            dx, dy = incl.displacement
            ys, xs = np.nonzero(rel.present(incl))
            _, fp, fq = plane_condition_values(r.depth[ys, xs], r.depth[ys + dy, xs + dx], r.normals[ys, xs],
                                               r.normals[ys + dy, xs + dx], rays[ys, xs],
                                               rays[ys + dy, xs + dx], incl.length)
            # plane conditions alone: the rate term is forced to pass
            would += int(np.count_nonzero(classify(np.sign(fp), fp, fq, DELTA)))
        info["detail"] = f"order1 nonzero={rel.count_nonzero()}, plane-only would-be labels={would}"
        assert rel.count_nonzero() == 0 and would > 0


def test_criterion_05_boundary_and_orientation(criterion):
    with criterion(5, "boundary vs brute force, canonical orientations") as info:
        rng = np.random.default_rng(5)
        for k in range(100):
            rel = random_relation(rng, (9, 11), connectivity=8 if k % 2 else 4, p_nonzero=0.3)
            assert np.array_equal(boundary_from_relation(rel).mask, boundary_bruteforce(rel))
        right = single_pair_relation((3, 4), (1, 1), (2, 1), 1)
        theta = orientation_from_relation(right).theta
        assert theta[1, 1] == -math.pi / 2
        left = single_pair_relation((3, 4), (2, 1), (1, 1), 1)
        assert orientation_from_relation(left).theta[1, 2] == math.pi / 2
        info["detail"] = "100 maps exact; right-neighbor occluder theta=-pi/2"


def test_criterion_06_metrics_sanity(criterion):
    from test_metrics import _line, _toy_pair
    with criterion(6, "metrics sanity") as info:
        gt = _line((40, 40), 12)
        o = np.where(gt, 0.4, np.nan)
        s = summarize([opr_curve(gt * 1.0, o, gt, o)])
        assert (s.ods, s.ois, s.ap) == (1.0, 1.0, 1.0)
        em = edge_metrics(gt, gt)
        assert em.eps_acc == em.eps_comp == 0
        flipped = opr_curve(gt * 1.0, o + math.pi, gt, o)
        assert all(p.precision == 0 for p in flipped)
        toy = summarize([opr_curve(p, None, g, None, tol=1.0) for p, g in _toy_pair()])
        assert toy.ois > toy.ods
        info["detail"] = f"toy set OIS={toy.ois:.3f} > ODS={toy.ods:.3f}"


def test_criterion_07_loss_fixed_point(criterion, K, rendered):
    from test_losses import _two_pixel_case
    with criterion(7, "loss fixed point and berHu hand case (step scene)") as info:
        _, r = rendered("step")
        rel = compute_p2orm(r.depth, r.normals, K)
        assert occlusion_consistency_loss(r.depth, r.normals, rel, K) == 0
        assert refine_loss(r.depth, r.depth, r.normals, rel, K).total == 0
        run = refine_depth(r.depth, r.normals, rel, K)
        assert np.array_equal(run.depth, r.depth)
        res = math.log(DELTA) - math.log(DELTA / 2)
        c = 0.2 * res
        hand = (res * res + c * c) / (2 * c)
        got = _two_pixel_case(DELTA / 2).occonsist
        assert abs(got - hand) <= 1e-12
        info["detail"] = f"hand={hand:.12f} got={got:.12f}"


def test_criterion_08_gradient_check(criterion):
    from test_losses import _gradient_instances
    with criterion(8, "analytic gradient vs central differences") as info:
        h = 1e-6
        worst = 0.0
        for obj, u in _gradient_instances(20):
            _, g = obj.evaluate(u, grad=True)
            fd = np.zeros_like(u)
            for i in range(u.size):
                e = np.zeros_like(u)
                e[i] = h
                fd[i] = (obj.evaluate(u + e).total - obj.evaluate(u - e).total) / (2 * h)
            rel_err = np.linalg.norm(g - fd) / np.linalg.norm(fd)
            worst = max(worst, rel_err)
            assert rel_err <= 1e-4
        info["detail"] = f"20 instances, worst relative error {worst:.2e}"


@pytest.mark.parametrize("name", ["step", "box_on_floor"])
def test_criterion_09_refinement_sharpening(criterion, K, rendered, name):
    with criterion(9, f"refinement sharpening on {name}") as info:
        _, r = rendered(name)
        rel = compute_p2orm(r.depth, r.normals, K)
        blur = ndimage.gaussian_filter(r.depth, 2)
        t0 = time.perf_counter()
        run = refine_depth(blur, r.normals, rel, K)
        elapsed = time.perf_counter() - t0
        gt_e = depth_edges(r.depth, r.normals, K).mask
        before = edge_metrics(depth_edges(blur, r.normals, K).mask, gt_e).eps_acc
        after = edge_metrics(depth_edges(run.depth, r.normals, K).mask, gt_e).eps_acc
        mb, ma = depth_metrics(blur, r.depth), depth_metrics(run.depth, r.depth)
        d_rel = (ma.rel - mb.rel) / mb.rel
        d_rmse = (ma.rmse_lin - mb.rmse_lin) / mb.rmse_lin
        info["detail"] = (f"eps_acc {before:.3f}->{after:.3f}, rel {mb.rel:.4g}->{ma.rel:.4g} ({d_rel:+.2%}), "
                          f"rmse {mb.rmse_lin:.4g}->{ma.rmse_lin:.4g} ({d_rmse:+.2%})")
        assert after <= 0.5 * before
        # general metrics must not degrade by more than 1%
        assert d_rel < 0.01 and d_rmse < 0.01
        assert elapsed < 60.0, f"runtime {elapsed:.2f}s"


def test_criterion_10_roundtrip_and_determinism(criterion, tmp_path):
    with criterion(10, "file round-trips and bit-identical pipeline runs") as info:
        rng = np.random.default_rng(10)
        rel = random_relation(rng, (12, 14), p_nonzero=0.4)
        io.write_relation(tmp_path / "rel", rel)
        assert io.read_relation(tmp_path / "rel").equals(rel)
        v = rng.normal(size=(12, 14)).astype(np.float32)
        io.write_float_map(tmp_path / "f.raw", v)
        assert np.array_equal(io.read_float_map(tmp_path / "f.raw"), v)
        pr = ProbRelationMap.from_hard(rel)
        io.write_prob_relation(tmp_path / "p.raw", pr)
        back = io.read_prob_relation(tmp_path / "p.raw")
        assert all(np.array_equal(back.probs[i], pr.probs[i], equal_nan=True) for i in rel.inclinations)
        d = rng.uniform(0.5, 10, (12, 14))
        io.write_depth(tmp_path / "d.png", d)
        assert np.abs(io.read_depth(tmp_path / "d.png") - d).max() <= io.DEFAULT_PNG_SCALE / 2 + 1e-12
        io.write_depth(tmp_path / "d.pfm", d)
        assert np.array_equal(io.read_depth(tmp_path / "d.pfm"), d.astype(np.float32))

        size = ["--width", "160", "--height", "120"]
        outputs = []
        for tag in ("a", "b"):
            root = tmp_path / tag
            syn = root / "synth"
            assert main(["synth", "box_on_floor", "--param", "cols=95,130", "--param", "rows=22,50",
                         "--out", str(syn), *size]) == EXIT_OK
            common = ["--intrinsics", str(syn / "intrinsics.txt")]
            assert main(["gen-labels", "--depth", str(syn / "depth.pfm"), "--normals", str(syn / "normals.pfm"),
                         "--out", str(root / "lab"), *common]) == EXIT_OK
            assert main(["derive", "--relation", str(root / "lab"), "--out", str(root / "bd")]) == EXIT_OK
            assert main(["eval", "--pred-boundary", str(root / "bd_boundary.png"),
                         "--gt-boundary", str(root / "bd_boundary.png"), "--report", str(root / "rep.txt")]) == 0
            io.write_depth(root / "blur.pfm", ndimage.gaussian_filter(io.read_depth(syn / "depth.pfm"), 2))
            assert main(["refine", "--depth", str(root / "blur.pfm"), "--relation", str(root / "lab"),
                         "--normals", str(syn / "normals.pfm"), "--iters", "20", *common]) == EXIT_OK
            outputs.append(root)
        a, b = outputs
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), str(f)
        info["detail"] = f"{len(files)} pipeline files bit-identical"


def test_criterion_11_constants(criterion, K, rendered):
    with criterion(11, "alpha constants, default threshold, connectivity ablation") as info:
        assert (ALPHA_BSDS, ALPHA_NYU) == (50.0, 10.0)
        rng = np.random.default_rng(11)
        gt = random_relation(rng, (9, 9), p_nonzero=0.4)
        probs = {}
        for incl in I4:
            p = rng.dirichlet((1, 1, 1), size=gt.shape)
            p[~gt.present(incl)] = np.nan
            probs[incl] = p
        pr = ProbRelationMap(probs, 8)
        z50, nz50 = class_balanced_ce(pr, gt, ALPHA_BSDS, split=True)
        z10, nz10 = class_balanced_ce(pr, gt, ALPHA_NYU, split=True)
        assert z50 == z10 and nz50 / nz10 == pytest.approx(5.0, rel=1e-12)

        assert DEFAULT_THRESHOLD == 0.5
        vals = np.array([[0.49, 0.5, 0.51]])
        assert threshold_boundary(BoundaryMap(vals, False)).mask.tolist() == [[False, True, True]]

        _, r = rendered("box_on_floor")
        r8 = compute_p2orm(r.depth, r.normals, K, connectivity=8)
        r4 = compute_p2orm(r.depth, r.normals, K, connectivity=4)
        assert set(r4.inclinations) == set(I2) and set(r8.inclinations) == set(I4)
        assert set(r4.inclinations) < set(r8.inclinations)
        for incl in I2:
            assert np.array_equal(r4.labels[incl], r8.labels[incl])
        b4, b8 = boundary_from_relation(r4).mask, boundary_from_relation(r8).mask
        assert not (b4 & ~b8).any()
        diag = r8.count_nonzero() - r4.count_nonzero()
        info["detail"] = (f"CE ratio 5, t=0.5, I2 boundary {int(b4.sum())} px within I4 boundary "
                          f"{int(b8.sum())} px, {diag} diagonal labels")
        assert diag > 0 and Inclination.D in r8.inclinations
