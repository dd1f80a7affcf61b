"""Quantitative acceptance harness.

Every test here checks one headline guarantee of the pipeline end to end,
at fixed seeds and tolerances, and prints exactly one line of the form
``PASS <test name>: <measured numbers>`` when the guarantee holds.  Running
``pytest -v -rA tests/test_acceptance.py`` therefore doubles as an
acceptance report.  The tolerances are contractual: loosening one is a
behavior change, not a test fix.
"""

import dataclasses
import os
import time

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from conftest import synth_person
from upfit import body_model, container, direct_predict as dp, fitting, \
    metrics, render, so3
from upfit.fitting import (KeypointSet2D, SilhouetteData, build_ratio_table,
                           estimate_person_size, mask_silhouette_energy)
from upfit.forest import ForestParams


def report(name, detail):
    print(f"PASS {name}: {detail}")


def random_mask(rng, h, w, density=None):
    density = density if density is not None else rng.uniform(0.05, 0.6)
    mask = (rng.random((h, w)) < density).astype(np.uint8)
    if not mask.any():
        mask[rng.integers(h), rng.integers(w)] = 1
    return mask


def brute_force_double_sum(model_mask, target_mask):
    """Direct evaluation: squared nearest distances one way, plain the other."""
    mp = np.argwhere(model_mask > 0).astype(float)
    tp = np.argwhere(target_mask > 0).astype(float)
    d = cdist(mp, tp)
    return float(np.sum(d.min(axis=1) ** 2) + np.sum(d.min(axis=0)))


# --------------------------------------------------------------- silhouette

def test_silhouette_energy_matches_brute_force_double_sum():
    rng = np.random.default_rng(20)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        h, w = rng.integers(8, 65, size=2)
        model_mask = random_mask(rng, h, w)
        target_mask = random_mask(rng, h, w)
        got = mask_silhouette_energy(model_mask, target_mask)
        want = brute_force_double_sum(model_mask, target_mask)
        rel = abs(got - want) / max(want, 1.0)
        worst = max(worst, rel)
        assert rel <= 1e-6
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    report("silhouette energy oracle",
           f"50 random mask pairs, worst rel diff {worst:.2e}, "
           f"{elapsed:.1f}s")


def test_silhouette_energy_is_zero_exactly_when_masks_match():
    rng = np.random.default_rng(21)
    for _ in range(30):
        h, w = rng.integers(6, 40, size=2)
        mask = random_mask(rng, h, w)
        assert mask_silhouette_energy(mask, mask) == 0.0
        flipped = mask.copy()
        y, x = rng.integers(h), rng.integers(w)
        flipped[y, x] = 1 - flipped[y, x]
        if flipped.any():
            assert mask_silhouette_energy(flipped, mask) > 0.0
            assert mask_silhouette_energy(mask, flipped) > 0.0
    report("silhouette energy identity",
           "zero exactly on 30 identical pairs, positive for every "
           "one-pixel difference")


def test_distance_transform_matches_quadratic_brute_force():
    rng = np.random.default_rng(22)
    worst = 0.0
    for trial in range(50):
        h, w = rng.integers(4, 65, size=2)
        if trial == 0:
            mask = np.ones((h, w), dtype=np.uint8)
        elif trial == 1:
            mask = np.zeros((h, w), dtype=np.uint8)
            mask[h // 2, w // 2] = 1
        else:
            mask = random_mask(rng, h, w, density=rng.uniform(0.01, 0.7))
        got = render.distance_transform(mask)
        ys, xs = np.mgrid[0:h, 0:w]
        pix = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(float)
        occ = np.argwhere(mask > 0).astype(float)
        want = cdist(pix, occ).min(axis=1).reshape(h, w)
        worst = max(worst, float(np.abs(got - want).max()))
        assert np.allclose(got, want, atol=1e-6)
    report("distance transform oracle",
           f"50 random masks up to 64x64, worst abs diff {worst:.2e}")


# ------------------------------------------------------------------ skinning

def test_skinning_reproduces_rest_pose_and_rotates_rigidly(model):
    rng = np.random.default_rng(23)
    worst_rest, worst_rigid = 0.0, 0.0
    for _ in range(10):
        beta = rng.normal(0, 1.0, size=model.num_shapes)
        rest = body_model.pose_mesh(model, np.zeros((model.num_joints, 3)),
                                    beta)
        worst_rest = max(worst_rest, float(np.abs(
            rest.vertices - body_model.shaped_vertices(model, beta)).max()))

        pose = np.zeros((model.num_joints, 3))
        pose[1:] = rng.normal(0, 0.3, size=(model.num_joints - 1, 3))
        pose[0] = rng.normal(0, 1.0, size=3)
        posed = body_model.pose_mesh(model, pose, beta)

        r = rng.normal(0, 1.0, size=3)
        R = so3.axis_angle_to_matrix(r)
        pose2 = pose.copy()
        pose2[0] = so3.matrix_to_axis_angle(
            R @ so3.axis_angle_to_matrix(pose[0]))
        rotated = body_model.pose_mesh(model, pose2, beta)
        pivot = body_model.rest_joints(model, beta)[0]
        expect = (posed.vertices - pivot) @ R.T + pivot
        worst_rigid = max(worst_rigid,
                          float(np.abs(rotated.vertices - expect).max()))
    assert worst_rest <= 1e-9
    assert worst_rigid <= 1e-9
    report("skinning identity and equivariance",
           f"rest-pose reproduction {worst_rest:.2e}, global-rotation "
           f"equivariance {worst_rigid:.2e} over 10 random draws")


# ---------------------------------------------------------------- round trip

def round_trip_case(model, cam, s, noise_px):
    rng = np.random.default_rng(1000 + s)
    pose, trans = body_model.frontal_pose(model, 1.8)
    pose = pose.copy()
    pose[1:] += rng.normal(0, 0.15, size=pose[1:].shape)
    beta = rng.normal(0, 0.8, size=model.num_shapes)
    trans = np.asarray(trans, float) + rng.normal(0, 0.1, size=3)
    posed = body_model.pose_mesh(model, pose, beta, trans)
    uv = render.project(body_model.model_keypoints3d(model, posed, "mini18"),
                        cam)
    if noise_px:
        uv = uv + rng.normal(0, noise_px, size=uv.shape)
    kp = KeypointSet2D(set_name="mini18", points=uv,
                       confidence=np.ones(len(uv)))
    return posed, kp


def test_fit_round_trips_synthetic_people(model, camera):
    H_mm = model.canonical_height * 1000
    slowest = 0.0

    def run(noise_px):
        errs = []
        nonlocal slowest
        for s in range(20):
            posed, kp = round_trip_case(model, camera, s, noise_px)
            t0 = time.perf_counter()
            res = fitting.fit(model, camera, kp)
            slowest = max(slowest, time.perf_counter() - t0)
            fitted = body_model.pose_mesh(model, res.pose, res.shape,
                                          res.translation)
            errs.append(np.linalg.norm(fitted.joints3d - posed.joints3d,
                                       axis=1).max() * 1000)
        return np.array(errs)

    exact = run(0.0)
    assert exact.max() <= 0.01 * H_mm, f"exact leg worst {exact.max():.1f}mm"
    noisy = run(2.0)
    assert np.median(noisy) <= 0.05 * H_mm, \
        f"noise leg median {np.median(noisy):.1f}mm"
    assert slowest < 30.0
    report("keypoint fit round trip",
           f"20 exact configs worst {exact.max():.2f}mm (bar "
           f"{0.01 * H_mm:.0f}mm), 2px-noise median {np.median(noisy):.1f}mm "
           f"(bar {0.05 * H_mm:.0f}mm), slowest fit {slowest:.1f}s")


# ------------------------------------------------------- silhouette fitting

def test_silhouette_term_recovers_girth_keypoints_cannot_see(model, camera):
    wins = 0
    d_kp_all, d_sil_all = [], []
    for s in range(50):
        rng = np.random.default_rng(3000 + s)
        pose, trans = body_model.frontal_pose(model, 2.4)
        pose = pose.copy()
        pose[1:] += rng.normal(0, 0.08, size=pose[1:].shape)
        g = rng.uniform(0.4, 1.6) * rng.choice([-1.0, 1.0])
        beta = np.array([0.0, g])
        posed = body_model.pose_mesh(model, pose, beta, trans)
        uv = render.project(body_model.model_keypoints3d(model, posed,
                                                         "mini6"), camera)
        kp = KeypointSet2D(set_name="mini6", points=uv,
                           confidence=np.ones(len(uv)))
        sil = render.rasterize(posed, camera, mode="silhouette")

        r_kp = fitting.fit(model, camera, kp)
        r_sil = fitting.fit(model, camera, kp, silhouette=sil)
        d_kp = np.linalg.norm(r_kp.shape - beta)
        d_sil = np.linalg.norm(r_sil.shape - beta)
        d_kp_all.append(d_kp)
        d_sil_all.append(d_sil)
        wins += d_sil < d_kp
    assert wins >= 40, f"silhouette helped in only {wins}/50 trials"
    report("silhouette term value",
           f"shape recovery improved in {wins}/50 girth trials, median "
           f"|shape error| {np.median(d_kp_all):.3f} keypoint-only vs "
           f"{np.median(d_sil_all):.3f} with silhouette")


# ------------------------------------------------------------- person size

def test_person_size_estimate_survives_torso_foreshortening(model, camera):
    table = build_ratio_table(model, 400, seed=7, keypoint_set="mini18")
    ok, errs = 0, []
    for s in range(60):
        rng = np.random.default_rng(4000 + s)
        z = rng.uniform(2.0, 4.0)
        pitch = np.deg2rad(rng.uniform(0.0, 60.0))
        pose, trans = body_model.frontal_pose(model, z)
        pose = pose.copy()
        pose[1:] += rng.normal(0, 0.08, size=pose[1:].shape)
        # truth: projected height of the person before pitching the torso
        posed0 = body_model.pose_mesh(model, pose, None, trans)
        uv0 = render.project(posed0.vertices, camera)
        true_size = uv0[:, 1].max() - uv0[:, 1].min()
        pose_p = pose.copy()
        pose_p[1, 0] += pitch
        posed = body_model.pose_mesh(model, pose_p, None, trans)
        uv = render.project(body_model.model_keypoints3d(model, posed,
                                                         "mini18"), camera)
        est = estimate_person_size(uv, np.ones(len(uv)), table)
        rel = abs(est.size_px - true_size) / true_size
        errs.append(rel)
        ok += rel <= 0.10
    assert ok >= 54, f"within 10% in only {ok}/60 foreshortening trials"

    worst_rel = 0.0
    for s in range(20):
        rng = np.random.default_rng(5000 + s)
        pts = rng.uniform(50, 450, size=(18, 2))
        conf = np.ones(18)
        e1 = estimate_person_size(pts, conf, table).size_px
        for scale in (0.5, 2.0, 4.0):
            e2 = estimate_person_size(pts * scale, conf, table).size_px
            assert e2 == scale * e1
        scale = rng.uniform(0.2, 5.0)
        e2 = estimate_person_size(pts * scale, conf, table).size_px
        worst_rel = max(worst_rel, abs(e2 - scale * e1) / (scale * e1))
    assert worst_rel <= 1e-9
    report("person size under foreshortening",
           f"{ok}/60 trials within 10% up to 60 degree torso pitch (median "
           f"rel err {np.median(errs) * 100:.1f}%), scale equivariance exact "
           f"for power-of-two scales and {worst_rel:.1e} rel otherwise")


# --------------------------------------------------------- direct prediction

def test_direct_prediction_beats_mean_pose_and_is_fast(model, camera):
    poses, shapes = dp.sample_pose_corpus(model, 2000, seed=11)
    views = dp.default_viewpoints()
    assert len(views.viewpoints) == 5 * 36
    train_ts = dp.synthesize_training_set(model, poses[:1800], shapes[:1800],
                                          views, camera)
    params = ForestParams(n_trees=12, max_depth=10, row_subsample=0.2,
                          n_bins=32)
    m = dp.train(train_ts, model, camera, params=params, seed=0)

    b_pose, b_shape, _ = dp.mean_pose_baseline(train_ts, model)
    b_joints = body_model.pose_mesh(model, b_pose, b_shape).joints3d
    b_rel = b_joints - b_joints[0]
    eval_views = views.viewpoints[::15]

    dp_errs, base_errs, ref_pairs = [], [], []
    energy_viol = 0
    t_pred, rows = 0.0, 0
    for p in range(1800, 2000):
        mesh = body_model.pose_mesh(model, poses[p], shapes[p])
        landmarks = mesh.vertices[np.asarray(model.landmark_vertices)]
        center = mesh.joints3d[0]
        for view in eval_views:
            cam_lm = view.apply(landmarks, center)
            if cam_lm[:, 2].min() <= 1e-6:
                continue
            pix = render.project(cam_lm, camera)
            true_rel = view.apply(mesh.joints3d, center)
            true_rel = true_rel - true_rel[0]
            t1 = time.perf_counter()
            pose_hat, shape_hat, trans_hat = dp.predict(m, model, pix, camera)
            t_pred += time.perf_counter() - t1
            mesh_hat = body_model.pose_mesh(model, pose_hat, shape_hat)
            rel_hat = mesh_hat.joints3d - mesh_hat.joints3d[0]
            dp_errs.append(np.linalg.norm(rel_hat - true_rel, axis=1).mean())
            base_errs.append(np.linalg.norm(b_rel - true_rel, axis=1).mean())
            rows += 1
            if rows % 5 == 0:
                kp = KeypointSet2D(set_name=f"surface{model.num_landmarks}",
                                   points=pix, confidence=np.ones(len(pix)))
                r = dp.refine_global_rotation(model, camera, kp, pose_hat,
                                              shape_hat, trans_hat, steps=25)
                if r.energies["keypoint"] > r.energies["keypoint_initial"] \
                        + 1e-12:
                    energy_viol += 1
                mesh_r = body_model.pose_mesh(model, r.pose, r.shape,
                                              r.translation)
                rel_r = mesh_r.joints3d - mesh_r.joints3d[0]
                ref_pairs.append((np.linalg.norm(rel_r - true_rel,
                                                 axis=1).mean(),
                                  dp_errs[-1]))

    dp_err = float(np.mean(dp_errs))
    base_err = float(np.mean(base_errs))
    improvement = (base_err - dp_err) / base_err
    assert improvement >= 0.20, \
        f"only {improvement * 100:.1f}% better than the mean-pose baseline"
    assert energy_viol == 0, f"{energy_viol} refinements increased energy"
    ref = np.array(ref_pairs)
    assert ref[:, 0].mean() < ref[:, 1].mean(), "refinement did not help"

    t1 = time.perf_counter()
    mesh = body_model.pose_mesh(model, poses[1800], shapes[1800])
    landmarks = mesh.vertices[np.asarray(model.landmark_vertices)]
    pix = render.project(eval_views[0].apply(landmarks, mesh.joints3d[0]),
                         camera)
    fitting.fit(model, camera, KeypointSet2D(
        set_name=f"surface{model.num_landmarks}", points=pix,
        confidence=np.ones(len(pix))))
    t_fit = time.perf_counter() - t1
    speedup = t_fit / (t_pred / rows)
    assert speedup >= 10.0, f"prediction only {speedup:.1f}x faster"
    report("direct prediction",
           f"{rows} held-out views: {dp_err * 1000:.1f}mm vs baseline "
           f"{base_err * 1000:.1f}mm ({improvement * 100:.0f}% better), "
           f"refinement monotone on {len(ref)} rows "
           f"({ref[:, 1].mean() * 1000:.1f}->{ref[:, 0].mean() * 1000:.1f}mm),"
           f" predict {speedup:.0f}x faster than one fit")


# ------------------------------------------------------------------ rotation

def test_rotation_projection_is_orthonormal_and_idempotent():
    rng = np.random.default_rng(24)
    worst_ortho, worst_det, worst_idem = 0.0, 0.0, 0.0
    for trial in range(200):
        if trial % 3 == 0:
            M = rng.normal(size=(3, 3))
        elif trial % 3 == 1:
            M = so3.axis_angle_to_matrix(rng.normal(0, 2.0, size=3)) \
                + rng.normal(0, 0.3, size=(3, 3))
        else:
            M = -so3.axis_angle_to_matrix(rng.normal(0, 2.0, size=3))
        R = so3.nearest_rotation(M)
        worst_ortho = max(worst_ortho,
                          float(np.abs(R @ R.T - np.eye(3)).max()))
        worst_det = max(worst_det, abs(float(np.linalg.det(R)) - 1.0))
        R2 = so3.nearest_rotation(R)
        worst_idem = max(worst_idem, float(np.abs(R2 - R).max()))
    assert worst_ortho <= 1e-9
    assert worst_det <= 1e-9
    assert worst_idem <= 1e-9
    report("rotation projection",
           f"200 random matrices: orthonormality {worst_ortho:.1e}, "
           f"det drift {worst_det:.1e}, idempotence {worst_idem:.1e}")


# ------------------------------------------------------------------- metrics

def test_metric_implementations_match_counting_oracles():
    rng = np.random.default_rng(25)
    for _ in range(50):
        P = int(rng.integers(1, 20))
        pred = rng.uniform(0, 100, size=(P, 2))
        gt = rng.uniform(0, 100, size=(P, 2))
        vis = rng.random(P) < 0.8
        if not vis.any():
            vis[0] = True
        thr, norm = rng.uniform(0.05, 0.5), rng.uniform(10, 80)
        got = metrics.pck(pred, gt, vis, thr, norm).overall
        n_ok = sum(1 for i in range(P) if vis[i]
                   and np.hypot(*(pred[i] - gt[i])) <= thr * norm)
        assert got == n_ok / int(vis.sum())

    worst = 0.0
    for _ in range(30):
        h, w = rng.integers(3, 12, size=2)
        C = int(rng.integers(2, 6))
        gt = rng.integers(0, C, size=(h, w))
        pred = rng.integers(0, C, size=(h, w))
        got = metrics.seg_scores(pred, gt)
        assert got.accuracy == np.mean(pred == gt)
        ious, f1s = [], []
        for c in np.unique(gt):
            tp = fp = fn = 0
            for y in range(h):
                for x in range(w):
                    tp += pred[y, x] == c and gt[y, x] == c
                    fp += pred[y, x] == c and gt[y, x] != c
                    fn += pred[y, x] != c and gt[y, x] == c
            ious.append(tp / (tp + fp + fn) if tp + fp + fn else 1.0)
            f1s.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn
                       else 1.0)
        worst = max(worst, abs(got.macro_iou - np.mean(ious)),
                    abs(got.macro_f1 - np.mean(f1s)))
        assert abs(got.macro_iou - np.mean(ious)) <= 1e-9
        assert abs(got.macro_f1 - np.mean(f1s)) <= 1e-9

    worst3d = 0.0
    for _ in range(20):
        K = int(rng.integers(2, 10))
        gt = rng.normal(0, 0.5, size=(K, 3))
        pred = gt + rng.normal(0, 0.05, size=(K, 3)) + rng.normal(0, 1, 3)
        got = metrics.joint3d_error(pred, gt, mode="root")
        want = np.linalg.norm((pred - pred[0]) - (gt - gt[0]),
                              axis=1).mean() * 1000
        worst3d = max(worst3d, abs(got.mean_mm - want))
        assert abs(got.mean_mm - want) <= 1e-9
        s = rng.uniform(0.5, 2.0)
        R = so3.axis_angle_to_matrix(rng.normal(0, 1, 3))
        moved = s * gt @ R.T + rng.normal(0, 1, 3)
        res = metrics.joint3d_error(moved, gt, mode="procrustes")
        assert res.mean_mm <= 1e-6
    report("metric oracles",
           f"keypoint fractions exact on 50 trials, segmentation macros "
           f"within {worst:.1e} of confusion counts on 30 maps, 3D errors "
           f"within {worst3d:.1e}mm of direct computation")


# ---------------------------------------------------------------- loop refit

def test_loop_refit_improves_rejected_samples(model, dataset_copy):
    from click.testing import CliRunner

    from upfit.cli import main as cli_main
    from upfit.fitting import load_fit, save_fit, save_keypoints
    from upfit.manifest import load_manifest

    man = load_manifest(os.path.join(dataset_copy, "manifest.json"))
    cam = render.Camera.from_dict(man.camera)
    os.makedirs(os.path.join(dataset_copy, "pred"), exist_ok=True)
    for sid in ("s1", "s4"):
        sample = man.get(sid)
        res = load_fit(man.resolve(sample.fit))
        bad_pose = res.pose.copy()
        bad_pose[0, 0] += 0.7
        bad_trans = res.translation.copy()
        bad_trans[2] *= 1.25
        save_fit(man.resolve(sample.fit),
                 dataclasses.replace(res, pose=bad_pose,
                                     translation=bad_trans))
        # predicted landmarks: exact projections of the true parameters
        pose, beta, trans, _ = synth_person(model, 100 + int(sid[1:]))
        posed = body_model.pose_mesh(model, pose, beta, trans)
        uv = render.project(body_model.model_keypoints3d(model, posed,
                                                         "mini18"), cam)
        save_keypoints(os.path.join(dataset_copy, "pred", f"{sid}.txt"),
                       KeypointSet2D(set_name="mini18", points=uv,
                                     confidence=np.ones(len(uv))))
        sample.predicted_keypoints = f"pred/{sid}.txt"
        sample.status = "rejected"
    man.save()

    runner = CliRunner()
    res = runner.invoke(cli_main, ["loop", "--manifest",
                                   os.path.join(dataset_copy,
                                                "manifest.json"),
                                   "--jobs", "1"])
    assert res.exit_code == 0, res.output
    rep = container.read_json(os.path.join(dataset_copy, "loop_report.json"))
    assert rep["refit"] == 2 and rep["errors"] == []
    deltas = {}
    for row in rep["samples"]:
        assert row["f1_delta"] > 0.0, row
        deltas[row["sample_id"]] = (row["f1_before"], row["f1_after"])

    man = load_manifest(os.path.join(dataset_copy, "manifest.json"))
    for sid in ("s1", "s4"):
        assert man.get(sid).status == "unreviewed"
        assert len(man.get(sid).previous_fits) == 1
    report("loop refit",
           "; ".join(f"{sid} part-mask f1 {b:.3f}->{a:.3f}"
                     for sid, (b, a) in sorted(deltas.items()))
           + " (strictly positive deltas)")


# ------------------------------------------------------------ review service

def test_review_log_replay_and_export_feed_labelgen(dataset_copy):
    from click.testing import CliRunner
    from fastapi.testclient import TestClient

    from upfit.cli import main as cli_main
    from upfit.manifest import load_manifest
    from upfit.review_service import create_app

    manifest_path = os.path.join(dataset_copy, "manifest.json")
    client = TestClient(create_app(manifest_path))
    for sid, decision in (("s0", "accept"), ("s2", "accept"),
                          ("s1", "reject")):
        r = client.post(f"/items/{sid}/verdict",
                        json={"decision": decision, "annotator": "harness",
                              "idempotency_key": f"key-{sid}"})
        assert r.status_code == 200 and r.json()["appended"] is True
    retry = client.post("/items/s0/verdict",
                        json={"decision": "accept", "annotator": "harness",
                              "idempotency_key": "key-s0"})
    assert retry.json()["appended"] is False
    stats_before = client.get("/stats").json()

    # drift the manifest by hand, then restart: the log must win
    man = load_manifest(manifest_path)
    man.get("s0").status = "unreviewed"
    man.get("s1").status = "accepted"
    man.save()
    client2 = TestClient(create_app(manifest_path))
    stats_after = client2.get("/stats").json()
    assert stats_after == stats_before
    man = load_manifest(manifest_path)
    assert man.get("s0").status == "accepted"
    assert man.get("s1").status == "rejected"

    payload = client2.get("/export").json()
    assert [s["sample_id"] for s in payload["samples"]] == ["s0", "s2"]
    export_path = os.path.join(dataset_copy, "accepted_export.json")
    container.write_json(export_path, payload)
    assert len(load_manifest(export_path)) == 2

    res = CliRunner().invoke(cli_main, ["labelgen", "--manifest",
                                        export_path])
    assert res.exit_code == 0, res.output
    assert "done: 2 bundles, 0 skipped, 0 failed" in res.output
    for sid in ("s0", "s2"):
        bundle = container.read_json(os.path.join(dataset_copy, "labels",
                                                  f"{sid}_bundle.json"))
        for member in bundle["members"].values():
            assert os.path.exists(os.path.join(dataset_copy, "labels",
                                               member["path"]))
    report("review log replay and export",
           f"restart reproduced {stats_before} from the verdict log, "
           f"export of 2 accepted samples label-generated cleanly")
