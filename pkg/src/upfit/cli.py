"""Command-line pipeline: fit, label, train, predict, evaluate, review, loop.

Dataset commands operate on a manifest file and are idempotent: every
sample records a hash of its fit inputs, and reruns skip samples whose
inputs are unchanged.  Per-sample failures are recorded in the manifest
and do not stop the run; the exit code is nonzero if any sample failed
unless ``--tolerate-errors`` is given.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import click
import numpy as np

from . import body_model, container, labelgen, metrics
from .body_model import load_model
from .fitting import (FitConfig, RatioTable, build_ratio_table, fit, load_fit,
                      load_keypoints, save_fit)
from .manifest import Manifest, load_manifest
from .render import Camera, load_mask

DEFAULT_CAMERA = {"focal": 500.0, "principal_point": [250.0, 250.0],
                  "image_size": [500, 500]}


def _parse_camera(spec):
    """Accept a JSON object string or a path to a JSON file."""
    if spec is None:
        return None
    s = spec.strip()
    data = json.loads(s) if s.startswith("{") else container.read_json(s)
    return data


def _sample_camera(man: Manifest, sample, override):
    cam = override or sample.camera or man.camera or DEFAULT_CAMERA
    return Camera.from_dict(cam)


def _digest(path):
    return container.sha256_file(path)[:16]


def _fit_input_hash(model_path, kp_path, sil_path, table_path, config_dict,
                    camera_dict):
    payload = {
        "model": _digest(model_path),
        "keypoints": _digest(kp_path),
        "silhouette": _digest(sil_path) if sil_path else None,
        "table": _digest(table_path) if table_path else None,
        "config": config_dict,
        "camera": camera_dict,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return container.sha256_bytes(blob)[:16]


_WORKER_MODELS = {}
_WORKER_TABLES = {}


def _cached_model(path):
    if path not in _WORKER_MODELS:
        _WORKER_MODELS[path] = load_model(path)
    return _WORKER_MODELS[path]


def _cached_table(path):
    if path not in _WORKER_TABLES:
        _WORKER_TABLES[path] = RatioTable.load(path)
    return _WORKER_TABLES[path]


def _fit_one(task):
    """Worker body for one sample; returns a plain-dict outcome."""
    try:
        model = _cached_model(task["model_path"])
        table = _cached_table(task["table_path"])
        kps = load_keypoints(task["kp_path"])
        sil = load_mask(task["sil_path"]) if task["sil_path"] else None
        cfg = FitConfig.from_dict(task["config"]) if task["config"] else None
        cam = Camera.from_dict(task["camera"])
        t0 = time.perf_counter()
        result = fit(model, cam, kps, silhouette=sil, config=cfg,
                     ratio_table=table)
        save_fit(task["out_path"], result)
        return {"sample_id": task["sample_id"], "ok": True,
                "energies": result.energies,
                "seconds": time.perf_counter() - t0}
    except Exception as exc:  # per-sample isolation: record, keep going
        return {"sample_id": task["sample_id"], "ok": False,
                "error": f"{type(exc).__name__}: {exc}"}


def _ensure_ratio_table(man: Manifest, model_path, table_opt, seed):
    if table_opt:
        return os.path.abspath(table_opt)
    path = man.resolve("ratio_table.json")
    if not os.path.exists(path):
        model = load_model(model_path)
        table = build_ratio_table(model, n_samples=400, seed=seed)
        table.save(path)
    return path


def _finish(errors, tolerate):
    if errors:
        click.echo(f"{len(errors)} sample(s) failed:")
        for sid, msg in errors:
            click.echo(f"  {sid}: {msg}")
        if not tolerate:
            sys.exit(1)
    sys.exit(0)


@click.group()
def main():
    """Body-model fitting pipeline."""


@main.command("fit")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="Model file; defaults to the manifest's model entry.")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--ratio-table", "table_path", type=click.Path(exists=True))
@click.option("--camera", "camera_spec", help="JSON object or path.")
@click.option("--jobs", type=int, default=None,
              help="Parallel workers (default: cpu count).")
@click.option("--seed", type=int, default=7)
@click.option("--force", is_flag=True, help="Refit even when inputs unchanged.")
@click.option("--tolerate-errors", is_flag=True)
def cmd_fit(manifest_path, model_path, config_path, table_path, camera_spec,
            jobs, seed, force, tolerate_errors):
    """Fit every sample that lacks an up-to-date fit."""
    man = load_manifest(manifest_path)
    model_path = os.path.abspath(model_path or man.resolve(man.model))
    config_dict = container.read_json(config_path) if config_path else None
    camera_override = _parse_camera(camera_spec)
    table_path = _ensure_ratio_table(man, model_path, table_path, seed)
    fits_dir = man.resolve("fits")
    os.makedirs(fits_dir, exist_ok=True)

    tasks, skipped = [], 0
    for sample in man:
        cam = _sample_camera(man, sample, camera_override)
        in_hash = _fit_input_hash(model_path, man.resolve(sample.keypoints),
                                  man.resolve(sample.silhouette)
                                  if sample.silhouette else None,
                                  table_path, config_dict, cam.to_dict())
        if (not force and sample.status == "accepted"):
            skipped += 1
            continue
        if (not force and sample.fit and sample.input_hash == in_hash
                and os.path.exists(man.resolve(sample.fit))):
            skipped += 1
            continue
        out_rel = os.path.join("fits", f"{sample.sample_id}.json")
        tasks.append({"sample_id": sample.sample_id,
                      "model_path": model_path,
                      "table_path": table_path,
                      "kp_path": man.resolve(sample.keypoints),
                      "sil_path": man.resolve(sample.silhouette)
                      if sample.silhouette else None,
                      "config": config_dict,
                      "camera": cam.to_dict(),
                      "out_path": man.resolve(out_rel),
                      "out_rel": out_rel,
                      "input_hash": in_hash})

    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fit_one, tasks))
    else:
        outcomes = [_fit_one(t) for t in tasks]

    errors = []
    by_id = {t["sample_id"]: t for t in tasks}
    for out in outcomes:
        sample = man.get(out["sample_id"])
        task = by_id[out["sample_id"]]
        if out["ok"]:
            sample.fit = task["out_rel"]
            sample.input_hash = task["input_hash"]
            sample.error = None
            click.echo(f"fit {sample.sample_id}: "
                       f"E={out['energies'].get('total', 0.0):.4g} "
                       f"({out['seconds']:.1f}s)")
        else:
            sample.error = out["error"]
            errors.append((sample.sample_id, out["error"]))
    man.save()
    click.echo(f"done: {sum(o['ok'] for o in outcomes)} fitted, "
               f"{skipped} skipped, {len(errors)} failed")
    _finish(errors, tolerate_errors)


@main.command("labelgen")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--out-dir", "out_dir", default=None,
              help="Label output directory (default: <dataset>/labels).")
@click.option("--status", "status_filter", default="accepted",
              type=click.Choice(["accepted", "any"]))
@click.option("--camera", "camera_spec")
@click.option("--tolerate-errors", is_flag=True)
def cmd_labelgen(manifest_path, model_path, out_dir, status_filter,
                 camera_spec, tolerate_errors):
    """Generate part masks and landmark files from fits."""
    man = load_manifest(manifest_path)
    model_path = os.path.abspath(model_path or man.resolve(man.model))
    model = load_model(model_path)
    model_hash = _digest(model_path)
    camera_override = _parse_camera(camera_spec)
    out_dir = out_dir or man.resolve("labels")
    os.makedirs(out_dir, exist_ok=True)

    errors, made, skipped = [], 0, 0
    for sample in man:
        if status_filter == "accepted" and sample.status != "accepted":
            continue
        if not sample.fit:
            errors.append((sample.sample_id, "no fit"))
            continue
        fit_hash = _digest(man.resolve(sample.fit))
        bundle_json = os.path.join(out_dir, f"{sample.sample_id}_bundle.json")
        if sample.labels and os.path.exists(bundle_json):
            prov = container.read_json(bundle_json).get("provenance", {})
            if prov.get("fit") == fit_hash and prov.get("model") == model_hash:
                skipped += 1
                continue
        try:
            result = load_fit(man.resolve(sample.fit))
            cam = _sample_camera(man, sample, camera_override)
            bundle = labelgen.generate_labels(
                model, result, cam,
                provenance={"fit": fit_hash, "model": model_hash,
                            "sample_id": sample.sample_id})
            bundle_path = labelgen.save_bundle(bundle, out_dir,
                                               sample.sample_id)
            sample.labels = man.relativize(bundle_path)
            made += 1
        except Exception as exc:
            errors.append((sample.sample_id, f"{type(exc).__name__}: {exc}"))
    man.save()
    click.echo(f"done: {made} bundles, {skipped} skipped, {len(errors)} failed")
    _finish(errors, tolerate_errors)


@main.command("ratio-table")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--samples", "n_samples", type=int, default=1000)
@click.option("--seed", type=int, default=7)
@click.option("--keypoint-set", "set_name", default=None)
def cmd_ratio_table(model_path, out_path, n_samples, seed, set_name):
    """Build the person-size / connection-length ratio table."""
    model = load_model(model_path)
    table = build_ratio_table(model, n_samples=n_samples, seed=seed,
                              keypoint_set=set_name)
    table.save(out_path)
    click.echo(f"wrote {out_path}: {len(table.connections)} connections, "
               f"{table.n_samples} samples")


@main.command("dp-train")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--poses", "n_poses", type=int, default=300)
@click.option("--elevations", type=int, default=5)
@click.option("--azimuths", type=int, default=36)
@click.option("--distance", type=float, default=3.5)
@click.option("--camera", "camera_spec")
@click.option("--trees", type=int, default=40)
@click.option("--max-depth", type=int, default=12)
@click.option("--min-leaf", type=int, default=5)
@click.option("--seed", type=int, default=0)
def cmd_dp_train(model_path, out_path, n_poses, elevations, azimuths,
                 distance, camera_spec, trees, max_depth, min_leaf, seed):
    """Synthesize a training set and train the direct-prediction forests."""
    from . import direct_predict as dp
    from .forest import ForestParams
    from .render import sample_viewpoints

    model = load_model(model_path)
    cam = Camera.from_dict(_parse_camera(camera_spec) or DEFAULT_CAMERA)
    poses, shapes = dp.sample_pose_corpus(model, n_poses, seed=seed)
    views = sample_viewpoints(n_elevations=elevations, n_azimuths=azimuths,
                              distance=distance)
    t0 = time.perf_counter()
    training = dp.synthesize_training_set(model, poses, shapes, views, cam)
    click.echo(f"synthesized {training.features.shape[0]} rows "
               f"({training.n_dropped} dropped) "
               f"in {time.perf_counter() - t0:.1f}s")
    params = ForestParams(n_trees=trees, max_depth=max_depth,
                          min_leaf=min_leaf)
    t0 = time.perf_counter()
    dpm = dp.train(training, model, cam, params=params, seed=seed)
    dp.save_dp_model(dpm, out_path)
    click.echo(f"trained {len(dpm.rotation_forests) + 2} forests "
               f"in {time.perf_counter() - t0:.1f}s -> {out_path}")


@main.command("dp-predict")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--dp", "dp_path", required=True, type=click.Path(exists=True))
@click.option("--keypoints", "kp_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--camera", "camera_spec")
@click.option("--refine", "refine_steps", type=int, default=0)
def cmd_dp_predict(model_path, dp_path, kp_path, out_path, camera_spec,
                   refine_steps):
    """Predict parameters from a landmark file, optionally refining."""
    from . import direct_predict as dp
    from .fitting import FitResult, keypoint_energy

    model = load_model(model_path)
    dpm = dp.load_dp_model(dp_path)
    cam = Camera.from_dict(_parse_camera(camera_spec) or DEFAULT_CAMERA)
    kps = load_keypoints(kp_path)
    pose, shape, trans = dp.predict(dpm, model, kps.points, cam)
    if refine_steps > 0:
        result = dp.refine_global_rotation(model, cam, kps, pose, shape,
                                           trans, steps=refine_steps)
    else:
        e = keypoint_energy(pose, shape, trans, model, cam, kps)
        result = FitResult(pose=pose, shape=shape, translation=trans,
                           energies={"keypoint": float(e)}, iterations=0,
                           converged=True, stage_traces=())
    save_fit(out_path, result)
    click.echo(f"predicted -> {out_path} "
               f"(keypoint energy {result.energies['keypoint']:.4g})")


def _pck_norm(points, conf, mode, set_def):
    vis = conf > 0
    pts = points[vis]
    if mode == "torso" and set_def is not None and len(set_def.torso) >= 2:
        a, b = set_def.torso[0], set_def.torso[-1]
        return metrics.torso_diagonal(points, a, b)
    height = pts[:, 1].max() - pts[:, 1].min()
    return max(float(height), 1.0)


@main.command("eval")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--out", "out_path", default=None,
              help="Summary JSON (default: <dataset>/eval_report.json).")
@click.option("--camera", "camera_spec")
@click.option("--pck-threshold", type=float, default=0.2)
@click.option("--pck-norm", type=click.Choice(["bbox", "torso"]),
              default="bbox")
def cmd_eval(manifest_path, model_path, out_path, camera_spec, pck_threshold,
             pck_norm):
    """Score fits against whatever ground truth each sample carries."""
    from .render import project

    man = load_manifest(manifest_path)
    model_path = os.path.abspath(model_path or man.resolve(man.model))
    model = load_model(model_path)
    camera_override = _parse_camera(camera_spec)
    out_path = out_path or man.resolve("eval_report.json")

    rows = []
    for sample in man:
        if not sample.fit:
            continue
        result = load_fit(man.resolve(sample.fit))
        cam = _sample_camera(man, sample, camera_override)
        kps = load_keypoints(man.resolve(sample.keypoints))
        row = {"sample_id": sample.sample_id, "status": sample.status}
        set_def = model.keypoint_sets.get(kps.set_name)
        posed = body_model.pose_mesh(model, result.pose, result.shape,
                                     result.translation)
        pred2d = project(body_model.model_keypoints3d(model, posed,
                                                      kps.set_name), cam)
        norm = _pck_norm(kps.points, kps.confidence, pck_norm, set_def)
        res = metrics.pck(pred2d, kps.points, kps.confidence > 0,
                          pck_threshold, norm)
        row["pck"] = round(res.overall, 6)
        if sample.gt_parts6:
            gt_mask = load_mask(man.resolve(sample.gt_parts6))
            bundle = labelgen.generate_labels(model, result, cam)
            scores = metrics.seg_scores(bundle.reduced_mask, gt_mask)
            row["seg_acc"] = round(scores.accuracy, 6)
            row["seg_f1"] = round(scores.macro_f1, 6)
            row["seg_iou"] = round(scores.macro_iou, 6)
        if sample.gt_joints:
            gt = np.asarray(container.read_json(
                man.resolve(sample.gt_joints))["joints"], dtype=float)
            row["joint3d_root_mm"] = round(
                metrics.joint3d_error(posed.joints3d, gt,
                                      mode="root").mean_mm, 3)
            row["joint3d_procrustes_mm"] = round(
                metrics.joint3d_error(posed.joints3d, gt,
                                      mode="procrustes").mean_mm, 3)
        rows.append(row)

    if rows:
        cols = sorted({k for r in rows for k in r} - {"sample_id"},
                      key=lambda c: (c != "status", c))
        header = ["sample_id"] + cols
        widths = [max(len(h), max((len(str(r.get(h, ""))) for r in rows),
                                  default=0)) for h in header]
        click.echo("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for r in rows:
            click.echo("  ".join(str(r.get(h, "")).ljust(w)
                                 for h, w in zip(header, widths)))
    summary = {"threshold": pck_threshold, "norm": pck_norm, "samples": rows}
    if rows and all("pck" in r for r in rows):
        summary["mean_pck"] = round(float(np.mean([r["pck"] for r in rows])), 6)
    container.write_json(out_path, summary)
    click.echo(f"wrote {out_path}")


@main.command("serve")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--asset-cache", "asset_cache", default=None)
@click.option("--camera", "camera_spec")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8100)
@click.option("--ui", "ui_dir", type=click.Path(exists=True, file_okay=False),
              help="Static frontend directory to serve at /.")
def cmd_serve(manifest_path, model_path, asset_cache, camera_spec, host, port,
              ui_dir):
    """Start the curation review service."""
    import uvicorn

    from .review_service import create_app

    app = create_app(manifest_path, model_path=model_path,
                     asset_cache=asset_cache,
                     camera=_parse_camera(camera_spec),
                     ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("loop")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--ratio-table", "table_path", type=click.Path(exists=True))
@click.option("--camera", "camera_spec")
@click.option("--out", "report_path", default=None,
              help="Report JSON (default: <dataset>/loop_report.json).")
@click.option("--jobs", type=int, default=None)
@click.option("--seed", type=int, default=7)
@click.option("--tolerate-errors", is_flag=True)
def cmd_loop(manifest_path, model_path, config_path, table_path, camera_spec,
             report_path, jobs, seed, tolerate_errors):
    """Refit rejected samples from predicted landmarks and re-queue them."""
    man = load_manifest(manifest_path)
    model_path = os.path.abspath(model_path or man.resolve(man.model))
    model = load_model(model_path)
    model_hash = _digest(model_path)
    config_dict = container.read_json(config_path) if config_path else None
    camera_override = _parse_camera(camera_spec)
    table_path = _ensure_ratio_table(man, model_path, table_path, seed)
    report_path = report_path or man.resolve("loop_report.json")
    fits_dir = man.resolve("fits")
    os.makedirs(fits_dir, exist_ok=True)

    errors, tasks = [], []
    for sample in man:
        if sample.status != "rejected":
            continue
        if not sample.predicted_keypoints:
            errors.append((sample.sample_id, "no predicted keypoints"))
            continue
        pred_path = man.resolve(sample.predicted_keypoints)
        if not os.path.exists(pred_path):
            errors.append((sample.sample_id,
                           f"missing prediction file: {pred_path}"))
            continue
        cam = _sample_camera(man, sample, camera_override)
        gen = len(sample.previous_fits) + 1
        out_rel = os.path.join("fits", f"{sample.sample_id}_loop{gen}.json")
        tasks.append({"sample_id": sample.sample_id,
                      "model_path": model_path,
                      "table_path": table_path,
                      "kp_path": pred_path,
                      "sil_path": man.resolve(sample.silhouette)
                      if sample.silhouette else None,
                      "config": config_dict,
                      "camera": cam.to_dict(),
                      "out_path": man.resolve(out_rel),
                      "out_rel": out_rel})

    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fit_one, tasks))
    else:
        outcomes = [_fit_one(t) for t in tasks]

    def fit_f1(fit_rel, sample, cam):
        result = load_fit(man.resolve(fit_rel))
        bundle = labelgen.generate_labels(model, result, cam)
        gt_mask = load_mask(man.resolve(sample.gt_parts6))
        return metrics.seg_scores(bundle.reduced_mask, gt_mask).macro_f1

    report_rows = []
    by_id = {t["sample_id"]: t for t in tasks}
    for out in outcomes:
        sample = man.get(out["sample_id"])
        task = by_id[out["sample_id"]]
        if not out["ok"]:
            sample.error = out["error"]
            errors.append((sample.sample_id, out["error"]))
            continue
        cam = _sample_camera(man, sample, camera_override)
        row = {"sample_id": sample.sample_id}
        if sample.gt_parts6:
            if sample.fit:
                row["f1_before"] = round(fit_f1(sample.fit, sample, cam), 6)
            row["f1_after"] = round(fit_f1(task["out_rel"], sample, cam), 6)
            if "f1_before" in row:
                row["f1_delta"] = round(row["f1_after"] - row["f1_before"], 6)
        if sample.fit:
            sample.previous_fits.append(sample.fit)
        sample.fit = task["out_rel"]
        sample.input_hash = _fit_input_hash(
            model_path, task["kp_path"], task["sil_path"], table_path,
            config_dict, task["camera"])
        sample.status = "unreviewed"
        sample.error = None
        report_rows.append(row)

    man.save()
    report = {"model": model_hash, "refit": len(report_rows),
              "errors": [{"sample_id": s, "error": e} for s, e in errors],
              "samples": report_rows}
    container.write_json(report_path, report)
    for row in report_rows:
        if "f1_delta" in row:
            click.echo(f"loop {row['sample_id']}: f1 {row['f1_before']:.4f} "
                       f"-> {row['f1_after']:.4f} ({row['f1_delta']:+.4f})")
        else:
            click.echo(f"loop {row['sample_id']}: refit")
    click.echo(f"wrote {report_path}")
    _finish(errors, tolerate_errors)


if __name__ == "__main__":
    main()
