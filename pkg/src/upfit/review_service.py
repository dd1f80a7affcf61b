"""HTTP backend for fit curation.

Serves review items (original image, four rotated shaded renders, overlay)
and records accept/reject verdicts.  Verdicts go to an append-only JSONL
log; the manifest status is derived from the log (latest entry per sample
wins), so replaying the log always reproduces the stored statuses.  Render
assets are content-addressed PNGs in a cache directory; the service never
mutates fits or other pipeline outputs.

Endpoints:
  GET  /items?status=&limit=        item list (assets built on demand)
  GET  /items/next?annotator=&ttl=  lease the next unreviewed item
  GET  /items/{id}                  single item
  GET  /assets/{hash}               raster bytes
  POST /items/{id}/verdict          {decision, annotator, note?, idempotency_key?}
  GET  /stats                       counts per status
  GET  /export?status=accepted      manifest subset for downstream label generation
"""

from __future__ import annotations

import json
import os
import threading
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from . import body_model, container, so3
from .body_model import load_model
from .fitting import load_fit
from .manifest import STATUSES, load_manifest
from .render import (Camera, load_image, overlay_image, render_buffers,
                     render_shaded)

DECISION_TO_STATUS = {"accept": "accepted", "reject": "rejected"}
DEFAULT_LEASE_TTL = 120.0
RENDER_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)


class ReviewState:
    """Mutable service state: manifest, verdict log, leases, asset cache."""

    def __init__(self, manifest_path, model_path=None, asset_cache=None,
                 camera=None):
        self.lock = threading.RLock()
        self.manifest = load_manifest(manifest_path)
        model_path = model_path or self.manifest.resolve(self.manifest.model)
        self.model = load_model(model_path)
        self.camera_override = camera
        self.asset_dir = asset_cache or self.manifest.resolve("review_assets")
        os.makedirs(self.asset_dir, exist_ok=True)
        self.log_path = self.manifest.resolve("verdicts.jsonl")
        self.assets = {}       # sha -> absolute file path
        self.items = {}        # sample_id -> asset dict
        self.leases = {}       # sample_id -> (annotator, expiry)
        self.seen_keys = set() # (sample_id, idempotency_key)
        self.log_counts = {}   # sample_id -> number of log entries
        for name in os.listdir(self.asset_dir):
            if name.endswith(".png"):
                self.assets[name[:-4]] = os.path.join(self.asset_dir, name)
        self._replay_log()

    # ----- verdict log ---------------------------------------------------

    def _replay_log(self):
        """Derive every status from the log; fix the manifest if it drifted."""
        statuses = {}
        if os.path.exists(self.log_path):
            with open(self.log_path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    sid = rec["sample_id"]
                    statuses[sid] = DECISION_TO_STATUS[rec["decision"]]
                    self.log_counts[sid] = self.log_counts.get(sid, 0) + 1
                    key = rec.get("idempotency_key")
                    if key:
                        self.seen_keys.add((sid, key))
        changed = False
        for sample in self.manifest:
            derived = statuses.get(sample.sample_id, "unreviewed")
            if sample.status != derived and sample.sample_id in statuses:
                sample.status = derived
                changed = True
        if changed:
            self.manifest.save()

    def record_verdict(self, sample_id, decision, annotator, note,
                       idempotency_key):
        with self.lock:
            sample = self.manifest.get(sample_id)
            if idempotency_key and (sample_id, idempotency_key) in self.seen_keys:
                return sample.status, False
            rec = {"ts": time.time(), "sample_id": sample_id,
                   "decision": decision, "annotator": annotator}
            if note:
                rec["note"] = note
            if idempotency_key:
                rec["idempotency_key"] = idempotency_key
                self.seen_keys.add((sample_id, idempotency_key))
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self.log_counts[sample_id] = self.log_counts.get(sample_id, 0) + 1
            sample.status = DECISION_TO_STATUS[decision]
            self.manifest.save()
            self.leases.pop(sample_id, None)
            return sample.status, True

    # ----- assets --------------------------------------------------------

    def _store_bytes(self, payload):
        sha = container.sha256_bytes(payload)
        path = os.path.join(self.asset_dir, f"{sha}.png")
        if not os.path.exists(path):
            container.atomic_write_bytes(path, payload)
        self.assets[sha] = path
        return sha

    def _store_file(self, src):
        with open(src, "rb") as fh:
            return self._store_bytes(fh.read())

    def _camera_for(self, sample):
        cam = (self.camera_override or sample.camera or self.manifest.camera)
        if cam is None:
            raise ValueError(f"no camera configured for {sample.sample_id}")
        return Camera.from_dict(cam)

    def prepare_assets(self, sample):
        """Build the 4 rotated renders plus the overlay for one sample."""
        if sample.sample_id in self.items:
            return self.items[sample.sample_id]
        if not sample.fit:
            raise FileNotFoundError(f"sample {sample.sample_id} has no fit")
        result = load_fit(self.manifest.resolve(sample.fit))
        cam = self._camera_for(sample)
        posed = body_model.pose_mesh(self.model, result.pose, result.shape,
                                     result.translation)
        center = posed.vertices.mean(axis=0)
        render_hashes = []
        rgb0 = None
        for az in RENDER_AZIMUTHS:
            R = so3.axis_angle_to_matrix(np.array([0.0, np.deg2rad(az), 0.0]))
            verts = (posed.vertices - center) @ R.T + center
            mesh = body_model.PosedMesh(vertices=verts, faces=posed.faces,
                                        joints3d=(posed.joints3d - center)
                                        @ R.T + center)
            rgb = render_shaded(mesh, cam, self.model.part_label)
            if az == 0.0:
                rgb0 = rgb
            render_hashes.append(self._store_bytes(_png_bytes(rgb)))
        labels, _, _ = render_buffers(posed, cam, self.model.part_label)
        mask = labels > 0
        if sample.image:
            base = load_image(self.manifest.resolve(sample.image))
        else:
            base = np.full(rgb0.shape, 32, dtype=np.uint8)
        overlay = overlay_image(base, rgb0, mask, alpha=0.5)
        overlay_hash = self._store_bytes(_png_bytes(overlay))
        image_hash = (self._store_file(self.manifest.resolve(sample.image))
                      if sample.image else None)
        item = {"renders": render_hashes, "overlay": overlay_hash,
                "image": image_hash, "energies": result.energies}
        self.items[sample.sample_id] = item
        return item

    # ----- leases ----------------------------------------------------------

    def lease_next(self, annotator, ttl):
        with self.lock:
            now = time.time()
            for sample in self.manifest:
                if sample.status != "unreviewed" or not sample.fit:
                    continue
                lease = self.leases.get(sample.sample_id)
                if lease and lease[1] > now and lease[0] != annotator:
                    continue
                self.leases[sample.sample_id] = (annotator, now + ttl)
                return sample
            return None


def _png_bytes(rgb):
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _item_payload(state, sample, lease=None):
    assets = state.prepare_assets(sample)
    payload = {
        "sample_id": sample.sample_id,
        "status": sample.status,
        "image_url": f"/assets/{assets['image']}" if assets["image"] else None,
        "render_urls": [f"/assets/{h}" for h in assets["renders"]],
        "overlay_url": f"/assets/{assets['overlay']}",
        "energies": assets["energies"],
        "guidance": ("Accept when body part rotation and location largely "
                     "match the image; head and foot rotation are not "
                     "grounds for rejection."),
    }
    if lease is not None:
        payload["lease_expires"] = lease
    return payload


def create_app(manifest_path, model_path=None, asset_cache=None, camera=None,
               ui_dir=None):

    state = ReviewState(manifest_path, model_path=model_path,
                        asset_cache=asset_cache, camera=camera)
    app = FastAPI(title="fit review service")
    app.state.review = state
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    def error(code, message):
        return JSONResponse(status_code=code, content={"error": message})

    @app.get("/items")
    def list_items(status: str | None = None, limit: int = 50):
        if status is not None and status not in STATUSES:
            return error(400, f"unknown status {status!r}")
        out = []
        for sample in state.manifest:
            if status is not None and sample.status != status:
                continue
            if not sample.fit:
                continue
            out.append(_item_payload(state, sample))
            if len(out) >= limit:
                break
        return {"items": out}

    @app.get("/items/next")
    def next_item(annotator: str = "anonymous", ttl: float = DEFAULT_LEASE_TTL):
        sample = state.lease_next(annotator, ttl)
        if sample is None:
            return {"item": None}
        lease = state.leases[sample.sample_id][1]
        return {"item": _item_payload(state, sample, lease=lease)}

    @app.get("/items/{sample_id}")
    def get_item(sample_id: str):
        if not state.manifest.has(sample_id):
            return error(404, f"unknown item {sample_id!r}")
        return _item_payload(state, state.manifest.get(sample_id))

    @app.get("/assets/{sha}")
    def get_asset(sha: str):
        path = state.assets.get(sha)
        if path is None or not os.path.exists(path):
            return error(404, "unknown asset")
        with open(path, "rb") as fh:
            return Response(content=fh.read(), media_type="image/png")

    @app.post("/items/{sample_id}/verdict")
    async def post_verdict(sample_id: str, request: Request):
        if not state.manifest.has(sample_id):
            return error(404, f"unknown item {sample_id!r}")
        try:
            body = await request.json()
        except Exception:
            return error(409, "verdict body is not valid JSON")
        if not isinstance(body, dict):
            return error(409, "verdict body must be an object")
        decision = body.get("decision")
        annotator = body.get("annotator")
        note = body.get("note")
        key = body.get("idempotency_key")
        if decision not in DECISION_TO_STATUS:
            return error(409, f"decision must be accept|reject, got {decision!r}")
        if not isinstance(annotator, str) or not annotator.strip():
            return error(409, "annotator must be a non-empty string")
        if note is not None and not isinstance(note, str):
            return error(409, "note must be a string")
        if key is not None and not isinstance(key, str):
            return error(409, "idempotency_key must be a string")
        status, appended = state.record_verdict(sample_id, decision,
                                                annotator.strip(), note, key)
        return {"sample_id": sample_id, "status": status,
                "appended": appended,
                "log_entries": state.log_counts.get(sample_id, 0)}

    @app.get("/stats")
    def stats():
        counts = state.manifest.status_counts()
        counts["total"] = len(state.manifest)
        return counts

    @app.get("/export")
    def export(status: str = "accepted"):
        if status not in STATUSES:
            return error(400, f"unknown status {status!r}")
        subset = [s.to_dict() for s in state.manifest if s.status == status]
        payload = {"format_version": 1, "samples": subset}
        if state.manifest.camera is not None:
            payload["camera"] = state.manifest.camera
        if state.manifest.model is not None:
            payload["model"] = state.manifest.model
        return payload

    if ui_dir is not None:
        # mounted last so the API routes above win; html=True serves index.html at /
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
