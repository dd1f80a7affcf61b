"""Label generation: render accepted fits into training annotations.

A label bundle holds, for one sample: the full part mask (face labels + 1,
0 background), a reduced mask over a small class vocabulary, the foreground
silhouette, projected surface landmarks with z-buffer visibility tags, and a
manifest with content hashes and provenance.
"""

import dataclasses
import os

import numpy as np

from . import body_model, container, fitting, render

VISIBILITY_EPS = 0.01  # meters of depth slack when testing landmark visibility

REDUCED_CLASS_NAMES = ("background", "head", "torso", "left_arm", "right_arm",
                       "left_leg", "right_leg")


@dataclasses.dataclass(frozen=True)
class PartReductionMap:
    """Total mapping from part-mask values to a reduced class vocabulary.

    Keys cover every source mask value (0 included); value 0 (background)
    must map to class 0.
    """

    to_class: dict
    class_names: tuple = REDUCED_CLASS_NAMES

    def __post_init__(self):
        if self.to_class.get(0, None) != 0:
            raise ValueError("background (0) must map to class 0")
        for src, dst in self.to_class.items():
            if not 0 <= dst < len(self.class_names):
                raise ValueError(f"source {src} maps to unknown class {dst}")

    def apply(self, mask):
        mask = np.asarray(mask)
        present = np.unique(mask)
        missing = [int(v) for v in present if int(v) not in self.to_class]
        if missing:
            raise ValueError(f"mask values without a reduction entry: {missing}")
        lut = np.zeros(int(present.max()) + 1, dtype=np.uint8)
        for src, dst in self.to_class.items():
            if src <= present.max():
                lut[src] = dst
        return lut[mask]

    def save(self, path):
        container.write_json(path, {
            "format_version": 1,
            "class_names": list(self.class_names),
            "to_class": {str(k): int(v) for k, v in self.to_class.items()},
        })

    @classmethod
    def load(cls, path):
        d = container.read_json(path)
        return cls(to_class={int(k): int(v) for k, v in d["to_class"].items()},
                   class_names=tuple(d["class_names"]))


def default_reduction_map(model):
    """Identity-style reduction for models whose parts already follow
    REDUCED_CLASS_NAMES order (mask value i+1 -> class i+1)."""
    mapping = {0: 0}
    for part in range(model.num_parts):
        mapping[part + 1] = min(part + 1, len(REDUCED_CLASS_NAMES) - 1)
    return PartReductionMap(to_class=mapping)


def reduce_parts(mask, reduction):
    return reduction.apply(mask)


@dataclasses.dataclass(frozen=True)
class LabelBundle:
    part_mask: np.ndarray  # (H, W) uint8, part label + 1
    reduced_mask: np.ndarray  # (H, W) uint8 over reduced classes
    foreground: np.ndarray  # (H, W) uint8 {0,1}
    landmarks: fitting.KeypointSet2D  # visibility in the confidence channel
    camera: render.Camera
    provenance: dict


def generate_labels(model, fit_result, cam, reduction=None, provenance=None):
    """Render one fit into a label bundle.

    Raises EmptyProjectionError when the posed model does not cover any
    pixel and ValueError when it lies behind the camera.
    """
    if fit_result.translation[2] <= 0:
        raise ValueError("fit places the model behind the camera")
    if reduction is None:
        reduction = default_reduction_map(model)
    posed = body_model.pose_mesh(model, fit_result.pose, fit_result.shape,
                                 fit_result.translation)
    part_mask, depth, _ = render.render_buffers(posed, cam, model.part_label)
    render.require_nonempty(part_mask)
    reduced = reduce_parts(part_mask, reduction)
    foreground = (part_mask > 0).astype(np.uint8)

    lm3 = posed.vertices[model.landmark_vertices]
    z = lm3[:, 2]
    uv = np.zeros((lm3.shape[0], 2))
    cx, cy = cam.principal_point
    front = z > 1e-6
    uv[front, 0] = cam.focal * lm3[front, 0] / z[front] + cx
    uv[front, 1] = cam.focal * lm3[front, 1] / z[front] + cy
    visible = np.zeros(lm3.shape[0])
    for i in range(lm3.shape[0]):
        if not front[i]:
            continue
        xi = int(round(uv[i, 0]))
        yi = int(round(uv[i, 1]))
        if not (0 <= xi < cam.width and 0 <= yi < cam.height):
            continue
        if np.isfinite(depth[yi, xi]) and z[i] <= depth[yi, xi] + VISIBILITY_EPS:
            visible[i] = 1.0
    landmarks = fitting.KeypointSet2D(set_name=f"surface{model.num_landmarks}",
                                      points=uv, confidence=visible)
    return LabelBundle(part_mask=part_mask, reduced_mask=reduced,
                       foreground=foreground, landmarks=landmarks, camera=cam,
                       provenance=dict(provenance or {}))


def save_bundle(bundle, out_dir, sample_id, part_names=None):
    """Write bundle members plus a hash manifest; returns the manifest path.

    Files: <id>_parts.png, <id>_parts6.png, <id>_fg.png, <id>_landmarks.txt,
    palettes for both masks, and <id>_bundle.json.
    """
    os.makedirs(out_dir, exist_ok=True)
    members = {}

    def put(name, path_rel, writer):
        path = os.path.join(out_dir, path_rel)
        writer(path)
        members[name] = {"path": path_rel, "sha256": container.sha256_file(path)}

    put("part_mask", f"{sample_id}_parts.png",
        lambda p: render.save_mask(p, bundle.part_mask))
    put("reduced_mask", f"{sample_id}_parts6.png",
        lambda p: render.save_mask(p, bundle.reduced_mask))
    put("foreground", f"{sample_id}_fg.png",
        lambda p: render.save_mask(p, bundle.foreground))
    put("landmarks", f"{sample_id}_landmarks.txt",
        lambda p: fitting.save_keypoints(p, bundle.landmarks))
    if part_names:
        put("part_palette", f"{sample_id}_parts.palette.txt",
            lambda p: render.save_palette(p, part_names))
    put("reduced_palette", f"{sample_id}_parts6.palette.txt",
        lambda p: render.save_palette(p, REDUCED_CLASS_NAMES[1:]))

    manifest_path = os.path.join(out_dir, f"{sample_id}_bundle.json")
    container.write_json(manifest_path, {
        "format_version": 1,
        "sample_id": sample_id,
        "camera": bundle.camera.to_dict(),
        "members": members,
        "provenance": bundle.provenance,
    })
    return manifest_path
