"""Direct parameter prediction from 2D landmarks.

Trains regression forests that map a normalized 2D landmark layout to body
model parameters: one forest per joint predicting a 3x3 rotation matrix
(root in camera frame, every other joint relative to its parent), one
forest for the shape coefficients and one for the camera depth of the root
joint.  Training rows are synthesized by posing the model and projecting
its landmarks from a bank of virtual viewpoints, so no annotated images
are needed beyond the pose corpus itself.

Predicted 9-vectors are projected back onto SO(3) with an SVD, and the
in-plane translation is recovered from the normalization metadata: the
root joint is placed so that it projects onto the centroid of the input
landmarks.  An optional refinement step runs a few gradient iterations of
the keypoint energy over the global rotation and translation only, which
cheaply fixes the coarse camera-frame orientation without touching the
per-joint pose.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import body_model, container, so3
from .body_model import BodyModel
from .fitting import FitConfig, FitResult, KeypointSet2D, refine_pose
from .forest import (ForestParams, RegressionForest, forest_from_arrays,
                     forest_to_arrays, train_forest)
from .render import Camera, ViewpointSet, project, sample_viewpoints

FORMAT_VERSION = 1


class NormalizationError(ValueError):
    pass


def normalize_landmarks(points):
    """Map 2D landmarks to a translation/scale invariant layout.

    Subtracts the centroid and divides by the RMS radius.  Returns the
    flattened layout plus (centroid, radius) so a prediction in normalized
    units can be carried back to pixels.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise NormalizationError(f"expected (P, 2) landmarks, got {pts.shape}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered ** 2).sum(axis=1).mean()))
    if radius < 1e-9:
        raise NormalizationError("degenerate landmark layout: zero RMS radius")
    return (centered / radius).reshape(-1), centroid, radius


@dataclass(frozen=True)
class TrainingSet:
    """Synthesized regression rows for direct prediction."""

    features: np.ndarray       # (N, 2P) normalized landmark layouts
    rotations: np.ndarray      # (N, K, 9) camera-frame root, parent-local rest
    shapes: np.ndarray         # (N, B)
    depths: np.ndarray         # (N,) camera z of the root joint
    metric_scales: np.ndarray  # (N,) RMS radius * depth / focal, depth-free
    n_dropped: int             # rows discarded for non-positive depth


def synthesize_training_set(model: BodyModel, poses, shapes, views: ViewpointSet,
                            camera: Camera):
    """Project posed bodies from every viewpoint into regression rows.

    ``poses`` is (N, K, 3) axis-angle, ``shapes`` is (N, B).  Each pose is
    rendered from each viewpoint; rows whose landmarks fall behind the
    camera are dropped (counted in ``n_dropped``).
    """
    poses = np.asarray(poses, dtype=float)
    shapes = np.asarray(shapes, dtype=float)
    if poses.ndim != 3 or poses.shape[1:] != (model.num_joints, 3):
        raise ValueError(f"poses must be (N, {model.num_joints}, 3)")
    if shapes.shape != (poses.shape[0], model.num_shapes):
        raise ValueError(f"shapes must be (N, {model.num_shapes})")
    K = model.num_joints
    feats, rots, shp, deps, scls = [], [], [], [], []
    n_dropped = 0
    for p in range(poses.shape[0]):
        mesh = body_model.pose_mesh(model, poses[p], shapes[p])
        landmarks = mesh.vertices[np.asarray(model.landmark_vertices)]
        center = mesh.joints3d[0]
        rel = _parent_local_rotations(model, poses[p])
        for view in views.viewpoints:
            cam_landmarks = view.apply(landmarks, center)
            cam_root = view.apply(mesh.joints3d[:1], center)[0]
            if cam_landmarks[:, 2].min() <= 1e-6 or cam_root[2] <= 1e-6:
                n_dropped += 1
                continue
            pix = project(cam_landmarks, camera)
            try:
                layout, _, radius = normalize_landmarks(pix)
            except NormalizationError:
                n_dropped += 1
                continue
            row_rots = rel.copy()
            row_rots[0] = view.rotation @ so3.axis_angle_to_matrix(poses[p, 0])
            feats.append(layout)
            rots.append(row_rots.reshape(K, 9))
            shp.append(shapes[p])
            deps.append(cam_root[2])
            scls.append(radius * cam_root[2] / camera.focal)
    if not feats:
        raise ValueError("all synthesized rows were dropped")
    return TrainingSet(features=np.asarray(feats),
                       rotations=np.asarray(rots),
                       shapes=np.asarray(shp),
                       depths=np.asarray(deps),
                       metric_scales=np.asarray(scls),
                       n_dropped=n_dropped)


def _parent_local_rotations(model, pose):
    # non-root entries of the axis-angle pose are already parent-local
    R = np.empty((model.num_joints, 3, 3))
    for k in range(model.num_joints):
        R[k] = so3.axis_angle_to_matrix(pose[k])
    return R


@dataclass(frozen=True)
class DPModel:
    """Trained direct-prediction forests plus bookkeeping."""

    rotation_forests: tuple      # K forests, 9 outputs each
    shape_forest: RegressionForest
    scale_forest: RegressionForest  # metric projected size, gives depth
    num_landmarks: int
    num_joints: int
    num_shapes: int
    train_focal: float
    params: ForestParams
    seed: int
    training_hash: str

    def feature_dim(self):
        return 2 * self.num_landmarks


def train(training: TrainingSet, model: BodyModel, camera: Camera,
          params: ForestParams | None = None, seed: int = 0,
          verbose: bool = False):
    """Fit one forest per joint plus the shape and metric-scale forests."""
    params = params or ForestParams()
    X = training.features
    K = model.num_joints
    seeds = np.random.SeedSequence(seed).spawn(K + 2)
    h = hashlib.sha256()
    h.update(X.tobytes())
    h.update(training.rotations.tobytes())
    h.update(training.shapes.tobytes())
    h.update(training.metric_scales.tobytes())
    rot_forests = []
    t0 = time.perf_counter()
    for k in range(K):
        rot_forests.append(train_forest(X, training.rotations[:, k, :], params,
                                        seed=seeds[k]))
        if verbose:
            print(f"  joint {k}: {time.perf_counter() - t0:.1f}s")
    shape_forest = train_forest(X, training.shapes, params, seed=seeds[K])
    scale_forest = train_forest(X, training.metric_scales[:, None], params,
                                seed=seeds[K + 1])
    return DPModel(rotation_forests=tuple(rot_forests),
                   shape_forest=shape_forest,
                   scale_forest=scale_forest,
                   num_landmarks=model.num_landmarks,
                   num_joints=K,
                   num_shapes=model.num_shapes,
                   train_focal=camera.focal,
                   params=params,
                   seed=seed,
                   training_hash=h.hexdigest()[:16])


def predict(dp: DPModel, model: BodyModel, points, camera: Camera):
    """One-shot parameter estimate from 2D landmarks.

    Returns ``(pose, shape, translation)`` in the same parameterization the
    fitter uses, so the two routes are interchangeable downstream.
    """
    layout, centroid, radius = normalize_landmarks(points)
    if layout.size != dp.feature_dim():
        raise ValueError(
            f"expected {dp.num_landmarks} landmarks, got {layout.size // 2}")
    x = layout[None, :]
    pose = np.zeros((dp.num_joints, 3))
    for k in range(dp.num_joints):
        raw = dp.rotation_forests[k].predict(x)[0].reshape(3, 3)
        pose[k] = so3.matrix_to_axis_angle(so3.nearest_rotation(raw))
    shape = dp.shape_forest.predict(x)[0]
    # the layout is scale-invariant, so depth comes from similar triangles:
    # observed radius = focal * metric_scale / depth
    metric_scale = float(dp.scale_forest.predict(x)[0][0])
    z = camera.focal * max(metric_scale, 1e-6) / radius
    z = float(np.clip(z, 0.1, 1e4))
    # place the root joint so it projects onto the landmark centroid
    cx, cy = camera.principal_point
    gx = (centroid[0] - cx) * z / camera.focal
    gy = (centroid[1] - cy) * z / camera.focal
    root_cam = np.array([gx, gy, z])
    # translation shifts the whole body: root_cam = root_posed + translation
    mesh = body_model.pose_mesh(model, pose, shape)
    translation = root_cam - mesh.joints3d[0]
    return pose, shape, translation


def refine_global_rotation(model: BodyModel, camera: Camera,
                           keypoints: KeypointSet2D, pose, shape, translation,
                           steps: int = 30, config: FitConfig | None = None):
    """Polish the camera-frame placement of a direct prediction.

    Runs a short monotone gradient descent of the keypoint energy over the
    root rotation and translation only.  The returned energy never exceeds
    the energy of the input parameters.
    """
    pose2, shape2, trans2, info = refine_pose(
        model, camera, keypoints, pose, shape, translation,
        blocks=("root", "trans"), steps=steps, config=config)
    return FitResult(pose=pose2, shape=shape2, translation=trans2,
                     energies={"keypoint": info["energy_final"],
                               "keypoint_initial": info["energy_initial"]},
                     iterations=info["iterations"],
                     converged=True,
                     stage_traces=((info["energy_initial"],
                                    info["energy_final"]),))


def save_dp_model(dp: DPModel, path):
    meta = {
        "format_version": FORMAT_VERSION,
        "num_landmarks": dp.num_landmarks,
        "num_joints": dp.num_joints,
        "num_shapes": dp.num_shapes,
        "train_focal": dp.train_focal,
        "params": dp.params.to_dict(),
        "seed": dp.seed,
        "training_hash": dp.training_hash,
    }
    arrays = {"meta_json": container.encode_json_array(meta)}
    for k, f in enumerate(dp.rotation_forests):
        arrays.update(forest_to_arrays(f, prefix=f"rot{k}_"))
    arrays.update(forest_to_arrays(dp.shape_forest, prefix="shape_"))
    arrays.update(forest_to_arrays(dp.scale_forest, prefix="scale_"))
    container.save_named_arrays(path, arrays)


def load_dp_model(path):
    arrays = container.load_named_arrays(path)
    meta = container.decode_json_array(arrays["meta_json"])
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version: {meta.get('format_version')}")
    params = ForestParams.from_dict(meta["params"])
    K = meta["num_joints"]
    rot_forests = tuple(forest_from_arrays(arrays, f"rot{k}_", params)
                        for k in range(K))
    return DPModel(rotation_forests=rot_forests,
                   shape_forest=forest_from_arrays(arrays, "shape_", params),
                   scale_forest=forest_from_arrays(arrays, "scale_", params),
                   num_landmarks=meta["num_landmarks"],
                   num_joints=K,
                   num_shapes=meta["num_shapes"],
                   train_focal=meta["train_focal"],
                   params=params,
                   seed=meta["seed"],
                   training_hash=meta["training_hash"])


def sample_pose_corpus(model: BodyModel, n: int, seed: int = 0,
                       pose_sigma: float = 0.25, shape_sigma: float = 1.0):
    """Random axis-angle poses and shapes for training-set synthesis.

    Root rotations are identity; camera-frame orientation comes from the
    virtual viewpoints, so spending corpus capacity on it would be wasted.
    """
    rng = np.random.default_rng(seed)
    K, B = model.num_joints, model.num_shapes
    poses = np.zeros((n, K, 3))
    poses[:, 1:, :] = np.clip(rng.normal(0.0, pose_sigma, size=(n, K - 1, 3)),
                              -0.6, 0.6)
    shapes = np.clip(rng.normal(0.0, shape_sigma, size=(n, B)), -2.0, 2.0)
    return poses, shapes


def default_viewpoints(distance: float = 3.5, n_elevations: int = 5,
                       n_azimuths: int = 36):
    return sample_viewpoints(n_elevations=n_elevations, n_azimuths=n_azimuths,
                             distance=distance)


def mean_pose_baseline(training: TrainingSet, model: BodyModel):
    """Constant predictor: per-joint chordal mean rotation, mean shape/depth.

    The rotation mean is the SO(3) projection of the Euclidean average of
    the training rotation matrices, which minimizes the mean squared
    chordal distance.
    """
    K = model.num_joints
    pose = np.zeros((K, 3))
    for k in range(K):
        mean_mat = training.rotations[:, k, :].mean(axis=0).reshape(3, 3)
        pose[k] = so3.matrix_to_axis_angle(so3.nearest_rotation(mean_mat))
    shape = training.shapes.mean(axis=0)
    depth = float(training.depths.mean())
    return pose, shape, depth
