"""Linear blend skinned body model with shape blendshapes.

A model bundles a template mesh, additive shape blendshapes, a sparse joint
regressor, skinning weights over a kinematic tree, per-face part labels,
surface landmark vertices and named 2D keypoint sets.  Posing applies
per-joint axis-angle rotations through the tree and skins the shaped
template.  ``make_mini_model`` builds a small synthetic body (58 vertices,
6 joints, 2 shape directions) used throughout the test harnesses.
"""

import dataclasses

import numpy as np

from . import container, so3

MAX_PARTS = 31


class ModelValidationError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class KeypointSetDef:
    """A named 2D keypoint layout.

    ``points`` maps each keypoint slot to a model quantity: ("joint", k) uses
    posed joint k, ("landmark", l) uses surface landmark l.  ``connections``
    are index pairs into the slot order (used by the person-size estimator),
    ``torso`` lists the slots treated as torso evidence by the first fitting
    stage.
    """

    points: tuple
    connections: tuple = ()
    torso: tuple = ()

    @property
    def size(self):
        return len(self.points)


@dataclasses.dataclass(frozen=True)
class PosedMesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3)
    joints3d: np.ndarray  # (K, 3)


@dataclasses.dataclass(frozen=True)
class BodyModel:
    template_vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    shape_blendshapes: np.ndarray  # (N, 3, B)
    joint_regressor: np.ndarray  # (K, N), rows sum to 1
    skinning_weights: np.ndarray  # (N, K), rows sum to 1
    parents: np.ndarray  # (K,), parents[0] == -1
    part_label: np.ndarray  # (F,) int in [0, MAX_PARTS)
    landmark_vertices: np.ndarray  # (L,) vertex indices
    keypoint_sets: dict
    canonical_height: float
    pose_blendshapes: np.ndarray = None  # optional (N, 3, 9*(K-1))

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def num_joints(self):
        return self.parents.shape[0]

    @property
    def num_shapes(self):
        return self.shape_blendshapes.shape[2]

    @property
    def num_landmarks(self):
        return self.landmark_vertices.shape[0]

    @property
    def num_parts(self):
        return int(self.part_label.max()) + 1

    def default_keypoint_set(self):
        return next(iter(self.keypoint_sets))


def validate_model(model):
    """Raise ModelValidationError naming the first violated constraint."""
    n = model.template_vertices.shape[0]
    k = model.parents.shape[0]
    if model.template_vertices.ndim != 2 or model.template_vertices.shape[1] != 3:
        raise ModelValidationError("template_vertices must be (N, 3)")
    if not np.isfinite(model.template_vertices).all():
        raise ModelValidationError("template_vertices contains non-finite values")
    if model.faces.ndim != 2 or model.faces.shape[1] != 3:
        raise ModelValidationError("faces must be (F, 3)")
    if model.faces.min() < 0 or model.faces.max() >= n:
        raise ModelValidationError("face vertex index out of range")
    if model.shape_blendshapes.shape[:2] != (n, 3):
        raise ModelValidationError("shape_blendshapes must be (N, 3, B)")
    if model.joint_regressor.shape != (k, n):
        raise ModelValidationError("joint_regressor must be (K, N)")
    reg_sums = model.joint_regressor.sum(axis=1)
    if not np.allclose(reg_sums, 1.0, atol=1e-8):
        bad = int(np.argmax(np.abs(reg_sums - 1.0)))
        raise ModelValidationError(f"joint_regressor row {bad} sums to {reg_sums[bad]:.6f}, not 1")
    if model.skinning_weights.shape != (n, k):
        raise ModelValidationError("skinning_weights must be (N, K)")
    if model.skinning_weights.min() < 0:
        bad = int(np.argmin(model.skinning_weights.min(axis=1)))
        raise ModelValidationError(f"skinning_weights row {bad} has a negative weight")
    w_sums = model.skinning_weights.sum(axis=1)
    if not np.allclose(w_sums, 1.0, atol=1e-8):
        bad = int(np.argmax(np.abs(w_sums - 1.0)))
        raise ModelValidationError(f"skinning_weights row {bad} sums to {w_sums[bad]:.6f}, not 1")
    if model.parents[0] != -1:
        raise ModelValidationError("parents[0] must be -1 (root)")
    for j in range(1, k):
        p = model.parents[j]
        if not 0 <= p < j:
            raise ModelValidationError(f"parents[{j}]={p} must point to an earlier joint")
    if model.part_label.shape != (model.faces.shape[0],):
        raise ModelValidationError("part_label must have one entry per face")
    if model.part_label.min() < 0 or model.part_label.max() >= MAX_PARTS:
        raise ModelValidationError(f"part labels must lie in [0, {MAX_PARTS})")
    if model.landmark_vertices.min() < 0 or model.landmark_vertices.max() >= n:
        raise ModelValidationError("landmark vertex index out of range")
    if model.canonical_height <= 0:
        raise ModelValidationError("canonical_height must be positive")
    if model.pose_blendshapes is not None:
        expected = (n, 3, 9 * (k - 1))
        if model.pose_blendshapes.shape != expected:
            raise ModelValidationError(f"pose_blendshapes must have shape {expected}")
    for name, ksd in model.keypoint_sets.items():
        for kind, idx in ksd.points:
            if kind == "joint":
                if not 0 <= idx < k:
                    raise ModelValidationError(f"keypoint set {name}: joint index {idx} out of range")
            elif kind == "landmark":
                if not 0 <= idx < model.num_landmarks:
                    raise ModelValidationError(f"keypoint set {name}: landmark index {idx} out of range")
            else:
                raise ModelValidationError(f"keypoint set {name}: unknown point kind {kind!r}")
        for a, b in ksd.connections:
            if not (0 <= a < ksd.size and 0 <= b < ksd.size) or a == b:
                raise ModelValidationError(f"keypoint set {name}: bad connection ({a}, {b})")
        for t in ksd.torso:
            if not 0 <= t < ksd.size:
                raise ModelValidationError(f"keypoint set {name}: bad torso index {t}")
    return model


def shaped_vertices(model, shape=None):
    """Template plus shape blendshape offsets (rest pose, canonical frame)."""
    v = model.template_vertices
    if shape is not None:
        shape = np.asarray(shape, dtype=float)
        if shape.shape != (model.num_shapes,):
            raise ValueError(f"shape must have {model.num_shapes} coefficients")
        v = v + model.shape_blendshapes @ shape
    return v


def rest_joints(model, shape=None):
    return model.joint_regressor @ shaped_vertices(model, shape)


def _local_transforms(model, rotations, joints):
    """Per-joint 4x4 transforms relative to the parent frame."""
    k = model.num_joints
    A = np.zeros((k, 4, 4))
    A[:, 3, 3] = 1.0
    A[:, :3, :3] = rotations
    A[0, :3, 3] = joints[0]
    for j in range(1, k):
        A[j, :3, 3] = joints[j] - joints[model.parents[j]]
    return A


def global_transforms(model, pose, shape=None):
    """World transforms G (K,4,4) and skinning transforms with the rest-joint
    offset removed."""
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (model.num_joints, 3):
        raise ValueError(f"pose must be ({model.num_joints}, 3) axis-angle rows")
    rotations = np.stack([so3.axis_angle_to_matrix(pose[j]) for j in range(model.num_joints)])
    joints = rest_joints(model, shape)
    A = _local_transforms(model, rotations, joints)
    G = np.empty_like(A)
    G[0] = A[0]
    for j in range(1, model.num_joints):
        G[j] = G[model.parents[j]] @ A[j]
    Ghat = G.copy()
    # remove the rest-pose joint location so skinning maps rest to posed
    Ghat[:, :3, 3] -= np.einsum("kij,kj->ki", G[:, :3, :3], joints)
    return G, Ghat, rotations, joints


def pose_mesh(model, pose, shape=None, translation=None):
    """Pose the model: axis-angle rotations per joint, shape coefficients,
    camera-frame translation.  Returns a PosedMesh (vertices, faces, joints3d).
    """
    G, Ghat, rotations, _ = global_transforms(model, pose, shape)
    v = shaped_vertices(model, shape)
    if model.pose_blendshapes is not None:
        feat = (rotations[1:] - np.eye(3)).reshape(-1)
        v = v + model.pose_blendshapes @ feat
    T = np.einsum("nk,kij->nij", model.skinning_weights, Ghat)
    verts = np.einsum("nij,nj->ni", T[:, :3, :3], v) + T[:, :3, 3]
    joints3d = G[:, :3, 3].copy()
    if translation is not None:
        translation = np.asarray(translation, dtype=float).reshape(3)
        verts = verts + translation
        joints3d = joints3d + translation
    return PosedMesh(vertices=verts, faces=model.faces, joints3d=joints3d)


def model_keypoints3d(model, posed, set_name):
    """3D points backing a named keypoint set, in slot order."""
    ksd = model.keypoint_sets[set_name]
    pts = np.empty((ksd.size, 3))
    for i, (kind, idx) in enumerate(ksd.points):
        if kind == "joint":
            pts[i] = posed.joints3d[idx]
        else:
            pts[i] = posed.vertices[model.landmark_vertices[idx]]
    return pts


# ---------------------------------------------------------------------------
# serialization

FORMAT_VERSION = 1


def save_model(path, model):
    ks_json = {
        name: {
            "points": [[kind, int(i)] for kind, i in ksd.points],
            "connections": [[int(a), int(b)] for a, b in ksd.connections],
            "torso": [int(t) for t in ksd.torso],
        }
        for name, ksd in model.keypoint_sets.items()
    }
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "template_vertices": model.template_vertices.astype("<f8"),
        "faces": model.faces.astype("<i8"),
        "shape_blendshapes": model.shape_blendshapes.astype("<f8"),
        "joint_regressor": model.joint_regressor.astype("<f8"),
        "skinning_weights": model.skinning_weights.astype("<f8"),
        "parents": model.parents.astype("<i8"),
        "part_label": model.part_label.astype("<i8"),
        "landmark_vertices": model.landmark_vertices.astype("<i8"),
        "canonical_height": np.array(float(model.canonical_height)),
        "keypoint_sets_json": container.encode_json_array(ks_json),
    }
    if model.pose_blendshapes is not None:
        arrays["pose_blendshapes"] = model.pose_blendshapes.astype("<f8")
    container.save_named_arrays(path, arrays)


def load_model(path):
    arrays = container.load_named_arrays(path)
    version = int(arrays.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise ModelValidationError(f"unsupported model file version {version}")
    required = [
        "template_vertices", "faces", "shape_blendshapes", "joint_regressor",
        "skinning_weights", "parents", "part_label", "landmark_vertices",
        "canonical_height", "keypoint_sets_json",
    ]
    missing = [key for key in required if key not in arrays]
    if missing:
        raise ModelValidationError(f"model file missing arrays: {missing}")
    ks_raw = container.decode_json_array(arrays["keypoint_sets_json"])
    keypoint_sets = {
        name: KeypointSetDef(
            points=tuple((kind, int(i)) for kind, i in d["points"]),
            connections=tuple((int(a), int(b)) for a, b in d.get("connections", [])),
            torso=tuple(int(t) for t in d.get("torso", [])),
        )
        for name, d in ks_raw.items()
    }
    model = BodyModel(
        template_vertices=np.ascontiguousarray(arrays["template_vertices"], dtype=float),
        faces=np.ascontiguousarray(arrays["faces"], dtype=np.int64),
        shape_blendshapes=np.ascontiguousarray(arrays["shape_blendshapes"], dtype=float),
        joint_regressor=np.ascontiguousarray(arrays["joint_regressor"], dtype=float),
        skinning_weights=np.ascontiguousarray(arrays["skinning_weights"], dtype=float),
        parents=np.ascontiguousarray(arrays["parents"], dtype=np.int64),
        part_label=np.ascontiguousarray(arrays["part_label"], dtype=np.int64),
        landmark_vertices=np.ascontiguousarray(arrays["landmark_vertices"], dtype=np.int64),
        keypoint_sets=keypoint_sets,
        canonical_height=float(arrays["canonical_height"]),
        pose_blendshapes=(
            np.ascontiguousarray(arrays["pose_blendshapes"], dtype=float)
            if "pose_blendshapes" in arrays
            else None
        ),
    )
    return validate_model(model)


# ---------------------------------------------------------------------------
# mini model

PART_NAMES = ("head", "torso", "left_arm", "right_arm", "left_leg", "right_leg")
_HEAD, _TORSO, _LARM, _RARM, _LLEG, _RLEG = range(6)

LANDMARK_NAMES = (
    "head_top", "nose", "left_shoulder", "right_shoulder", "left_elbow",
    "right_elbow", "left_hand", "right_hand", "left_hip", "right_hip",
    "left_foot", "right_foot",
)


def _ring(y, radius, count):
    phi = np.arange(count) * (2.0 * np.pi / count)
    return np.stack([radius * np.sin(phi), np.full(count, float(y)), radius * np.cos(phi)], axis=1)


def _arm_ring(x, radius, center_y):
    psi = np.deg2rad([90.0, 210.0, 330.0])
    return np.stack([np.full(3, float(x)), center_y + radius * np.cos(psi), radius * np.sin(psi)], axis=1)


def _tube(a_start, b_start, count):
    faces = []
    for i in range(count):
        j = (i + 1) % count
        faces.append((a_start + i, a_start + j, b_start + i))
        faces.append((a_start + j, b_start + j, b_start + i))
    return faces


def make_mini_model():
    """Small synthetic body: capsule trunk, head, two arms.

    58 vertices, 6 joints (pelvis, chest, head, left arm, right arm, lower
    body), 2 shape directions (stature, girth), 12 surface landmarks and the
    6 body part labels of PART_NAMES.  Canonical height 1.70.  The girth
    direction is radial per ring, so it changes the silhouette but leaves
    every regressed joint in place; the stature direction scales the skeleton
    about the hip line.
    """
    ring_y = [0.10, 0.55, 0.95, 1.40]
    ring_r = [0.13, 0.15, 0.16, 0.15]
    verts = []
    for y, r in zip(ring_y, ring_r):
        verts.append(_ring(y, r, 8))
    verts.append(np.array([[0.0, 0.0, 0.0]]))  # 32 bottom cap (heel level)
    verts.append(_ring(1.50, 0.085, 4))  # 33-36 head lower ring
    verts.append(_ring(1.64, 0.075, 4))  # 37-40 head upper ring
    verts.append(np.array([[0.0, 1.70, 0.0]]))  # 41 head top
    arm_y = 1.38
    for side in (+1.0, -1.0):
        verts.append(_arm_ring(side * 0.20, 0.055, arm_y))  # A ring
        verts.append(_arm_ring(side * 0.46, 0.050, arm_y))  # B ring (elbow)
        verts.append(np.array([[side * 0.72, arm_y + 0.035, 0.0],
                               [side * 0.72, arm_y - 0.035, 0.0]]))  # hand edge
    v = np.concatenate(verts, axis=0)
    assert v.shape == (58, 3)

    r0, r1, r2, r3 = 0, 8, 16, 24
    bottom, h1, h2, top = 32, 33, 37, 41
    la, lb, lh = 42, 45, 48
    ra, rb, rh = 50, 53, 56

    faces = []
    labels = []

    def add(face_list, label):
        faces.extend(face_list)
        labels.extend([label] * len(face_list))

    def leg_label(face_list):
        for f in face_list:
            faces.append(f)
            cx = v[list(f), 0].mean()
            labels.append(_LLEG if cx >= 0 else _RLEG)

    leg_label(_tube(r0, r1, 8))  # shins
    leg_label(_tube(r1, r2, 8))  # thighs
    add(_tube(r2, r3, 8), _TORSO)
    leg_label([(bottom, r0 + i, r0 + (i + 1) % 8) for i in range(8)])  # sole fan
    collar = []
    for j in range(4):
        a, b, c = r3 + 2 * j, r3 + (2 * j + 1) % 8, r3 + (2 * j + 2) % 8
        h, h_next = h1 + j, h1 + (j + 1) % 4
        collar += [(a, b, h), (b, c, h_next), (h, b, h_next)]
    add(collar, _TORSO)
    add(_tube(h1, h2, 4), _HEAD)
    add([(h2 + i, h2 + (i + 1) % 4, top) for i in range(4)], _HEAD)

    def arm_faces(a, b, h, torso_ids):
        out = list(_tube(a, b, 3))
        out += [(b, b + 2, h), (b + 2, b + 1, h + 1), (b + 2, h + 1, h),
                (b + 1, b, h + 1), (b, h, h + 1)]
        t1, t2, t3 = torso_ids
        out += [(t1, t2, a), (t2, a + 2, a), (t2, t3, a + 2), (t3, a + 1, a + 2)]
        return out

    add(arm_faces(la, lb, lh, (r3 + 1, r3 + 2, r3 + 3)), _LARM)
    add(arm_faces(ra, rb, rh, (r3 + 5, r3 + 6, r3 + 7)), _RARM)

    faces = np.array(faces, dtype=np.int64)
    part_label = np.array(labels, dtype=np.int64)

    # shape direction 0: stature, vertical stretch about the hip line
    stature = np.zeros((58, 3))
    stature[:, 1] = 0.12 * (v[:, 1] - 0.95)
    # shape direction 1: girth, radial per ring (zero ring mean, so joints stay)
    girth = np.zeros((58, 3))
    for start, count, rad in ((r0, 8, 0.05), (r1, 8, 0.05), (r2, 8, 0.05), (r3, 8, 0.05),
                              (h1, 4, 0.02), (h2, 4, 0.02)):
        phi = np.arange(count) * (2.0 * np.pi / count)
        girth[start:start + count, 0] = rad * np.sin(phi)
        girth[start:start + count, 2] = rad * np.cos(phi)
    psi = np.deg2rad([90.0, 210.0, 330.0])
    for start in (la, lb, ra, rb):
        girth[start:start + 3, 1] = 0.03 * np.cos(psi)
        girth[start:start + 3, 2] = 0.03 * np.sin(psi)
    shape_blendshapes = np.stack([stature, girth], axis=2)

    regressor = np.zeros((6, 58))
    regressor[0, r2:r2 + 8] = 1.0 / 8.0  # pelvis
    regressor[1, r3:r3 + 8] = 1.0 / 8.0  # chest
    regressor[2, h1:h1 + 4] = 1.0 / 4.0  # head base
    regressor[3, la:la + 3] = 1.0 / 3.0  # left arm root
    regressor[4, ra:ra + 3] = 1.0 / 3.0  # right arm root
    regressor[5, r1:r1 + 8] = 1.0 / 8.0  # lower body

    weights = np.zeros((58, 6))
    weights[r0:r0 + 8, 5] = 1.0
    weights[r1:r1 + 8, 5] = 0.8
    weights[r1:r1 + 8, 0] = 0.2
    weights[r2:r2 + 8, 0] = 1.0
    weights[r3:r3 + 8, 1] = 0.8
    weights[r3:r3 + 8, 0] = 0.2
    weights[bottom, 5] = 1.0
    weights[h1:h1 + 4, 2] = 0.7
    weights[h1:h1 + 4, 1] = 0.3
    weights[h2:h2 + 4, 2] = 1.0
    weights[top, 2] = 1.0
    for start, joint in ((la, 3), (ra, 4)):
        weights[start:start + 3, joint] = 0.8
        weights[start:start + 3, 1] = 0.2
        weights[start + 3:start + 8, joint] = 1.0

    landmark_vertices = np.array([41, 33, 44, 52, 47, 55, 48, 56, 18, 22, 2, 6], dtype=np.int64)

    joint_points = tuple(("joint", j) for j in range(6))
    landmark_points = tuple(("landmark", i) for i in range(12))
    joint_conns = ((0, 1), (1, 2), (1, 3), (1, 4), (0, 5))
    surface_conns = ((0, 1), (2, 3), (2, 8), (3, 9), (8, 9), (2, 4), (4, 6),
                     (3, 5), (5, 7), (8, 10), (9, 11))
    keypoint_sets = {
        "mini6": KeypointSetDef(points=joint_points, connections=joint_conns, torso=(0, 1, 3, 4)),
        "mini18": KeypointSetDef(
            points=joint_points + landmark_points,
            connections=joint_conns + tuple((a + 6, b + 6) for a, b in surface_conns),
            torso=(0, 1, 3, 4),
        ),
        "surface12": KeypointSetDef(points=landmark_points, connections=surface_conns,
                                    torso=(2, 3, 8, 9)),
        # variant set: nose landmark stands in for the head joint
        "mini6_nose": KeypointSetDef(
            points=(("joint", 0), ("joint", 1), ("landmark", 1), ("joint", 3),
                    ("joint", 4), ("joint", 5)),
            connections=joint_conns, torso=(0, 1, 3, 4),
        ),
    }

    model = BodyModel(
        template_vertices=v,
        faces=faces,
        shape_blendshapes=shape_blendshapes,
        joint_regressor=regressor,
        skinning_weights=weights,
        parents=np.array([-1, 0, 1, 1, 1, 0], dtype=np.int64),
        part_label=part_label,
        landmark_vertices=landmark_vertices,
        keypoint_sets=keypoint_sets,
        canonical_height=1.70,
    )
    return validate_model(model)


def frontal_pose(model, distance, yaw=0.0):
    """Pose placing the upright model in front of a y-down camera.

    Returns (pose, translation): root rotation flips the canonical y-up frame
    into the camera frame (optionally yawed about the body's vertical axis)
    and the translation centers the body at the given depth.
    """
    k = model.num_joints
    pose = np.zeros((k, 3))
    R = so3.rotation_about_axis([1.0, 0.0, 0.0], np.pi) @ so3.rotation_about_axis([0.0, 1.0, 0.0], yaw)
    pose[0] = so3.matrix_to_axis_angle(R)
    root = rest_joints(model)[0]
    center_y = 0.5 * (model.template_vertices[:, 1].min() + model.template_vertices[:, 1].max())
    # the flip rotates about the root joint: canonical y maps to 2*root_y - y
    translation = np.array([0.0, center_y - 2.0 * root[1], float(distance)])
    return pose, translation
