"""Staged fitting of the body model to 2D evidence.

The objective combines a robustified keypoint reprojection term, quadratic
pose and shape priors, squared hinge penalties on configured joint limits,
and an optional bidirectional silhouette distance term:

    E_sil = sum_{x in model silhouette} dist(x, target)^2
          + sum_{x in target silhouette} dist(x, model silhouette)

The keypoint term and priors are differentiated analytically through the
kinematic chain; the silhouette term uses forward finite differences through
the rasterizer.  Optimization proceeds in stages: (1) depth and global
rotation against torso keypoints, (2) full pose and shape against all
keypoints plus priors, (3) everything plus the silhouette term, coarse to
fine.  Accepted line-search steps never increase the stage objective.

Depth initialization follows a person-size estimate: over many random poses,
shapes and viewpoints the ratio of projected body height to the projected
length of a skeleton connection has a sharply peaked distribution per
connection; foreshortening only shortens a connection, so taking the 2D
length of the longest visible connection times the mode of its ratio
distribution recovers the unforeshortened projected height.
"""

import dataclasses
import math

import numpy as np

from . import body_model, container, render, so3


class FitError(RuntimeError):
    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"stage {stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# 2D keypoint records

@dataclasses.dataclass(frozen=True)
class KeypointSet2D:
    set_name: str
    points: np.ndarray  # (P, 2)
    confidence: np.ndarray  # (P,), >= 0

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must be (P, 2)")
        if self.confidence.shape != (self.points.shape[0],):
            raise ValueError("confidence must have one entry per point")
        if (self.confidence < 0).any():
            raise ValueError("confidence must be non-negative")


def save_keypoints(path, kp):
    lines = ["# keypoints v1", f"set {kp.set_name}"]
    for (x, y), c in zip(kp.points, kp.confidence):
        lines.append(f"{float(x)!r} {float(y)!r} {float(c)!r}")
    container.atomic_write_text(path, "\n".join(lines) + "\n")


def load_keypoints(path):
    set_name = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("set "):
                set_name = line[4:].strip()
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}: malformed keypoint row {line!r}")
            rows.append([float(p) for p in parts])
    if set_name is None:
        raise ValueError(f"{path}: missing 'set <name>' header")
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return KeypointSet2D(set_name=set_name, points=arr[:, :2].copy(),
                         confidence=arr[:, 2].copy())


# ---------------------------------------------------------------------------
# energies

def geman_mcclure(r_squared, sigma):
    """Robust penalty sigma^2 * r^2 / (r^2 + sigma^2); saturates at sigma^2."""
    s2 = sigma * sigma
    return s2 * r_squared / (r_squared + s2)


@dataclasses.dataclass(frozen=True)
class SilhouetteData:
    """Target silhouette with its precomputed distance transform."""

    mask: np.ndarray
    dt: np.ndarray

    @classmethod
    def from_mask(cls, mask):
        mask = (np.asarray(mask) > 0).astype(np.uint8)
        if not mask.any():
            raise ValueError("target silhouette is empty")
        return cls(mask=mask, dt=render.distance_transform(mask))


class _PoseJacobian:
    """Forward kinematics with analytic derivatives at one configuration.

    Parameters are ordered [theta (3K), beta (B), gamma (3)].
    """

    def __init__(self, model, theta, beta):
        self.model = model
        K = model.num_joints
        B = model.num_shapes
        self.K, self.B = K, B
        self.nq = 3 * K + B + 3
        G, Ghat, rotations, joints = body_model.global_transforms(model, theta, beta)
        self.G, self.Ghat, self.joints = G, Ghat, joints
        self.v_shaped = body_model.shaped_vertices(model, beta)
        self.rotations = rotations
        self.dR = np.stack([so3.axis_angle_jacobian(theta[k]) for k in range(K)])  # (K,3,3,3)
        self.pose_feat_jac = None
        self.v_input = self.v_shaped
        if model.pose_blendshapes is not None:
            feat = (rotations[1:] - np.eye(3)).reshape(-1)
            self.v_input = self.v_shaped + model.pose_blendshapes @ feat

        # ancestor table: anc[k, j] true when k lies on the chain root..j
        anc = np.zeros((K, K), dtype=bool)
        for j in range(K):
            a = j
            while a != -1:
                anc[a, j] = True
                a = model.parents[a]
        self.anc = anc

        # theta derivatives: left multipliers D[k, c] = G_p dA A^-1 G_p^-1
        self.D = np.zeros((K, 3, 4, 4))
        for k in range(K):
            Gp = np.eye(4) if k == 0 else G[model.parents[k]]
            Gk_inv = _rigid_inverse(G[k])
            for c in range(3):
                dA = np.zeros((4, 4))
                dA[:3, :3] = self.dR[k, c]
                self.D[k, c] = Gp @ dA @ Gk_inv

        # beta derivatives, accumulated down the tree
        S = model.shape_blendshapes
        dJ = np.einsum("kn,nib->bki", model.joint_regressor, S)  # (B, K, 3)
        self.dJ = dJ
        dG = np.zeros((B, K, 4, 4))
        for b in range(B):
            for k in range(K):
                dA = np.zeros((4, 4))
                if k == 0:
                    dA[:3, 3] = dJ[b, 0]
                    dG[b, 0] = dA
                else:
                    p = model.parents[k]
                    dA[:3, 3] = dJ[b, k] - dJ[b, p]
                    dG[b, k] = dG[b, p] @ _local_A(G, model.parents, k) + _parent_G(G, model.parents, k) @ dA
        self.dG_beta = dG
        # dGhat wrt beta
        dGhat = dG.copy()
        for b in range(B):
            for k in range(K):
                dGhat[b, k, :3, 3] = (dG[b, k, :3, 3]
                                      - dG[b, k, :3, :3] @ joints[k]
                                      - G[k, :3, :3] @ dJ[b, k])
        self.dGhat_beta = dGhat

    def point_rows(self, kinds, indices):
        """3D positions and Jacobians for keypoint slots.

        Returns (points (P, 3), jac (P, 3, nq)) in canonical parameter order.
        Translation is not added here; its Jacobian block is the identity.
        """
        model = self.model
        K, B = self.K, self.B
        P = len(kinds)
        pts = np.zeros((P, 3))
        jac = np.zeros((P, 3, self.nq))
        jac[:, :, 3 * K + B:] = np.eye(3)

        for row, (kind, idx) in enumerate(zip(kinds, indices)):
            if kind == "joint":
                pts[row] = self.G[idx, :3, 3]
                for k in range(K):
                    if not self.anc[k, idx]:
                        continue
                    for c in range(3):
                        jac[row, :, 3 * k + c] = (self.D[k, c] @ self.G[idx])[:3, 3]
                for b in range(B):
                    jac[row, :, 3 * K + b] = self.dG_beta[b, idx, :3, 3]
            else:
                v = int(model.landmark_vertices[idx])
                w = model.skinning_weights[v]
                nz = np.nonzero(w > 1e-12)[0]
                x = self.v_input[v]
                xh = np.array([x[0], x[1], x[2], 1.0])
                pos = np.zeros(3)
                for j in nz:
                    pos += w[j] * (self.Ghat[j] @ xh)[:3]
                pts[row] = pos
                for k in range(K):
                    if not self.anc[k, nz].any():
                        continue
                    for c in range(3):
                        g = np.zeros(3)
                        for j in nz:
                            if self.anc[k, j]:
                                g += w[j] * (self.D[k, c] @ self.Ghat[j] @ xh)[:3]
                        jac[row, :, 3 * k + c] = g
                if model.pose_blendshapes is not None:
                    # pose-corrective offsets also move with theta
                    Pb = model.pose_blendshapes[v]  # (3, 9*(K-1))
                    blend_rot = np.zeros((3, 3))
                    for j in nz:
                        blend_rot += w[j] * self.Ghat[j, :3, :3]
                    for k in range(1, K):
                        seg = Pb[:, 9 * (k - 1): 9 * k]
                        for c in range(3):
                            dv = seg @ self.dR[k, c].reshape(-1)
                            jac[row, :, 3 * k + c] += blend_rot @ dv
                for b in range(B):
                    dx = model.shape_blendshapes[v, :, b]
                    g = np.zeros(3)
                    for j in nz:
                        g += w[j] * (self.dGhat_beta[b, j, :3, :3] @ x
                                     + self.dGhat_beta[b, j, :3, 3]
                                     + self.Ghat[j, :3, :3] @ dx)
                    jac[row, :, 3 * K + b] = g
        return pts, jac


def _rigid_inverse(T):
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def _parent_G(G, parents, k):
    p = parents[k]
    return np.eye(4) if p == -1 else G[p]


def _local_A(G, parents, k):
    return _rigid_inverse(_parent_G(G, parents, k)) @ G[k]


def _resolve_set(model, set_name):
    try:
        ksd = model.keypoint_sets[set_name]
    except KeyError:
        raise KeyError(f"model has no keypoint set named {set_name!r}") from None
    kinds = [kind for kind, _ in ksd.points]
    indices = [idx for _, idx in ksd.points]
    return ksd, kinds, indices


def default_gm_sigma(points, confidence):
    """Fallback robustifier scale: 20% of the confident points' bbox diagonal."""
    sel = np.asarray(confidence) > 0
    pts = np.asarray(points)[sel]
    if len(pts) == 0:
        return 1.0
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return max(1.0, 0.2 * diag)


def _keypoint_system(theta, beta, gamma, model, cam, keypoints, sigma,
                     slot_subset, order):
    """Energy (order 0), + gradient (1), + Gauss-Newton Hessian (2).

    The Hessian keeps only the PSD robust-weighted J^T J part, the standard
    approximation for Levenberg-Marquardt on a robustified least-squares
    cost.
    """
    theta = np.asarray(theta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float).reshape(3)
    ksd, kinds, indices = _resolve_set(model, keypoints.set_name)
    if keypoints.points.shape[0] != ksd.size:
        raise ValueError(
            f"keypoint set {keypoints.set_name!r} expects {ksd.size} points, "
            f"got {keypoints.points.shape[0]}")
    if sigma is None:
        sigma = default_gm_sigma(keypoints.points, keypoints.confidence)
    sel = np.arange(ksd.size) if slot_subset is None else np.asarray(slot_subset, dtype=int)

    if order > 0:
        pj = _PoseJacobian(model, theta, beta)
        pts, jac = pj.point_rows([kinds[i] for i in sel], [indices[i] for i in sel])
        nq = pj.nq
    else:
        posed = body_model.pose_mesh(model, theta, beta)
        all_pts = body_model.model_keypoints3d(model, posed, keypoints.set_name)
        pts, jac, nq = all_pts[sel], None, None
    pts = pts + gamma

    z = pts[:, 2]
    if np.any(z <= 1e-6):
        raise render.ProjectionError("model keypoint behind the camera")
    cx, cy = cam.principal_point
    uv = np.stack([cam.focal * pts[:, 0] / z + cx, cam.focal * pts[:, 1] / z + cy], axis=1)
    delta = uv - keypoints.points[sel]
    conf = keypoints.confidence[sel]
    r2 = (delta ** 2).sum(axis=1)
    energy = float(np.sum(conf * geman_mcclure(r2, sigma)))
    if order == 0:
        return energy, None, None

    s2 = sigma * sigma
    w_gm = 2.0 * s2 * s2 / (r2 + s2) ** 2  # 2 * d rho / d r2
    grad = np.zeros(nq)
    hess = np.zeros((nq, nq)) if order > 1 else None
    f = cam.focal
    for row in range(len(sel)):
        x, y, zz = pts[row]
        Jp = np.array([[f / zz, 0.0, -f * x / (zz * zz)],
                       [0.0, f / zz, -f * y / (zz * zz)]])
        duv = Jp @ jac[row]  # (2, nq)
        w = conf[row] * w_gm[row]
        grad += w * (delta[row] @ duv)
        if order > 1:
            hess += w * (duv.T @ duv)
    return energy, grad, hess


def keypoint_energy(theta, beta, gamma, model, cam, keypoints, sigma=None,
                    slot_subset=None, return_grad=False):
    """Confidence-weighted Geman-McClure reprojection energy.

    ``keypoints`` is a KeypointSet2D whose set name the model must know.
    ``slot_subset`` restricts the sum to those slot indices.  With
    ``return_grad`` the analytic gradient in [theta, beta, gamma] order is
    returned as well.
    """
    energy, grad, _ = _keypoint_system(theta, beta, gamma, model, cam,
                                       keypoints, sigma, slot_subset,
                                       order=1 if return_grad else 0)
    return (energy, grad) if return_grad else energy


def mask_silhouette_energy(mask, target):
    """Bidirectional silhouette distance between a model mask and a target.

    Covered model pixels contribute their squared distance to the target;
    target pixels contribute their plain distance to the model coverage.
    Raises EmptyProjectionError when the model mask covers no pixels.
    """
    if not isinstance(target, SilhouetteData):
        target = SilhouetteData.from_mask(target)
    occupied = np.asarray(mask) > 0
    if occupied.shape != target.mask.shape:
        raise ValueError("model and target silhouettes differ in shape")
    if not occupied.any():
        raise render.EmptyProjectionError("model silhouette is empty")
    model_dt = render.distance_transform(occupied.astype(np.uint8))
    term_model = float(np.sum(target.dt[occupied] ** 2))
    term_target = float(np.sum(model_dt[target.mask > 0]))
    return term_model + term_target


def silhouette_energy(theta, beta, gamma, model, cam, target):
    """Bidirectional silhouette distance (squared outward, plain inward).

    Raises EmptyProjectionError when the posed model covers no pixels, so
    optimizers can reject the step.
    """
    posed = body_model.pose_mesh(model, theta, beta, gamma)
    mask = render.rasterize(posed, cam, mode="silhouette")
    return mask_silhouette_energy(mask, target)


def pose_prior(theta, return_grad=False):
    """Quadratic pull of all non-root joint rotations toward zero."""
    theta = np.asarray(theta, dtype=float)
    body = theta[1:]
    e = float(np.sum(body ** 2))
    if not return_grad:
        return e
    g = np.zeros_like(theta)
    g[1:] = 2.0 * body
    return e, g


def shape_prior(beta, return_grad=False):
    beta = np.asarray(beta, dtype=float)
    e = float(np.sum(beta ** 2))
    if not return_grad:
        return e
    return e, 2.0 * beta


def hinge_prior(theta, limits, return_grad=False):
    """Squared hinge on configured per-joint-axis rotation limits.

    ``limits`` rows are (joint, axis, lo, hi); zero inside the range.
    """
    theta = np.asarray(theta, dtype=float)
    e = 0.0
    g = np.zeros_like(theta)
    for joint, axis, lo, hi in limits:
        v = theta[joint, axis]
        if v > hi:
            e += (v - hi) ** 2
            g[joint, axis] += 2.0 * (v - hi)
        elif v < lo:
            e += (lo - v) ** 2
            g[joint, axis] -= 2.0 * (lo - v)
    if not return_grad:
        return e
    return e, g


# ---------------------------------------------------------------------------
# person size estimation

def half_sample_mode(values):
    """Mode estimate: repeatedly keep the densest half of the sorted sample."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("empty sample")
    while x.size > 2:
        h = (x.size + 1) // 2
        widths = x[h - 1:] - x[: x.size - h + 1]
        i = int(np.argmin(widths))
        x = x[i: i + h]
    return float(x.mean())


def projected_height(model, beta, depth, focal):
    """Unforeshortened projected body height at the given camera depth."""
    v = body_model.shaped_vertices(model, beta)
    height = float(v[:, 1].max() - v[:, 1].min())
    return focal * height / depth


@dataclasses.dataclass(frozen=True)
class RatioTable:
    """Per-connection distributions of person size over connection length."""

    keypoint_set: str
    connections: tuple
    mode_estimate: np.ndarray  # (C,)
    quantiles: dict  # name -> (C,) array, monotone across the standard levels
    n_samples: int
    seed: int

    QUANTILE_LEVELS = (("q05", 0.05), ("q25", 0.25), ("q50", 0.50),
                       ("q75", 0.75), ("q95", 0.95))

    def save(self, path):
        container.write_json(path, {
            "format_version": 1,
            "keypoint_set": self.keypoint_set,
            "connections": [[int(a), int(b)] for a, b in self.connections],
            "mode_estimate": [float(m) for m in self.mode_estimate],
            "quantiles": {k: [float(v) for v in arr] for k, arr in self.quantiles.items()},
            "n_samples": int(self.n_samples),
            "seed": int(self.seed),
        })

    @classmethod
    def load(cls, path):
        d = container.read_json(path)
        return cls(
            keypoint_set=d["keypoint_set"],
            connections=tuple((int(a), int(b)) for a, b in d["connections"]),
            mode_estimate=np.array(d["mode_estimate"], dtype=float),
            quantiles={k: np.array(v, dtype=float) for k, v in d["quantiles"].items()},
            n_samples=int(d["n_samples"]),
            seed=int(d["seed"]),
        )


def build_ratio_table(model, n_samples, seed=0, keypoint_set=None,
                      distance_range=(2.5, 5.0), elevation_band=(-15.0, 45.0),
                      pose_sigma=0.15, shape_sigma=0.8, focal=500.0):
    """Sample poses, shapes and viewpoints; tabulate size/connection ratios.

    Ratios are focal-invariant, so the focal length only sets a pixel scale.
    """
    if keypoint_set is None:
        keypoint_set = model.default_keypoint_set()
    ksd, _, _ = _resolve_set(model, keypoint_set)
    if not ksd.connections:
        raise ValueError(f"keypoint set {keypoint_set!r} has no connections")
    rng = np.random.default_rng(seed)
    C = len(ksd.connections)
    ratios = [[] for _ in range(C)]
    K = model.num_joints
    for _ in range(n_samples):
        theta = np.zeros((K, 3))
        theta[1:] = np.clip(rng.normal(0.0, pose_sigma, size=(K - 1, 3)), -0.4, 0.4)
        beta = np.clip(rng.normal(0.0, shape_sigma, size=model.num_shapes), -2.0, 2.0)
        posed = body_model.pose_mesh(model, theta, beta)
        center = posed.vertices.mean(axis=0)
        az = rng.uniform(0.0, 360.0)
        el = rng.uniform(*elevation_band)
        d = rng.uniform(*distance_range)
        vp = render.Viewpoint(rotation=render._look_rotation(az, el), distance=d,
                              azimuth_deg=az, elevation_deg=el)
        pts3 = body_model.model_keypoints3d(model, posed, keypoint_set)
        cam_pts = vp.apply(pts3, center)
        root_cam = vp.apply(posed.joints3d[0], center)
        size = projected_height(model, beta, float(root_cam[2]), focal)
        z = cam_pts[:, 2]
        if np.any(z <= 1e-6):
            continue
        uv = np.stack([focal * cam_pts[:, 0] / z, focal * cam_pts[:, 1] / z], axis=1)
        for ci, (a, b) in enumerate(ksd.connections):
            length = float(np.linalg.norm(uv[a] - uv[b]))
            if length > 1e-9:
                ratios[ci].append(size / length)
    mode = np.array([half_sample_mode(r) for r in ratios])
    quantiles = {
        name: np.array([float(np.quantile(r, q)) for r in ratios])
        for name, q in RatioTable.QUANTILE_LEVELS
    }
    return RatioTable(keypoint_set=keypoint_set, connections=ksd.connections,
                      mode_estimate=mode, quantiles=quantiles,
                      n_samples=n_samples, seed=seed)


@dataclasses.dataclass(frozen=True)
class PersonSizeEstimate:
    size_px: float
    connection_index: int
    connection: tuple
    length_px: float


def estimate_person_size(points, confidence, table):
    """Projected person height from the longest visible skeleton connection.

    The winning connection is the one with the largest 2D length among those
    whose endpoints both have confidence > 0 (ties break to the lowest
    index); its length times the mode of its size/length ratio distribution
    is the estimate.  Raises ValueError when no connection is visible.
    """
    points = np.asarray(points, dtype=float)
    confidence = np.asarray(confidence, dtype=float)
    best = None
    for ci, (a, b) in enumerate(table.connections):
        if confidence[a] <= 0 or confidence[b] <= 0:
            continue
        length = float(np.linalg.norm(points[a] - points[b]))
        if best is None or length > best[1] + 1e-12:
            best = (ci, length)
    if best is None:
        raise ValueError("no connection with both endpoints visible")
    ci, length = best
    return PersonSizeEstimate(size_px=length * float(table.mode_estimate[ci]),
                              connection_index=ci,
                              connection=tuple(table.connections[ci]),
                              length_px=length)


def init_depth(size_px, canonical_height, focal):
    """Similar-triangles depth from a projected-size estimate."""
    if size_px <= 0:
        raise ValueError("person size must be positive")
    return focal * canonical_height / size_px


# ---------------------------------------------------------------------------
# fit configuration and result

@dataclasses.dataclass(frozen=True)
class StageSpec:
    blocks: tuple  # subset of {"root", "pose", "shape", "trans"}
    maxiter: int = 60
    keypoint_subset: str = "all"  # or "torso"
    use_silhouette: bool = False

    def to_dict(self):
        return {"blocks": list(self.blocks), "maxiter": self.maxiter,
                "keypoint_subset": self.keypoint_subset,
                "use_silhouette": self.use_silhouette}

    @classmethod
    def from_dict(cls, d):
        return cls(blocks=tuple(d["blocks"]), maxiter=int(d.get("maxiter", 60)),
                   keypoint_subset=d.get("keypoint_subset", "all"),
                   use_silhouette=bool(d.get("use_silhouette", False)))


def default_stages(with_silhouette=True):
    stages = [
        StageSpec(blocks=("root", "trans"), maxiter=50, keypoint_subset="torso"),
        StageSpec(blocks=("root", "pose", "shape", "trans"), maxiter=120),
    ]
    if with_silhouette:
        stages.append(StageSpec(blocks=("root", "pose", "shape", "trans"),
                                maxiter=25, use_silhouette=True))
    return tuple(stages)


@dataclasses.dataclass(frozen=True)
class FitConfig:
    lambda_keypoint: float = 1.0
    lambda_pose: float = 4.0
    lambda_shape: float = 3.0
    lambda_hinge: float = 100.0
    lambda_silhouette: float = 1.0
    gm_scale_ref: float = 100.0  # robustifier scale at the reference size
    gm_size_ref: float = 500.0  # person size (px) the scale refers to
    hinge_limits: tuple = ()
    stage1_yaw_inits: tuple = (0.0, math.pi)
    silhouette_pyramid: tuple = (0.5, 1.0)
    fd_step_pose: float = 0.02
    fd_step_shape: float = 0.05
    fd_step_trans: float = 0.02
    retry_rel_error: float = 0.12
    flip_passes: int = 2
    # discrepancy test: when the residual shows the keypoints are nearly
    # self-consistent, the priors are re-weighted down and the fit polished
    polish_trigger_px: float = 1.0  # rms residual (px at the reference size)
    polish_relax: float = 0.02
    stages: tuple = dataclasses.field(default_factory=default_stages)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stages"] = [s.to_dict() for s in self.stages]
        d["hinge_limits"] = [list(h) for h in self.hinge_limits]
        d["stage1_yaw_inits"] = list(self.stage1_yaw_inits)
        d["silhouette_pyramid"] = list(self.silhouette_pyramid)
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        if "stages" in kwargs:
            kwargs["stages"] = tuple(StageSpec.from_dict(s) for s in kwargs["stages"])
        for key in ("hinge_limits",):
            if key in kwargs:
                kwargs[key] = tuple(tuple(h) for h in kwargs[key])
        for key in ("stage1_yaw_inits", "silhouette_pyramid"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def save(self, path):
        container.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(container.read_json(path))


def default_hinge_limits(model, bound=2.5):
    """Benign per-axis limits on every non-root joint."""
    return tuple((j, a, -bound, bound)
                 for j in range(1, model.num_joints) for a in range(3))


@dataclasses.dataclass(frozen=True)
class FitResult:
    pose: np.ndarray  # (K, 3)
    shape: np.ndarray  # (B,)
    translation: np.ndarray  # (3,)
    energies: dict
    iterations: int
    converged: bool
    stage_traces: tuple = ()

    def to_dict(self):
        return {
            "format_version": 1,
            "pose": [float(v) for v in self.pose.reshape(-1)],
            "shape": [float(v) for v in self.shape],
            "translation": [float(v) for v in self.translation],
            "energies": {k: float(v) for k, v in self.energies.items()},
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def save_fit(path, result):
    container.write_json(path, result.to_dict())


def load_fit(path):
    d = container.read_json(path)
    pose = np.array(d["pose"], dtype=float)
    if pose.size % 3:
        raise ValueError(f"{path}: pose length {pose.size} is not a multiple of 3")
    return FitResult(
        pose=pose.reshape(-1, 3),
        shape=np.array(d["shape"], dtype=float),
        translation=np.array(d["translation"], dtype=float),
        energies={k: float(v) for k, v in d.get("energies", {}).items()},
        iterations=int(d.get("iterations", 0)),
        converged=bool(d.get("converged", False)),
    )


# ---------------------------------------------------------------------------
# optimization

def _pack(theta, beta, gamma):
    return np.concatenate([np.asarray(theta, dtype=float).reshape(-1),
                           np.asarray(beta, dtype=float).reshape(-1),
                           np.asarray(gamma, dtype=float).reshape(-1)])


def _unpack(x, K, B):
    return x[:3 * K].reshape(K, 3), x[3 * K:3 * K + B], x[3 * K + B:]


def _active_mask(model, blocks):
    K, B = model.num_joints, model.num_shapes
    nq = 3 * K + B + 3
    mask = np.zeros(nq, dtype=bool)
    for block in blocks:
        if block == "root":
            mask[0:3] = True
        elif block == "pose":
            mask[3:3 * K] = True
        elif block == "shape":
            mask[3 * K:3 * K + B] = True
        elif block == "trans":
            mask[3 * K + B:] = True
        else:
            raise ValueError(f"unknown parameter block {block!r}")
    return mask


class _StageObjective:
    """Energy and gradient over the active parameters of one stage."""

    def __init__(self, model, cam, keypoints, sigma, cfg, stage, x_full,
                 silhouette=None):
        self.model = model
        self.cam = cam
        self.kp = keypoints
        self.sigma = sigma
        self.cfg = cfg
        self.stage = stage
        self.x_full = x_full.copy()
        self.active = _active_mask(model, stage.blocks)
        ksd, _, _ = _resolve_set(model, keypoints.set_name)
        if stage.keypoint_subset == "torso" and ksd.torso:
            self.slots = np.asarray(ksd.torso, dtype=int)
        else:
            self.slots = None
        self.sil = silhouette if stage.use_silhouette else None
        K, B = model.num_joints, model.num_shapes
        steps = np.empty(3 * K + B + 3)
        steps[:3 * K] = cfg.fd_step_pose
        steps[3 * K:3 * K + B] = cfg.fd_step_shape
        steps[3 * K + B:] = cfg.fd_step_trans
        self.fd_steps = steps
        self.best = (np.inf, x_full.copy())
        self.n_evals = 0

    def full(self, x_active):
        x = self.x_full.copy()
        x[self.active] = x_active
        return x

    def _smooth_terms(self, x, want_grad):
        model, cfg = self.model, self.cfg
        theta, beta, gamma = _unpack(x, model.num_joints, model.num_shapes)
        parts = {}
        if want_grad:
            e_kp, g_kp = keypoint_energy(theta, beta, gamma, model, self.cam, self.kp,
                                         sigma=self.sigma, slot_subset=self.slots,
                                         return_grad=True)
            e_pose, g_pose = pose_prior(theta, return_grad=True)
            e_shape, g_shape = shape_prior(beta, return_grad=True)
            e_hinge, g_hinge = hinge_prior(theta, cfg.hinge_limits, return_grad=True)
            grad = cfg.lambda_keypoint * g_kp
            grad[:3 * model.num_joints] += cfg.lambda_pose * g_pose.reshape(-1)
            grad[:3 * model.num_joints] += cfg.lambda_hinge * g_hinge.reshape(-1)
            grad[3 * model.num_joints:3 * model.num_joints + model.num_shapes] += \
                cfg.lambda_shape * g_shape
        else:
            e_kp = keypoint_energy(theta, beta, gamma, model, self.cam, self.kp,
                                   sigma=self.sigma, slot_subset=self.slots)
            e_pose = pose_prior(theta)
            e_shape = shape_prior(beta)
            e_hinge = hinge_prior(theta, cfg.hinge_limits)
            grad = None
        parts["keypoint"] = cfg.lambda_keypoint * e_kp
        parts["pose_prior"] = cfg.lambda_pose * e_pose
        parts["shape_prior"] = cfg.lambda_shape * e_shape
        parts["hinge"] = cfg.lambda_hinge * e_hinge
        return sum(parts.values()), grad, parts

    def _sil_energy(self, x):
        model = self.model
        theta, beta, gamma = _unpack(x, model.num_joints, model.num_shapes)
        sil_cam, sil_data = self.sil
        try:
            return self.cfg.lambda_silhouette * silhouette_energy(
                theta, beta, gamma, model, sil_cam, sil_data)
        except render.EmptyProjectionError:
            return np.inf

    def value(self, x_active):
        x = self.full(x_active)
        try:
            e, _, _ = self._smooth_terms(x, want_grad=False)
        except render.ProjectionError:
            return np.inf
        if self.sil is not None:
            e += self._sil_energy(x)
        self.n_evals += 1
        if e < self.best[0]:
            self.best = (e, x.copy())
        return e

    def value_and_grad(self, x_active):
        x = self.full(x_active)
        try:
            e, grad, _ = self._smooth_terms(x, want_grad=True)
        except render.ProjectionError:
            return np.inf, np.zeros(int(self.active.sum()))
        if self.sil is not None:
            e_sil0 = self._sil_energy(x)
            e += e_sil0
            if np.isfinite(e_sil0):
                idx = np.nonzero(self.active)[0]
                for i in idx:
                    xp = x.copy()
                    xp[i] += self.fd_steps[i]
                    e_p = self._sil_energy(xp)
                    if np.isfinite(e_p):
                        grad[i] += (e_p - e_sil0) / self.fd_steps[i]
        self.n_evals += 1
        if e < self.best[0]:
            self.best = (e, x.copy())
        return e, grad[self.active]

    def _assemble_smooth_system(self, x):
        """Full-dimension energy, gradient and GN Hessian of the smooth terms."""
        model, cfg = self.model, self.cfg
        K, B = model.num_joints, model.num_shapes
        theta, beta, gamma = _unpack(x, K, B)
        e_kp, g_kp, h_kp = _keypoint_system(theta, beta, gamma, model,
                                            self.cam, self.kp, self.sigma,
                                            self.slots, order=2)
        e_pose, g_pose = pose_prior(theta, return_grad=True)
        e_shape, g_shape = shape_prior(beta, return_grad=True)
        e_hinge, g_hinge = hinge_prior(theta, cfg.hinge_limits, return_grad=True)
        e = (cfg.lambda_keypoint * e_kp + cfg.lambda_pose * e_pose
             + cfg.lambda_shape * e_shape + cfg.lambda_hinge * e_hinge)
        grad = cfg.lambda_keypoint * g_kp
        grad[:3 * K] += cfg.lambda_pose * g_pose.reshape(-1)
        grad[:3 * K] += cfg.lambda_hinge * g_hinge.reshape(-1)
        grad[3 * K:3 * K + B] += cfg.lambda_shape * g_shape
        hess = cfg.lambda_keypoint * h_kp
        d = hess.diagonal().copy()
        d[3:3 * K] += 2.0 * cfg.lambda_pose
        d[3 * K:3 * K + B] += 2.0 * cfg.lambda_shape
        # hinge curvature only where the hinge is engaged
        d[:3 * K] += 2.0 * cfg.lambda_hinge * (g_hinge.reshape(-1) != 0.0)
        np.fill_diagonal(hess, d)
        return e, grad, hess

    def gn_system(self, x_active):
        """Energy, gradient and Gauss-Newton Hessian over active parameters.

        Only valid for smooth (keypoint + prior) stages.
        """
        assert self.sil is None, "GN system is undefined for silhouette stages"
        x = self.full(x_active)
        n_act = int(self.active.sum())
        try:
            e, grad, hess = self._assemble_smooth_system(x)
        except render.ProjectionError:
            return np.inf, np.zeros(n_act), np.eye(n_act)
        self.n_evals += 1
        if e < self.best[0]:
            self.best = (e, x.copy())
        act = self.active
        return e, grad[act], hess[np.ix_(act, act)]

    def preconditioned_system(self, x_active):
        """Energy, gradient and diagonal curvature including the raster term.

        The silhouette term's gradient uses forward differences; its diagonal
        curvature comes from the same stencil extended one step further so the
        descent direction can be scaled per parameter (the raster energy is
        orders of magnitude stiffer along translation than along shape).
        """
        x = self.full(x_active)
        n_act = int(self.active.sum())
        try:
            e, grad, hess = self._assemble_smooth_system(x)
        except render.ProjectionError:
            return np.inf, np.zeros(n_act), np.ones(n_act)
        curv = hess.diagonal().copy()
        if self.sil is not None:
            e0 = self._sil_energy(x)
            e += e0
            if np.isfinite(e0):
                for i in np.nonzero(self.active)[0]:
                    h = self.fd_steps[i]
                    xp = x.copy()
                    xp[i] += h
                    ep = self._sil_energy(xp)
                    xp[i] += h
                    epp = self._sil_energy(xp)
                    if np.isfinite(ep):
                        grad[i] += (ep - e0) / h
                        if np.isfinite(epp):
                            curv[i] += max((epp - 2.0 * ep + e0) / (h * h), 0.0)
        self.n_evals += 1
        if e < self.best[0]:
            self.best = (e, x.copy())
        return e, grad[self.active], np.maximum(curv[self.active], 1e-8)

    def final_parts(self, x):
        _, _, parts = self._smooth_terms(x, want_grad=False)
        if self.sil is not None:
            parts["silhouette"] = self._sil_energy(x)
        return parts


def _minimize_lm(obj, x0_active, maxiter, gtol=1e-10, ftol=1e-14):
    """Levenberg-Marquardt with Marquardt diagonal scaling.

    Accepted steps strictly decrease the energy, so the trace is monotone.
    Returns (iterations, converged, trace).
    """
    x = np.asarray(x0_active, dtype=float).copy()
    f, g, H = obj.gn_system(x)
    if not np.isfinite(f):
        return 0, False, [f]
    trace = [f]
    mu = 1e-3
    nu = 2.0
    it = 0
    stall = 0
    converged = False
    while it < maxiter:
        it += 1
        if np.linalg.norm(g, np.inf) < gtol:
            converged = True
            break
        D = np.diag(np.maximum(H.diagonal(), 1e-8))
        accepted = False
        for _ in range(30):
            try:
                s = np.linalg.solve(H + mu * D, -g)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2.0
                continue
            fn = obj.value(x + s)
            if np.isfinite(fn) and fn < f:
                predicted = -(g @ s + 0.5 * s @ (H @ s))
                rho = (f - fn) / max(predicted, 1e-300)
                mu = mu * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                mu = max(mu, 1e-12)
                nu = 2.0
                accepted = True
                break
            mu *= nu
            nu *= 2.0
        if not accepted:
            converged = True
            break
        decrease = f - fn
        x = x + s
        f = fn
        trace.append(f)
        # flat valleys alternate small and large decreases: only stop after
        # several consecutive negligible ones
        if decrease <= ftol * max(1.0, abs(f)):
            stall += 1
            if stall >= 4:
                converged = True
                break
        else:
            stall = 0
        f, g, H = obj.gn_system(x)
        f = min(f, trace[-1])
    return it, converged, trace


def _minimize_pgd(obj, x0_active, maxiter, curv_every=6):
    """Diagonally preconditioned monotone descent for rasterized stages.

    Scales the step per parameter by a diagonal curvature estimate, refreshed
    every ``curv_every`` accepted steps; in between only the gradient is
    recomputed.  Accepted steps never increase the energy.
    """
    x = np.asarray(x0_active, dtype=float).copy()
    f, g, c = obj.preconditioned_system(x)
    trace = [f]
    it = 0
    converged = False
    step = 1.0
    since_curv = 0
    while it < maxiter:
        it += 1
        if not np.isfinite(f) or np.linalg.norm(g, np.inf) < 1e-12:
            converged = True
            break
        d = g / c
        gd = float(g @ d)
        if gd <= 0:
            converged = True
            break
        accepted = False
        s = min(step, 1.0)
        for _ in range(24):
            xn = x - s * d
            fn = obj.value(xn)
            if np.isfinite(fn) and fn <= f - 1e-4 * s * gd:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            converged = True
            break
        x, f = xn, fn
        trace.append(f)
        step = min(s * 1.6, 1.0)
        since_curv += 1
        if since_curv >= curv_every:
            f2, g, c = obj.preconditioned_system(x)
            since_curv = 0
        else:
            f2, g = obj.value_and_grad(x)
        f = min(f, f2)
    return x, f, it, converged, trace


def _minimize_gd(obj, x0_active, maxiter, step0=1e-3):
    """Monotone Armijo gradient descent; accepted steps never increase energy."""
    x = np.asarray(x0_active, dtype=float).copy()
    f, g = obj.value_and_grad(x)
    trace = [f]
    step = step0
    it = 0
    converged = False
    while it < maxiter:
        it += 1
        gn2 = float(g @ g)
        if not np.isfinite(f) or gn2 < 1e-18:
            converged = True
            break
        accepted = False
        s = step
        for _ in range(24):
            xn = x - s * g
            fn = obj.value(xn)
            if fn <= f - 1e-4 * s * gn2:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            converged = True
            break
        x, f = xn, fn
        trace.append(f)
        step = s * 1.6
        f, g = obj.value_and_grad(x)
        f = min(f, trace[-1])
    return x, f, it, converged, trace


def _center_translation(model, cam, keypoints, z0, theta):
    """Pick x, y so the model's projected keypoint centroid matches the data."""
    conf = keypoints.confidence > 0
    target_centroid = keypoints.points[conf].mean(axis=0)
    posed = body_model.pose_mesh(model, theta, translation=[0.0, 0.0, z0])
    pts = body_model.model_keypoints3d(model, posed, keypoints.set_name)[conf]
    uv = render.project(pts, cam)
    shift = (target_centroid - uv.mean(axis=0)) * z0 / cam.focal
    return np.array([shift[0], shift[1], z0])


def _flip_refine(model, cam, kp, sigma, cfg, x, maxiter=60):
    """Polish depth-flip hypotheses of the current estimate.

    A limb bent toward the camera and the same limb bent away project to
    nearly identical keypoints, so the image term has near-duplicate basins
    that differ by a reflection across the image plane.  Reflecting a
    rotation across z negates the x and y components of its axis-angle
    vector; each hypothesis flips one joint (or all of them at once) and
    re-polishes, keeping the lowest total energy.
    """
    if cfg.flip_passes <= 0:
        return x, 0
    K = model.num_joints
    stage = StageSpec(blocks=("root", "pose", "shape", "trans"), maxiter=maxiter)
    obj0 = _StageObjective(model, cam, kp, sigma, cfg, stage, x)
    best_e = obj0.value_and_grad(x[obj0.active])[0]
    iters = 0
    hypotheses = [np.arange(K)] + [np.array([k]) for k in range(K)]
    for _ in range(cfg.flip_passes):
        improved = False
        for joints in hypotheses:
            xh = x.copy()
            xh[3 * joints] *= -1.0
            xh[3 * joints + 1] *= -1.0
            obj = _StageObjective(model, cam, kp, sigma, cfg, stage, xh)
            its, _, _ = _minimize_lm(obj, xh[obj.active], maxiter)
            iters += its
            if np.isfinite(obj.best[0]) and obj.best[0] < best_e * (1.0 - 1e-10):
                best_e = obj.best[0]
                x = obj.best[1]
                improved = True
        if not improved:
            break
    return x, iters


def fit(model, cam, keypoints, silhouette=None, config=None, ratio_table=None):
    """Fit pose, shape and translation to one person's 2D evidence.

    ``silhouette`` may be None, a binary mask or a SilhouetteData; silhouette
    stages are skipped when it is None.  ``ratio_table`` defaults to a table
    built on the fly for the keypoint set (cached per model).
    """
    cfg = config or FitConfig()
    kp = keypoints
    if not (kp.confidence > 0).any():
        raise FitError("no keypoint with positive confidence")
    if ratio_table is None:
        ratio_table = _default_table(model, kp.set_name)
    try:
        est = estimate_person_size(kp.points, kp.confidence, ratio_table)
    except ValueError as exc:
        raise FitError(f"person size estimation failed: {exc}") from exc
    sigma = cfg.gm_scale_ref * est.size_px / cfg.gm_size_ref
    z0 = init_depth(est.size_px, model.canonical_height, cam.focal)

    sil_data = None
    if silhouette is not None:
        sil_data = silhouette if isinstance(silhouette, SilhouetteData) \
            else SilhouetteData.from_mask(silhouette)

    smooth_stages = [s for s in cfg.stages if not s.use_silhouette]
    sil_stages = [s for s in cfg.stages if s.use_silhouette] if sil_data is not None else []
    if not smooth_stages:
        raise FitError("no keypoint stage to run")

    # stage 1 from each yaw init, best torso energy wins
    starts = []
    for yaw in cfg.stage1_yaw_inits:
        pose0, _ = body_model.frontal_pose(model, z0, yaw=yaw)
        gamma0 = _center_translation(model, cam, kp, z0, pose0)
        starts.append(_pack(pose0, np.zeros(model.num_shapes), gamma0))

    def run_smooth(x_init, skip_first_stage_from=None):
        x = x_init.copy()
        total_iters = 0
        converged = True
        traces = []
        for si, stage in enumerate(smooth_stages):
            if si == 0 and skip_first_stage_from is not None:
                x = skip_first_stage_from[0].copy()
                traces.append(tuple(skip_first_stage_from[1]))
                continue
            obj = _StageObjective(model, cam, kp, sigma, cfg, stage, x)
            its, conv, trace = _minimize_lm(obj, x[obj.active], stage.maxiter)
            x = obj.best[1]
            total_iters += its
            converged = converged and conv
            traces.append(tuple(trace))
            if not np.isfinite(obj.best[0]):
                raise FitError("energy diverged", stage=si + 1)
        xf, flip_iters = _flip_refine(model, cam, kp, sigma, cfg, x)
        return xf, total_iters + flip_iters, converged, traces

    stage1 = smooth_stages[0]
    stage1_results = []
    for x0 in starts:
        obj = _StageObjective(model, cam, kp, sigma, cfg, stage1, x0)
        _, _, trace1 = _minimize_lm(obj, x0[obj.active], stage1.maxiter)
        stage1_results.append((obj.best, trace1))
    order = np.argsort([r[0][0] for r in stage1_results])

    x, iters, converged, traces = run_smooth(
        starts[order[0]],
        skip_first_stage_from=(stage1_results[order[0]][0][1],
                               stage1_results[order[0]][1]))

    rel_err = _relative_kp_error(model, cam, kp, x, est.size_px)
    if rel_err > cfg.retry_rel_error and len(order) > 1:
        x2, iters2, conv2, traces2 = run_smooth(
            starts[order[1]],
            skip_first_stage_from=(stage1_results[order[1]][0][1],
                                   stage1_results[order[1]][1]))
        if _relative_kp_error(model, cam, kp, x2, est.size_px) < rel_err:
            x, converged, traces = x2, conv2, traces2
        iters += iters2

    # discrepancy polish: near-exact evidence earns relaxed priors
    rms = _scaled_rms_residual(model, cam, kp, x, est.size_px, cfg.gm_size_ref)
    if cfg.polish_relax > 0 and rms < cfg.polish_trigger_px:
        cfg_relaxed = dataclasses.replace(
            cfg, lambda_pose=cfg.lambda_pose * cfg.polish_relax,
            lambda_shape=cfg.lambda_shape * cfg.polish_relax)
        stage = StageSpec(blocks=("root", "pose", "shape", "trans"), maxiter=120)
        obj = _StageObjective(model, cam, kp, sigma, cfg_relaxed, stage, x)
        its, _, trace = _minimize_lm(obj, x[obj.active], stage.maxiter)
        x = obj.best[1]
        x, flip_its = _flip_refine(model, cam, kp, sigma, cfg_relaxed, x)
        iters += its + flip_its
        traces.append(tuple(trace))

    for si, stage in enumerate(sil_stages):
        scales = cfg.silhouette_pyramid or (1.0,)
        for scale in scales:
            sil = _scaled_silhouette(sil_data, cam, scale)
            obj = _StageObjective(model, sil[0], _scale_keypoints(kp, scale),
                                  sigma * scale, cfg, stage, x, silhouette=sil)
            _, _, its, conv, trace = _minimize_pgd(obj, x[obj.active], stage.maxiter)
            x = obj.best[1]
            iters += its
            converged = converged and conv
            traces.append(tuple(trace))
            if not np.isfinite(obj.best[0]):
                raise FitError("energy diverged", stage=len(smooth_stages) + si + 1)

    theta, beta, gamma = _unpack(x, model.num_joints, model.num_shapes)
    energies = _final_energies(model, cam, kp, sigma, cfg, x, sil_data)
    return FitResult(pose=theta.copy(), shape=beta.copy(), translation=gamma.copy(),
                     energies=energies, iterations=iters, converged=converged,
                     stage_traces=tuple(traces))


def _relative_kp_error(model, cam, kp, x, size_px):
    theta, beta, gamma = _unpack(x, model.num_joints, model.num_shapes)
    try:
        posed = body_model.pose_mesh(model, theta, beta, gamma)
        pts = body_model.model_keypoints3d(model, posed, kp.set_name)
        uv = render.project(pts, cam)
    except render.ProjectionError:
        return np.inf
    sel = kp.confidence > 0
    err = np.linalg.norm(uv[sel] - kp.points[sel], axis=1).mean()
    return float(err / max(size_px, 1e-9))


def _scaled_rms_residual(model, cam, kp, x, size_px, size_ref):
    """RMS reprojection residual in pixels at the reference person size."""
    theta, beta, gamma = _unpack(x, model.num_joints, model.num_shapes)
    try:
        posed = body_model.pose_mesh(model, theta, beta, gamma)
        pts = body_model.model_keypoints3d(model, posed, kp.set_name)
        uv = render.project(pts, cam)
    except render.ProjectionError:
        return np.inf
    sel = kp.confidence > 0
    rms = np.sqrt((np.square(uv[sel] - kp.points[sel]).sum(axis=1)).mean())
    return float(rms * size_ref / max(size_px, 1e-9))


def _final_energies(model, cam, kp, sigma, cfg, x, sil_data):
    theta, beta, gamma = _unpack(x, model.num_joints, model.num_shapes)
    energies = {
        "keypoint": cfg.lambda_keypoint * keypoint_energy(
            theta, beta, gamma, model, cam, kp, sigma=sigma),
        "pose_prior": cfg.lambda_pose * pose_prior(theta),
        "shape_prior": cfg.lambda_shape * shape_prior(beta),
        "hinge": cfg.lambda_hinge * hinge_prior(theta, cfg.hinge_limits),
    }
    if sil_data is not None:
        try:
            energies["silhouette"] = cfg.lambda_silhouette * silhouette_energy(
                theta, beta, gamma, model, cam, sil_data)
        except render.EmptyProjectionError:
            energies["silhouette"] = float("inf")
    energies["total"] = sum(energies.values())
    return energies


def _scaled_silhouette(sil_data, cam, scale):
    if abs(scale - 1.0) < 1e-12:
        return cam, sil_data
    cam_s = cam.scaled(scale)
    h, w = sil_data.mask.shape
    ys = np.clip(np.round((np.arange(cam_s.height) + 0.0) / scale).astype(int), 0, h - 1)
    xs = np.clip(np.round((np.arange(cam_s.width) + 0.0) / scale).astype(int), 0, w - 1)
    mask = sil_data.mask[np.ix_(ys, xs)]
    if not mask.any():
        # degenerate downsample; fall back to the full-resolution target
        return cam, sil_data
    return cam_s, SilhouetteData.from_mask(mask)


def _scale_keypoints(kp, scale):
    if abs(scale - 1.0) < 1e-12:
        return kp
    return KeypointSet2D(set_name=kp.set_name, points=kp.points * scale,
                         confidence=kp.confidence.copy())


_TABLE_CACHE = {}


def _default_table(model, set_name, n_samples=400, seed=7):
    key = (id(model), set_name)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = build_ratio_table(model, n_samples, seed=seed,
                                              keypoint_set=set_name)
    return _TABLE_CACHE[key]


def refine_pose(model, cam, keypoints, theta, beta, gamma,
                blocks=("root", "trans"), steps=30, sigma=None, config=None):
    """Monotone gradient refinement of selected blocks on the keypoint term.

    Returns (theta, beta, gamma, info) where info holds the initial/final
    keypoint energies and the iteration count.  The final energy never
    exceeds the initial one.
    """
    cfg = config or FitConfig(lambda_pose=0.0, lambda_shape=0.0, lambda_hinge=0.0)
    if sigma is None:
        sigma = default_gm_sigma(keypoints.points, keypoints.confidence)
    stage = StageSpec(blocks=tuple(blocks), maxiter=steps)
    x = _pack(theta, beta, gamma)
    obj = _StageObjective(model, cam, keypoints, sigma, cfg, stage, x)
    e0 = obj.value(x[obj.active])
    _minimize_gd(obj, x[obj.active], steps)
    best_e, best_x = obj.best
    if best_e > e0:
        best_e, best_x = e0, x
    theta_f, beta_f, gamma_f = _unpack(best_x, model.num_joints, model.num_shapes)
    info = {"energy_initial": float(e0), "energy_final": float(best_e),
            "iterations": steps}
    return theta_f.copy(), beta_f.copy(), gamma_f.copy(), info
