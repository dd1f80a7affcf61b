"""Evaluation metrics: 2D keypoint PCK, segmentation scores, 3D joint error."""

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class PckResult:
    threshold: float
    norm_size: float
    per_keypoint: np.ndarray  # (P,) correct ratio, NaN where never visible
    overall: float


def pck(pred, gt, visibility, threshold, norm_size):
    """Percentage of correct keypoints at a fractional threshold.

    A visible keypoint is correct when its error is within
    ``threshold * norm_size`` pixels.  Accepts single samples (P, 2) or
    stacks (S, P, 2); visibility has matching leading shape.  Raises
    ValueError when no keypoint is visible or ``norm_size <= 0``.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    vis = np.asarray(visibility, dtype=bool)
    if norm_size <= 0:
        raise ValueError("norm_size must be positive")
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.ndim == 2:
        pred, gt, vis = pred[None], gt[None], vis[None]
    if vis.shape != pred.shape[:2]:
        raise ValueError("visibility shape must match (S, P)")
    if not vis.any():
        raise ValueError("no visible keypoints")
    dist = np.linalg.norm(pred - gt, axis=-1)
    correct = (dist <= threshold * norm_size) & vis
    counts = vis.sum(axis=0).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_kp = np.where(counts > 0, correct.sum(axis=0) / np.maximum(counts, 1), np.nan)
    overall = float(correct.sum() / vis.sum())
    return PckResult(threshold=float(threshold), norm_size=float(norm_size),
                     per_keypoint=per_kp, overall=overall)


def torso_diagonal(points, left_shoulder, right_hip):
    """Default PCK normalization: distance between two opposing torso points."""
    points = np.asarray(points, dtype=float)
    return float(np.linalg.norm(points[left_shoulder] - points[right_hip]))


@dataclasses.dataclass(frozen=True)
class SegScores:
    accuracy: float
    class_ids: np.ndarray  # classes present in gt, ascending
    iou: np.ndarray  # per class in class_ids order
    f1: np.ndarray
    macro_iou: float
    macro_f1: float


def seg_scores(pred, gt, ignore=None):
    """Pixel accuracy plus per-class IoU and F1 with macro averages.

    Classes are the integer labels present in ``gt`` outside the ignore
    mask (background 0 included when present).  Macro averages run over
    exactly those classes.  Swapping two class ids consistently in both
    inputs permutes the per-class scores but leaves the macros unchanged.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~(np.asarray(ignore) > 0)
    if keep.shape != gt.shape:
        raise ValueError("ignore mask shape must match")
    p = pred[keep].astype(np.int64).ravel()
    g = gt[keep].astype(np.int64).ravel()
    if p.size == 0:
        raise ValueError("every pixel is ignored")
    accuracy = float((p == g).mean())
    class_ids = np.unique(g)
    iou = np.empty(class_ids.size)
    f1 = np.empty(class_ids.size)
    for i, c in enumerate(class_ids):
        tp = float(np.sum((p == c) & (g == c)))
        fp = float(np.sum((p == c) & (g != c)))
        fn = float(np.sum((p != c) & (g == c)))
        union = tp + fp + fn
        iou[i] = tp / union if union > 0 else 1.0
        denom = 2 * tp + fp + fn
        f1[i] = 2 * tp / denom if denom > 0 else 1.0
    return SegScores(accuracy=accuracy, class_ids=class_ids, iou=iou, f1=f1,
                     macro_iou=float(iou.mean()), macro_f1=float(f1.mean()))


def _umeyama(src, dst):
    """Similarity (s, R, t) minimizing ||s R src + t - dst||^2."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs ** 2).sum() / src.shape[0]
    scale = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    t = mu_d - scale * R @ mu_s
    return scale, R, t


@dataclasses.dataclass(frozen=True)
class Joint3DError:
    per_joint_mm: np.ndarray
    mean_mm: float
    mode: str


def joint3d_error(pred, gt, mode="root", root_index=0):
    """Per-joint 3D distances in millimeters, inputs in meters.

    mode="root": both sets are translated so their root joints coincide.
    mode="procrustes": optimal similarity alignment of pred onto gt first.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and gt must both be (K, 3)")
    if mode == "root":
        a = pred - pred[root_index]
        b = gt - gt[root_index]
    elif mode == "procrustes":
        s, R, t = _umeyama(pred, gt)
        a = (s * (R @ pred.T)).T + t
        b = gt
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    dist = np.linalg.norm(a - b, axis=1) * 1000.0
    return Joint3DError(per_joint_mm=dist, mean_mm=float(dist.mean()),
                        mode=mode)
