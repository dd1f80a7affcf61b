"""Rotation utilities: axis-angle, rotation matrices and nearest-rotation projection."""

import numpy as np


def skew(v):
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _sin_cos_coeffs(angle):
    # a = sin(n)/n, b = (1-cos(n))/n^2, with series fallbacks near zero
    if angle < 1e-4:
        n2 = angle * angle
        a = 1.0 - n2 / 6.0 + n2 * n2 / 120.0
        b = 0.5 - n2 / 24.0 + n2 * n2 / 720.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / (angle * angle)
    return a, b


def axis_angle_to_matrix(aa):
    """Rodrigues map from an axis-angle 3-vector to a 3x3 rotation matrix."""
    aa = np.asarray(aa, dtype=float)
    angle = float(np.linalg.norm(aa))
    K = skew(aa)
    a, b = _sin_cos_coeffs(angle)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R):
    """Inverse Rodrigues map; angle returned in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; recover axis from R + I
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # fix signs using the largest component
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis[(i + 1) % 3] = M[i, (i + 1) % 3] / axis[i]
            axis[(i + 2) % 3] = M[i, (i + 2) % 3] / axis[i]
        axis /= max(np.linalg.norm(axis), 1e-12)
        # keep continuity with the w-based direction when it is nonzero
        if np.dot(axis, w) < 0:
            axis = -axis
        return angle * axis
    return angle * w / (2.0 * np.sin(angle))


def axis_angle_jacobian(aa):
    """Derivatives of the Rodrigues map.

    Returns an array ``D`` of shape (3, 3, 3) with ``D[i] = dR/d aa[i]``
    evaluated at ``aa``.  Exact everywhere, with series expansions near zero.
    """
    aa = np.asarray(aa, dtype=float)
    n = float(np.linalg.norm(aa))
    K = skew(aa)
    K2 = K @ K
    a, b = _sin_cos_coeffs(n)
    if n < 1e-3:
        n2 = n * n
        ga = -1.0 / 3.0 + n2 / 30.0
        gb = -1.0 / 12.0 + n2 / 180.0
    else:
        ga = (n * np.cos(n) - np.sin(n)) / n**3
        gb = (n * np.sin(n) - 2.0 * (1.0 - np.cos(n))) / n**4
    out = np.empty((3, 3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        dK = skew(e)
        out[i] = (aa[i] * ga) * K + a * dK + (aa[i] * gb) * K2 + b * (dK @ K + K @ dK)
    return out


def nearest_rotation(M):
    """Project an arbitrary 3x3 matrix to the closest rotation (Frobenius).

    Uses the SVD polar factor with a sign fix so the result always has
    determinant +1.  Projecting a rotation returns it unchanged.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {M.shape}")
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return R


def rotation_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * angle)
