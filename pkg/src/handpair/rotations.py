"""Rotation parameterizations: 6D encoding, axis-angle, and their VJPs.

The 6D encoding stores the first two columns of a rotation matrix as
[c1x, c1y, c1z, c2x, c2y, c2z]; decoding runs Gram-Schmidt on the two
columns and completes the triad with a cross product.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRotation

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# Reflection across the x=0 plane; maps between left- and right-hand spaces.
MIRROR_MAT = np.diag([-1.0, 1.0, 1.0])

_EPS = 1e-8


def rot6d_to_matrix(omega: np.ndarray) -> np.ndarray:
    """Decode a 6D rotation to an orthonormal 3x3 matrix (det +1).

    Raises DegenerateRotation when either column is near zero or the two
    columns are near collinear (cross-product norm <= 1e-8).
    """
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (6,):
        raise DegenerateRotation(f"expected 6 entries, got shape {omega.shape}")
    a1, a2 = omega[:3], omega[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= _EPS:
        raise DegenerateRotation("first column norm below 1e-8")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 <= _EPS or np.linalg.norm(np.cross(a1, a2)) <= _EPS * n1:
        raise DegenerateRotation("columns are (near-)collinear")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(mat: np.ndarray) -> np.ndarray:
    """First two columns of ``mat`` flattened into the 6D layout."""
    mat = np.asarray(mat, dtype=float)
    return np.concatenate([mat[:, 0], mat[:, 1]])


def rot6d_vjp(omega: np.ndarray, mat_cotangent: np.ndarray) -> np.ndarray:
    """VJP of rot6d_to_matrix: maps a 3x3 cotangent to a 6-vector gradient."""
    omega = np.asarray(omega, dtype=float)
    a1, a2 = omega[:3], omega[3:]
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    d = b1 @ a2
    u2 = a2 - d * b1
    n2 = np.linalg.norm(u2)
    b2 = u2 / n2
    b1_bar = mat_cotangent[:, 0].copy()
    b2_bar = mat_cotangent[:, 1].copy()
    b3_bar = mat_cotangent[:, 2]
    # b3 = b1 x b2: triple-product identities route the cross backward.
    b1_bar += np.cross(b2, b3_bar)
    b2_bar += np.cross(b3_bar, b1)
    # b2 = u2/|u2|
    u2_bar = (b2_bar - (b2 @ b2_bar) * b2) / n2
    # u2 = a2 - (b1.a2) b1
    a2_bar = u2_bar - (b1 @ u2_bar) * b1
    b1_bar += -(b1 @ u2_bar) * a2 - d * u2_bar
    # b1 = a1/|a1|
    a1_bar = (b1_bar - (b1 @ b1_bar) * b1) / n1
    return np.concatenate([a1_bar, a2_bar])


def axis_angle_to_matrix(vec: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series expansion below 1e-8 rad."""
    vec = np.asarray(vec, dtype=float)
    angle = np.linalg.norm(vec)
    K = _skew(vec)
    if angle < _EPS:
        return np.eye(3) + K + 0.5 * (K @ K)
    s, c = np.sin(angle), np.cos(angle)
    K = K / angle
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def axis_angle_vjp(vec: np.ndarray, mat_cotangent: np.ndarray) -> np.ndarray:
    """VJP of axis_angle_to_matrix.

    Uses the compact exponential-coordinates derivative
    dR/dv_i = ((v_i [v]x + [v x (I - R) e_i]x) / |v|^2) R, with the
    [e_i]x limit at the origin.
    """
    vec = np.asarray(vec, dtype=float)
    angle_sq = float(vec @ vec)
    R = axis_angle_to_matrix(vec)
    grad = np.empty(3)
    if angle_sq < _EPS**2:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            grad[i] = np.tensordot(_skew(e), mat_cotangent)
        return grad
    V = _skew(vec)
    ImR = np.eye(3) - R
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        dR = ((vec[i] * V + _skew(np.cross(vec, ImR @ e))) / angle_sq) @ R
        grad[i] = np.tensordot(dR, mat_cotangent)
    return grad


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a QR-orthonormalized Gaussian."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle of r1^T r2, in radians."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
