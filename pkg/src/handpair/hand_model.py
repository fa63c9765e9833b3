"""Articulated hand representation and its differentiable kinematics.

A hand is a 64-vector [theta | beta | omega | tau]:
  theta: 45 axis-angle radians for 15 articulated joints
  beta:  10 unitless shape coefficients
  omega: 6D root rotation (first two matrix columns, pre-orthonormalization)
  tau:   3 root translation, meters

Canonical single-hand space is the right hand; a left hand is stored as the
parameter vector whose mirror() image is the equivalent right-hand vector,
and its mesh is the x-negation of that right-hand mesh with flipped faces.

Two kinematic backends:
  CapsuleHand  - built-in: 16 joints, one capsule per bone, analytic
                 occupancy, watertight per component.
  TemplateHand - external skinned template loaded from a JSON manifest plus
                 float32 blobs (rest vertices, skinning weights, joint
                 regressor). No shape basis: beta has no effect here.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import LayoutMismatch, NonWatertight
from .mesh import HandMesh, mirror_mesh, vertex_normals
from .rotations import (
    IDENTITY_6D,
    MIRROR_MAT,
    axis_angle_to_matrix,
    axis_angle_vjp,
    matrix_to_rot6d,
    rot6d_to_matrix,
    rot6d_vjp,
)

DIM = 64
THETA = slice(0, 45)
BETA = slice(45, 55)
OMEGA = slice(55, 61)
TAU = slice(61, 64)

N_JOINTS = 16
N_FINGERS = 5


@dataclass
class HandParam:
    """Flat 64-vector with named views onto its blocks."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(DIM)

    @classmethod
    def from_parts(cls, theta=None, beta=None, omega=None, tau=None) -> "HandParam":
        v = np.zeros(DIM)
        v[OMEGA] = IDENTITY_6D
        if theta is not None:
            v[THETA] = theta
        if beta is not None:
            v[BETA] = beta
        if omega is not None:
            v[OMEGA] = omega
        if tau is not None:
            v[TAU] = tau
        return cls(v)

    @property
    def theta(self) -> np.ndarray:
        return self.vector[THETA]

    @property
    def beta(self) -> np.ndarray:
        return self.vector[BETA]

    @property
    def omega(self) -> np.ndarray:
        return self.vector[OMEGA]

    @property
    def tau(self) -> np.ndarray:
        return self.vector[TAU]

    def validate(self) -> None:
        if not np.isfinite(self.vector).all():
            raise ValueError("non-finite hand parameters")
        rot6d_to_matrix(self.omega)  # raises DegenerateRotation when bad

    def root_matrix(self) -> np.ndarray:
        return rot6d_to_matrix(self.omega)

    def copy(self) -> "HandParam":
        return HandParam(self.vector.copy())


# ---------------------------------------------------------------------------
# Parameter-space algebra


def mirror(params: HandParam) -> HandParam:
    """Reflect across x=0: omega' encodes T R T, tau' = T tau; theta/beta kept.

    Applying the reflection to the root alone suffices because local
    deformations mirror along the kinematic chain by convention.
    """
    out = params.copy()
    R = rot6d_to_matrix(params.omega)
    out.vector[OMEGA] = matrix_to_rot6d(MIRROR_MAT @ R @ MIRROR_MAT)
    out.vector[TAU] = MIRROR_MAT @ params.tau
    return out


def pin_root(params: HandParam) -> HandParam:
    """Identity root rotation, zero translation; articulation untouched."""
    out = params.copy()
    out.vector[OMEGA] = IDENTITY_6D
    out.vector[TAU] = 0.0
    return out


def relative_root(base: HandParam, other: HandParam):
    """Root of ``other`` expressed in ``base``'s root frame: (omega6d, tau)."""
    Rb = rot6d_to_matrix(base.omega)
    Ro = rot6d_to_matrix(other.omega)
    return matrix_to_rot6d(Rb.T @ Ro), Rb.T @ (other.tau - base.tau)


def reroot_pair(target: HandParam, cond: HandParam):
    """Re-express (target, cond) in cond's root frame.

    The returned condition has identity root; the returned target's root
    block carries the relative transform between the two hands.
    """
    omega_rel, tau_rel = relative_root(cond, target)
    new_target = target.copy()
    new_target.vector[OMEGA] = omega_rel
    new_target.vector[TAU] = tau_rel
    return new_target, pin_root(cond)


def compose_root(base: HandParam, rel: HandParam) -> HandParam:
    """Inverse of reroot: map a base-frame-relative param back to world."""
    Rb = rot6d_to_matrix(base.omega)
    Rr = rot6d_to_matrix(rel.omega)
    out = rel.copy()
    out.vector[OMEGA] = matrix_to_rot6d(Rb @ Rr)
    out.vector[TAU] = Rb @ rel.tau + base.tau
    return out


# ---------------------------------------------------------------------------
# Built-in capsule hand

_FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# Rest metacarpal head positions (offsets from the wrist), meters.
_MCP_POS = np.array([
    [0.030, 0.025, -0.005],   # thumb
    [0.027, 0.088, 0.000],    # index
    [0.009, 0.092, 0.000],    # middle
    [-0.008, 0.088, 0.000],   # ring
    [-0.024, 0.080, 0.000],   # pinky
])

# Unit rest directions of the three articulated segments per finger.
_FINGER_DIR = np.array([
    [0.60, 0.78, -0.18],
    [0.05, 1.00, 0.00],
    [0.00, 1.00, 0.00],
    [-0.05, 1.00, 0.00],
    [-0.09, 1.00, 0.00],
])
_FINGER_DIR = _FINGER_DIR / np.linalg.norm(_FINGER_DIR, axis=1, keepdims=True)

# Segment lengths (proximal, middle, distal) per finger, meters.
_SEG_LEN = np.array([
    [0.035, 0.030, 0.026],
    [0.042, 0.026, 0.020],
    [0.046, 0.029, 0.021],
    [0.042, 0.027, 0.020],
    [0.033, 0.021, 0.018],
])

# Capsule radii: palm bone + three segments, per finger, meters.
_RADII = np.array([
    [0.0140, 0.0110, 0.0100, 0.0090],
    [0.0130, 0.0090, 0.0080, 0.0075],
    [0.0130, 0.0092, 0.0082, 0.0076],
    [0.0125, 0.0088, 0.0079, 0.0074],
    [0.0120, 0.0082, 0.0074, 0.0070],
])


def _capsule_template(n_seg: int = 8, n_cap: int = 2, n_side: int = 2):
    """Shared capsule tessellation in (axial fraction, unit offset) form.

    A capsule surface point is c + r*n with c on the axis segment and n a
    unit outward offset, so posed vertices are linear in (length, radius).
    Returns (a: (K,), n_local: (K,3) with axis=+z, faces: (F,3) CCW outward).
    """
    angles = 2.0 * np.pi * np.arange(n_seg) / n_seg
    ca, sa = np.cos(angles), np.sin(angles)
    rings = []   # (a, psi) per ring; psi = polar angle from +z of the offset
    for i in range(1, n_cap + 1):
        rings.append((0.0, np.pi - 0.5 * np.pi * i / n_cap))
    for j in range(1, n_side):
        rings.append((j / n_side, 0.5 * np.pi))
    for i in range(n_cap):
        rings.append((1.0, 0.5 * np.pi - 0.5 * np.pi * i / n_cap))

    a_list = [0.0]
    n_list = [np.array([0.0, 0.0, -1.0])]
    for a, psi in rings:
        sp, cp = np.sin(psi), np.cos(psi)
        ring_n = np.stack([sp * ca, sp * sa, np.full(n_seg, cp)], axis=1)
        a_list.extend([a] * n_seg)
        n_list.extend(ring_n)
    a_list.append(1.0)
    n_list.append(np.array([0.0, 0.0, 1.0]))

    a = np.array(a_list)
    n_local = np.stack(n_list)

    faces = []
    n_rings = len(rings)
    ring0 = 1

    def ring_idx(k, s):
        return ring0 + k * n_seg + (s % n_seg)

    for s in range(n_seg):  # bottom fan, outward-down
        faces.append([0, ring_idx(0, s + 1), ring_idx(0, s)])
    for k in range(n_rings - 1):
        for s in range(n_seg):
            A, B = ring_idx(k, s), ring_idx(k, s + 1)
            C, D = ring_idx(k + 1, s + 1), ring_idx(k + 1, s)
            faces.append([A, B, C])
            faces.append([A, C, D])
    top = len(a) - 1
    for s in range(n_seg):  # top fan, outward-up
        faces.append([top, ring_idx(n_rings - 1, s), ring_idx(n_rings - 1, s + 1)])
    return a, n_local, np.array(faces, dtype=np.int64)


def _frame_for(direction: np.ndarray) -> np.ndarray:
    """Orthonormal frame [e1 e2 d] with +z of the template mapped to d."""
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return np.stack([e1, e2, d], axis=1)


class CapsuleHand:
    """Built-in differentiable hand: 16 joints, 20 capsules (one per bone).

    Kinematic tree: wrist root plus five 3-segment fingers. beta scales bone
    lengths and capsule radii through fixed linear bases. Immutable after
    construction; safe to share across workers.
    """

    def __init__(self, n_seg: int = 8, n_cap: int = 2, n_side: int = 2):
        self.n_joints = N_JOINTS
        self.parents = np.full(N_JOINTS, -1, dtype=int)
        # Per-joint rest offset = the bone vector ending at that joint.
        self.offset_dir = np.zeros((N_JOINTS, 3))
        self.offset_len0 = np.zeros(N_JOINTS)

        a, n_local, faces = _capsule_template(n_seg, n_cap, n_side)
        self._tmpl_a = a
        self._tmpl_faces = faces
        self._tmpl_n_local = n_local
        self._n_seg = n_seg
        self._n_cap = n_cap
        self._n_side = n_side

        # Bones: (attach_joint, start_joint_or_-1, direction, len0, rad0)
        attach, dirs, len0, rad0 = [], [], [], []
        for f in range(N_FINGERS):
            mcp, pip, dip = 1 + 3 * f, 2 + 3 * f, 3 + 3 * f
            self.parents[mcp] = 0
            self.parents[pip] = mcp
            self.parents[dip] = pip
            palm_len = np.linalg.norm(_MCP_POS[f])
            palm_dir = _MCP_POS[f] / palm_len
            self.offset_dir[mcp] = palm_dir
            self.offset_len0[mcp] = palm_len
            self.offset_dir[pip] = _FINGER_DIR[f]
            self.offset_len0[pip] = _SEG_LEN[f, 0]
            self.offset_dir[dip] = _FINGER_DIR[f]
            self.offset_len0[dip] = _SEG_LEN[f, 1]
            attach += [0, mcp, pip, dip]
            dirs += [palm_dir, _FINGER_DIR[f], _FINGER_DIR[f], _FINGER_DIR[f]]
            len0 += [palm_len, _SEG_LEN[f, 0], _SEG_LEN[f, 1], _SEG_LEN[f, 2]]
            rad0 += list(_RADII[f])
        self.bone_attach = np.array(attach, dtype=int)
        self.bone_dir = np.stack(dirs)
        self.bone_len0 = np.array(len0)
        self.bone_rad0 = np.array(rad0)
        self.n_bones = len(attach)

        # Shape bases: multiplicative length/radius factors (1 + basis @ beta).
        self.len_basis = np.zeros((self.n_bones, 10))
        self.rad_basis = np.zeros((self.n_bones, 10))
        self.len_basis[:, 0] = 0.10
        self.rad_basis[:, 1] = 0.10
        for f in range(N_FINGERS):
            self.len_basis[4 * f: 4 * f + 4, 2 + f] = 0.15
        self.len_basis[0::4, 7] = 0.10          # palm spread
        self.rad_basis[3::4, 8] = -0.10         # distal taper
        self.rad_basis[0::4, 9] = 0.10          # palm thickness
        self.rad_basis[1::4, 9] = 0.05
        # Joint offsets scale with the bone that ends at the joint.
        self.offset_basis = np.zeros((N_JOINTS, 10))
        for f in range(N_FINGERS):
            mcp, pip, dip = 1 + 3 * f, 2 + 3 * f, 3 + 3 * f
            self.offset_basis[mcp] = self.len_basis[4 * f]
            self.offset_basis[pip] = self.len_basis[4 * f + 1]
            self.offset_basis[dip] = self.len_basis[4 * f + 2]

        # Per-bone unit offsets rotated into the bone frame, fixed at build.
        self._bone_n = np.stack([n_local @ _frame_for(d).T for d in self.bone_dir])
        self.verts_per_bone = len(a)
        self.n_vertices = self.verts_per_bone * self.n_bones
        all_faces = [self._tmpl_faces + b * self.verts_per_bone for b in range(self.n_bones)]
        self.faces = np.concatenate(all_faces, axis=0)

    # -- kinematics -------------------------------------------------------

    def bone_lengths(self, beta: np.ndarray) -> np.ndarray:
        return self.bone_len0 * (1.0 + self.len_basis @ beta)

    def bone_radii(self, beta: np.ndarray) -> np.ndarray:
        return self.bone_rad0 * (1.0 + self.rad_basis @ beta)

    def joint_transforms(self, theta: np.ndarray, beta: np.ndarray):
        """Canonical-space (rotation, position) per joint; root is identity."""
        Q = np.zeros((N_JOINTS, 3, 3))
        p = np.zeros((N_JOINTS, 3))
        Q[0] = np.eye(3)
        lens = self.offset_len0 * (1.0 + self.offset_basis @ beta)
        for j in range(1, N_JOINTS):
            par = self.parents[j]
            off = lens[j] * self.offset_dir[j]
            p[j] = p[par] + Q[par] @ off
            Q[j] = Q[par] @ axis_angle_to_matrix(theta[3 * (j - 1): 3 * j])
        return Q, p

    def canonical_vertices(self, theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
        Q, p = self.joint_transforms(theta, beta)
        lens = self.bone_lengths(beta)
        rads = self.bone_radii(beta)
        chunks = []
        for b in range(self.n_bones):
            local = (self._tmpl_a[:, None] * lens[b]) * self.bone_dir[b] \
                + rads[b] * self._bone_n[b]
            a = self.bone_attach[b]
            chunks.append(local @ Q[a].T + p[a])
        return np.concatenate(chunks, axis=0)

    def posed_mesh(self, params: HandParam) -> HandMesh:
        R = rot6d_to_matrix(params.omega)
        verts = self.canonical_vertices(params.theta, params.beta) @ R.T + params.tau
        return HandMesh(verts, self.faces)

    def posed_segments(self, params: HandParam):
        """World capsule axis endpoints (B,3),(B,3) and radii (B,)."""
        Q, p = self.joint_transforms(params.theta, params.beta)
        lens = self.bone_lengths(params.beta)
        rads = self.bone_radii(params.beta)
        R = rot6d_to_matrix(params.omega)
        e0 = np.empty((self.n_bones, 3))
        e1 = np.empty((self.n_bones, 3))
        for b in range(self.n_bones):
            a = self.bone_attach[b]
            e0[b] = p[a]
            e1[b] = p[a] + Q[a] @ (lens[b] * self.bone_dir[b])
        return e0 @ R.T + params.tau, e1 @ R.T + params.tau, rads

    def occupancy(self, params: HandParam, points: np.ndarray) -> np.ndarray:
        """Analytic point-in-capsule-union test. points: (N,3) -> (N,) bool."""
        points = np.asarray(points, dtype=float)
        e0, e1, rads = self.posed_segments(params)
        w = e1 - e0                                    # (B,3)
        ww = np.einsum("bi,bi->b", w, w)
        pe = points[:, None, :] - e0[None, :, :]       # (N,B,3)
        t = np.einsum("nbi,bi->nb", pe, w) / np.maximum(ww, 1e-30)
        t = np.clip(t, 0.0, 1.0)
        closest = e0[None] + t[..., None] * w[None]
        d2 = np.sum((points[:, None, :] - closest) ** 2, axis=2)
        return (d2 <= (rads**2)[None, :]).any(axis=1)

    # -- reverse-mode kinematics -------------------------------------------

    def vjp(self, params: HandParam, cotangent: np.ndarray) -> np.ndarray:
        """Gradient of sum_k cotangent_k . vertex_k w.r.t. all 64 parameters."""
        theta, beta = params.theta, params.beta
        cot = np.asarray(cotangent, dtype=float).reshape(self.n_vertices, 3)
        Q, p = self.joint_transforms(theta, beta)
        lens = self.bone_lengths(beta)
        rads = self.bone_radii(beta)
        R = rot6d_to_matrix(params.omega)

        grad = np.zeros(DIM)
        grad[TAU] = cot.sum(axis=0)

        Q_bar = np.zeros((N_JOINTS, 3, 3))
        p_bar = np.zeros((N_JOINTS, 3))
        beta_bar = np.zeros(10)
        R_bar = np.zeros((3, 3))

        K = self.verts_per_bone
        for b in range(self.n_bones):
            a = self.bone_attach[b]
            local = (self._tmpl_a[:, None] * lens[b]) * self.bone_dir[b] \
                + rads[b] * self._bone_n[b]
            canon = local @ Q[a].T + p[a]
            c = cot[b * K:(b + 1) * K]
            R_bar += c.T @ canon
            w_bar = c @ R                      # rows R^T c_k
            Q_bar[a] += w_bar.T @ local
            p_bar[a] += w_bar.sum(axis=0)
            local_bar = w_bar @ Q[a]
            len_bar = float((local_bar @ self.bone_dir[b]) @ self._tmpl_a)
            rad_bar = float(np.sum(local_bar * self._bone_n[b]))
            beta_bar += self.bone_len0[b] * self.len_basis[b] * len_bar
            beta_bar += self.bone_rad0[b] * self.rad_basis[b] * rad_bar

        off_lens = self.offset_len0 * (1.0 + self.offset_basis @ beta)
        for j in range(N_JOINTS - 1, 0, -1):
            par = self.parents[j]
            Rj = axis_angle_to_matrix(theta[3 * (j - 1): 3 * j])
            off = off_lens[j] * self.offset_dir[j]
            Rj_bar = Q[par].T @ Q_bar[j]
            Q_bar[par] += Q_bar[j] @ Rj.T + np.outer(p_bar[j], off)
            off_bar = Q[par].T @ p_bar[j]
            beta_bar += self.offset_len0[j] * self.offset_basis[j] \
                * float(off_bar @ self.offset_dir[j])
            p_bar[par] += p_bar[j]
            grad[THETA][3 * (j - 1): 3 * j] = axis_angle_vjp(
                theta[3 * (j - 1): 3 * j], Rj_bar)

        grad[BETA] = beta_bar
        grad[OMEGA] = rot6d_vjp(params.omega, R_bar)
        return grad


@lru_cache(maxsize=4)
def default_hand(n_seg: int = 8, n_cap: int = 2, n_side: int = 2) -> CapsuleHand:
    return CapsuleHand(n_seg, n_cap, n_side)


# ---------------------------------------------------------------------------
# External skinned-template backend

_RAY_DIRS = np.array([
    [0.9999993, 0.0009, 0.0007],
    [0.0008, 0.9999991, 0.0011],
    [0.0013, 0.0006, 0.9999989],
])
_RAY_DIRS = _RAY_DIRS / np.linalg.norm(_RAY_DIRS, axis=1, keepdims=True)


class TemplateHand:
    """LBS over a user-supplied rest mesh; 16 joints like the built-in hand.

    beta is ignored (the file format carries no shape basis) and its VJP
    block is zero. Occupancy is a ray-parity test and raises NonWatertight
    when the three ray directions disagree; the mesh must be a single
    watertight non-self-intersecting volume for parity to equal containment.
    """

    def __init__(self, parents, rest_vertices, faces, weights, regressor):
        self.parents = np.asarray(parents, dtype=int)
        self.n_joints = len(self.parents)
        if self.n_joints != N_JOINTS:
            raise LayoutMismatch(f"template must have {N_JOINTS} joints, got {self.n_joints}")
        if self.parents[0] != -1:
            raise LayoutMismatch("joint 0 must be the root (parent -1)")
        for j in range(1, self.n_joints):
            if not 0 <= self.parents[j] < j:
                raise LayoutMismatch("parent indices must form a tree rooted at joint 0")
        self.rest_vertices = np.asarray(rest_vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=float)
        self.regressor = np.asarray(regressor, dtype=float)
        row_sums = self.weights.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-6):
            raise LayoutMismatch("skinning weight rows must sum to 1")
        self.rest_joints = self.regressor @ self.rest_vertices
        self.n_vertices = len(self.rest_vertices)

    def joint_transforms(self, theta: np.ndarray):
        Q = np.zeros((N_JOINTS, 3, 3))
        p = np.zeros((N_JOINTS, 3))
        Q[0] = np.eye(3)
        p[0] = self.rest_joints[0]
        for j in range(1, N_JOINTS):
            par = self.parents[j]
            off = self.rest_joints[j] - self.rest_joints[par]
            p[j] = p[par] + Q[par] @ off
            Q[j] = Q[par] @ axis_angle_to_matrix(theta[3 * (j - 1): 3 * j])
        return Q, p

    def canonical_vertices(self, theta: np.ndarray, beta=None) -> np.ndarray:
        Q, p = self.joint_transforms(theta)
        out = np.zeros_like(self.rest_vertices)
        for j in range(N_JOINTS):
            w = self.weights[:, j]
            if not w.any():
                continue
            u = self.rest_vertices - self.rest_joints[j]
            out += w[:, None] * (u @ Q[j].T + p[j])
        return out

    def posed_mesh(self, params: HandParam) -> HandMesh:
        R = rot6d_to_matrix(params.omega)
        verts = self.canonical_vertices(params.theta) @ R.T + params.tau
        return HandMesh(verts, self.faces)

    def occupancy(self, params: HandParam, points: np.ndarray) -> np.ndarray:
        R = rot6d_to_matrix(params.omega)
        verts = self.canonical_vertices(params.theta) @ R.T + params.tau
        points = np.asarray(points, dtype=float)
        parities = np.stack([
            _ray_parity(points, verts, self.faces, d) for d in _RAY_DIRS
        ], axis=1)
        if not (parities.min(axis=1) == parities.max(axis=1)).all():
            bad = int(np.flatnonzero(parities.min(axis=1) != parities.max(axis=1))[0])
            raise NonWatertight(f"ray parity disagrees at point {bad}")
        return parities[:, 0].astype(bool)

    def vjp(self, params: HandParam, cotangent: np.ndarray) -> np.ndarray:
        theta = params.theta
        cot = np.asarray(cotangent, dtype=float).reshape(self.n_vertices, 3)
        Q, p = self.joint_transforms(theta)
        canon = self.canonical_vertices(theta)
        R = rot6d_to_matrix(params.omega)

        grad = np.zeros(DIM)
        grad[TAU] = cot.sum(axis=0)
        R_bar = cot.T @ canon
        canon_bar = cot @ R

        Q_bar = np.zeros((N_JOINTS, 3, 3))
        p_bar = np.zeros((N_JOINTS, 3))
        for j in range(N_JOINTS):
            w = self.weights[:, j]
            if not w.any():
                continue
            wc = canon_bar * w[:, None]
            Q_bar[j] += wc.T @ (self.rest_vertices - self.rest_joints[j])
            p_bar[j] += wc.sum(axis=0)

        for j in range(N_JOINTS - 1, 0, -1):
            par = self.parents[j]
            Rj = axis_angle_to_matrix(theta[3 * (j - 1): 3 * j])
            off = self.rest_joints[j] - self.rest_joints[par]
            Rj_bar = Q[par].T @ Q_bar[j]
            Q_bar[par] += Q_bar[j] @ Rj.T + np.outer(p_bar[j], off)
            p_bar[par] += p_bar[j]
            grad[THETA][3 * (j - 1): 3 * j] = axis_angle_vjp(
                theta[3 * (j - 1): 3 * j], Rj_bar)

        grad[OMEGA] = rot6d_vjp(params.omega, R_bar)
        return grad


def _ray_parity(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray,
                direction: np.ndarray) -> np.ndarray:
    """Crossing-count parity per point via Moller-Trumbore, chunked.

    Parity equals containment for a single watertight non-self-intersecting
    volume; for overlapping components it is coverage multiplicity mod 2.
    """
    tri = vertices[faces]                        # (F,3,3)
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)               # (F,3)
    det = np.einsum("fi,fi->f", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(len(points), dtype=np.int64)
    for lo in range(0, len(points), 512):
        pts = points[lo:lo + 512]
        tvec = pts[:, None, :] - v0[None]        # (n,F,3)
        u = np.einsum("nfi,fi->nf", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("nfi,i->nf", qvec, direction) * inv_det
        t = np.einsum("nfi,fi->nf", qvec, e2) * inv_det
        hit = ok[None] & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        counts[lo:lo + 512] = hit.sum(axis=1)
    return counts % 2


# ---------------------------------------------------------------------------
# Template file format: JSON manifest + little-endian float32 blobs


def save_template(path, model: TemplateHand) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {
        "rest_vertices.f32": model.rest_vertices,
        "skin_weights.f32": model.weights,
        "joint_regressor.f32": model.regressor,
    }
    digests = {}
    for name, arr in blobs.items():
        raw = arr.astype("<f4").tobytes()
        (path / name).write_bytes(raw)
        digests[name] = hashlib.sha256(raw).hexdigest()
    manifest = {
        "kind": "hand-template",
        "units": "m",
        "joints": int(model.n_joints),
        "parents": model.parents.tolist(),
        "vertex_count": int(model.n_vertices),
        "face_count": int(len(model.faces)),
        "faces": model.faces.tolist(),
        "checksums": digests,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_template(path) -> TemplateHand:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("units") != "m":
        raise LayoutMismatch(f"template units must be 'm', got {manifest.get('units')!r}")
    J = int(manifest["joints"])
    V = int(manifest["vertex_count"])

    def blob(name, shape):
        raw = (path / name).read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise LayoutMismatch(f"{name}: {len(raw)} bytes, expected {expected}")
        return np.frombuffer(raw, dtype="<f4").astype(float).reshape(shape)

    return TemplateHand(
        parents=manifest["parents"],
        rest_vertices=blob("rest_vertices.f32", (V, 3)),
        faces=np.array(manifest["faces"], dtype=np.int64),
        weights=blob("skin_weights.f32", (V, J)),
        regressor=blob("joint_regressor.f32", (J, V)),
    )


def template_from_capsule(model: CapsuleHand) -> TemplateHand:
    """Bake the capsule hand into a rigid-weight template (testing/demos).

    Weights are one-hot on each bone's attach joint, so LBS reproduces the
    capsule kinematics exactly at beta = 0. The regressor averages the
    axis-centered equator ring nearest each joint.
    """
    rest = model.canonical_vertices(np.zeros(45), np.zeros(10))
    V = model.n_vertices
    weights = np.zeros((V, N_JOINTS))
    K = model.verts_per_bone
    for b in range(model.n_bones):
        weights[b * K:(b + 1) * K, model.bone_attach[b]] = 1.0

    n_seg, n_cap = model._n_seg, model._n_cap
    bottom_eq = 1 + (n_cap - 1) * n_seg           # first index of a=0 equator
    top_eq = K - 1 - model._n_cap * n_seg         # first index of a=1 equator
    regressor = np.zeros((N_JOINTS, V))
    regressor[0, 0 * K + bottom_eq: 0 * K + bottom_eq + n_seg] = 1.0 / n_seg
    for f in range(N_FINGERS):
        for seg, joint in enumerate((1 + 3 * f, 2 + 3 * f, 3 + 3 * f)):
            b = 4 * f + seg                        # bone ending at `joint`
            regressor[joint, b * K + top_eq: b * K + top_eq + n_seg] = 1.0 / n_seg
    return TemplateHand(model.parents, rest, model.faces, weights, regressor)


# ---------------------------------------------------------------------------
# Module-level operation surface


def forward_kinematics(params: HandParam, model) -> HandMesh:
    """Posed right-hand mesh; deterministic, rigid under root-only changes."""
    return model.posed_mesh(params)


def occupancy(model, params: HandParam, points: np.ndarray) -> np.ndarray:
    return model.occupancy(params, points)


def kinematics_vjp(params: HandParam, model, vertex_cotangent: np.ndarray) -> np.ndarray:
    return model.vjp(params, vertex_cotangent)


def left_hand_mesh(params_left: HandParam, model) -> HandMesh:
    """Mesh of a left hand: x-negated right mesh of its mirror image."""
    return mirror_mesh(model.posed_mesh(mirror(params_left)))


def occupancy_left(model, params_left: HandParam, points: np.ndarray) -> np.ndarray:
    return model.occupancy(mirror(params_left), np.asarray(points) @ MIRROR_MAT.T)


def pair_meshes(x_l: HandParam, x_r: HandParam, model):
    """(left mesh, right mesh) for a stored pair."""
    return left_hand_mesh(x_l, model), model.posed_mesh(x_r)
