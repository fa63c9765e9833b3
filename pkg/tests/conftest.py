import numpy as np
import pytest

from handpair.hand_model import HandParam
from handpair.rotations import matrix_to_rot6d, random_rotation


def random_params(rng, theta_scale=0.3, tau_scale=0.1, beta_scale=0.15) -> HandParam:
    """Valid random hand parameters with an orthonormal 6D root encoding."""
    return HandParam.from_parts(
        theta=rng.normal(0.0, theta_scale, 45),
        beta=rng.normal(0.0, beta_scale, 10),
        omega=matrix_to_rot6d(random_rotation(rng)),
        tau=rng.normal(0.0, tau_scale, 3),
    )


def icosphere(subdivisions=2, radius=1.0):
    """Subdivided icosahedron; returns (vertices, faces), CCW outward."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (verts[i] + verts[j]) / 2.0
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = new_faces
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


@pytest.fixture(scope="session")
def hand_model():
    from handpair.hand_model import default_hand

    return default_hand()


class PointMassDenoiser:
    """Oracle that always predicts one fixed clean vector."""

    config = None

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=float)

    def predict(self, x_t, cond, drop_mask=None, t=None, **kw):
        return np.tile(self.x0, (len(np.atleast_2d(x_t)), 1))


class NearestModeDenoiser:
    """Oracle encoding a factored two-mode distribution.

    Unconditional calls (all dropped) snap to the nearest anchor mode;
    conditional calls identify the anchor from the condition and snap to the
    nearest of that anchor's partner modes.
    """

    config = None

    def __init__(self, anchor_modes, partner_modes):
        self.anchor_modes = np.asarray(anchor_modes, dtype=float)   # (A, 64)
        self.partner_modes = np.asarray(partner_modes, dtype=float)  # (A, P, 64)

    @staticmethod
    def _nearest(x, modes):
        d = ((x[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
        return d.argmin(axis=1)

    def predict(self, x_t, cond, drop_mask=None, t=None, **kw):
        x_t = np.atleast_2d(x_t)
        cond = np.atleast_2d(cond)
        drop = np.asarray(drop_mask, dtype=bool)
        out = np.empty_like(x_t)
        if drop.all():
            return self.anchor_modes[self._nearest(x_t, self.anchor_modes)]
        anchor_theta = self.anchor_modes[:, :45]
        which = self._nearest(cond[:, :45], anchor_theta)
        for i in range(len(x_t)):
            modes = self.partner_modes[which[i]]
            out[i] = modes[self._nearest(x_t[i:i + 1], modes)[0]]
        return out
