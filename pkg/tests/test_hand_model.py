import numpy as np
import pytest

from conftest import icosphere, random_params
from handpair.errors import NonWatertight, ZeroAreaStar
from handpair.hand_model import (
    HandParam,
    default_hand,
    forward_kinematics,
    kinematics_vjp,
    left_hand_mesh,
    load_template,
    mirror,
    occupancy,
    occupancy_left,
    pin_root,
    save_template,
    template_from_capsule,
)
from handpair.mesh import HandMesh, edge_manifold_ok, mirror_mesh, vertex_normals
from handpair.rotations import (
    IDENTITY_6D,
    MIRROR_MAT,
    matrix_to_rot6d,
    random_rotation,
    rot6d_to_matrix,
)


# -- forward kinematics -----------------------------------------------------


def test_rest_pose_is_canonical(hand_model):
    params = HandParam.from_parts()
    mesh = forward_kinematics(params, hand_model)
    expected = hand_model.canonical_vertices(np.zeros(45), np.zeros(10))
    np.testing.assert_allclose(mesh.vertices, expected, atol=1e-12)


def test_root_rigid_equivariance(hand_model):
    rng = np.random.default_rng(11)
    theta = rng.normal(0, 0.4, 45)
    R = random_rotation(rng)
    t = np.array([0.05, -0.02, 0.11])
    rest = forward_kinematics(HandParam.from_parts(theta=theta), hand_model)
    moved = forward_kinematics(
        HandParam.from_parts(theta=theta, omega=matrix_to_rot6d(R), tau=t), hand_model)
    np.testing.assert_allclose(moved.vertices, rest.vertices @ R.T + t, atol=1e-9)


def test_single_bent_joint_matches_rigid_skinning_oracle(hand_model):
    # Bend the index MCP (joint 4) 30 degrees about x; the oracle rotates the
    # rest vertices of every bone distal to that joint rigidly about it.
    theta = np.zeros(45)
    theta[9] = np.pi / 6
    posed = forward_kinematics(HandParam.from_parts(theta=theta), hand_model).vertices
    rest = hand_model.canonical_vertices(np.zeros(45), np.zeros(10))
    _, joints_rest = hand_model.joint_transforms(np.zeros(45), np.zeros(10))
    pivot = joints_rest[4]
    ang = np.pi / 6
    R = np.array([
        [1, 0, 0],
        [0, np.cos(ang), -np.sin(ang)],
        [0, np.sin(ang), np.cos(ang)],
    ])
    expected = rest.copy()
    K = hand_model.verts_per_bone
    for b in range(hand_model.n_bones):
        if hand_model.bone_attach[b] in (4, 5, 6):
            sl = slice(b * K, (b + 1) * K)
            expected[sl] = (rest[sl] - pivot) @ R.T + pivot
    assert np.abs(posed - expected).max() < 1e-6


def test_beta_changes_geometry_differentiably(hand_model):
    base = forward_kinematics(HandParam.from_parts(), hand_model).vertices
    beta = np.zeros(10)
    beta[0] = 1.0
    scaled = forward_kinematics(HandParam.from_parts(beta=beta), hand_model).vertices
    assert np.abs(scaled - base).max() > 1e-3


def test_mesh_is_watertight_per_capsule(hand_model):
    K = hand_model.verts_per_bone
    F = len(hand_model._tmpl_faces)
    mesh = forward_kinematics(HandParam.from_parts(), hand_model)
    for b in range(hand_model.n_bones):
        faces = mesh.faces[b * F:(b + 1) * F] - b * K
        assert edge_manifold_ok(faces)


def test_faces_point_outward(hand_model):
    # Signed volume of each closed capsule component must be positive.
    mesh = forward_kinematics(HandParam.from_parts(), hand_model)
    F = len(hand_model._tmpl_faces)
    tri = mesh.vertices[mesh.faces]
    signed = np.einsum("fi,fi->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0
    for b in range(hand_model.n_bones):
        assert signed[b * F:(b + 1) * F].sum() > 0


# -- mirroring ---------------------------------------------------------------


def test_mirror_identity_root_translation_only():
    p = HandParam.from_parts(tau=[0.1, 0.2, 0.3])
    m = mirror(p)
    np.testing.assert_allclose(m.omega, IDENTITY_6D, atol=1e-15)
    np.testing.assert_allclose(m.tau, [-0.1, 0.2, 0.3], atol=1e-15)
    np.testing.assert_allclose(m.theta, p.theta)
    np.testing.assert_allclose(m.beta, p.beta)


def test_mirror_matches_matrix_oracle():
    ang = np.pi / 2
    R = np.array([
        [np.cos(ang), -np.sin(ang), 0],
        [np.sin(ang), np.cos(ang), 0],
        [0, 0, 1],
    ])
    p = HandParam.from_parts(omega=matrix_to_rot6d(R))
    got = rot6d_to_matrix(mirror(p).omega)
    expected = MIRROR_MAT @ R @ MIRROR_MAT
    assert np.abs(got - expected).max() < 1e-8


def test_mirror_is_involution():
    rng = np.random.default_rng(5)
    for _ in range(100):
        p = random_params(rng)
        back = mirror(mirror(p))
        assert np.abs(back.vector - p.vector).max() < 1e-8


def test_mirror_mesh_commutation(hand_model):
    rng = np.random.default_rng(9)
    for _ in range(5):
        p = random_params(rng)
        negated = forward_kinematics(p, hand_model).vertices @ MIRROR_MAT.T
        mirrored = left_hand_mesh(mirror(p), hand_model).vertices
        assert np.abs(negated - mirrored).max() < 1e-6


# -- vertex normals -----------------------------------------------------------


def _unit_cube():
    verts = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)],
                     dtype=float)
    # verts: 0..3 bottom (z=0), 4..7 top, x fastest.
    faces = np.array([
        [0, 2, 3], [0, 3, 1],      # z=0, -z
        [4, 5, 7], [4, 7, 6],      # z=1, +z
        [0, 1, 5], [0, 5, 4],      # y=0, -y
        [2, 6, 7], [2, 7, 3],      # y=1, +y
        [0, 4, 6], [0, 6, 2],      # x=0, -x
        [1, 3, 7], [1, 7, 5],      # x=1, +x
    ])
    return verts, faces


def test_cube_corner_normal():
    verts, faces = _unit_cube()
    normals = vertex_normals(verts, faces)
    np.testing.assert_allclose(normals[0], -np.ones(3) / np.sqrt(3), atol=1e-12)
    np.testing.assert_allclose(normals[7], np.ones(3) / np.sqrt(3), atol=1e-12)


def test_cube_normals_match_accumulation_oracle():
    verts, faces = _unit_cube()
    got = vertex_normals(verts, faces)
    expected = np.zeros_like(verts)
    for f in faces:
        n = np.cross(verts[f[1]] - verts[f[0]], verts[f[2]] - verts[f[0]])
        for v in f:
            expected[v] += n
    expected /= np.linalg.norm(expected, axis=1, keepdims=True)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_icosphere_normals_are_radial():
    verts, faces = icosphere(2)
    normals = vertex_normals(verts, faces)
    radial = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    cosines = np.einsum("ij,ij->i", normals, radial)
    assert np.degrees(np.arccos(np.clip(cosines, -1, 1))).max() < 5.0


def test_normals_unit_norm(hand_model):
    mesh = forward_kinematics(HandParam.from_parts(), hand_model)
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)


def test_zero_area_star_raises():
    verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 1], [0, 3, 4]])  # vertex 1's star cancels
    with pytest.raises(ZeroAreaStar):
        vertex_normals(verts, faces)


# -- occupancy ----------------------------------------------------------------


def test_occupancy_trivial_points(hand_model):
    rng = np.random.default_rng(21)
    p = random_params(rng)
    _, joints = hand_model.joint_transforms(p.theta, p.beta)
    R = rot6d_to_matrix(p.omega)
    posed_joints = joints @ R.T + p.tau
    assert occupancy(hand_model, p, posed_joints).all()
    far = posed_joints[0] + np.array([1.0, 0.0, 0.0])
    assert not occupancy(hand_model, p, far[None])[0]


def _segment_distance_oracle(point, e0, e1):
    # Independent formulation: parametric minimization along the segment.
    d = e1 - e0
    denom = float(d @ d)
    s = 0.0 if denom == 0 else float(np.clip((point - e0) @ d / denom, 0.0, 1.0))
    return float(np.linalg.norm(point - (e0 + s * d)))


def test_occupancy_matches_brute_force(hand_model):
    rng = np.random.default_rng(33)
    p = random_params(rng)
    e0, e1, rads = hand_model.posed_segments(p)
    lo = e0.min(axis=0) - 0.05
    hi = e1.max(axis=0) + 0.05
    pts = rng.uniform(lo, hi, size=(10_000, 3))
    got = occupancy(hand_model, p, pts)
    margin = np.empty(len(pts))
    expected = np.zeros(len(pts), dtype=bool)
    for i, pt in enumerate(pts):
        dists = np.array([_segment_distance_oracle(pt, e0[b], e1[b])
                          for b in range(hand_model.n_bones)])
        expected[i] = bool((dists <= rads).any())
        margin[i] = np.abs(dists - rads).min()
    keep = margin > 1e-6  # exclude surface-grazing points
    assert (got[keep] == expected[keep]).all()


def test_occupancy_left_is_mirrored_volume(hand_model):
    rng = np.random.default_rng(4)
    p = random_params(rng)
    pts = rng.uniform(-0.2, 0.2, size=(500, 3))
    right = occupancy(hand_model, mirror(p), pts @ MIRROR_MAT.T)
    np.testing.assert_array_equal(occupancy_left(hand_model, p, pts), right)


# -- kinematics VJP -----------------------------------------------------------


def test_vjp_zero_cotangent(hand_model):
    p = random_params(np.random.default_rng(1))
    g = kinematics_vjp(p, hand_model, np.zeros((hand_model.n_vertices, 3)))
    np.testing.assert_array_equal(g, np.zeros(64))


def test_vjp_translation_block_is_column_sum(hand_model):
    p = random_params(np.random.default_rng(2))
    cot = np.ones((hand_model.n_vertices, 3))
    g = kinematics_vjp(p, hand_model, cot)
    np.testing.assert_allclose(g[61:64], hand_model.n_vertices * np.ones(3), atol=1e-9)


def _fd_vjp(params, model, cot, h=1e-5):
    def value(vec):
        mesh = forward_kinematics(HandParam(vec), model)
        return float(np.sum(cot * mesh.vertices))

    fd = np.empty(64)
    for i in range(64):
        e = np.zeros(64)
        e[i] = h
        fd[i] = (value(params.vector + e) - value(params.vector - e)) / (2 * h)
    return fd


def test_vjp_matches_finite_differences(hand_model):
    rng = np.random.default_rng(17)
    for _ in range(3):
        p = random_params(rng)
        cot = rng.normal(size=(hand_model.n_vertices, 3))
        got = kinematics_vjp(p, hand_model, cot)
        fd = _fd_vjp(p, hand_model, cot)
        denom = np.maximum(np.abs(fd), 1e-4 * np.abs(fd).max())
        assert (np.abs(got - fd) / denom).max() < 1e-3


# -- template backend ---------------------------------------------------------


def test_template_matches_capsule_at_zero_beta(hand_model):
    tmpl = template_from_capsule(hand_model)
    rng = np.random.default_rng(8)
    p = random_params(rng, beta_scale=0.0)
    np.testing.assert_allclose(
        tmpl.posed_mesh(p).vertices,
        forward_kinematics(p, hand_model).vertices,
        atol=1e-9,
    )


def test_template_round_trip(tmp_path, hand_model):
    tmpl = template_from_capsule(hand_model)
    save_template(tmp_path / "tmpl", tmpl)
    loaded = load_template(tmp_path / "tmpl")
    p = random_params(np.random.default_rng(3), beta_scale=0.0)
    np.testing.assert_allclose(
        loaded.posed_mesh(p).vertices, tmpl.posed_mesh(p).vertices, atol=1e-6)


def test_template_occupancy_parity(hand_model):
    # The baked template is a union of closed capsules, so ray parity counts
    # coverage multiplicity mod 2; compare against that analytic oracle,
    # excluding a tessellation-error skin around each capsule surface.
    tmpl = template_from_capsule(hand_model)
    p = HandParam.from_parts()
    rng = np.random.default_rng(12)
    pts = rng.uniform([-0.08, -0.03, -0.05], [0.08, 0.2, 0.05], size=(300, 3))
    got = tmpl.occupancy(p, pts)
    e0, e1, rads = hand_model.posed_segments(p)
    margin = np.empty(len(pts))
    expected = np.zeros(len(pts), dtype=bool)
    for i, pt in enumerate(pts):
        dists = np.array([_segment_distance_oracle(pt, e0[b], e1[b])
                          for b in range(hand_model.n_bones)])
        expected[i] = bool((dists <= rads).sum() % 2 == 1)
        margin[i] = np.abs(dists - rads).min()
    keep = margin > 2e-3
    assert (got[keep] == expected[keep]).all()


def test_template_vjp_matches_finite_differences(hand_model):
    tmpl = template_from_capsule(hand_model)
    rng = np.random.default_rng(19)
    p = random_params(rng, beta_scale=0.0)
    cot = rng.normal(size=(tmpl.n_vertices, 3))
    got = tmpl.vjp(p, cot)
    fd = _fd_vjp(p, tmpl, cot)
    fd[45:55] = 0.0  # template has no shape response
    denom = np.maximum(np.abs(fd), 1e-4 * np.abs(fd).max())
    assert (np.abs(got - fd) / denom).max() < 1e-3


def test_template_non_watertight_detected(hand_model):
    tmpl = template_from_capsule(hand_model)
    F = len(hand_model._tmpl_faces)
    tmpl.faces = tmpl.faces[F // 2:]  # tear half the first capsule open
    e0, e1, _ = hand_model.posed_segments(HandParam.from_parts())
    probes = (e0 + e1) / 2.0
    with pytest.raises(NonWatertight):
        tmpl.occupancy(HandParam.from_parts(), probes)


# -- mesh helpers -------------------------------------------------------------


def test_mirror_mesh_flips_x_and_orientation(hand_model):
    mesh = forward_kinematics(HandParam.from_parts(), hand_model)
    m = mirror_mesh(mesh)
    np.testing.assert_allclose(m.vertices[:, 0], -mesh.vertices[:, 0])
    np.testing.assert_allclose(m.normals, mesh.normals @ MIRROR_MAT.T, atol=1e-9)


def test_obj_round_trip(tmp_path, hand_model):
    from handpair.mesh import read_obj, write_obj

    mesh = forward_kinematics(HandParam.from_parts(), hand_model)
    write_obj(tmp_path / "hand.obj", mesh)
    back = read_obj(tmp_path / "hand.obj")
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-7
    np.testing.assert_array_equal(back.faces, mesh.faces)
