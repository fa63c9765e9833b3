import json

import numpy as np
import pytest

from handpair.data import (
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    overlapping_spec,
    save_dataset,
    split,
    two_mode_spec,
)
from handpair.errors import ChecksumMismatch, LayoutMismatch, RejectionStall
from handpair.hand_model import default_hand, pair_meshes
from handpair.sampler import penetration_set


def test_single_mode_zero_jitter_is_constant():
    spec = two_mode_spec(count=6, seed=1)
    spec.modes = spec.modes[:1]
    spec.theta_jitter = 0.0
    spec.beta_sigma = 0.0
    spec.modes[0].rotation_cone = 0.0
    spec.modes[0].rel_translation_sigma = 0.0
    ds = generate_synthetic(spec)
    assert (ds.params == ds.params[0]).all()


def test_zero_threshold_means_empty_penetration_set():
    ds = generate_synthetic(two_mode_spec(count=24, seed=7, max_penetration=0.0))
    model = default_hand()
    for i in range(len(ds)):
        x_l, x_r = ds.pair(i)
        mesh_l, mesh_r = pair_meshes(x_l, x_r, model)
        # Brute-force evaluation of the penetration test on stored values.
        d2 = ((mesh_r.vertices[:, None, :] - mesh_l.vertices[None, :, :]) ** 2).sum(2)
        nearest = d2.argmin(axis=1)
        depth = -np.einsum("ij,ij->i", mesh_l.normals[nearest],
                           mesh_r.vertices - mesh_l.vertices[nearest])
        assert not (depth > 0).any()


def test_generation_is_byte_identical_per_seed(tmp_path):
    for run in ("a", "b"):
        save_dataset(tmp_path / run, generate_synthetic(two_mode_spec(count=16, seed=3)))
    assert (tmp_path / "a/params.f32").read_bytes() == (tmp_path / "b/params.f32").read_bytes()
    assert (tmp_path / "a/manifest.json").read_text() == (tmp_path / "b/manifest.json").read_text()


def test_rejection_stall():
    spec = two_mode_spec(count=1, seed=0)
    spec.modes = spec.modes[:1]
    spec.modes[0].rel_translation_mean = np.zeros(3)  # hands coincide
    spec.modes[0].rel_translation_sigma = 0.0
    spec.theta_jitter = 0.0
    with pytest.raises(RejectionStall):
        generate_synthetic(spec)


def test_round_trip_exact(tmp_path):
    ds = generate_synthetic(two_mode_spec(count=32, seed=5))
    save_dataset(tmp_path / "ds", ds)
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.params, ds.params)
    np.testing.assert_array_equal(back.mode_ids, ds.mode_ids)


def test_object_dataset_round_trip(tmp_path):
    ds = generate_synthetic(two_mode_spec(count=8, seed=2, with_objects=True))
    assert ds.has_objects and len(ds.categories) == 8
    assert set(ds.categories) <= {"box", "ball"}
    save_dataset(tmp_path / "ds", ds)
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.objects_, ds.objects_)
    assert back.categories == ds.categories


def test_truncated_blob_rejected(tmp_path):
    save_dataset(tmp_path / "ds", generate_synthetic(two_mode_spec(count=8, seed=1)))
    blob = (tmp_path / "ds/params.f32").read_bytes()
    (tmp_path / "ds/params.f32").write_bytes(blob[:-16])
    with pytest.raises(LayoutMismatch):
        load_dataset(tmp_path / "ds")


def test_corrupted_blob_rejected(tmp_path):
    save_dataset(tmp_path / "ds", generate_synthetic(two_mode_spec(count=8, seed=1)))
    blob = bytearray((tmp_path / "ds/params.f32").read_bytes())
    blob[4] ^= 0xFF
    (tmp_path / "ds/params.f32").write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load_dataset(tmp_path / "ds")


def test_wrong_units_rejected(tmp_path):
    save_dataset(tmp_path / "ds", generate_synthetic(two_mode_spec(count=4, seed=1)))
    manifest = json.loads((tmp_path / "ds/manifest.json").read_text())
    manifest["units"] = "mm"
    (tmp_path / "ds/manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(LayoutMismatch):
        load_dataset(tmp_path / "ds")


def test_split_sizes_and_union():
    ds = generate_synthetic(two_mode_spec(count=100, seed=9))
    train, val, test = split(ds, (0.7, 0.15, 0.15), seed=3)
    assert (len(train), len(val), len(test)) == (70, 15, 15)
    rows = np.concatenate([train.params, val.params, test.params])
    assert {tuple(r) for r in rows} == {tuple(r) for r in ds.params}
    again = split(ds, (0.7, 0.15, 0.15), seed=3)
    np.testing.assert_array_equal(again[0].params, train.params)


def test_split_fracs_must_sum_to_one():
    ds = generate_synthetic(two_mode_spec(count=4, seed=0))
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.2, 0.2), seed=0)


def test_overlapping_spec_produces_penetrations():
    ds = generate_synthetic(overlapping_spec(count=16, seed=5))
    model = default_hand()
    hits = 0
    for i in range(len(ds)):
        x_l, x_r = ds.pair(i)
        mesh_l, mesh_r = pair_meshes(x_l, x_r, model)
        hits += int(len(penetration_set(mesh_r, mesh_l)) > 0)
    assert hits >= 4


def test_mode_classification_matches_sidecar():
    spec = two_mode_spec(count=40, seed=21)
    ds = generate_synthetic(spec)
    got = np.array([spec.classify(*ds.pair(i)) for i in range(len(ds))])
    np.testing.assert_array_equal(got, ds.mode_ids)
