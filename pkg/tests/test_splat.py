import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from artisplat.geom import RigidTransform, quat_to_matrix
from artisplat.splat import (UNLABELED, Camera, DatasetError, EmptyPartWarning, Gaussian, Observation, SceneDataset,
                             SemanticSplat, SplatFormatError, covariance, load_dataset, load_splat, part_assignment,
                             save_dataset, save_splat)


def random_splat(n=12, num_parts=3, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    return SemanticSplat(rng.normal(size=(n, 3)), rng.normal(-3, 0.5, size=(n, 3)), q / np.linalg.norm(q, axis=1)[:, None],
                         rng.normal(size=n), rng.uniform(size=(n, 3)), rng.normal(size=(n, num_parts + 1)), num_parts)


def gaussian(log_scale, quat=(1.0, 0.0, 0.0, 0.0)):
    return Gaussian(np.zeros(3), np.asarray(log_scale, dtype=float), np.asarray(quat, dtype=float), 0.0, np.zeros(3),
                    np.zeros(2))


def test_covariance_identity_and_axis_aligned():
    np.testing.assert_allclose(covariance(gaussian(np.zeros(3))), np.eye(3), atol=1e-12)
    s = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(covariance(gaussian(np.log(s))), np.diag(s ** 2), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 1), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_covariance_eigenvalues_invariant_under_orientation(log_s, q):
    q = np.asarray(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    cov = covariance(gaussian(log_s, q / np.linalg.norm(q)))
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    ev = np.linalg.eigvalsh(cov)
    np.testing.assert_allclose(np.sort(ev), np.sort(np.exp(2 * np.asarray(log_s))), atol=1e-9)


def test_part_assignment_one_hot_and_ties():
    logits = np.zeros((4, 4))
    logits[[0, 1, 2], [1, 2, 3]] = 1.0
    s = SemanticSplat(np.zeros((4, 3)), np.zeros((4, 3)), np.tile([1.0, 0, 0, 0], (4, 1)), np.zeros(4),
                      np.zeros((4, 3)), logits)
    np.testing.assert_array_equal(part_assignment(s), [1, 2, 3, 0])


def test_part_assignment_warns_on_empty_part():
    s = random_splat(5, 2)
    s.semantic_logits[:] = 0
    s.semantic_logits[:, 1] = 1
    with pytest.warns(EmptyPartWarning):
        part_assignment(s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 10_000))
def test_part_assignment_partitions(n, k, seed):
    labels = part_assignment(random_splat(n, k, seed), warn=False)
    assert labels.shape == (n,)
    assert set(labels.tolist()) <= set(range(k + 1))


def test_splat_shape_checks():
    with pytest.raises(ValueError):
        SemanticSplat(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 3)),
                      np.zeros((2, 3)), num_parts=5)
    with pytest.raises(ValueError):
        SemanticSplat(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 3)),
                      np.zeros((2, 3)))


def test_save_load_roundtrip(tmp_path):
    s = random_splat()
    save_splat(s, tmp_path / "a.splat")
    t = load_splat(tmp_path / "a.splat")
    assert s == t and t.num_parts == 3
    save_splat(t, tmp_path / "b.splat")
    assert (tmp_path / "a.splat").read_bytes() == (tmp_path / "b.splat").read_bytes()


def test_magic_layout(tmp_path):
    save_splat(random_splat(), tmp_path / "a.splat")
    data = (tmp_path / "a.splat").read_bytes()
    assert data[:16] == b"ARTSPLATv1" + b"\0" * 6
    assert b"\n\n" in data[16:200]


def test_load_errors(tmp_path):
    save_splat(random_splat(10), tmp_path / "a.splat")
    data = (tmp_path / "a.splat").read_bytes()
    (tmp_path / "magic.splat").write_bytes(b"NOTASPLAT" + data[9:])
    with pytest.raises(SplatFormatError, match="magic"):
        load_splat(tmp_path / "magic.splat")
    (tmp_path / "v2.splat").write_bytes(b"ARTSPLATv2" + data[10:])
    with pytest.raises(SplatFormatError, match="version"):
        load_splat(tmp_path / "v2.splat")
    record = (14 + 4) * 4
    (tmp_path / "short.splat").write_bytes(data[:-record])
    with pytest.raises(SplatFormatError, match="truncated"):
        load_splat(tmp_path / "short.splat")
    (tmp_path / "np.splat").write_bytes(data.replace(b"num_parts=3", b"num_parts=4"))
    with pytest.raises(SplatFormatError, match="inconsistent"):
        load_splat(tmp_path / "np.splat")


def small_dataset(views=3, num_parts=2, size=16):
    rng = np.random.default_rng(0)
    obs = []
    for i in range(views):
        cam = Camera.look_at([0, -2.0, 0.5 * i], [0, 0, 0], 20.0, size, size)
        labels = rng.integers(0, num_parts + 1, size=(size, size)).astype(np.uint8)
        obs.append(Observation(cam, np.round(rng.uniform(size=(size, size, 3)) * 255) / 255, labels))
    return SceneDataset(0, num_parts, obs)


def test_dataset_roundtrip(tmp_path):
    ds = small_dataset()
    path = save_dataset(ds, tmp_path)
    back = load_dataset(path)
    assert len(back) == 3 and back.num_parts == 2
    for a, b in zip(ds.observations, back.observations):
        np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-12)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_allclose(a.camera.pose.as_matrix(), b.camera.pose.as_matrix(), atol=1e-12)


def test_missing_label_image_is_unlabeled(tmp_path):
    path = save_dataset(small_dataset(), tmp_path)
    (tmp_path / "labels_0001.png").unlink()
    ds = load_dataset(path)
    assert np.all(ds.observations[1].labels == UNLABELED)
    assert ds.labeled_indices == [0, 2]


def test_label_out_of_range(tmp_path):
    path = save_dataset(small_dataset(), tmp_path)
    lab = np.zeros((16, 16), np.uint8)
    lab[3, 3] = 2 + 3
    Image.fromarray(lab, "L").save(tmp_path / "labels_0000.png")
    with pytest.raises(DatasetError, match="out of range"):
        load_dataset(path)


def test_dimension_mismatch_and_missing(tmp_path):
    path = save_dataset(small_dataset(), tmp_path)
    Image.fromarray(np.zeros((8, 8, 3), np.uint8), "RGB").save(tmp_path / "rgb_0002.png")
    with pytest.raises(DatasetError, match="mismatch"):
        load_dataset(path)
    (tmp_path / "rgb_0002.png").unlink()
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(path)


def test_camera_validation_and_look_at():
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, 16, 16)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 4, 16)
    cam = Camera.look_at([0, -3, 0], [0, 0, 0], 10, 16, 16)
    r, t = cam.world_to_camera()
    np.testing.assert_allclose(r @ np.zeros(3) + t, [0, 0, 3], atol=1e-12)
    assert isinstance(cam.pose, RigidTransform)
    np.testing.assert_allclose(quat_to_matrix(cam.pose.rotation), cam.pose.rotation_matrix, atol=1e-12)


def test_copy_is_independent():
    s = random_splat()
    c = s.copy()
    c.means += 1
    assert not np.array_equal(s.means, c.means)
