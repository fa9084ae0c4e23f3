import filecmp

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chadet.geometry import Intrinsics, Pose
from chadet.synth import (
    Scene, Sphere, SynthConfig, generate_dataset, generate_scene, load_split, make_sample,
    read_sample, render_view, sample_sparse, write_sample,
)

CFG = SynthConfig()


def _empty_scene(depth=10.0):
    return Scene(depth, np.full(3, 0.5), np.zeros(3), 0.0, np.array([0.0, 0.0, -1.0]))


def test_scene_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert a.background_depth == b.background_depth
    assert len(a.objects) == len(b.objects)
    for x, y in zip(a.objects, b.objects):
        np.testing.assert_array_equal(x.albedo, y.albedo)


def test_scene_depth_bounds_and_variety():
    counts = set()
    for seed in range(1000):
        s = generate_scene(seed)
        near, far = s.object_depth_range()
        assert CFG.min_d < near and far < CFG.max_d
        assert 1 <= len(s.objects) <= 8
        assert all(np.all((o.albedo >= 0) & (o.albedo <= 1)) for o in s.objects)
        counts.add(len(s.objects))
    assert len(counts) >= 2


def test_empty_scene_renders_background_plane():
    rgb, depth = render_view(_empty_scene(9.0), Pose.identity(), Intrinsics.default_for(16, 16), 16, 16)
    np.testing.assert_allclose(depth, 9.0)
    assert rgb.shape == (16, 16, 3) and rgb.min() >= 0 and rgb.max() <= 1


def test_sphere_on_axis_centre_depth():
    scene = _empty_scene(15.0)
    scene.spheres.append(Sphere(np.array([0.0, 0.0, 6.0]), 1.5, np.ones(3), np.zeros(3), 0.0))
    _, depth = render_view(scene, Pose.identity(), Intrinsics(40.0, 40.0, 16.0, 16.0), 33, 33)
    assert depth[16, 16] == pytest.approx(4.5, abs=1e-9)
    assert depth[0, 0] == pytest.approx(15.0)


def test_sample_invariants():
    for seed in range(10):
        s, scene = make_sample([seed])
        valid = s.sparse > 0
        assert abs(valid.sum() - CFG.n_points) <= 0.1 * CFG.n_points
        np.testing.assert_array_equal(s.sparse[valid], s.gt_depth[valid])
        near, _ = scene.object_depth_range()
        assert s.gt_depth.min() >= min(near, scene.background_depth) - 1e-4
        assert s.gt_depth.max() <= scene.background_depth * 1.2   # slanted rays reach the plane farther out
        assert s.rgb_t.shape == s.rgb_t1.shape == (64, 64, 3)


def test_sample_sparse_examples():
    dense = np.random.default_rng(0).uniform(1, 5, (8, 8))
    np.testing.assert_array_equal(sample_sparse(dense, 64, 0), dense)
    sp = sample_sparse(np.random.default_rng(1).uniform(1, 5, (64, 64)), 1500, 3)
    assert np.count_nonzero(sp) == 1500
    with pytest.raises(ValueError):
        sample_sparse(dense, 65, 0)


@given(st.integers(0, 2**32 - 1), st.integers(0, 64))
def test_sparse_values_copied_bit_exactly(seed, n):
    dense = np.random.default_rng(seed).uniform(0.5, 20, (8, 8)).astype(np.float32)
    sp = sample_sparse(dense, n, seed)
    nz = sp != 0
    assert nz.sum() == n
    assert sp[nz].tobytes() == dense[nz].tobytes()


def test_sample_disk_roundtrip(tmp_path):
    s, _ = make_sample([3])
    write_sample(tmp_path, 7, s)
    back = read_sample(tmp_path, 7)
    assert back.sparse.tobytes() == s.sparse.tobytes()
    assert back.gt_depth.tobytes() == s.gt_depth.tobytes()
    np.testing.assert_allclose(back.rgb_t, s.rgb_t, atol=0.5 / 255 + 1e-6)
    np.testing.assert_allclose(back.pose_t_to_t1.as_matrix(), s.pose_t_to_t1.as_matrix())
    assert back.intrinsics == s.intrinsics


def test_dataset_generation_is_byte_deterministic(tmp_path):
    generate_dataset(tmp_path / "a", 3, 2, seed=5)
    generate_dataset(tmp_path / "b", 3, 2, seed=5)
    for split in ("train", "val"):
        names = sorted(p.name for p in (tmp_path / "a" / split).iterdir())
        assert len(names) == 5 * (3 if split == "train" else 2)
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / split, tmp_path / "b" / split, names, shallow=False)
        assert not mismatch and not errors
    assert len(load_split(tmp_path / "a", "val")) == 2


def test_missing_split_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path, "train")
