"""Geometry primitives: resampling, flips, lengths, winding, orientations,
and the voxel/world coordinate conventions."""

import numpy as np
import pytest

from fiesta.core import (
    SpatialReference,
    Tractogram,
    as_streamline,
    flip_streamline,
    local_orientations,
    resample_streamline,
    streamline_length,
    visited_voxels,
    winding_angle,
)
from fiesta.errors import DegenerateInputError


def identity_reference(dims=(10, 10, 10)):
    return SpatialReference(dims=dims, affine=np.eye(4))


def random_streamline(rng, n_points=None):
    n = n_points or rng.integers(2, 40)
    start = rng.uniform(-20, 20, 3)
    steps = rng.normal(0.0, 1.5, (n - 1, 3))
    return np.vstack([start, start + np.cumsum(steps, axis=0)])


# ---------------------------------------------------------------- resample


def test_resample_straight_segment_uniform():
    s = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    out = resample_streamline(s, 3)
    expected = np.array([[0.0, 0, 0], [5.0, 0, 0], [10.0, 0, 0]])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_resample_identity_on_uniform_input():
    t = np.linspace(0.0, 9.0, 10)
    s = np.stack([t, 2 * t, -t], axis=1)
    out = resample_streamline(s, 10)
    assert np.max(np.linalg.norm(out - s, axis=1)) < 1e-9


def test_resample_quarter_circle_against_analytic_parametrization():
    # Polyline approximation of a radius-10 quarter circle, 100 vertices.
    theta = np.linspace(0.0, np.pi / 2, 100)
    s = np.stack([10 * np.cos(theta), 10 * np.sin(theta), np.zeros_like(theta)], axis=1)
    out = resample_streamline(s, 256)

    spacing = np.linalg.norm(np.diff(out, axis=0), axis=1)
    assert spacing.max() - spacing.min() < 1e-3

    # Equal arc length along the circle itself corresponds to equal angles.
    phi = np.linspace(0.0, np.pi / 2, 256)
    analytic = np.stack([10 * np.cos(phi), 10 * np.sin(phi), np.zeros_like(phi)], axis=1)
    assert np.max(np.linalg.norm(out - analytic, axis=1)) < 2e-3


def test_resample_endpoints_exact():
    rng = np.random.default_rng(7)
    s = random_streamline(rng, 17)
    out = resample_streamline(s, 33)
    assert np.array_equal(out[0], s[0])
    assert np.array_equal(out[-1], s[-1])


def test_resample_zero_length_errors():
    s = np.zeros((4, 3))
    with pytest.raises(DegenerateInputError, match="zero-length streamline"):
        resample_streamline(s, 8)


def test_resample_idempotent():
    # Exact idempotency holds when the output's chords are uniform (straight
    # and constant-curvature paths); smooth curves stabilize to sub-1e-4.
    line = np.array([[0.0, 0, 0], [40.0, 4.0, 0], [80.0, 8.0, 0]])
    once = resample_streamline(line, 64)
    twice = resample_streamline(once, 64)
    assert np.max(np.linalg.norm(twice - once, axis=1)) < 1e-9

    t = np.linspace(0, np.pi / 2, 1000)
    ellipse = np.stack([20 * np.cos(t), 10 * np.sin(t), np.zeros_like(t)], axis=1)
    once = resample_streamline(ellipse, 256)
    twice = resample_streamline(once, 256)
    assert np.max(np.linalg.norm(twice - once, axis=1)) < 1e-4


def test_resampled_length_converges_from_below():
    # Smooth helix sampled densely; coarser resamples cut corners.
    t = np.linspace(0.0, 4 * np.pi, 2000)
    s = np.stack([10 * np.cos(t), 10 * np.sin(t), 2 * t], axis=1)
    full = streamline_length(s)
    lengths = [streamline_length(resample_streamline(s, n)) for n in (8, 16, 32, 64, 128, 256)]
    assert all(b >= a - 1e-9 for a, b in zip(lengths, lengths[1:]))
    assert abs(lengths[-1] - full) / full < 1e-3


# ---------------------------------------------------------------- flip


def test_flip_two_points():
    s = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    np.testing.assert_array_equal(flip_streamline(s), [[1.0, 0, 0], [0.0, 0, 0]])


def test_flip_involution_and_invariants():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = random_streamline(rng)
        np.testing.assert_array_equal(flip_streamline(flip_streamline(s)), s)
        assert streamline_length(flip_streamline(s)) == pytest.approx(
            streamline_length(s), rel=1e-12
        )
        assert winding_angle(flip_streamline(s)) == pytest.approx(
            winding_angle(s), rel=1e-9, abs=1e-9
        )


# ---------------------------------------------------------------- length


def test_length_345_triangle():
    assert streamline_length([[0.0, 0, 0], [3.0, 4.0, 0]]) == 5.0


def test_length_unit_segments():
    s = np.stack([np.arange(11.0), np.zeros(11), np.zeros(11)], axis=1)
    assert streamline_length(s) == pytest.approx(10.0, abs=1e-12)


def test_length_matches_bruteforce_sum():
    rng = np.random.default_rng(5)
    for _ in range(50):
        s = random_streamline(rng)
        brute = 0.0
        for a, b in zip(s[:-1], s[1:]):
            brute += float(np.sqrt(((b - a) ** 2).sum()))
        assert streamline_length(s) == pytest.approx(brute, rel=1e-12)


# ---------------------------------------------------------------- winding


def test_winding_straight_line_zero():
    s = np.stack([np.linspace(0, 9, 10), np.zeros(10), np.zeros(10)], axis=1)
    assert winding_angle(s) == 0.0


def test_winding_u_shape_three_right_angles():
    s = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 0]])
    assert winding_angle(s) == pytest.approx(270.0, abs=1e-9)


def test_winding_closed_36gon():
    k = 36
    theta = 2 * np.pi * np.arange(k + 1) / k
    s = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=1)
    # Closed traversal turns at k-1 interior vertices, 10 degrees each.
    assert winding_angle(s) == pytest.approx(360.0 * (k - 1) / k, abs=1e-5)


def test_winding_two_points_zero_by_convention():
    assert winding_angle([[0.0, 0, 0], [1.0, 0, 0]]) == 0.0


# ---------------------------------------------------------------- orientations


def test_orientations_right_angle_path():
    s = np.array([[0.0, 0, 0], [2.0, 0, 0], [2.0, 2.0, 0]])
    np.testing.assert_allclose(local_orientations(s), [[1, 0, 0], [0, 1, 0]], atol=1e-15)


def test_orientations_flip_symmetry_and_norms():
    rng = np.random.default_rng(9)
    for _ in range(30):
        s = random_streamline(rng)
        fwd = local_orientations(s)
        bwd = local_orientations(flip_streamline(s))
        np.testing.assert_allclose(bwd, -fwd[::-1], atol=1e-12)
        assert fwd.shape[0] == s.shape[0] - 1
        np.testing.assert_allclose(np.linalg.norm(fwd, axis=1), 1.0, atol=1e-9)


def test_orientations_zero_segment_errors():
    s = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    with pytest.raises(DegenerateInputError):
        local_orientations(s)


# ---------------------------------------------------------------- coordinates


def test_world_to_voxel_identity_affine():
    ref = identity_reference()
    np.testing.assert_allclose(ref.world_to_voxel([1.2, 3.4, 5.6]), [1.2, 3.4, 5.6])


def test_world_to_voxel_scaled_translated():
    affine = np.diag([2.0, 2.0, 2.0, 1.0])
    affine[:3, 3] = 1.0
    ref = SpatialReference(dims=(8, 8, 8), affine=affine)
    np.testing.assert_allclose(ref.world_to_voxel([5.0, 5.0, 5.0]), [2.0, 2.0, 2.0])


def test_voxel_world_roundtrip_random_affines():
    rng = np.random.default_rng(21)
    trials = 0
    while trials < 50:
        m = rng.normal(size=(3, 3))
        q, _ = np.linalg.qr(m)
        scale = np.diag(rng.uniform(0.5, 2.0, 3))
        block = q @ scale
        if abs(np.linalg.det(block)) <= 0.1:
            continue
        affine = np.eye(4)
        affine[:3, :3] = block
        affine[:3, 3] = rng.uniform(-10, 10, 3)
        ref = SpatialReference(dims=(5, 5, 5), affine=affine)
        pts = rng.uniform(-30, 30, (20, 3))
        back = ref.voxel_to_world(ref.world_to_voxel(pts))
        assert np.max(np.abs(back - pts)) < 1e-9
        trials += 1


def test_nearest_voxel_rounding_convention():
    ref = identity_reference()
    idx = ref.nearest_voxel([[0.49, 0.5, 1.51], [-0.49, -0.5, -0.51]])
    np.testing.assert_array_equal(idx, [[0, 1, 2], [0, 0, -1]])


def test_spatial_reference_rejects_singular_affine():
    affine = np.eye(4)
    affine[0, 0] = 0.0
    with pytest.raises(ValueError, match="invertible"):
        SpatialReference(dims=(4, 4, 4), affine=affine)


def test_spatial_reference_rejects_bad_last_row():
    affine = np.eye(4)
    affine[3, 0] = 1.0
    with pytest.raises(ValueError, match="last row"):
        SpatialReference(dims=(4, 4, 4), affine=affine)


def test_voxel_volume():
    affine = np.diag([2.0, 3.0, 4.0, 1.0])
    ref = SpatialReference(dims=(2, 2, 2), affine=affine)
    assert ref.voxel_volume == pytest.approx(24.0)


# ---------------------------------------------------------------- containers


def test_streamline_validation():
    with pytest.raises(ValueError, match="at least 2"):
        as_streamline(np.zeros((1, 3)))
    with pytest.raises(ValueError, match="finite"):
        as_streamline([[0.0, 0, 0], [np.nan, 0, 0]])
    with pytest.raises(ValueError, match="shape"):
        as_streamline(np.zeros((4, 2)))


def test_tractogram_label_length_check():
    ref = identity_reference()
    lines = [np.array([[0.0, 0, 0], [1.0, 0, 0]])]
    with pytest.raises(ValueError, match="labels length"):
        Tractogram(streamlines=lines, reference=ref, labels=np.array([1, 2]))


def test_visited_voxels_dedup_and_bounds():
    ref = identity_reference(dims=(3, 3, 3))
    s = np.array([[0.0, 0, 0], [0.2, 0, 0], [1.0, 0, 0], [9.0, 0, 0]])
    vox = visited_voxels(s, ref)
    np.testing.assert_array_equal(vox, [[0, 0, 0], [1, 0, 0]])
