"""Atlas index, nearest-neighbor assignment, and segmentation tests."""

import numpy as np
import pytest

from fiesta.autoenc import ModelConfig, encode, init_model
from fiesta.core import Bundle, SpatialReference, Tractogram, resample_streamline
from fiesta.errors import ConfigError, DegenerateInputError
from fiesta.segment import (
    Assignment,
    AtlasIndex,
    assign,
    build_atlas_index,
    canonical_orientation,
    nearest_assignments,
    segment_tractogram,
)

REF = SpatialReference(dims=(48, 48, 48), affine=np.diag([2.0, 2.0, 2.0, 1.0]))
MODEL = init_model(ModelConfig(input_points=64, latent_dim=8, channel_plan=(4, 8), seed=3))


def bundle_streamlines(rng, offset, n=10):
    lines = []
    for _ in range(n):
        x = np.linspace(0, 80, 40)
        y = np.full_like(x, offset[0]) + rng.normal(scale=1.0, size=x.shape)
        z = np.full_like(x, offset[1]) + rng.normal(scale=1.0, size=x.shape)
        lines.append(np.column_stack([x, y, z]))
    return lines


def make_atlas(rng, per_bundle=10):
    offsets = {1: (0.0, 0.0), 2: (60.0, 0.0), 3: (0.0, 60.0)}
    return [
        Bundle(
            label=label,
            name=f"bundle{label}",
            streamlines=bundle_streamlines(rng, offset, per_bundle),
            reference=REF,
        )
        for label, offset in offsets.items()
    ]


class TestAtlasIndex:
    def test_point_count_is_twice_streamline_count(self):
        atlas = make_atlas(np.random.default_rng(0))
        index = build_atlas_index(MODEL, atlas)
        assert index.latents.shape[0] == 60
        assert index.n_originals == 30
        assert sorted(index.names) == [1, 2, 3]
        counts = {lbl: int((index.labels == lbl).sum()) for lbl in (1, 2, 3)}
        assert counts == {1: 20, 2: 20, 3: 20}

    def test_empty_atlas_rejected(self):
        with pytest.raises(DegenerateInputError, match="empty atlas"):
            build_atlas_index(MODEL, [])

    def test_duplicate_label_rejected(self):
        atlas = make_atlas(np.random.default_rng(1))
        atlas.append(atlas[0])
        with pytest.raises(ValueError, match="duplicate"):
            build_atlas_index(MODEL, atlas)


def synthetic_index(latents, labels):
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    # Duplicate the block so the originals-plus-flipped shape invariant holds.
    return AtlasIndex(
        latents=np.concatenate([latents, latents]),
        labels=np.concatenate([labels, labels]).astype(np.int64),
        names={int(lbl): f"b{lbl}" for lbl in labels},
        n_originals=n,
        reference=REF,
    )


class TestAssign:
    def test_query_at_indexed_point(self):
        index = synthetic_index([[0.0, 0.0], [5.0, 0.0]], np.array([1, 2]))
        result = assign(index, [[5.0, 0.0]])
        assert result[0].label == 2
        assert result[0].distance == 0.0

    def test_equidistant_tie_takes_lower_label(self):
        index = synthetic_index([[1.0, 0.0], [-1.0, 0.0]], np.array([4, 2]))
        result = assign(index, [[0.0, 0.0]])
        assert result[0].label == 2
        assert result[0].distance == 1.0

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(7)
        latents = rng.normal(size=(90, 8))
        labels = rng.integers(1, 6, size=90)
        index = synthetic_index(latents, labels)
        queries = rng.normal(size=(300, 8))
        results = assign(index, queries)
        for q, got in zip(queries, results):
            d2 = np.sum((q - index.latents) ** 2, axis=1)
            best = float(np.sqrt(d2.min()))
            assert got.distance == best
            tied = np.flatnonzero(d2 == d2.min())
            want_label = int(index.labels[tied].min())
            assert got.label == want_label

    def test_dimension_mismatch(self):
        index = synthetic_index([[0.0, 0.0]], np.array([1]))
        with pytest.raises(ValueError, match="dimension"):
            assign(index, [[0.0, 0.0, 0.0]])

    def test_k3_majority(self):
        index = synthetic_index(
            [[0.0], [0.2], [10.0]], np.array([3, 3, 1])
        )
        # k=3 over the duplicated index sees labels {3,3,3,3,1,1}: majority 3.
        result = assign(index, [[5.0]], k=3)
        assert result[0].label == 3

    def test_assignment_validation(self):
        with pytest.raises(ValueError):
            Assignment(index=0, label=1, distance=-0.5)
        with pytest.raises(ValueError):
            Assignment(index=0, label=1, distance=float("nan"))


class TestCanonicalOrientation:
    def test_flip_maps_to_same_array(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            line = np.cumsum(rng.normal(size=(15, 3)), axis=0)
            a = canonical_orientation(line)
            b = canonical_orientation(line[::-1])
            assert np.array_equal(a, b)

    def test_palindrome_unchanged(self):
        line = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
        assert np.array_equal(canonical_orientation(line), line)


class TestSegmentTractogram:
    def setup_method(self):
        self.rng = np.random.default_rng(11)
        self.atlas = make_atlas(self.rng)
        self.index = build_atlas_index(MODEL, self.atlas)

    def atlas_tractogram(self):
        lines = [s for b in self.atlas for s in b.streamlines]
        truth = np.array([b.label for b in self.atlas for _ in b.streamlines])
        return Tractogram(streamlines=lines, reference=REF), truth

    def test_atlas_recovers_itself(self):
        tractogram, truth = self.atlas_tractogram()
        thresholds = {1: 0.5, 2: 0.5, 3: 0.5}
        result = segment_tractogram(MODEL, self.index, thresholds, tractogram)
        assert result.rejected.size == 0
        for label, bundle in result.bundles.items():
            assert len(bundle.streamlines) == 10
        got = np.array([a.label for a in result.assignments])
        assert np.array_equal(got, truth)

    def test_zero_thresholds_reject_everything(self):
        tractogram, _ = self.atlas_tractogram()
        result = segment_tractogram(
            MODEL, self.index, {1: 0.0, 2: 0.0, 3: 0.0}, tractogram
        )
        assert result.bundles == {}
        assert result.rejected.size == len(tractogram.streamlines)

    def test_partition_property(self):
        lines = [
            np.cumsum(self.rng.normal(size=(20, 3)), axis=0) * 5 for _ in range(40)
        ]
        tractogram = Tractogram(streamlines=lines, reference=REF)
        result = segment_tractogram(
            MODEL, self.index, {1: 0.3, 2: 0.3, 3: 0.3}, tractogram
        )
        kept = sum(len(b.streamlines) for b in result.bundles.values())
        assert kept + result.rejected.size == 40
        kept_idx = {
            a.index
            for a in result.assignments
            if a.distance < {1: 0.3, 2: 0.3, 3: 0.3}[a.label]
        }
        assert kept_idx.isdisjoint(set(result.rejected.tolist()))

    def test_orientation_invariance(self):
        tractogram, _ = self.atlas_tractogram()
        flipped = Tractogram(
            streamlines=[s[::-1].copy() for s in tractogram.streamlines],
            reference=REF,
        )
        thresholds = {1: 0.4, 2: 0.4, 3: 0.4}
        a = segment_tractogram(MODEL, self.index, thresholds, tractogram)
        b = segment_tractogram(MODEL, self.index, thresholds, flipped)
        assert [x.label for x in a.assignments] == [x.label for x in b.assignments]
        assert [x.distance for x in a.assignments] == [x.distance for x in b.assignments]
        assert np.array_equal(a.rejected, b.rejected)

    def test_threshold_monotonicity(self):
        lines = [
            np.cumsum(self.rng.normal(size=(20, 3)), axis=0) * 8 for _ in range(30)
        ]
        tractogram = Tractogram(streamlines=lines, reference=REF)
        small = segment_tractogram(
            MODEL, self.index, {1: 0.2, 2: 0.2, 3: 0.2}, tractogram
        )
        large = segment_tractogram(
            MODEL, self.index, {1: 0.6, 2: 0.6, 3: 0.6}, tractogram
        )
        assert set(large.rejected.tolist()) <= set(small.rejected.tolist())

    def test_missing_threshold_names_label(self):
        tractogram, _ = self.atlas_tractogram()
        with pytest.raises(ConfigError, match="label 3"):
            segment_tractogram(MODEL, self.index, {1: 0.5, 2: 0.5}, tractogram)

    def test_nearest_assignments_on_atlas_member(self):
        line = self.atlas[1].streamlines[4]
        [a] = nearest_assignments(MODEL, self.index, [line])
        assert a.label == 2
        assert a.distance == 0.0

    def test_flipped_atlas_member_distance_zero(self):
        line = self.atlas[2].streamlines[0][::-1].copy()
        [a] = nearest_assignments(MODEL, self.index, [line])
        assert a.label == 3
        assert a.distance == 0.0
