"""Whole-toolkit acceptance suite.

Each class pins one end-user guarantee at full strength: analytic
gradients against central differences, bit-level exactness of the loss
and distance primitives, latent class structure after a real training
run on a synthetic phantom, calibration and segmentation behavior,
statistical correctness of the density estimators and the rejection
sampler, volume saturation, generative recovery of a withheld bundle,
reliability metrics against independently coded oracles, the full
command-line chain on a jittered multi-timepoint phantom, and byte
determinism plus corrupt-file behavior of every codec.

Two session fixtures carry the expensive work: one training run on a
2400-streamline phantom (shared by the latent-structure, calibration,
segmentation, and generation tests) and one end-to-end CLI chain.
"""

import json
import math
import statistics
import struct
import time
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from fiesta.autoenc import (
    ModelConfig,
    TrainConfig,
    contrastive_term,
    decode,
    encode,
    gradient_check,
    init_model,
    train,
)
from fiesta.calibrate import calibrate, near_optimal_threshold, scale_thresholds
from fiesta.cli import main
from fiesta.core import (
    Bundle,
    SpatialReference,
    Tractogram,
    VolumeGrid,
    canonical_orientation,
    flip_streamline,
    resample_streamline,
    visited_voxels,
)
from fiesta.errors import FiestaError
from fiesta.generate import (
    FilterParams,
    anatomical_filter,
    build_kde,
    fit_gmm,
    generate_bundle,
    kde_density,
    rejection_sample,
    saturation_curve,
)
from fiesta.io import (
    read_model,
    read_report,
    read_threshold_table,
    read_tractogram,
    read_volume,
    write_model,
    write_report,
    write_threshold_table,
    write_tractogram,
    write_volume,
)
from fiesta.metrics import (
    DensityMap,
    IccInput,
    bundle_adjacency_streamline,
    bundle_adjacency_voxel,
    density_correlation,
    density_map,
    dice,
    icc3k,
    test_retest_report,
    weighted_dice,
)
from fiesta.phantom import PhantomConfig, default_bundles, make_phantom
from fiesta.qbx import mdf_distance, quickbundlesx
from fiesta.segment import build_atlas_index, segment_tractogram

# Shared phantom-and-training scale. The latent width and the pairing
# level are picked so one bundle's latent cloud is a single compact blob:
# that keeps the mixture proposal close to the kernel-density target and
# the rejection sampler's acceptance rate comfortably above its floor,
# while still separating the three bundles by a wide margin. The package
# defaults stay at their documented values; these are just the settings
# this suite trains and generates with.
PHANTOM_SEED = 7
N_PER_BUNDLE = 600
N_IMPLAUSIBLE = 600
MODEL_POINTS = 256
TRAIN_LATENT_DIM = 3
TRAIN_PAIR_LEVEL = 0
TRAIN_EPOCHS = 20
GEN_GMM_COMPONENTS = 11
GEN_N_SEEDS = 2000


def _prep(line, n_points=MODEL_POINTS):
    return resample_streamline(
        canonical_orientation(np.asarray(line, dtype=np.float64)), n_points
    )


def _voxel_support(lines, reference):
    support = set()
    for line in lines:
        for voxel in visited_voxels(np.asarray(line, dtype=np.float64), reference):
            support.add(tuple(voxel))
    return support


@pytest.fixture(scope="session")
def phantom():
    config = PhantomConfig(
        bundles=default_bundles(n_streamlines=N_PER_BUNDLE),
        n_implausible=N_IMPLAUSIBLE,
        n_timepoints=1,
        seed=PHANTOM_SEED,
    )
    return make_phantom(config)


@pytest.fixture(scope="session")
def trained(phantom):
    """One real training run at the shared scale, plus its latents."""
    tractogram = phantom.timepoints[0]
    labels = np.asarray(tractogram.labels)
    prepared = np.asarray([_prep(s) for s in tractogram.streamlines])
    tree = quickbundlesx(prepared, seed=PHANTOM_SEED)
    model = init_model(ModelConfig(latent_dim=TRAIN_LATENT_DIM, seed=PHANTOM_SEED))
    started = time.monotonic()
    model, history = train(
        model,
        prepared,
        tree,
        TrainConfig(epochs=TRAIN_EPOCHS, seed=PHANTOM_SEED, pair_level=TRAIN_PAIR_LEVEL),
    )
    train_seconds = time.monotonic() - started
    z = encode(model, prepared).astype(np.float64)
    z_atlas = {
        b.label: encode(model, np.asarray([_prep(s) for s in b.streamlines])).astype(
            np.float64
        )
        for b in phantom.atlas
    }
    return SimpleNamespace(
        model=model,
        tractogram=tractogram,
        labels=labels,
        prepared=prepared,
        z=z,
        z_atlas=z_atlas,
        history=history,
        train_seconds=train_seconds,
        result=phantom,
    )


@pytest.fixture(scope="session")
def calibrated(trained):
    """Atlas index plus calibrated per-bundle thresholds."""
    result = trained.result
    index = build_atlas_index(trained.model, result.atlas)
    by_label = {}
    negatives = []
    for line, label in zip(trained.tractogram.streamlines, trained.labels):
        if label == 0:
            negatives.append(line)
        else:
            by_label.setdefault(int(label), []).append(line)
    positives = [
        Bundle(label=label, name=result.names[label], streamlines=lines,
               reference=result.reference)
        for label, lines in sorted(by_label.items())
    ]
    thresholds, report = calibrate(trained.model, index, positives, negatives)
    return SimpleNamespace(index=index, thresholds=thresholds, report=report)


# ------------------------------------------------------------------ 1


class TestGradientFidelity:
    """Analytic gradients against central differences, in float64."""

    def test_each_loss_term_matches_finite_differences(self):
        started = time.monotonic()
        rng = np.random.default_rng(0)
        lines = [
            np.cumsum(rng.normal(size=(32, 3)), axis=0) * 4.0 for _ in range(4)
        ]
        model = init_model(
            ModelConfig(input_points=32, latent_dim=16, channel_plan=(8, 16, 32), seed=1)
        )
        pairs = ([(0, 1), (2, 3), (0, 2), (1, 3)], [0, 0, 1, 1])
        for terms in ("reconstruction", "contrastive", "total"):
            report = gradient_check(
                model, lines, pairs=pairs, lam=400.0, margin=1.25, terms=terms
            )
            assert report.n_parameters_checked > 0
            assert report.max_rel_error < 1e-4, (terms, report)
        assert time.monotonic() - started < 60.0


# ------------------------------------------------------------------ 2


class TestContrastiveExactness:
    """The pair loss equals the hand formula bit for bit."""

    # Dyadic distances make every intermediate float exact, so == is the
    # right comparison, not approx.
    GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 4.0)

    def test_matches_hand_formula_on_distance_grid(self):
        margin = 1.25
        for d in self.GRID:
            z_i = np.array([1.5, -2.25, 0.5, 3.0])
            z_j = z_i.copy()
            z_j[0] = z_i[0] + d
            for y in (0, 1):
                got = contrastive_term(z_i, z_j, y, margin=margin)
                if y == 0:
                    want = 0.5 * d * d
                else:
                    clipped = max(margin - d, 0.0)
                    want = 0.5 * clipped * clipped
                assert got == want, (d, y)

    def test_zero_cases_exact(self):
        margin = 1.25
        z = np.array([0.5, 0.5, -1.0])
        assert contrastive_term(z, z.copy(), 0, margin=margin) == 0.0
        at_margin = z.copy()
        at_margin[0] = z[0] + margin
        assert contrastive_term(z, at_margin, 1, margin=margin) == 0.0
        beyond = z.copy()
        beyond[0] = z[0] + 4.0
        assert contrastive_term(z, beyond, 1, margin=margin) == 0.0


# ------------------------------------------------------------------ 3


class TestMdfExactness:
    """Streamline distance against an independently coded evaluation."""

    @staticmethod
    def _random_streamline(rng, n_points=None):
        n = int(n_points or rng.integers(8, 48))
        return np.cumsum(rng.normal(size=(n, 3)), axis=0) * (60.0 / n)

    @staticmethod
    def _oracle(a, b, k=12):
        ra = resample_streamline(canonical_orientation(a), k)
        rb = resample_streamline(canonical_orientation(b), k)
        direct = math.fsum(math.sqrt((p - q) @ (p - q)) for p, q in zip(ra, rb)) / k
        flipped = (
            math.fsum(math.sqrt((p - q) @ (p - q)) for p, q in zip(ra, rb[::-1])) / k
        )
        return min(direct, flipped)

    def test_equals_both_orientation_brute_force_on_1000_pairs(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            a = self._random_streamline(rng)
            b = self._random_streamline(rng)
            assert mdf_distance(a, b) == self._oracle(a, b)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(43)
        for _ in range(300):
            a = self._random_streamline(rng)
            b = self._random_streamline(rng)
            assert mdf_distance(a, b) == mdf_distance(b, a)

    def test_flip_invariance_exact(self):
        rng = np.random.default_rng(44)
        for _ in range(300):
            a = self._random_streamline(rng)
            b = self._random_streamline(rng)
            base = mdf_distance(a, b)
            assert mdf_distance(a, flip_streamline(b)) == base
            assert mdf_distance(flip_streamline(a), b) == base
            assert mdf_distance(flip_streamline(a), flip_streamline(b)) == base


# ------------------------------------------------------------------ 4


class TestLatentStructure:
    """A real training run separates the phantom's bundles."""

    def test_training_fits_the_time_budget(self, trained):
        assert len(trained.labels) >= 2000
        assert trained.train_seconds < 1800.0

    def test_within_bundle_distances_below_between(self, trained):
        rng = np.random.default_rng(0)
        pairs = rng.choice(len(trained.z), size=(30000, 2))
        a, b = pairs[:, 0], pairs[:, 1]
        distance = np.linalg.norm(trained.z[a] - trained.z[b], axis=1)
        la, lb = trained.labels[a], trained.labels[b]
        within = distance[(la == lb) & (la > 0)]
        between = distance[(la != lb) & (la > 0) & (lb > 0)]
        assert within.size > 100 and between.size > 100
        assert within.mean() < between.mean()

    def test_heldout_nearest_neighbor_recovery(self, trained):
        hits = 0
        total = 0
        for label, z_held in trained.z_atlas.items():
            d2 = (
                np.sum(z_held**2, axis=1)[:, None]
                + np.sum(trained.z**2, axis=1)[None, :]
                - 2.0 * (z_held @ trained.z.T)
            )
            nearest = trained.labels[np.argmin(d2, axis=1)]
            hits += int(np.sum(nearest == label))
            total += z_held.shape[0]
        assert hits / total >= 0.95


# ------------------------------------------------------------------ 5


class TestThresholdCalibration:
    """ROC sweeps on separable and overlapping populations."""

    def test_separable_phantom_gets_perfect_rates(self, calibrated):
        assert set(calibrated.thresholds) == {1, 2, 3}
        for label in ("1", "2", "3"):
            entry = calibrated.report["bundles"][label]
            assert entry["tpr"] == 1.0
            assert entry["fpr"] == 0.0

    def test_balanced_point_beats_every_swept_alternative(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(5.0, 1.0, size=400)
        neg = rng.normal(7.0, 1.5, size=500)
        pos, neg = np.abs(pos), np.abs(neg)
        group = [(float(d), True) for d in pos] + [(float(d), False) for d in neg]
        threshold, tpr, fpr = near_optimal_threshold(group)
        balance = abs(tpr - (1.0 - fpr))
        for alt in np.unique(np.concatenate([pos, neg])):
            tpr_alt = float(np.mean(pos < alt))
            fpr_alt = float(np.mean(neg < alt))
            assert balance <= abs(tpr_alt - (1.0 - fpr_alt)) + 1e-12
        assert float(np.mean(pos < threshold)) == tpr
        assert float(np.mean(neg < threshold)) == fpr

    def test_threshold_factor_sweep_is_monotone(self, trained, calibrated):
        kept_counts = []
        for factor in np.arange(0.4, 1.81, 0.2):
            scaled = scale_thresholds(calibrated.thresholds, float(factor))
            result = segment_tractogram(
                trained.model, calibrated.index, scaled, trained.tractogram
            )
            kept_counts.append(
                sum(len(b.streamlines) for b in result.bundles.values())
            )
        assert all(b >= a for a, b in zip(kept_counts, kept_counts[1:]))
        assert kept_counts[-1] > kept_counts[0]


# ------------------------------------------------------------------ 6


class TestSegmentationPartition:
    """Exact partition and bitwise flip invariance of segmentation."""

    def test_kept_plus_rejected_equals_input(self, trained, calibrated):
        result = segment_tractogram(
            trained.model, calibrated.index, calibrated.thresholds, trained.tractogram
        )
        kept = sum(len(b.streamlines) for b in result.bundles.values())
        assert kept + result.rejected.size == len(trained.tractogram)
        assert len(result.assignments) == len(trained.tractogram)

    def test_globally_flipped_tractogram_decides_identically(
        self, trained, calibrated
    ):
        original = segment_tractogram(
            trained.model, calibrated.index, calibrated.thresholds, trained.tractogram
        )
        flipped_input = Tractogram(
            streamlines=[
                flip_streamline(s) for s in trained.tractogram.streamlines
            ],
            reference=trained.tractogram.reference,
        )
        flipped = segment_tractogram(
            trained.model, calibrated.index, calibrated.thresholds, flipped_input
        )
        assert np.array_equal(original.rejected, flipped.rejected)
        assert sorted(original.bundles) == sorted(flipped.bundles)
        for label, bundle in original.bundles.items():
            assert len(flipped.bundles[label].streamlines) == len(bundle.streamlines)
        for first, second in zip(original.assignments, flipped.assignments):
            assert first.index == second.index
            assert first.label == second.label
            assert first.distance == second.distance


# ------------------------------------------------------------------ 7


class TestSamplingCorrectness:
    """Density estimates, mixture fitting, and the rejection sampler."""

    def test_kde_normalizes_in_1d(self):
        started = time.monotonic()
        rng = np.random.default_rng(5)
        kde = build_kde(rng.normal(size=(10000, 1)))
        cells = 40000
        edges = np.linspace(-6.0, 6.0, cells + 1)
        queries = edges[:-1] + (12.0 / cells) * rng.uniform(size=cells)
        integral = float(np.mean(kde_density(kde, queries[:, None]))) * 12.0
        assert abs(integral - 1.0) < 0.01
        assert time.monotonic() - started < 100.0

    def test_kde_normalizes_in_2d(self):
        started = time.monotonic()
        rng = np.random.default_rng(6)
        kde = build_kde(rng.normal(size=(2000, 2)))
        per_axis = 300
        edges = np.linspace(-5.0, 5.0, per_axis + 1)[:-1]
        gx, gy = np.meshgrid(edges, edges, indexing="ij")
        corners = np.column_stack([gx.ravel(), gy.ravel()])
        queries = corners + (10.0 / per_axis) * rng.uniform(size=corners.shape)
        integral = float(np.mean(kde_density(kde, queries))) * 100.0
        assert abs(integral - 1.0) < 0.01
        assert time.monotonic() - started < 100.0

    def test_gmm_loglikelihood_monotone_and_means_recovered(self):
        rng = np.random.default_rng(7)
        points = np.concatenate(
            [
                rng.normal(size=(1500, 2)) + np.array([0.0, 0.0]),
                rng.normal(size=(1500, 2)) + np.array([10.0, 0.0]),
            ]
        )
        gmm = fit_gmm(points, k=2, seed=8)
        trace = np.asarray(gmm.log_likelihoods)
        assert trace.size >= 2
        assert np.all(np.diff(trace) >= -1e-9)
        for true_mean in (np.array([0.0, 0.0]), np.array([10.0, 0.0])):
            assert float(
                np.min(np.linalg.norm(gmm.means - true_mean, axis=1))
            ) < 0.1

    def test_rejection_sampler_matches_target_moments_at_25k(self):
        started = time.monotonic()
        rng = np.random.default_rng(9)
        seeds = rng.uniform(0.0, 4.0, size=(2000, 2))
        kde = build_kde(seeds)
        gmm = fit_gmm(seeds, k=2, seed=10)
        samples, stats = rejection_sample(kde, gmm, n_target=25000, seed=11)
        assert samples.shape == (25000, 2)
        assert stats["acceptance_rate"] >= 1.0 / 50.0

        # The sampler draws from the kernel estimate over the seeds, whose
        # moments are the seed moments widened by the (known) bandwidth:
        # same mean, variance plus h^2. Three standard errors at n=25000,
        # with the standard errors computed from the target's own moments.
        h = kde.bandwidths
        target_mean = seeds.mean(axis=0)
        seed_var = seeds.var(axis=0)
        target_var = seed_var + h**2
        centered = seeds - target_mean
        target_m4 = (centered**4).mean(axis=0) + 6.0 * seed_var * h**2 + 3.0 * h**4
        n = samples.shape[0]
        se_mean = np.sqrt(target_var / n)
        se_var = np.sqrt((target_m4 - target_var**2) / n)
        assert np.all(np.abs(samples.mean(axis=0) - target_mean) <= 3.0 * se_mean)
        assert np.all(np.abs(samples.var(axis=0) - target_var) <= 3.0 * se_var)
        # The seed mean and the target mean coincide, so the sampled mean
        # matches the raw seed mean under the same bound.
        assert np.all(np.abs(samples.mean(axis=0) - seeds.mean(axis=0)) <= 3.0 * se_mean)
        assert time.monotonic() - started < 100.0


# ------------------------------------------------------------------ 8


class TestVolumeSaturation:
    """Occupied volume flattens as streamline count grows."""

    def test_curve_is_monotone_and_gains_collapse_past_knee(self, phantom):
        lines = [
            s
            for s, label in zip(
                phantom.timepoints[0].streamlines,
                np.asarray(phantom.timepoints[0].labels),
            )
            if label == 1
        ]
        bundle = Bundle(
            label=1, name=phantom.names[1], streamlines=lines,
            reference=phantom.reference,
        )
        sizes = [10, 20, 40, 80, 160, 320, 640]
        curve = saturation_curve(bundle, sizes, trials=50, seed=0)
        means = [mean for _, mean, _ in curve]
        assert all(later >= earlier for earlier, later in zip(means, means[1:]))
        gains = [
            (later - earlier) / earlier for earlier, later in zip(means, means[1:])
        ]
        knees = [i for i, gain in enumerate(gains) if gain < 0.02]
        assert knees, "volume kept growing 2%+ per doubling through the largest count"
        knee = knees[0]
        assert all(gain < 0.02 for gain in gains[knee:])
        assert curve[knee][0] < curve[-1][0]


# ------------------------------------------------------------------ 9


class TestGenerativeRecovery:
    """Completion refills a half-withheld bundle inside the filter."""

    def test_withheld_half_is_recovered_and_output_refilters(self, trained):
        result = trained.result
        lines = [
            s
            for s, label in zip(trained.tractogram.streamlines, trained.labels)
            if label == 1
        ]
        order = np.random.default_rng(17).permutation(len(lines))
        half = len(lines) // 2
        kept = [lines[i] for i in order[:half]]
        withheld = [lines[i] for i in order[half:]]
        withheld_support = _voxel_support(withheld, result.reference)

        subject = Bundle(
            label=1, name=result.names[1], streamlines=kept,
            reference=result.reference,
        )
        atlas_bundle = next(b for b in result.atlas if b.label == 1)
        generated, report = generate_bundle(
            trained.model,
            subject,
            atlas_bundle,
            result.peaks,
            result.wm_mask,
            n_target=2500,
            n_seeds=GEN_N_SEEDS,
            gmm_components=GEN_GMM_COMPONENTS,
            seed=23,
        )
        assert report["final_count"] == len(generated.streamlines) > 0
        assert report["n_sampled"] == (
            report["dropped_by_trim"]
            + sum(report["rejections"].values())
            + report["final_count"]
        )

        generated_support = _voxel_support(generated.streamlines, result.reference)
        coverage = len(generated_support & withheld_support) / len(withheld_support)
        assert coverage >= 0.8

        # Every accepted streamline passes the anatomical filter again.
        outcome = anatomical_filter(
            generated.streamlines, result.peaks, result.wm_mask, FilterParams()
        )
        assert len(outcome.accepted) == len(generated.streamlines)
        assert all(count == 0 for count in outcome.rejections.values())


# ------------------------------------------------------------------ 10


class TestReliabilityOracles:
    """Overlap, adjacency, correlation, and agreement against oracles."""

    @staticmethod
    def _reference(dims=(4, 1, 1), voxel=2.0):
        affine = np.diag([voxel, voxel, voxel, 1.0])
        return SpatialReference(dims=dims, affine=affine)

    @staticmethod
    def _density(counts, reference):
        data = np.asarray(counts, dtype=np.float32).reshape(reference.dims)
        return DensityMap(grid=VolumeGrid(reference=reference, data=data))

    def test_dice_matches_hand_fraction(self):
        a = np.array([1, 1, 0, 0], dtype=bool).reshape(4, 1, 1)
        b = np.array([1, 0, 1, 0], dtype=bool).reshape(4, 1, 1)
        assert abs(dice(a, b) - float(Fraction(2 * 1, 2 + 2))) < 1e-9

    def test_weighted_dice_matches_hand_fraction(self):
        ref = self._reference()
        a = self._density([3, 1, 0, 2], ref)
        b = self._density([1, 0, 2, 2], ref)
        # overlap voxels are 0 and 3: (3+1) + (2+2) over (6 + 5)
        assert abs(weighted_dice(a, b) - float(Fraction(8, 11))) < 1e-9

    def test_density_correlation_matches_reference_formula(self):
        ref = self._reference()
        a = self._density([1, 2, 3, 0], ref)
        b = self._density([0, 3, 2, 1], ref)
        expected = statistics.correlation([1, 2, 3, 0], [0, 3, 2, 1])
        assert abs(density_correlation(a, b) - expected) < 1e-9
        assert abs(density_correlation(a, b) - 0.6) < 1e-9

    def test_voxel_adjacency_matches_hand_distances(self):
        ref = self._reference()
        a = np.array([1, 1, 0, 0], dtype=bool).reshape(4, 1, 1)
        b = np.array([0, 1, 1, 0], dtype=bool).reshape(4, 1, 1)
        # One disagreeing voxel on each side, each 2 mm from the other set.
        assert abs(bundle_adjacency_voxel(a, b, ref) - 2.0) < 1e-9

    def test_icc_matches_independent_anova_route(self):
        rng = np.random.default_rng(19)
        table = rng.normal(size=(6, 4)) + rng.normal(size=(6, 1)) * 3.0
        got, _, _ = icc3k(IccInput(values=table))

        n, k = table.shape
        grand = table.mean()
        ss_total = float(((table - grand) ** 2).sum())
        ss_rows = k * float(((table.mean(axis=1) - grand) ** 2).sum())
        ss_cols = n * float(((table.mean(axis=0) - grand) ** 2).sum())
        ss_error = ss_total - ss_rows - ss_cols
        ms_rows = ss_rows / (n - 1)
        ms_error = ss_error / ((n - 1) * (k - 1))
        assert abs(got - (ms_rows - ms_error) / ms_rows) < 1e-9

    def test_perfect_agreement_fixture(self):
        ref = self._reference()
        mask = np.array([1, 1, 0, 0], dtype=bool).reshape(4, 1, 1)
        dmap = self._density([2, 1, 0, 0], ref)
        assert dice(mask, mask) == 1.0
        assert weighted_dice(dmap, dmap) == 1.0
        assert bundle_adjacency_voxel(mask, mask, ref) == 0.0
        values = np.array([[1.0], [2.0], [5.0], [7.0]]) * np.ones((1, 4))
        assert icc3k(IccInput(values=values)) == (1.0, 1.0, 1.0)

    def test_five_timepoints_make_ten_pairs_each(self):
        reference = SpatialReference(
            dims=(32, 8, 8), affine=np.diag([2.0, 2.0, 2.0, 1.0])
        )

        def straight_line(n_points, y_mm, z_mm):
            return np.column_stack(
                [
                    np.arange(n_points) * 2.0 + 2.0,
                    np.full(n_points, y_mm),
                    np.full(n_points, z_mm),
                ]
            )

        bundles = {}
        timepoints = [f"t{i}" for i in range(5)]
        for s_i, subject in enumerate(("a", "b")):
            for label in (1, 2):
                # Same bundle at every timepoint; subjects differ in extent
                # so agreement is defined, with exact-integer volumes and
                # lengths so perfect scores come out exactly perfect.
                lines = [
                    straight_line(8 + 4 * s_i, 4.0 + 4.0 * label, 4.0),
                    straight_line(10 + 4 * s_i, 4.0 + 4.0 * label, 8.0),
                ]
                bundle = Bundle(
                    label=label, name=f"bundle{label}", streamlines=lines,
                    reference=reference,
                )
                for t in timepoints:
                    bundles[(subject, t, label)] = bundle

        report = test_retest_report(bundles, reference)
        assert report["n_pairs_per_subject"] == 10
        for label in ("1", "2"):
            metrics = report["labels"][label]["metrics"]
            assert metrics["dice"]["n"] == 20  # 10 pairs x 2 subjects
            assert metrics["dice"]["mean"] == 1.0
            assert metrics["weighted_dice"]["mean"] == 1.0
            assert metrics["bundle_adjacency_voxel"]["mean"] == 0.0
            assert metrics["bundle_adjacency_streamline"]["mean"] == 0.0
            assert abs(metrics["density_correlation"]["mean"] - 1.0) < 1e-12
            assert report["labels"][label]["icc"]["volume_mm3"]["icc"] == 1.0
            assert report["labels"][label]["icc"]["mean_length_mm"]["icc"] == 1.0

    def test_identical_bundles_have_zero_streamline_adjacency(self):
        reference = SpatialReference(
            dims=(32, 8, 8), affine=np.diag([2.0, 2.0, 2.0, 1.0])
        )
        rng = np.random.default_rng(23)
        lines = [
            np.cumsum(rng.normal(size=(20, 3)), axis=0) + np.array([20.0, 8.0, 8.0])
            for _ in range(5)
        ]
        bundle = Bundle(label=1, name="b", streamlines=lines, reference=reference)
        assert bundle_adjacency_streamline(bundle, bundle) == 0.0


# ------------------------------------------------------------------ 11


@pytest.fixture(scope="session")
def cli_chain(tmp_path_factory):
    """The whole pipeline, run through the command line on a jittered
    five-timepoint phantom: synthesize, train, calibrate, segment,
    generate, then score segment-only and completed outputs."""
    root = tmp_path_factory.mktemp("cli_chain")
    dataset = root / "data"
    started = time.monotonic()

    def config_file(name, extra):
        path = root / name
        path.write_text(json.dumps(extra))
        return str(path)

    base = {
        "dataset": str(dataset),
        "n_streamlines": 200,
        "n_implausible": 400,
        "timepoints": 5,
        "translation_sigma_mm": 0.5,
        "rotation_sigma_deg": 0.5,
        "latent_dim": TRAIN_LATENT_DIM,
        "pair_level": TRAIN_PAIR_LEVEL,
        "epochs": TRAIN_EPOCHS,
        "gmm_components": GEN_GMM_COMPONENTS,
        "n_seeds": GEN_N_SEEDS,
        "n_target": 600,
    }
    cfg = config_file("cfg.json", base)
    assert main(["phantom", "--config", cfg, "--seed", "21",
                 "--output", str(dataset)]) == 0
    assert main(["train", "--config", cfg, "--seed", "21",
                 "--output", str(root / "trained")]) == 0

    with_model = config_file(
        "cfg_model.json",
        {**base, "model": str(root / "trained" / "model.fae")},
    )
    assert main(["calibrate", "--config", with_model,
                 "--output", str(root / "calib")]) == 0
    assert main(["segment", "--config", with_model,
                 "--thresholds", str(root / "calib" / "thresholds.json"),
                 "--output", str(root / "seg")]) == 0

    with_bundles = config_file(
        "cfg_generate.json",
        {**base, "model": str(root / "trained" / "model.fae"),
         "bundles": str(root / "seg")},
    )
    assert main(["generate", "--config", with_bundles, "--seed", "21",
                 "--output", str(root / "gen")]) == 0

    assert main(["evaluate",
                 "--config", config_file("cfg_eval_seg.json",
                                         {"bundles": str(root / "seg")}),
                 "--output", str(root / "eval_seg")]) == 0
    assert main(["evaluate",
                 "--config", config_file("cfg_eval_fiesta.json",
                                         {"bundles": str(root / "gen" / "fiesta")}),
                 "--output", str(root / "eval_fiesta")]) == 0

    elapsed = time.monotonic() - started
    segment_report = json.loads((root / "eval_seg" / "metrics_report.json").read_text())
    fiesta_report = json.loads(
        (root / "eval_fiesta" / "metrics_report.json").read_text()
    )
    return SimpleNamespace(
        root=root,
        elapsed=elapsed,
        segment_report=segment_report,
        fiesta_report=fiesta_report,
    )


class TestEndToEndReliability:
    """Test-retest scores of the full chain on the jittered phantom."""

    def test_chain_fits_the_time_budget(self, cli_chain):
        assert cli_chain.elapsed < 1800.0

    def test_mean_voxel_dice_across_bundles(self, cli_chain):
        report = cli_chain.fiesta_report
        assert report["n_pairs_per_subject"] == 10
        assert report["global"]["dice"]["n"] == 30  # 10 pairs x 3 bundles
        assert report["global"]["dice"]["mean"] >= 0.8

    def test_completion_does_not_lower_weighted_dice(self, cli_chain):
        segment_wd = cli_chain.segment_report["global"]["weighted_dice"]["mean"]
        fiesta_wd = cli_chain.fiesta_report["global"]["weighted_dice"]["mean"]
        assert segment_wd is not None and fiesta_wd is not None
        assert fiesta_wd >= segment_wd


# ------------------------------------------------------------------ 12


def _flip_bit(data: bytes, offset: int, bit: int) -> bytes:
    return data[:offset] + bytes([data[offset] ^ (1 << bit)]) + data[offset + 1 :]


class TestDeterminismAndFormats:
    """Byte-identical reruns, exact roundtrips, and corruption safety."""

    def test_phantom_bytes_reproduce(self):
        config = dict(
            bundles=default_bundles(n_streamlines=30),
            n_implausible=25,
            n_timepoints=2,
            seed=13,
        )

        def blob(result):
            parts = []
            for bundle in result.subject + result.atlas:
                parts.extend(np.ascontiguousarray(s).tobytes() for s in bundle.streamlines)
            parts.extend(np.ascontiguousarray(s).tobytes() for s in result.implausible)
            for tractogram in result.timepoints:
                parts.extend(
                    np.ascontiguousarray(s).tobytes() for s in tractogram.streamlines
                )
                parts.append(tractogram.labels.tobytes())
            parts.append(np.ascontiguousarray(result.wm_mask.data).tobytes())
            parts.append(np.ascontiguousarray(result.peaks.data).tobytes())
            return b"".join(parts)

        first = make_phantom(PhantomConfig(**config))
        second = make_phantom(PhantomConfig(**config))
        assert blob(first) == blob(second)

    def test_single_threaded_training_bytes_reproduce(self, tmp_path):
        rng = np.random.default_rng(29)
        lines = np.asarray(
            [
                resample_streamline(
                    np.cumsum(rng.normal(size=(20, 3)), axis=0) * 6.0, 64
                )
                for _ in range(60)
            ]
        )
        tree = quickbundlesx(lines, thresholds=(30.0, 20.0, 10.0))
        model_config = ModelConfig(
            input_points=64, latent_dim=4, channel_plan=(4, 8), seed=3
        )
        train_config = TrainConfig(
            epochs=2, batch_size=32, seed=3, deterministic=True
        )
        paths = []
        for run in range(2):
            with threadpool_limits(limits=1):
                model, _ = train(init_model(model_config), lines, tree, train_config)
            path = tmp_path / f"model_{run}.fae"
            write_model(model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_generation_bytes_reproduce(self, trained):
        result = trained.result
        lines = [
            s
            for s, label in zip(trained.tractogram.streamlines, trained.labels)
            if label == 2
        ]
        subject = Bundle(
            label=2, name=result.names[2], streamlines=lines,
            reference=result.reference,
        )
        atlas_bundle = next(b for b in result.atlas if b.label == 2)

        def run_once():
            bundle, report = generate_bundle(
                trained.model,
                subject,
                atlas_bundle,
                result.peaks,
                result.wm_mask,
                n_target=300,
                n_seeds=GEN_N_SEEDS,
                gmm_components=GEN_GMM_COMPONENTS,
                seed=31,
            )
            blob = b"".join(np.ascontiguousarray(s).tobytes() for s in bundle.streamlines)
            return blob, json.dumps(report, sort_keys=True)

        first_blob, first_report = run_once()
        second_blob, second_report = run_once()
        assert first_blob == second_blob
        assert first_report == second_report

    def test_codec_roundtrips_bit_exact(self, tmp_path):
        rng = np.random.default_rng(37)
        reference = SpatialReference(
            dims=(6, 5, 4), affine=np.diag([2.0, 2.0, 2.0, 1.0])
        )
        lines = [
            rng.normal(size=(int(rng.integers(2, 12)), 3)).astype(np.float32)
            for _ in range(7)
        ]
        labels = rng.integers(0, 4, size=7)
        tractogram = Tractogram(
            streamlines=[l.astype(np.float64) for l in lines],
            reference=reference,
            labels=labels,
        )
        path = tmp_path / "t.stf"
        write_tractogram(tractogram, path)
        back = read_tractogram(path)
        assert np.array_equal(np.asarray(back.labels), labels)
        assert back.reference.same_grid(reference)
        for original, reread in zip(lines, back.streamlines):
            assert np.array_equal(
                reread, original.astype(np.float32).astype(np.float64)
            )
        write_tractogram(back, tmp_path / "t2.stf")
        assert path.read_bytes() == (tmp_path / "t2.stf").read_bytes()

        mask = VolumeGrid(
            reference=reference,
            data=rng.integers(0, 2, size=(6, 5, 4)).astype(np.float32),
        )
        write_volume(mask, tmp_path / "m.vgf", dtype="u8")
        assert np.array_equal(read_volume(tmp_path / "m.vgf").data, mask.data)

        field = VolumeGrid(
            reference=reference,
            data=rng.normal(size=(6, 5, 4, 9)).astype(np.float32),
        )
        write_volume(field, tmp_path / "f.vgf", dtype="f32")
        assert np.array_equal(read_volume(tmp_path / "f.vgf").data, field.data)

        model = init_model(
            ModelConfig(input_points=32, latent_dim=4, channel_plan=(4, 8), seed=41)
        )
        write_model(model, tmp_path / "m.fae")
        reread_model = read_model(tmp_path / "m.fae")
        batch = rng.normal(size=(3, 32, 3))
        assert np.array_equal(encode(model, batch), encode(reread_model, batch))

        table = {1: 3.5, 2: 0.25, 7: 11.0}
        write_threshold_table(table, tmp_path / "th.json")
        assert read_threshold_table(tmp_path / "th.json") == table

        report = {"a": [1, 2.5, "x"], "nested": {"b": None, "c": True}}
        write_report(report, tmp_path / "r.json")
        assert read_report(tmp_path / "r.json") == report

    @pytest.fixture()
    def format_samples(self, tmp_path):
        """One small valid file per codec, as raw bytes."""
        rng = np.random.default_rng(43)
        reference = SpatialReference(
            dims=(4, 3, 2), affine=np.diag([2.0, 2.0, 2.0, 1.0])
        )
        lines = [rng.normal(size=(n, 3)) for n in (3, 5, 4, 2, 6)]
        plain = Tractogram(streamlines=lines, reference=reference)
        labeled = Tractogram(
            streamlines=lines, reference=reference, labels=[1, 0, 2, 1, 3]
        )
        volume = VolumeGrid(
            reference=reference,
            data=rng.integers(0, 2, size=(4, 3, 2)).astype(np.float32),
        )
        model = init_model(
            ModelConfig(input_points=16, latent_dim=2, channel_plan=(2, 4), seed=1)
        )
        write_tractogram(plain, tmp_path / "plain.stf")
        write_tractogram(labeled, tmp_path / "labeled.stf")
        write_volume(volume, tmp_path / "vol.vgf", dtype="u8")
        write_model(model, tmp_path / "model.fae")
        write_threshold_table({1: 4.5, 2: 2.0}, tmp_path / "table.json")
        return SimpleNamespace(
            dir=tmp_path,
            plain=(tmp_path / "plain.stf").read_bytes(),
            labeled=(tmp_path / "labeled.stf").read_bytes(),
            volume=(tmp_path / "vol.vgf").read_bytes(),
            model=(tmp_path / "model.fae").read_bytes(),
            table=(tmp_path / "table.json").read_bytes(),
        )

    def _expect_error(self, directory, data, reader):
        path = directory / "corrupt.bin"
        path.write_bytes(data)
        with pytest.raises(FiestaError):
            reader(path)

    def test_every_truncation_errors(self, format_samples):
        sweeps = [
            (format_samples.plain, read_tractogram, 0),
            (format_samples.volume, read_volume, 0),
            (format_samples.model, read_model, 0),
            # A labeled file cut exactly at the label block's start is a
            # valid unlabeled file, so the sweep starts past that point.
            (format_samples.labeled, read_tractogram, len(format_samples.plain) + 1),
        ]
        for data, reader, start in sweeps:
            for cut in range(start, len(data)):
                self._expect_error(format_samples.dir, data[:cut], reader)

    def test_json_truncations_error(self, format_samples):
        data = format_samples.table
        for cut in range(0, len(data) - 1):
            self._expect_error(format_samples.dir, data[:cut], read_threshold_table)
        for garbage in (b"not json at all", b"[1, 2]", b'{"x": -1.0}'):
            self._expect_error(format_samples.dir, garbage, read_threshold_table)

    def test_structural_bit_flips_error(self, format_samples):
        # Regions whose every bit is load-bearing: magic, endianness and
        # reserved bytes, and the count fields that size the payload.
        cases = [
            (format_samples.plain, read_tractogram,
             list(range(0, 8)) + list(range(148, 160))),
            (format_samples.volume, read_volume,
             list(range(0, 4)) + list(range(132, 149))),
            (format_samples.model, read_model, list(range(0, 8))),
        ]
        for data, reader, offsets in cases:
            for offset in offsets:
                for bit in range(8):
                    self._expect_error(
                        format_samples.dir, _flip_bit(data, offset, bit), reader
                    )

    def test_absurd_counts_fail_before_allocation(self, format_samples):
        stf = bytearray(format_samples.plain)
        struct.pack_into("<Q", stf, 148, 2**60)
        self._expect_error(format_samples.dir, bytes(stf), read_tractogram)

        vgf = bytearray(format_samples.volume)
        struct.pack_into("<III", vgf, 132, 0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFF)
        self._expect_error(format_samples.dir, bytes(vgf), read_volume)

        fae = bytearray(format_samples.model)
        struct.pack_into("<I", fae, 4, 0xFFFFFFF0)
        self._expect_error(format_samples.dir, bytes(fae), read_model)

        fae = bytearray(format_samples.model)
        descriptor_length = struct.unpack_from("<I", fae, 4)[0]
        struct.pack_into("<I", fae, 8 + descriptor_length, 0xFFFFFFF0)
        self._expect_error(format_samples.dir, bytes(fae), read_model)

    def test_random_flips_never_crash(self, format_samples):
        rng = np.random.default_rng(47)
        jobs = [
            (format_samples.plain, read_tractogram),
            (format_samples.labeled, read_tractogram),
            (format_samples.volume, read_volume),
            (format_samples.model, read_model),
        ]
        path = format_samples.dir / "flipped.bin"
        for data, reader in jobs:
            for _ in range(400):
                offset = int(rng.integers(0, len(data)))
                bit = int(rng.integers(0, 8))
                path.write_bytes(_flip_bit(data, offset, bit))
                try:
                    reader(path)
                except FiestaError:
                    pass
