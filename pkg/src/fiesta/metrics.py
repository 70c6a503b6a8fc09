"""Reliability measures for comparing bundles across repeated scans.

Five pairwise similarity measures (Dice, density-weighted Dice, voxel and
streamline bundle adjacency, density correlation) plus the ICC(3,k)
agreement coefficient, and a harness that evaluates all of them over every
timepoint pair of a test-retest study.

Voxel-level measures work on density maps: per-voxel counts of how many
streamlines visit each voxel, where one streamline increments a voxel at
most once. The streamline-level adjacency compares cluster centroids so
bundles of different sizes stay comparable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import f as f_distribution

from .core import (
    Bundle,
    SpatialReference,
    VolumeGrid,
    streamline_length,
    visited_voxels,
)
from .errors import DegenerateInputError
from .qbx import quickbundlesx

__all__ = [
    "DensityMap",
    "IccInput",
    "density_map",
    "dice",
    "weighted_dice",
    "bundle_adjacency_voxel",
    "bundle_adjacency_streamline",
    "density_correlation",
    "icc3k",
    "test_retest_report",
]

logger = logging.getLogger(__name__)

QB_THRESHOLD_MM = 12.0
QB_CENTROID_POINTS = 12


@dataclass(frozen=True)
class DensityMap:
    """Per-voxel streamline visit counts on one grid.

    Wraps a single-channel VolumeGrid whose values are non-negative
    integers: the number of streamlines whose vertices touch that voxel,
    counting each streamline once.
    """

    grid: VolumeGrid

    def __post_init__(self):
        if self.grid.channels != 1:
            raise ValueError(
                f"density map must have one channel, got {self.grid.channels}"
            )
        data = self.grid.data[..., 0]
        if np.any(data < 0) or np.any(data != np.round(data)):
            raise ValueError("density counts must be non-negative integers")

    @property
    def counts(self) -> np.ndarray:
        return self.grid.data[..., 0]

    @property
    def reference(self) -> SpatialReference:
        return self.grid.reference


def density_map(bundle: Bundle, reference: SpatialReference | None = None) -> DensityMap:
    """Count, per voxel, how many of the bundle's streamlines visit it.

    Each streamline contributes at most 1 to any voxel regardless of how
    many of its vertices land there; vertices outside the grid are ignored.

    Raises:
        DegenerateInputError: if the bundle has no streamlines.
    """
    ref = bundle.reference if reference is None else reference
    if len(bundle.streamlines) == 0:
        raise DegenerateInputError("empty bundle has no density map")
    counts = np.zeros(ref.dims, dtype=np.float32)
    for line in bundle.streamlines:
        idx = visited_voxels(line, ref)
        counts[idx[:, 0], idx[:, 1], idx[:, 2]] += 1.0
    return DensityMap(grid=VolumeGrid(reference=ref, data=counts))


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, DensityMap):
        return mask.counts > 0.0
    if isinstance(mask, VolumeGrid):
        if mask.channels != 1:
            raise ValueError(f"mask must have one channel, got {mask.channels}")
        return mask.data[..., 0] > 0.5
    arr = np.asarray(mask)
    if arr.ndim != 3:
        raise ValueError(f"mask must be a 3-d array, got shape {arr.shape}")
    return arr > 0.5 if arr.dtype != bool else arr.copy()


def dice(a, b) -> float:
    """Voxel overlap 2|A&B| / (|A|+|B|) between two binary masks.

    Accepts boolean arrays, single-channel VolumeGrids, or DensityMaps
    (nonzero support). Symmetric; 1.0 for identical nonempty masks, 0.0
    for disjoint ones.

    Raises:
        DegenerateInputError: if both masks are empty (undefined Dice).
    """
    ma, mb = _mask_array(a), _mask_array(b)
    if ma.shape != mb.shape:
        raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    size_a = int(np.count_nonzero(ma))
    size_b = int(np.count_nonzero(mb))
    if size_a == 0 and size_b == 0:
        raise DegenerateInputError("undefined Dice for two empty masks")
    overlap = int(np.count_nonzero(ma & mb))
    return 2.0 * overlap / (size_a + size_b)


def weighted_dice(a: DensityMap, b: DensityMap) -> float:
    """Dice overlap weighted by streamline visit counts.

    The share of total visits (both maps pooled) that falls on the common
    support: sum over overlap voxels of (counts_a + counts_b), divided by
    the two maps' total counts. Reduces to plain Dice when all nonzero
    counts are equal; 1.0 for identical maps, 0.0 for disjoint supports.

    Raises:
        DegenerateInputError: if either map has no visits.
    """
    ca = np.asarray(a.counts, dtype=np.float64)
    cb = np.asarray(b.counts, dtype=np.float64)
    if ca.shape != cb.shape:
        raise ValueError(f"map shapes differ: {ca.shape} vs {cb.shape}")
    total_a = ca.sum()
    total_b = cb.sum()
    if total_a == 0.0 or total_b == 0.0:
        raise DegenerateInputError("empty density map has no weighted Dice")
    overlap = (ca > 0.0) & (cb > 0.0)
    return float((ca[overlap].sum() + cb[overlap].sum()) / (total_a + total_b))


def _direction_mean(src_idx: np.ndarray, dst_idx: np.ndarray, ref: SpatialReference) -> float:
    if src_idx.shape[0] == 0:
        return 0.0
    src = ref.voxel_to_world(src_idx)
    dst = ref.voxel_to_world(dst_idx)
    distances, _ = cKDTree(dst).query(src, k=1)
    return float(np.mean(distances))


def bundle_adjacency_voxel(a, b, reference: SpatialReference) -> float:
    """Symmetric mean world distance between two masks' disagreement sets.

    Voxels of A missing from B are measured to their nearest voxel center
    of B (and vice versa); the two direction means are averaged. Voxels in
    the intersection contribute nothing, so identical masks score 0.

    Raises:
        DegenerateInputError: if either mask is empty.
    """
    ma, mb = _mask_array(a), _mask_array(b)
    if ma.shape != mb.shape:
        raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    idx_a = np.argwhere(ma)
    idx_b = np.argwhere(mb)
    if idx_a.shape[0] == 0 or idx_b.shape[0] == 0:
        raise DegenerateInputError("empty mask has no adjacency")
    a_only = np.argwhere(ma & ~mb)
    b_only = np.argwhere(mb & ~ma)
    forward = _direction_mean(a_only, idx_b, reference)
    backward = _direction_mean(b_only, idx_a, reference)
    return (forward + backward) / 2.0


def _qb_centroids(streamlines, threshold: float, k: int) -> list[np.ndarray]:
    tree = quickbundlesx(streamlines, thresholds=[threshold], k=k)
    return [cluster.centroid for cluster in tree.levels[0]]


def _centroid_pointwise(a: np.ndarray, b: np.ndarray) -> float:
    direct = float(np.mean(np.linalg.norm(a - b, axis=1)))
    flipped = float(np.mean(np.linalg.norm(a - b[::-1], axis=1)))
    return min(direct, flipped)


def _centroid_adjacency(cents_a: list[np.ndarray], cents_b: list[np.ndarray]) -> float:
    def direction(src, dst):
        return float(
            np.mean([min(_centroid_pointwise(c, d) for d in dst) for c in src])
        )

    return (direction(cents_a, cents_b) + direction(cents_b, cents_a)) / 2.0


def bundle_adjacency_streamline(
    a: Bundle,
    b: Bundle,
    threshold: float = QB_THRESHOLD_MM,
    k: int = QB_CENTROID_POINTS,
) -> float:
    """Symmetric mean minimum distance between two bundles' centroids.

    Each bundle is clustered at a single threshold and reduced to its
    k-point cluster centroids; each centroid of one bundle is matched to
    its closest (direct or flipped mean pointwise distance) centroid of
    the other, and the two direction means are averaged. Identical bundles
    score 0; rigidly shifted copies score the shift magnitude.

    Raises:
        DegenerateInputError: if either bundle is empty.
    """
    if len(a.streamlines) == 0 or len(b.streamlines) == 0:
        raise DegenerateInputError("empty bundle has no adjacency")
    cents_a = _qb_centroids(a.streamlines, threshold, k)
    cents_b = _qb_centroids(b.streamlines, threshold, k)
    return _centroid_adjacency(cents_a, cents_b)


def density_correlation(a: DensityMap, b: DensityMap) -> float:
    """Pearson correlation of visit counts over the union of supports.

    The union of nonzero voxels of both maps defines the sample; zeros of
    one map under the other's support stay in, so coverage gaps lower the
    score.

    Raises:
        DegenerateInputError: if the union holds fewer than 2 voxels or
            either map's counts have zero variance over it.
    """
    ca = np.asarray(a.counts, dtype=np.float64)
    cb = np.asarray(b.counts, dtype=np.float64)
    if ca.shape != cb.shape:
        raise ValueError(f"map shapes differ: {ca.shape} vs {cb.shape}")
    union = (ca > 0.0) | (cb > 0.0)
    if int(np.count_nonzero(union)) < 2:
        raise DegenerateInputError("density correlation needs at least 2 union voxels")
    x = ca[union]
    y = cb[union]
    dx = x - x.mean()
    dy = y - y.mean()
    var_x = float(np.dot(dx, dx))
    var_y = float(np.dot(dy, dy))
    if var_x == 0.0 or var_y == 0.0:
        raise DegenerateInputError("zero variance over the union support")
    r = float(np.dot(dx, dy)) / np.sqrt(var_x * var_y)
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class IccInput:
    """A complete subjects-by-raters measurement table.

    Rows are subjects, columns are raters (timepoints); every cell must be
    a finite measurement.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"measurements must form a 2-d table, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 2:
            raise ValueError(
                f"need at least 2 subjects and 2 raters, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("measurement table has missing or non-finite cells")
        object.__setattr__(self, "values", arr)

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_raters(self) -> int:
        return self.values.shape[1]


def icc3k(table: IccInput) -> tuple[float, float, float]:
    """Two-way mixed-effects consistency ICC for averaged ratings.

    Decomposes the table into subject, rater, and residual mean squares,
    returning (MS_subjects - MS_error) / MS_subjects with its 95%
    confidence interval from the F distribution. Consistency means a
    constant offset per rater does not lower the score. Values can be
    negative when residual noise swamps subject differences; they are
    returned as computed.

    Raises:
        DegenerateInputError: if subjects do not differ (no between-subject
            variance, so agreement is undefined).
    """
    x = table.values
    n, k = x.shape
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_subjects = k * float(((row_means - grand) ** 2).sum())
    residual = x - row_means[:, np.newaxis] - col_means[np.newaxis, :] + grand
    ss_error = float((residual**2).sum())
    ms_subjects = ss_subjects / (n - 1)
    ms_error = ss_error / ((n - 1) * (k - 1))
    if ms_subjects <= 0.0:
        raise DegenerateInputError("degenerate ICC: subjects do not differ")
    if ms_error == 0.0:
        return 1.0, 1.0, 1.0
    icc = (ms_subjects - ms_error) / ms_subjects
    f_observed = ms_subjects / ms_error
    df1 = n - 1
    df2 = (n - 1) * (k - 1)
    f_lower = f_observed / f_distribution.ppf(0.975, df1, df2)
    f_upper = f_observed * f_distribution.ppf(0.975, df2, df1)
    return float(icc), float(1.0 - 1.0 / f_lower), float(1.0 - 1.0 / f_upper)


def _mean_std(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def _icc_entry(columns: dict, subjects, timepoints) -> dict:
    if len(subjects) < 2:
        return {"skipped": "fewer than two subjects"}
    rows = []
    for subject in subjects:
        row = [columns.get((subject, t)) for t in timepoints]
        if any(v is None for v in row):
            return {"skipped": "missing bundles"}
        rows.append(row)
    try:
        icc, low, high = icc3k(IccInput(values=np.asarray(rows)))
    except DegenerateInputError as exc:
        return {"skipped": str(exc)}
    return {"icc": icc, "ci": [low, high]}


def test_retest_report(bundles: dict, reference: SpatialReference) -> dict:
    """Evaluate every timepoint pair of a test-retest study.

    Args:
        bundles: map from (subject, timepoint, label) to Bundle. All
            subjects are expected at every timepoint; gaps are tolerated,
            counted, and excluded from the affected pairs and ICC tables.
        reference: grid used for all voxel-level measures.

    Returns:
        JSON-ready dict with per-label and global mean/std for the five
        pairwise measures over all subjects and timepoint pairs, plus
        per-label ICC(3,k) of bundle volume and mean streamline length
        over the subjects-by-timepoints tables. Pairs whose voxel measures
        are degenerate (for instance constant density) skip that measure
        and are tallied under n_degenerate_values.
    """
    if not bundles:
        raise DegenerateInputError("empty bundle table")
    keys = list(bundles.keys())
    subjects = sorted({s for s, _, _ in keys})
    timepoints = sorted({t for _, t, _ in keys})
    labels = sorted({l for _, _, l in keys})
    if len(timepoints) < 2:
        raise DegenerateInputError("need at least two timepoints to compare")
    pairs = [
        (t1, t2) for i, t1 in enumerate(timepoints) for t2 in timepoints[i + 1 :]
    ]

    per_key: dict[tuple, dict] = {}
    n_missing = 0
    for subject in subjects:
        for t in timepoints:
            for label in labels:
                bundle = bundles.get((subject, t, label))
                if bundle is None or len(bundle.streamlines) == 0:
                    n_missing += 1
                    continue
                dm = density_map(bundle, reference)
                per_key[(subject, t, label)] = {
                    "density": dm,
                    "mask": dm.counts > 0.0,
                    "centroids": _qb_centroids(
                        bundle.streamlines, QB_THRESHOLD_MM, QB_CENTROID_POINTS
                    ),
                    "volume": float(
                        np.count_nonzero(dm.counts) * reference.voxel_volume
                    ),
                    "mean_length": float(
                        np.mean([streamline_length(s) for s in bundle.streamlines])
                    ),
                }
    if n_missing:
        logger.warning("%d expected bundles are absent; their pairs are skipped", n_missing)

    metric_names = (
        "dice",
        "weighted_dice",
        "bundle_adjacency_voxel",
        "bundle_adjacency_streamline",
        "density_correlation",
    )
    per_label_values = {
        label: {name: [] for name in metric_names} for label in labels
    }
    n_skipped_pairs = 0
    n_degenerate = 0
    for subject in subjects:
        for label in labels:
            for t1, t2 in pairs:
                first = per_key.get((subject, t1, label))
                second = per_key.get((subject, t2, label))
                if first is None or second is None:
                    n_skipped_pairs += 1
                    continue
                values = per_label_values[label]
                values["bundle_adjacency_streamline"].append(
                    _centroid_adjacency(first["centroids"], second["centroids"])
                )
                values["bundle_adjacency_voxel"].append(
                    bundle_adjacency_voxel(first["mask"], second["mask"], reference)
                )
                for name, fn, args in (
                    ("dice", dice, (first["mask"], second["mask"])),
                    ("weighted_dice", weighted_dice, (first["density"], second["density"])),
                    (
                        "density_correlation",
                        density_correlation,
                        (first["density"], second["density"]),
                    ),
                ):
                    try:
                        values[name].append(fn(*args))
                    except DegenerateInputError:
                        n_degenerate += 1

    report = {
        "subjects": [str(s) for s in subjects],
        "timepoints": [str(t) for t in timepoints],
        "n_pairs_per_subject": len(pairs),
        "n_missing": n_missing,
        "n_skipped_pairs": n_skipped_pairs,
        "n_degenerate_values": n_degenerate,
        "labels": {},
        "global": {},
    }
    for label in labels:
        volumes = {
            (s, t): per_key[(s, t, label)]["volume"]
            for s in subjects
            for t in timepoints
            if (s, t, label) in per_key
        }
        lengths = {
            (s, t): per_key[(s, t, label)]["mean_length"]
            for s in subjects
            for t in timepoints
            if (s, t, label) in per_key
        }
        report["labels"][str(label)] = {
            "metrics": {
                name: _mean_std(per_label_values[label][name])
                for name in metric_names
            },
            "icc": {
                "volume_mm3": _icc_entry(volumes, subjects, timepoints),
                "mean_length_mm": _icc_entry(lengths, subjects, timepoints),
            },
        }
    for name in metric_names:
        pooled = [v for label in labels for v in per_label_values[label][name]]
        report["global"][name] = _mean_std(pooled)
    return report
