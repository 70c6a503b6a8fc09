"""Synthetic desk-scale dataset with exact ground truth.

Three well-separated tube bundles (a straight tube, a planar arc, a helix)
are populated with smoothly perturbed centerline copies; implausible
streamlines are curved paths placed clear of every tube. From the bundles
the generator derives a dilated white-matter mask and a per-voxel peak
field (clustered streamline tangents), so the anatomical filter, the
segmentation stages, and the reliability metrics can all be exercised
against known answers. Repeat-scan timepoints apply small rigid motions to
the whole tractogram while the volumes stay in canonical space.

Everything is a pure function of the config seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import (
    Bundle,
    SpatialReference,
    Tractogram,
    VolumeGrid,
    visited_voxels,
)
from .errors import ConfigError

__all__ = [
    "BundleSpec",
    "PhantomConfig",
    "PhantomResult",
    "default_config",
    "make_phantom",
]

logger = logging.getLogger(__name__)

CENTERLINE_SAMPLES = 320
PEAK_CONE_DEG = 45.0
MAX_PEAKS = 3
TRUNCATION_MAX = 0.06
PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class BundleSpec:
    """One tube bundle: a parametric centerline plus population knobs.

    kind selects the centerline family and which geometry fields apply:
    "line" uses start/end, "arc" uses center/radius_mm/start_deg/sweep_deg
    (circle in the xz plane at the center's y), "helix" uses
    center (x, y)/radius_mm/z_range/turns. jitter_mm scales the smooth
    sinusoidal wiggle added to each streamline.
    """

    label: int
    name: str
    kind: str
    n_streamlines: int
    tube_radius_mm: float = 3.0
    jitter_mm: float = 1.5
    start: tuple = ()
    end: tuple = ()
    center: tuple = ()
    radius_mm: float = 0.0
    start_deg: float = 0.0
    sweep_deg: float = 0.0
    z_range: tuple = ()
    turns: float = 0.0

    def __post_init__(self):
        if self.label < 1:
            raise ValueError(f"bundle label must be >= 1, got {self.label}")
        if not self.name:
            raise ValueError("bundle name must be nonempty")
        if self.n_streamlines < 1:
            raise ValueError(f"streamline count must be positive, got {self.n_streamlines}")
        if self.tube_radius_mm <= 0:
            raise ValueError(f"tube radius must be positive, got {self.tube_radius_mm}")
        if self.jitter_mm < 0:
            raise ValueError(f"jitter must be non-negative, got {self.jitter_mm}")
        if self.kind == "line":
            if len(self.start) != 3 or len(self.end) != 3:
                raise ValueError("line bundles need 3-d start and end points")
        elif self.kind == "arc":
            if len(self.center) != 3 or self.radius_mm <= 0 or self.sweep_deg <= 0:
                raise ValueError("arc bundles need a center, radius, and sweep")
        elif self.kind == "helix":
            if len(self.center) != 2 or self.radius_mm <= 0 or len(self.z_range) != 2:
                raise ValueError("helix bundles need an (x, y) center, radius, and z range")
            if self.turns <= 0:
                raise ValueError(f"helix turns must be positive, got {self.turns}")
        else:
            raise ValueError(f"unknown centerline kind {self.kind!r}")


def default_bundles(n_streamlines: int = 200) -> tuple[BundleSpec, ...]:
    return (
        BundleSpec(
            label=1,
            name="straight",
            kind="line",
            n_streamlines=n_streamlines,
            start=(12.0, 20.0, 18.0),
            end=(82.0, 24.0, 22.0),
        ),
        BundleSpec(
            label=2,
            name="arc",
            kind="arc",
            n_streamlines=n_streamlines,
            center=(34.0, 74.0, 44.0),
            radius_mm=26.0,
            start_deg=-10.0,
            sweep_deg=200.0,
        ),
        BundleSpec(
            label=3,
            name="helix",
            kind="helix",
            n_streamlines=n_streamlines,
            center=(74.0, 45.0),
            radius_mm=8.0,
            z_range=(12.0, 78.0),
            turns=0.75,
        ),
    )


@dataclass(frozen=True)
class PhantomConfig:
    """Full recipe for one synthetic dataset."""

    dims: tuple[int, int, int] = (48, 48, 48)
    voxel_size_mm: float = 2.0
    bundles: tuple[BundleSpec, ...] = field(default_factory=default_bundles)
    n_implausible: int = 120
    n_timepoints: int = 1
    translation_sigma_mm: float = 0.5
    rotation_sigma_deg: float = 0.5
    separation_margin_mm: float = 8.0
    points_per_streamline: int = 96
    mask_dilation_voxels: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"grid dims must be three positive counts, got {self.dims}")
        if self.voxel_size_mm <= 0:
            raise ValueError(f"voxel size must be positive, got {self.voxel_size_mm}")
        if not self.bundles:
            raise ValueError("need at least one bundle spec")
        labels = [spec.label for spec in self.bundles]
        if len(set(labels)) != len(labels):
            raise ValueError(f"bundle labels must be unique, got {labels}")
        if self.n_implausible < 0:
            raise ValueError(f"implausible count must be >= 0, got {self.n_implausible}")
        if self.n_timepoints < 1:
            raise ValueError(f"timepoint count must be positive, got {self.n_timepoints}")
        if self.translation_sigma_mm < 0 or self.rotation_sigma_deg < 0:
            raise ValueError("rigid jitter sigmas must be non-negative")
        if self.separation_margin_mm <= 0:
            raise ValueError(
                f"separation margin must be positive, got {self.separation_margin_mm}"
            )
        if self.points_per_streamline < 2:
            raise ValueError(
                f"points per streamline must be >= 2, got {self.points_per_streamline}"
            )
        if self.mask_dilation_voxels < 0:
            raise ValueError(
                f"mask dilation must be >= 0 voxels, got {self.mask_dilation_voxels}"
            )
        for spec in self.bundles:
            if spec.tube_radius_mm > self.separation_margin_mm:
                raise ConfigError(
                    f"tube radius {spec.tube_radius_mm} of bundle {spec.label} exceeds "
                    f"the separation margin {self.separation_margin_mm}"
                )

    @property
    def reference(self) -> SpatialReference:
        affine = np.diag([self.voxel_size_mm] * 3 + [1.0])
        return SpatialReference(dims=tuple(self.dims), affine=affine)


def default_config(**overrides) -> PhantomConfig:
    return PhantomConfig(**overrides)


@dataclass
class PhantomResult:
    """Everything make_phantom produces, in canonical space plus timepoints."""

    config: PhantomConfig
    reference: SpatialReference
    subject: list[Bundle]
    atlas: list[Bundle]
    timepoints: list[Tractogram]
    implausible: list[np.ndarray]
    wm_mask: VolumeGrid
    peaks: VolumeGrid
    labels: np.ndarray
    names: dict[int, str]


def centerline(spec: BundleSpec, n: int) -> np.ndarray:
    """Sample the spec's parametric centerline at n points."""
    t = np.linspace(0.0, 1.0, n)
    if spec.kind == "line":
        start = np.asarray(spec.start, dtype=np.float64)
        end = np.asarray(spec.end, dtype=np.float64)
        return start[np.newaxis, :] + t[:, np.newaxis] * (end - start)[np.newaxis, :]
    if spec.kind == "arc":
        center = np.asarray(spec.center, dtype=np.float64)
        theta = np.radians(spec.start_deg + t * spec.sweep_deg)
        out = np.empty((n, 3), dtype=np.float64)
        out[:, 0] = center[0] + spec.radius_mm * np.cos(theta)
        out[:, 1] = center[1]
        out[:, 2] = center[2] + spec.radius_mm * np.sin(theta)
        return out
    theta = 2.0 * np.pi * spec.turns * t
    z0, z1 = spec.z_range
    out = np.empty((n, 3), dtype=np.float64)
    out[:, 0] = spec.center[0] + spec.radius_mm * np.cos(theta)
    out[:, 1] = spec.center[1] + spec.radius_mm * np.sin(theta)
    out[:, 2] = z0 + t * (z1 - z0)
    return out


def _transported_frame(path: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parallel-transported (normal, binormal) unit fields along a path."""
    deltas = np.diff(path, axis=0)
    tangents = deltas / np.linalg.norm(deltas, axis=1)[:, np.newaxis]
    tangents = np.vstack([tangents, tangents[-1]])
    pick = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(tangents[0], pick))) > 0.9:
        pick = np.array([1.0, 0.0, 0.0])
    normal = pick - np.dot(pick, tangents[0]) * tangents[0]
    normal /= np.linalg.norm(normal)
    normals = np.empty_like(tangents)
    normals[0] = normal
    for i in range(1, tangents.shape[0]):
        projected = normals[i - 1] - np.dot(normals[i - 1], tangents[i]) * tangents[i]
        norm = np.linalg.norm(projected)
        if norm < 1e-12:
            projected = np.cross(tangents[i], normals[i - 1])
            norm = np.linalg.norm(projected)
        normals[i] = projected / norm
    binormals = np.cross(tangents, normals)
    return normals, binormals


def _tube_streamlines(spec: BundleSpec, n_points: int, rng: np.random.Generator) -> list[np.ndarray]:
    dense = centerline(spec, CENTERLINE_SAMPLES)
    normals, binormals = _transported_frame(dense)
    dense_t = np.linspace(0.0, 1.0, CENTERLINE_SAMPLES)
    lines = []
    for _ in range(spec.n_streamlines):
        rho = spec.tube_radius_mm * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.0, spec.jitter_mm)
        freq = rng.uniform(0.5, 1.5)
        wiggle_phase = rng.uniform(0.0, 2.0 * np.pi)
        wiggle_angle = rng.uniform(0.0, 2.0 * np.pi)
        lo = rng.uniform(0.0, TRUNCATION_MAX)
        hi = rng.uniform(0.0, TRUNCATION_MAX)
        t = np.linspace(lo, 1.0 - hi, n_points)
        pts = np.empty((n_points, 3), dtype=np.float64)
        radial = np.empty((n_points, 2), dtype=np.float64)
        radial[:, 0] = rho * np.cos(phi) + amp * np.sin(
            2.0 * np.pi * freq * t + wiggle_phase
        ) * np.cos(wiggle_angle)
        radial[:, 1] = rho * np.sin(phi) + amp * np.sin(
            2.0 * np.pi * freq * t + wiggle_phase
        ) * np.sin(wiggle_angle)
        for axis in range(3):
            base = np.interp(t, dense_t, dense[:, axis])
            n_axis = np.interp(t, dense_t, normals[:, axis])
            b_axis = np.interp(t, dense_t, binormals[:, axis])
            pts[:, axis] = base + radial[:, 0] * n_axis + radial[:, 1] * b_axis
        lines.append(pts)
    return lines


def _min_separation(paths: list[np.ndarray]) -> float:
    best = np.inf
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            diff = paths[i][:, np.newaxis, :] - paths[j][np.newaxis, :, :]
            best = min(best, float(np.sqrt((diff**2).sum(axis=2).min())))
    return best


def _implausible_streamlines(
    count: int,
    n_points: int,
    reference: SpatialReference,
    centerlines: list[np.ndarray],
    clearance: float,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Quadratic curves rejection-placed at least `clearance` from every tube."""
    lo = reference.voxel_to_world(np.zeros(3)) + 4.0
    hi = reference.voxel_to_world(np.asarray(reference.dims, dtype=np.float64) - 1.0) - 4.0
    tube_points = np.concatenate(centerlines, axis=0) if centerlines else np.empty((0, 3))
    t = np.linspace(0.0, 1.0, n_points)[:, np.newaxis]
    curves = []
    for index in range(count):
        for attempt in range(PLACEMENT_TRIES):
            p0 = rng.uniform(lo, hi)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            p2 = p0 + direction * rng.uniform(40.0, 110.0)
            if np.any(p2 < lo) or np.any(p2 > hi):
                continue
            perp = rng.normal(size=3)
            perp -= np.dot(perp, direction) * direction
            perp /= np.linalg.norm(perp)
            p1 = 0.5 * (p0 + p2) + perp * rng.uniform(5.0, 25.0)
            if np.any(p1 < lo) or np.any(p1 > hi):
                continue
            pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2
            if tube_points.shape[0]:
                diff = pts[:, np.newaxis, :] - tube_points[np.newaxis, :, :]
                if float((diff**2).sum(axis=2).min()) < clearance**2:
                    continue
            curves.append(pts)
            break
        else:
            raise ConfigError(
                f"could not place implausible streamline {index} clear of the "
                f"tubes after {PLACEMENT_TRIES} tries"
            )
    return curves


def _fold(directions: np.ndarray) -> np.ndarray:
    """Flip each direction so its largest-magnitude component is positive."""
    leads = np.take_along_axis(
        directions, np.abs(directions).argmax(axis=1)[:, np.newaxis], axis=1
    )[:, 0]
    signs = np.where(leads < 0.0, -1.0, 1.0)
    return directions * signs[:, np.newaxis]


def _cluster_directions(dirs: np.ndarray) -> list[np.ndarray]:
    """Greedy cone clustering of folded unit directions, at most MAX_PEAKS."""
    threshold = np.cos(np.radians(PEAK_CONE_DEG))
    sums: list[np.ndarray] = []
    counts: list[int] = []
    for d in dirs:
        best = -1
        best_cos = threshold
        for idx, total in enumerate(sums):
            mean = total / np.linalg.norm(total)
            cos = abs(float(np.dot(d, mean)))
            if cos >= best_cos:
                best, best_cos = idx, cos
        if best < 0 and len(sums) < MAX_PEAKS:
            sums.append(d.copy())
            counts.append(1)
            continue
        if best < 0:
            best = int(
                np.argmax([abs(float(np.dot(d, s / np.linalg.norm(s)))) for s in sums])
            )
        mean = sums[best] / np.linalg.norm(sums[best])
        aligned = d if float(np.dot(d, mean)) >= 0.0 else -d
        sums[best] = sums[best] + aligned
        counts[best] += 1
    order = np.argsort(counts)[::-1]
    return [sums[i] / np.linalg.norm(sums[i]) for i in order]


def _peak_field(
    streamlines: list[np.ndarray],
    wm: np.ndarray,
    reference: SpatialReference,
) -> np.ndarray:
    """Per-voxel peak directions from resident streamline tangents.

    WM voxels no streamline segment touches (the dilation rim) inherit the
    peaks of their nearest populated voxel so the whole mask is covered.
    """
    tangent_lists: dict[tuple[int, int, int], list[np.ndarray]] = {}
    for pts in streamlines:
        deltas = np.diff(pts, axis=0)
        norms = np.linalg.norm(deltas, axis=1)
        keep = norms > 0.0
        dirs = _fold(deltas[keep] / norms[keep, np.newaxis])
        mids = 0.5 * (pts[:-1] + pts[1:])[keep]
        voxels = reference.nearest_voxel(mids)
        inside = reference.in_bounds(voxels)
        for voxel, direction in zip(voxels[inside], dirs[inside]):
            tangent_lists.setdefault(tuple(voxel), []).append(direction)

    field = np.zeros(reference.dims + (9,), dtype=np.float32)
    populated = np.zeros(reference.dims, dtype=bool)
    for voxel, dirs in tangent_lists.items():
        peaks = _cluster_directions(np.asarray(dirs))
        populated[voxel] = True
        for slot, peak in enumerate(peaks[:MAX_PEAKS]):
            field[voxel][3 * slot : 3 * slot + 3] = peak.astype(np.float32)

    needs_fill = wm & ~populated
    if needs_fill.any():
        _, nearest = ndimage.distance_transform_edt(~populated, return_indices=True)
        src = tuple(nearest[:, needs_fill])
        field[needs_fill] = field[src]
    return field


def _rodrigues(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def make_phantom(config: PhantomConfig = PhantomConfig()) -> PhantomResult:
    """Build the full synthetic dataset described by the config.

    Subject bundles, an independently drawn atlas copy of each bundle, and
    the implausible set are generated once in canonical space; each of the
    J timepoints is a rigidly moved copy of the whole canonical tractogram
    (rotation about the grid center, then translation). The mask and peak
    field stay canonical. Consuming randomness in a fixed stage order
    (bundles, atlas, implausibles, timepoints) keeps the canonical dataset
    identical when only the timepoint count changes.

    Raises:
        ConfigError: if the configured centerlines come closer than the
            separation margin plus both tube radii, or an implausible
            streamline cannot be placed.
    """
    reference = config.reference
    root = np.random.default_rng(config.seed)
    n_bundles = len(config.bundles)
    bundle_seeds = root.integers(0, 2**63, size=n_bundles)
    atlas_seeds = root.integers(0, 2**63, size=n_bundles)
    implausible_seed = int(root.integers(0, 2**63))
    timepoint_seeds = root.integers(0, 2**63, size=config.n_timepoints)

    centerlines = [centerline(spec, CENTERLINE_SAMPLES) for spec in config.bundles]
    for i, spec_a in enumerate(config.bundles):
        for j in range(i + 1, n_bundles):
            spec_b = config.bundles[j]
            required = (
                config.separation_margin_mm
                + spec_a.tube_radius_mm
                + spec_b.tube_radius_mm
            )
            measured = _min_separation([centerlines[i], centerlines[j]])
            if measured <= required:
                raise ConfigError(
                    f"bundles {spec_a.label} and {spec_b.label} are separated by "
                    f"{measured:.1f} mm but need more than {required:.1f} mm"
                )

    subject_bundles = []
    for spec, seed in zip(config.bundles, bundle_seeds):
        lines = _tube_streamlines(
            spec, config.points_per_streamline, np.random.default_rng(int(seed))
        )
        subject_bundles.append(
            Bundle(label=spec.label, name=spec.name, streamlines=lines, reference=reference)
        )
    atlas_bundles = []
    for spec, seed in zip(config.bundles, atlas_seeds):
        lines = _tube_streamlines(
            spec, config.points_per_streamline, np.random.default_rng(int(seed))
        )
        atlas_bundles.append(
            Bundle(label=spec.label, name=spec.name, streamlines=lines, reference=reference)
        )

    max_radius = max(spec.tube_radius_mm for spec in config.bundles)
    implausible = _implausible_streamlines(
        config.n_implausible,
        config.points_per_streamline,
        reference,
        centerlines,
        clearance=max_radius + config.separation_margin_mm,
        rng=np.random.default_rng(implausible_seed),
    )

    plausible = [s for bundle in subject_bundles for s in bundle.streamlines]
    labels = np.concatenate(
        [
            np.concatenate(
                [
                    np.full(len(bundle.streamlines), bundle.label, dtype=np.int64)
                    for bundle in subject_bundles
                ]
            ),
            np.zeros(len(implausible), dtype=np.int64),
        ]
    )

    # Mask and peaks come from every tube draw (subject and atlas alike) so
    # both sets are self-consistent against the same volumes.
    tube_lines = plausible + [s for bundle in atlas_bundles for s in bundle.streamlines]
    wm = np.zeros(reference.dims, dtype=bool)
    for pts in tube_lines:
        idx = visited_voxels(pts, reference)
        wm[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    if config.mask_dilation_voxels:
        wm = ndimage.binary_dilation(wm, iterations=config.mask_dilation_voxels)
    peaks = _peak_field(tube_lines, wm, reference)

    center_world = reference.voxel_to_world(
        (np.asarray(reference.dims, dtype=np.float64) - 1.0) / 2.0
    )
    canonical = plausible + implausible
    timepoints = []
    for seed in timepoint_seeds:
        rng = np.random.default_rng(int(seed))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.normal(scale=config.rotation_sigma_deg))
        translation = rng.normal(scale=config.translation_sigma_mm, size=3)
        rotation = _rodrigues(axis, angle)
        moved = [
            (pts - center_world) @ rotation.T + center_world + translation
            for pts in canonical
        ]
        timepoints.append(
            Tractogram(streamlines=moved, reference=reference, labels=labels.copy())
        )

    logger.info(
        "phantom: %d bundles, %d plausible + %d implausible streamlines, %d timepoints",
        n_bundles,
        len(plausible),
        len(implausible),
        config.n_timepoints,
    )
    return PhantomResult(
        config=config,
        reference=reference,
        subject=subject_bundles,
        atlas=atlas_bundles,
        timepoints=timepoints,
        implausible=implausible,
        wm_mask=VolumeGrid(reference=reference, data=wm.astype(np.float32)),
        peaks=VolumeGrid(reference=reference, data=peaks),
        labels=labels,
        names={spec.label: spec.name for spec in config.bundles},
    )
