"""Streamline and volume data model plus the geometric primitives used
throughout the toolkit.

Conventions fixed here and relied on everywhere else:

- Streamlines are float64 arrays of shape (n, 3), n >= 2, world millimeters.
- Voxel centers sit at integer indices; nearest-voxel rounding is
  floor(x + 0.5) applied to continuous voxel coordinates.
- Volumes are dense float32 arrays of shape dims + (channels,).

All functions are pure; nothing here touches the filesystem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError

__all__ = [
    "SpatialReference",
    "Tractogram",
    "Bundle",
    "VolumeGrid",
    "as_streamline",
    "resample_streamline",
    "flip_streamline",
    "canonical_orientation",
    "streamline_length",
    "winding_angle",
    "local_orientations",
    "visited_voxels",
]


def as_streamline(points) -> np.ndarray:
    """Validate and return a streamline as a float64 (n, 3) array.

    Raises ValueError on wrong shape, fewer than 2 points, or non-finite
    coordinates.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"streamline must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("streamline needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("streamline coordinates must be finite")
    return pts


@dataclass(frozen=True)
class SpatialReference:
    """A voxel grid: dims (nx, ny, nz) plus a 4x4 voxel-to-world affine.

    The affine maps integer voxel indices to world mm at voxel centers.
    """

    dims: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise ValueError("affine must be a finite 4x4 matrix")
        if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(affine[:3, :3])) <= 1e-12:
            raise ValueError("affine upper-left 3x3 block is not invertible")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "_inverse", np.linalg.inv(affine))

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def voxel_to_world(self, idx) -> np.ndarray:
        """Map (continuous) voxel coordinates, shape (..., 3), to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, points) -> np.ndarray:
        """Map world-mm points, shape (..., 3), to continuous voxel coords."""
        points = np.asarray(points, dtype=np.float64)
        inv = self._inverse
        return points @ inv[:3, :3].T + inv[:3, 3]

    def nearest_voxel(self, points) -> np.ndarray:
        """Nearest integer voxel indices for world points: floor(x + 0.5)."""
        return np.floor(self.world_to_voxel(points) + 0.5).astype(np.int64)

    def in_bounds(self, idx) -> np.ndarray:
        """Boolean mask of integer indices that fall inside the grid."""
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def same_grid(self, other: "SpatialReference") -> bool:
        return self.dims == other.dims and np.array_equal(self.affine, other.affine)


@dataclass
class Tractogram:
    """A set of streamlines in one spatial reference, optionally labeled."""

    streamlines: list[np.ndarray]
    reference: SpatialReference
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.streamlines = [as_streamline(s) for s in self.streamlines]
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(self.streamlines),):
                raise ValueError(
                    f"labels length {labels.shape} does not match "
                    f"{len(self.streamlines)} streamlines"
                )
            self.labels = labels

    def __len__(self) -> int:
        return len(self.streamlines)


@dataclass
class Bundle:
    """A named, labeled group of streamlines."""

    label: int
    name: str
    streamlines: list[np.ndarray]
    reference: SpatialReference

    def __post_init__(self):
        if self.label < 1:
            raise ValueError(f"bundle label must be >= 1, got {self.label}")
        if not self.name:
            raise ValueError("bundle name must be nonempty")
        self.streamlines = [as_streamline(s) for s in self.streamlines]

    def __len__(self) -> int:
        return len(self.streamlines)


@dataclass
class VolumeGrid:
    """A dense scalar or vector field over a voxel grid.

    data has shape dims + (channels,), float32. Masks use channel 1 with
    values in {0, 1}; peak fields use 9 channels (three 3-vectors, unused
    peaks zero).
    """

    reference: SpatialReference
    data: np.ndarray
    channels: int = field(default=0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        if data.ndim != 4:
            raise ValueError(f"volume data must be (nx, ny, nz[, c]), got {data.shape}")
        if data.shape[:3] != self.reference.dims:
            raise ValueError(
                f"volume shape {data.shape[:3]} does not match grid dims "
                f"{self.reference.dims}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        self.data = data
        self.channels = data.shape[3]


def resample_streamline(points, n: int) -> np.ndarray:
    """Resample a streamline to n points equally spaced by arc length.

    Linear interpolation along the polyline; both endpoints are preserved
    exactly.

    Args:
        points: (m, 3) streamline, m >= 2.
        n: target point count, >= 2.

    Returns:
        (n, 3) float64 array.

    Raises:
        DegenerateInputError: if the polyline has total length 0.
    """
    pts = as_streamline(points)
    if n < 2:
        raise ValueError(f"resample target must be >= 2 points, got {n}")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0.0:
        raise DegenerateInputError("zero-length streamline")
    target = np.linspace(0.0, total, n)
    out = np.empty((n, 3), dtype=np.float64)
    for axis in range(3):
        out[:, axis] = np.interp(target, arc, pts[:, axis])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def flip_streamline(points) -> np.ndarray:
    """Reverse point order. An involution: flip(flip(s)) == s."""
    return as_streamline(points)[::-1].copy()


def canonical_orientation(points: np.ndarray) -> np.ndarray:
    """Flip a streamline when its reversed coordinate sequence is
    lexicographically smaller; s and flip(s) map to identical arrays, which
    makes downstream decisions exactly flip-invariant."""
    forward = points.reshape(-1)
    backward = points[::-1].reshape(-1)
    differing = np.flatnonzero(forward != backward)
    if differing.size and backward[differing[0]] < forward[differing[0]]:
        return points[::-1]
    return points


def streamline_length(points) -> float:
    """Total polyline length in mm (sum of segment Euclidean lengths)."""
    pts = as_streamline(points)
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def winding_angle(points) -> float:
    """Cumulative winding in degrees.

    Sum over interior vertices of the unsigned angle between consecutive
    segment directions. Zero-length segments carry no direction and are
    skipped. Fewer than 3 points (or fewer than 2 usable segments) -> 0.0.
    """
    pts = as_streamline(points)
    if pts.shape[0] < 3:
        return 0.0
    deltas = np.diff(pts, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    usable = norms > 0.0
    dirs = deltas[usable] / norms[usable, np.newaxis]
    if dirs.shape[0] < 2:
        return 0.0
    cosines = np.clip(np.sum(dirs[:-1] * dirs[1:], axis=1), -1.0, 1.0)
    return float(np.degrees(np.sum(np.arccos(cosines))))


def local_orientations(points) -> np.ndarray:
    """Unit direction per segment, shape (n-1, 3).

    Raises:
        DegenerateInputError: if any segment has zero length.
    """
    pts = as_streamline(points)
    deltas = np.diff(pts, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    if np.any(norms <= 0.0):
        raise DegenerateInputError("zero-length segment has no orientation")
    return deltas / norms[:, np.newaxis]


def visited_voxels(points, ref: SpatialReference) -> np.ndarray:
    """Distinct in-grid voxels visited by a streamline's vertices.

    Each vertex maps to its nearest voxel; out-of-grid vertices are ignored.
    Callers are responsible for supplying vertices sampled finely enough for
    their grid (all pipeline paths use sub-voxel vertex spacing).

    Returns:
        (k, 3) int64 array of unique voxel indices (lexicographically sorted).
    """
    idx = ref.nearest_voxel(as_streamline(points))
    idx = idx[ref.in_bounds(idx)]
    if idx.shape[0] == 0:
        return np.empty((0, 3), dtype=np.int64)
    return np.unique(idx, axis=0)
