"""Latent nearest-neighbor bundle segmentation against an encoded atlas.

The atlas index holds the latent encodings of every atlas streamline and of
its flipped copy, each tagged with its bundle label. A query streamline is
resampled, encoded in both orientations, and assigned the label of the
single nearest indexed point (exact search, k=1 by default); it joins that
bundle when the latent distance is strictly below the bundle's threshold.

Nearest-neighbor search is exact brute force over the latent points,
chunked to bound memory. At d=32 a space-partitioning tree degenerates to
scanning most leaves anyway, and exactness keeps threshold semantics sharp,
so the linear scan is both the simplest and the fastest correct choice here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autoenc import AutoencoderModel, encode
from .core import (
    Bundle,
    SpatialReference,
    Tractogram,
    canonical_orientation,
    resample_streamline,
)
from .errors import ConfigError, DegenerateInputError

logger = logging.getLogger(__name__)

__all__ = [
    "AtlasIndex",
    "Assignment",
    "SegmentationResult",
    "build_atlas_index",
    "assign",
    "nearest_assignments",
    "segment_tractogram",
    "canonical_orientation",
]

QUERY_CHUNK = 128
ATLAS_CHUNK = 1024


@dataclass(frozen=True)
class AtlasIndex:
    """Latent points of all atlas streamlines plus their flipped copies.

    Point i < n_originals is atlas streamline i in given orientation; point
    n_originals + i is the same streamline flipped. Labels repeat
    accordingly, so point count is exactly twice the streamline count.
    """

    latents: np.ndarray          # (2m, d) float64
    labels: np.ndarray           # (2m,) int64
    names: dict                  # label -> bundle name
    n_originals: int
    reference: SpatialReference

    def __post_init__(self):
        if self.latents.shape[0] != 2 * self.n_originals:
            raise ValueError("index must hold originals plus flipped copies")
        if self.labels.shape != (self.latents.shape[0],):
            raise ValueError("one label per indexed point required")


@dataclass(frozen=True)
class Assignment:
    """Nearest-atlas answer for one query streamline."""

    index: int
    label: int
    distance: float

    def __post_init__(self):
        if not np.isfinite(self.distance) or self.distance < 0:
            raise ValueError(f"distance must be finite and >= 0, got {self.distance}")


@dataclass(frozen=True)
class SegmentationResult:
    bundles: dict                 # label -> Bundle
    rejected: np.ndarray          # indices into the input tractogram
    assignments: list             # per input streamline, in order


def build_atlas_index(model: AutoencoderModel, atlas_bundles) -> AtlasIndex:
    """Encode atlas bundles and their flipped copies into a search index.

    Args:
        model: trained autoencoder.
        atlas_bundles: sequence of Bundle objects with distinct labels.

    Streamlines are orientation-canonicalized and resampled to the model's
    input point count here, so any sampling density and either tracking
    direction are accepted; queries go through the identical preparation,
    which makes "query an atlas member, get distance zero" exact.
    """
    bundles = list(atlas_bundles)
    if not bundles:
        raise DegenerateInputError("empty atlas")
    names = {}
    resampled = []
    labels = []
    for bundle in bundles:
        if bundle.label in names:
            raise ValueError(f"duplicate atlas label {bundle.label}")
        names[bundle.label] = bundle.name
        for line in bundle.streamlines:
            oriented = canonical_orientation(np.asarray(line, dtype=np.float64))
            resampled.append(resample_streamline(oriented, model.config.input_points))
            labels.append(bundle.label)
    if not resampled:
        raise DegenerateInputError("empty atlas")
    originals = np.asarray(resampled)
    flipped = originals[:, ::-1, :]
    latents = np.concatenate(
        [encode(model, originals), encode(model, flipped)], axis=0
    ).astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    index = AtlasIndex(
        latents=latents,
        labels=np.concatenate([labels, labels]),
        names=names,
        n_originals=originals.shape[0],
        reference=bundles[0].reference,
    )
    logger.info(
        "atlas index: %d bundles, %d streamlines, %d latent points",
        len(names), originals.shape[0], latents.shape[0],
    )
    return index


def _nearest_points(index: AtlasIndex, queries: np.ndarray):
    """Exact nearest indexed point per query row.

    Returns (squared distances, labels, point indices); ties resolve to the
    lowest label, then the lowest point index.
    """
    best_d2 = np.full(queries.shape[0], np.inf)
    best_label = np.full(queries.shape[0], np.iinfo(np.int64).max, dtype=np.int64)
    best_point = np.full(queries.shape[0], -1, dtype=np.int64)
    for q_start in range(0, queries.shape[0], QUERY_CHUNK):
        q_stop = min(q_start + QUERY_CHUNK, queries.shape[0])
        block = queries[q_start:q_stop]
        for a_start in range(0, index.latents.shape[0], ATLAS_CHUNK):
            a_stop = min(a_start + ATLAS_CHUNK, index.latents.shape[0])
            atlas = index.latents[a_start:a_stop]
            d2 = ((block[:, np.newaxis, :] - atlas[np.newaxis, :, :]) ** 2).sum(axis=2)
            labels = index.labels[a_start:a_stop]

            order = np.lexsort(
                (np.arange(a_start, a_stop)[np.newaxis, :].repeat(d2.shape[0], 0),
                 labels[np.newaxis, :].repeat(d2.shape[0], 0),
                 d2),
                axis=1,
            )
            first = order[:, 0]
            rows = np.arange(d2.shape[0])
            cand_d2 = d2[rows, first]
            cand_label = labels[first]
            cand_point = first + a_start

            current = (best_d2[q_start:q_stop], best_label[q_start:q_stop],
                       best_point[q_start:q_stop])
            better = (cand_d2 < current[0]) | (
                (cand_d2 == current[0])
                & ((cand_label < current[1])
                   | ((cand_label == current[1]) & (cand_point < current[2])))
            )
            best_d2[q_start:q_stop] = np.where(better, cand_d2, current[0])
            best_label[q_start:q_stop] = np.where(better, cand_label, current[1])
            best_point[q_start:q_stop] = np.where(better, cand_point, current[2])
    return best_d2, best_label, best_point


def assign(index: AtlasIndex, latents, k: int = 1) -> list[Assignment]:
    """Assign each query latent the majority label of its k nearest indexed
    points (k=1: the nearest point's label).

    Ties, both in distance and in vote count, resolve to the lowest label
    and then the lowest atlas point index, so results are order-free.
    """
    queries = np.asarray(latents, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[np.newaxis]
    if queries.shape[1] != index.latents.shape[1]:
        raise ValueError(
            f"query dimension {queries.shape[1]} != index dimension "
            f"{index.latents.shape[1]}"
        )
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k == 1:
        d2, labels, _ = _nearest_points(index, queries)
        return [
            Assignment(index=i, label=int(lbl), distance=float(np.sqrt(dd)))
            for i, (dd, lbl) in enumerate(zip(d2, labels))
        ]
    return _assign_topk(index, queries, k)


def _assign_topk(index: AtlasIndex, queries: np.ndarray, k: int) -> list[Assignment]:
    k = min(k, index.latents.shape[0])
    out = []
    for i, q in enumerate(queries):
        d2 = ((q[np.newaxis, :] - index.latents) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(d2.shape[0]), index.labels, d2))[:k]
        votes = {}
        for point in order:
            votes.setdefault(int(index.labels[point]), []).append(point)
        label = max(votes, key=lambda lbl: (len(votes[lbl]), -lbl))
        nearest = votes[label][0]
        out.append(
            Assignment(index=i, label=label, distance=float(np.sqrt(d2[nearest])))
        )
    return out


def nearest_assignments(
    model: AutoencoderModel, index: AtlasIndex, streamlines
) -> list[Assignment]:
    """Per-streamline nearest-atlas assignment, orientation handled.

    Each streamline is orientation-canonicalized, resampled, and encoded
    both as-is and flipped; the better of the two answers (smaller distance,
    ties by label then point index) is returned.
    """
    lines = [canonical_orientation(np.asarray(s, dtype=np.float64)) for s in streamlines]
    if not lines:
        return []
    resampled = np.asarray(
        [resample_streamline(s, model.config.input_points) for s in lines]
    )
    z_fwd = encode(model, resampled).astype(np.float64)
    z_bwd = encode(model, resampled[:, ::-1, :]).astype(np.float64)
    d2_f, lbl_f, pt_f = _nearest_points(index, z_fwd)
    d2_b, lbl_b, pt_b = _nearest_points(index, z_bwd)
    backward_wins = (d2_b < d2_f) | (
        (d2_b == d2_f) & ((lbl_b < lbl_f) | ((lbl_b == lbl_f) & (pt_b < pt_f)))
    )
    d2 = np.where(backward_wins, d2_b, d2_f)
    labels = np.where(backward_wins, lbl_b, lbl_f)
    return [
        Assignment(index=i, label=int(lbl), distance=float(np.sqrt(dd)))
        for i, (dd, lbl) in enumerate(zip(d2, labels))
    ]


def segment_tractogram(
    model: AutoencoderModel,
    index: AtlasIndex,
    thresholds: dict,
    tractogram: Tractogram,
) -> SegmentationResult:
    """Split a tractogram into atlas bundles by latent proximity.

    A streamline joins its assigned bundle iff its latent distance is
    strictly below that bundle's threshold; otherwise it is rejected. Kept
    streamlines retain their original geometry.

    Returns:
        SegmentationResult; bundles maps label -> Bundle (only labels that
        kept at least one streamline appear), rejected holds the indices of
        all other streamlines, assignments has one entry per input.
    """
    for label in sorted(index.names):
        if label not in thresholds:
            raise ConfigError(f"missing threshold for label {label}")
    assignments = nearest_assignments(model, index, tractogram.streamlines)
    kept: dict[int, list[int]] = {}
    rejected = []
    for a in assignments:
        if a.distance < thresholds[a.label]:
            kept.setdefault(a.label, []).append(a.index)
        else:
            rejected.append(a.index)
    bundles = {
        label: Bundle(
            label=label,
            name=index.names[label],
            streamlines=[tractogram.streamlines[i] for i in members],
            reference=tractogram.reference,
        )
        for label, members in sorted(kept.items())
    }
    logger.info(
        "segmented %d streamlines: %d kept in %d bundles, %d rejected",
        len(assignments),
        sum(len(b.streamlines) for b in bundles.values()),
        len(bundles),
        len(rejected),
    )
    return SegmentationResult(
        bundles=bundles,
        rejected=np.asarray(rejected, dtype=np.int64),
        assignments=assignments,
    )
