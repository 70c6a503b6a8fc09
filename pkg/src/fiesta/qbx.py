"""MDF streamline distance, multi-threshold hierarchical clustering, and
contrastive pair sampling over the resulting cluster tree.

The clustering is a single pass: each streamline descends the tree, at every
level joining the nearest centroid when the MDF distance is within that
level's threshold and founding a new cluster otherwise. Centroids are running
means of their members, each member flip-aligned to the centroid before
averaging. The result depends on input order by design.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import canonical_orientation, resample_streamline
from .errors import DegenerateInputError

logger = logging.getLogger(__name__)

__all__ = [
    "ContrastivePair",
    "Cluster",
    "ClusterTree",
    "mdf_distance",
    "quickbundlesx",
    "sample_pairs",
    "sample_pairs_from_labels",
]

DEFAULT_THRESHOLDS = (40.0, 30.0, 20.0, 10.0)
DEFAULT_RESAMPLE_POINTS = 12


@dataclass(frozen=True)
class ContrastivePair:
    """A training pair: y=0 marks a similar pair, y=1 a dissimilar one."""

    i: int
    j: int
    y: int

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("pair indices must differ")
        if self.y not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.y}")


@dataclass
class Cluster:
    centroid: np.ndarray
    members: list[int] = field(default_factory=list)
    children: list[int] = field(default_factory=list)


@dataclass
class ClusterTree:
    """Clusters per threshold level; level 0 is the loosest threshold."""

    thresholds: tuple[float, ...]
    levels: list[list[Cluster]]
    n_items: int
    resample_points: int
    assignment_distances: np.ndarray  # (n_items, n_levels), distance at insertion

    def level_labels(self, level: int) -> np.ndarray:
        """Cluster index per source streamline at the given level."""
        labels = np.full(self.n_items, -1, dtype=np.int64)
        for cluster_id, cluster in enumerate(self.levels[level]):
            labels[cluster.members] = cluster_id
        return labels

    @property
    def deepest_level(self) -> int:
        return len(self.thresholds) - 1


def _mean_pointwise(a: np.ndarray, b: np.ndarray) -> float:
    # fsum is exactly rounded, so the mean over a set of pointwise
    # distances does not depend on pairing order; swapping or flipping
    # the arguments then changes nothing, not even the last bit.
    return math.fsum(np.linalg.norm(a - b, axis=1)) / a.shape[0]


def _mdf_resampled(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """(distance, flipped?) for two streamlines already at equal point count."""
    direct = _mean_pointwise(a, b)
    flipped = _mean_pointwise(a, b[::-1])
    if flipped < direct:
        return flipped, True
    return direct, False


def mdf_distance(a, b, k: int = DEFAULT_RESAMPLE_POINTS) -> float:
    """Minimum average direct-flip distance between two streamlines.

    Both streamlines are orientation-canonicalized, then resampled to k
    points; the result is the smaller of the mean pointwise distances under
    direct and reversed alignment. Canonicalizing before resampling makes
    flipping either argument a bit-exact no-op, and the exactly-rounded
    mean makes the value symmetric to the last bit as well.
    """
    ra = resample_streamline(canonical_orientation(np.asarray(a, dtype=np.float64)), k)
    rb = resample_streamline(canonical_orientation(np.asarray(b, dtype=np.float64)), k)
    return _mdf_resampled(ra, rb)[0]


def quickbundlesx(
    streamlines,
    thresholds=DEFAULT_THRESHOLDS,
    k: int = DEFAULT_RESAMPLE_POINTS,
    seed: int = 0,
) -> ClusterTree:
    """Cluster streamlines at a strictly decreasing sequence of MDF thresholds.

    Args:
        streamlines: sequence of (n, 3) streamlines (a Tractogram's list works).
        thresholds: strictly decreasing positive MDF thresholds, loosest first.
        k: internal resample point count for all MDF evaluations.
        seed: accepted for interface stability; the single-pass insertion is
            fully determined by input order and does not consume randomness.

    Returns:
        ClusterTree with one cluster list per threshold level.
    """
    del seed
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ValueError("thresholds must be nonempty")
    if any(t <= 0 for t in thresholds):
        raise ValueError(f"thresholds must be positive, got {thresholds}")
    if any(b >= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly decreasing, got {thresholds}")

    streamlines = list(streamlines)
    n_levels = len(thresholds)
    levels: list[list[Cluster]] = [[] for _ in thresholds]
    distances = np.zeros((len(streamlines), n_levels), dtype=np.float64)

    for index, s in enumerate(streamlines):
        item = resample_streamline(s, k)
        candidates = levels[0]
        candidate_ids = None  # None means "all clusters at this level"
        for level, threshold in enumerate(thresholds):
            pool = candidates if candidate_ids is None else [levels[level][c] for c in candidate_ids]
            best_id = -1
            best_dist = np.inf
            best_flip = False
            for local_id, cluster in enumerate(pool):
                dist, flip = _mdf_resampled(item, cluster.centroid)
                if dist < best_dist:
                    best_id, best_dist, best_flip = local_id, dist, flip
            if best_id >= 0 and best_dist <= threshold:
                cluster_id = best_id if candidate_ids is None else candidate_ids[best_id]
                cluster = levels[level][cluster_id]
                aligned = item[::-1] if best_flip else item
                count = len(cluster.members)
                cluster.centroid = (count * cluster.centroid + aligned) / (count + 1)
                cluster.members.append(index)
                distances[index, level] = best_dist
            else:
                cluster_id = len(levels[level])
                levels[level].append(Cluster(centroid=item.copy(), members=[index]))
                distances[index, level] = 0.0
                if level > 0:
                    parent_id = parent_cluster_id
                    levels[level - 1][parent_id].children.append(cluster_id)
            parent_cluster_id = cluster_id
            if level + 1 < n_levels:
                candidate_ids = levels[level][cluster_id].children
                candidates = None

    tree = ClusterTree(
        thresholds=thresholds,
        levels=levels,
        n_items=len(streamlines),
        resample_points=k,
        assignment_distances=distances,
    )
    logger.debug(
        "clustered %d streamlines: %s clusters per level",
        len(streamlines),
        [len(lv) for lv in levels],
    )
    return tree


def sample_pairs_from_labels(
    labels: np.ndarray,
    n: int,
    pos_fraction: float,
    rng: np.random.Generator,
    strict: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample index pairs from per-item cluster labels.

    Positives (y=0) are uniform over all within-cluster pairs; negatives (y=1)
    are uniform over all cross-cluster ordered pairs. With strict=True an
    impossible composition raises; with strict=False the shortfall shifts to
    the other category or shrinks the result (training-batch use).

    Returns:
        (pairs, y): pairs is (p, 2) int64, y is (p,) int64, positives first.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_items = labels.shape[0]
    unique, counts = np.unique(labels, return_counts=True)
    member_lists = [np.flatnonzero(labels == u) for u in unique]
    pair_weights = counts * (counts - 1) / 2.0
    total_pos_pairs = float(pair_weights.sum())
    can_pos = total_pos_pairs > 0
    can_neg = unique.shape[0] >= 2

    n_pos = int(round(pos_fraction * n))
    n_neg = n - n_pos
    if strict:
        if n_pos > 0 and not can_pos:
            raise DegenerateInputError(
                "cannot sample similar pairs: no cluster has 2 or more members"
            )
        if n_neg > 0 and not can_neg:
            raise DegenerateInputError(
                "cannot sample dissimilar pairs: fewer than 2 clusters"
            )
    else:
        if not can_pos:
            n_neg += n_pos
            n_pos = 0
        if not can_neg:
            n_pos += n_neg if can_pos else 0
            n_neg = 0
        if not can_pos and not can_neg:
            return np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=np.int64)

    pairs = np.empty((n_pos + n_neg, 2), dtype=np.int64)
    y = np.concatenate([np.zeros(n_pos, dtype=np.int64), np.ones(n_neg, dtype=np.int64)])

    if n_pos > 0:
        probs = pair_weights / total_pos_pairs
        chosen = rng.choice(unique.shape[0], size=n_pos, p=probs)
        for row, cluster_idx in enumerate(chosen):
            members = member_lists[cluster_idx]
            pick = rng.choice(members.shape[0], size=2, replace=False)
            pairs[row] = members[pick]

    if n_neg > 0:
        label_to_pos = {u: i for i, u in enumerate(unique)}
        cumulative = np.cumsum(counts)
        for row in range(n_pos, n_pos + n_neg):
            i = int(rng.integers(n_items))
            own = label_to_pos[labels[i]]
            remaining = n_items - counts[own]
            r = int(rng.integers(remaining))
            # Map r into the concatenation of all clusters except i's own.
            for cluster_idx in range(unique.shape[0]):
                if cluster_idx == own:
                    continue
                size = counts[cluster_idx]
                if r < size:
                    j = int(member_lists[cluster_idx][r])
                    break
                r -= size
            pairs[row] = (i, j)

    return pairs, y


def sample_pairs(
    tree: ClusterTree,
    level: int | None = None,
    n: int = 100,
    pos_fraction: float = 0.5,
    seed: int = 0,
) -> list[ContrastivePair]:
    """Draw contrastive pairs from one level of the cluster tree.

    Args:
        tree: a built ClusterTree.
        level: tree level to read cluster identities from (default deepest).
        n: exact number of pairs to return.
        pos_fraction: target fraction of similar (y=0) pairs; the realized
            count is round(pos_fraction * n).
        seed: RNG seed; identical seeds yield identical pair lists.

    Raises:
        DegenerateInputError: if the requested composition is impossible.
    """
    if level is None:
        level = tree.deepest_level
    labels = tree.level_labels(level)
    rng = np.random.default_rng(seed)
    pairs, y = sample_pairs_from_labels(labels, n, pos_fraction, rng, strict=True)
    return [ContrastivePair(int(i), int(j), int(lbl)) for (i, j), lbl in zip(pairs, y)]
