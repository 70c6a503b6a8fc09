"""Per-bundle distance threshold calibration from labeled examples.

Segmentation keeps a streamline when its latent distance to the nearest
atlas neighbor falls below the assigned bundle's threshold. This module
picks those thresholds from data: encode a validation set of known-bundle
streamlines plus a pool of implausible ones, group every candidate by the
bundle it was *assigned* to, and sweep an ROC curve over each group's
distances. The returned threshold is the swept point closest to the
TPR = 1 - FPR diagonal, which balances sensitivity against contamination
without favoring either.

A validation streamline assigned to the wrong bundle counts as a negative
in that bundle's group; being near the wrong bundle is exactly the failure
mode the threshold must reject.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autoenc import AutoencoderModel
from .errors import DegenerateInputError
from .segment import AtlasIndex, nearest_assignments

__all__ = [
    "LabeledDistanceSet",
    "build_distance_sets",
    "roc_curve",
    "near_optimal_threshold",
    "scale_thresholds",
    "calibrate",
]


@dataclass(frozen=True)
class LabeledDistanceSet:
    """Candidate distances grouped by assigned bundle.

    groups maps each atlas label to a tuple of (distance, is_true_positive)
    pairs. Every calibration streamline appears in exactly one group, the
    bundle it was assigned to; labels with no candidates map to an empty
    tuple.
    """

    groups: dict[int, tuple[tuple[float, bool], ...]]

    def __post_init__(self):
        for label, group in self.groups.items():
            for distance, _ in group:
                if not np.isfinite(distance) or distance < 0:
                    raise ValueError(
                        f"distance for bundle {label} must be finite and"
                        f" nonnegative, got {distance}"
                    )

    def __len__(self) -> int:
        return sum(len(group) for group in self.groups.values())


def build_distance_sets(
    model: AutoencoderModel,
    index: AtlasIndex,
    positives,
    negatives=(),
) -> LabeledDistanceSet:
    """Assign calibration streamlines to bundles and tag them.

    Args:
        model: trained autoencoder.
        index: atlas search index the thresholds will be used with.
        positives: sequence of Bundle objects holding validation
            streamlines with known identity.
        negatives: optional sequence of streamlines known to be
            implausible; they count as negatives wherever they land.

    Returns a LabeledDistanceSet with one group per atlas label. A
    positive streamline is a true positive only in its own bundle's group;
    landing anywhere else records it as a negative there.
    """
    bundles = list(positives)
    if sum(len(b.streamlines) for b in bundles) == 0:
        raise DegenerateInputError("empty positives")
    seen = set()
    for bundle in bundles:
        if bundle.label not in index.names:
            raise ValueError(
                f"validation bundle label {bundle.label} is not in the atlas"
            )
        if bundle.label in seen:
            raise ValueError(f"duplicate validation bundle label {bundle.label}")
        seen.add(bundle.label)

    groups: dict[int, list[tuple[float, bool]]] = {
        label: [] for label in index.names
    }
    for bundle in bundles:
        for a in nearest_assignments(model, index, bundle.streamlines):
            groups[a.label].append((a.distance, a.label == bundle.label))
    negatives = list(negatives)
    if negatives:
        for a in nearest_assignments(model, index, negatives):
            groups[a.label].append((a.distance, False))
    return LabeledDistanceSet(
        groups={label: tuple(group) for label, group in groups.items()}
    )


def _group_arrays(group) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(group)
    distances = np.asarray([d for d, _ in pairs], dtype=np.float64)
    is_positive = np.asarray([bool(p) for _, p in pairs], dtype=bool)
    if distances.size and (
        not np.all(np.isfinite(distances)) or np.any(distances < 0)
    ):
        raise ValueError("distances must be finite and nonnegative")
    return distances, is_positive


def _check_composition(n_pos: int, n_neg: int, context: str = "") -> None:
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError(
            f"degenerate group{context}: {n_pos} positives and {n_neg} negatives"
        )


def roc_curve(group) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical ROC samples over the group's unique distances.

    Returns (thresholds, tpr, fpr), each one value per unique distance in
    ascending order, where tpr[i] and fpr[i] are the fractions of positives
    and negatives strictly below thresholds[i]. Both rates are non-
    decreasing in the threshold.
    """
    distances, is_positive = _group_arrays(group)
    n_pos = int(is_positive.sum())
    n_neg = distances.size - n_pos
    _check_composition(n_pos, n_neg)
    thresholds = np.unique(distances)
    pos_sorted = np.sort(distances[is_positive])
    neg_sorted = np.sort(distances[~is_positive])
    # side="left" counts entries strictly below t, matching the strict
    # keep rule used at segmentation time.
    tpr = np.searchsorted(pos_sorted, thresholds, side="left") / n_pos
    fpr = np.searchsorted(neg_sorted, thresholds, side="left") / n_neg
    return thresholds, tpr, fpr


def near_optimal_threshold(group) -> tuple[float, float, float]:
    """Threshold whose ROC point is nearest the TPR = 1 - FPR diagonal.

    Sweeps the group's unique distances and returns (threshold, tpr, fpr)
    minimizing |TPR - (1 - FPR)|; ties go to the smaller threshold.
    Raises DegenerateInputError when the group lacks positives or
    negatives, since no tradeoff exists to balance.
    """
    thresholds, tpr, fpr = roc_curve(group)
    best = int(np.argmin(np.abs(tpr - (1.0 - fpr))))
    return float(thresholds[best]), float(tpr[best]), float(fpr[best])


def scale_thresholds(table: dict[int, float], factor: float) -> dict[int, float]:
    """Multiply every threshold by a positive factor.

    Loosening (factor > 1) or tightening (factor < 1) the whole table is
    the supported form of manual adjustment after inspecting a report.
    """
    if not np.isfinite(factor) or factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return {label: float(value * factor) for label, value in table.items()}


def calibrate(
    model: AutoencoderModel,
    index: AtlasIndex,
    positives,
    negatives=(),
) -> tuple[dict[int, float], dict]:
    """Full calibration: distances, per-bundle sweeps, and a report.

    Returns (thresholds, report). thresholds maps every atlas label to its
    near-optimal value, ready for segment_tractogram or an on-disk table.
    The report is a JSON-ready dict with one entry per bundle: the chosen
    threshold, its TPR/FPR, group composition counts, and the full ROC
    sample list for offline inspection.
    """
    sets = build_distance_sets(model, index, positives, negatives)
    table: dict[int, float] = {}
    bundles = {}
    for label in sorted(sets.groups):
        group = sets.groups[label]
        n_pos = sum(1 for _, is_pos in group if is_pos)
        n_neg = len(group) - n_pos
        _check_composition(n_pos, n_neg, context=f" for bundle {label}")
        threshold, tpr, fpr = near_optimal_threshold(group)
        curve = roc_curve(group)
        table[label] = threshold
        bundles[str(label)] = {
            "name": index.names[label],
            "threshold": threshold,
            "tpr": tpr,
            "fpr": fpr,
            "n_positive": n_pos,
            "n_negative": n_neg,
            "roc": [
                {"threshold": float(t), "tpr": float(a), "fpr": float(b)}
                for t, a, b in zip(*curve)
            ],
        }
    return table, {"bundles": bundles}
