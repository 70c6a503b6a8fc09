"""Bundle completion by sampling new streamlines in latent space.

A segmented bundle is often sparser than the anatomy it represents. This
module refills it: pool seed latents from the subject's segmented bundle
and the atlas bundle, estimate their density with a per-dimension Gaussian
kernel estimate, fit a diagonal-covariance Gaussian mixture as a tractable
proposal, rejection-sample fresh latents against the kernel target, decode
them, trim each decoded streamline to the white-matter mask, and keep only
those that pass the anatomical constraints. The caller concatenates the
survivors with the segmented bundle; no further filtering is applied after
that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .autoenc import AutoencoderModel, decode, encode
from .core import (
    Bundle,
    VolumeGrid,
    resample_streamline,
    streamline_length,
    visited_voxels,
    winding_angle,
)
from .errors import ConfigError, DegenerateInputError, GenerationError
from .segment import canonical_orientation

__all__ = [
    "SeedSet",
    "KdeModel",
    "GmmModel",
    "FilterParams",
    "FilterOutcome",
    "assemble_seeds",
    "silverman_bandwidth",
    "build_kde",
    "kde_log_density",
    "kde_density",
    "fit_gmm",
    "gmm_log_density",
    "sample_gmm",
    "rejection_sample",
    "trim_to_wm",
    "anatomical_filter",
    "generate_bundle",
    "saturation_curve",
]

DEFAULT_N_SEEDS = 10000
DEFAULT_N_TARGET = 25000
DEFAULT_GMM_COMPONENTS = 11
ENVELOPE_SAFETY = 1.2
ATTEMPT_CAP_FACTOR = 50
PROPOSAL_CHUNK = 4096
KDE_QUERY_CHUNK = 512
BANDWIDTH_FLOOR = 1e-6


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, np.newaxis]
    if arr.ndim != 2:
        raise ValueError(f"points must be a (n, d) array, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr


def _as_queries(z, d: int) -> tuple[np.ndarray, bool]:
    """Normalize a query to (m, d); the flag marks scalar-style input.

    A 1D array is one point of dimension d, except in d == 1 where it is a
    batch of scalar points.
    """
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
        single = True
    elif arr.ndim == 1:
        if d == 1:
            arr = arr[:, np.newaxis]
            single = False
        elif arr.shape[0] == d:
            arr = arr[np.newaxis, :]
            single = True
        else:
            raise ValueError(f"query of shape {np.shape(z)} does not match dimension {d}")
    elif arr.ndim == 2 and arr.shape[1] == d:
        single = False
    else:
        raise ValueError(f"query of shape {np.shape(z)} does not match dimension {d}")
    return arr, single


@dataclass(frozen=True)
class SeedSet:
    """Latent seed pool with its subject/atlas composition."""

    latents: np.ndarray
    n_subject: int
    n_atlas: int

    def __post_init__(self):
        object.__setattr__(self, "latents", _as_points(self.latents))
        if self.latents.shape[0] != self.n_subject + self.n_atlas:
            raise ValueError("seed composition does not add up to the latent count")


@dataclass(frozen=True)
class KdeModel:
    """Product-kernel Gaussian density over seed points.

    bandwidths holds one positive width per dimension; the pipeline fills
    them with silverman_bandwidth, and tests may set them explicitly.
    """

    points: np.ndarray
    bandwidths: np.ndarray

    def __post_init__(self):
        points = _as_points(self.points)
        if points.shape[0] < 1:
            raise ValueError("density needs at least one seed point")
        h = np.asarray(self.bandwidths, dtype=np.float64).reshape(-1)
        if h.shape[0] != points.shape[1]:
            raise ValueError(
                f"need one bandwidth per dimension, got {h.shape[0]} for d={points.shape[1]}"
            )
        if not np.all(np.isfinite(h)) or np.any(h <= 0):
            raise ValueError("bandwidths must be positive and finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "bandwidths", h)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture.

    variances is (k, d) with every entry at least ridge; log_likelihoods
    is the mean per-point trace recorded while fitting, one entry per
    expectation step.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ridge: float
    log_likelihoods: tuple[float, ...] = ()

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = _as_points(self.means)
        variances = _as_points(self.variances)
        if not (weights.shape[0] == means.shape[0] == variances.shape[0]):
            raise ValueError("component counts disagree across weights/means/variances")
        if means.shape != variances.shape:
            raise ValueError("means and variances must share a shape")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if self.ridge <= 0 or np.any(variances < self.ridge):
            raise ValueError("variances must be at least the positive ridge")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _subject_fraction(ratio) -> float:
    if isinstance(ratio, (tuple, list)):
        if len(ratio) != 2:
            raise ValueError(f"seed ratio must have two parts, got {ratio}")
        a, b = (float(ratio[0]), float(ratio[1]))
        if not np.isfinite(a) or not np.isfinite(b) or a < 0 or b < 0 or a + b <= 0:
            raise ValueError(f"seed ratio parts must be nonnegative with a positive sum, got {ratio}")
        return a / (a + b)
    frac = float(ratio)
    if not np.isfinite(frac) or frac < 0 or frac > 1:
        raise ValueError(f"subject seed fraction must be within [0, 1], got {ratio}")
    return frac


def assemble_seeds(
    subject_latents,
    atlas_latents,
    ratio=0.5,
    n_seeds: int = DEFAULT_N_SEEDS,
    seed: int = 0,
) -> SeedSet:
    """Draw the latent seed pool from subject and atlas sources.

    The subject contributes round(fraction * n_seeds) points, capped at
    what it has, sampled without replacement; the atlas fills the rest,
    with replacement only if it is too small. ratio is either the subject
    fraction as a float or an (subject, atlas) proportion pair, so 0.5 and
    (1, 1) mean the same split.
    """
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be positive, got {n_seeds}")
    subject = _as_points(subject_latents) if np.size(subject_latents) else None
    atlas = _as_points(atlas_latents) if np.size(atlas_latents) else None
    if atlas is None:
        if subject is None:
            raise DegenerateInputError("no seed sources")
        raise DegenerateInputError("empty atlas seed source")
    if subject is not None and subject.shape[1] != atlas.shape[1]:
        raise ValueError(
            f"subject and atlas latent dimensions differ: {subject.shape[1]} vs {atlas.shape[1]}"
        )
    fraction = _subject_fraction(ratio)
    n_subject_available = 0 if subject is None else subject.shape[0]
    take_subject = min(n_subject_available, int(round(fraction * n_seeds)))
    take_atlas = n_seeds - take_subject
    rng = np.random.default_rng(seed)
    parts = []
    if take_subject:
        chosen = rng.choice(n_subject_available, size=take_subject, replace=False)
        parts.append(subject[chosen])
    if take_atlas:
        chosen = rng.choice(
            atlas.shape[0], size=take_atlas, replace=take_atlas > atlas.shape[0]
        )
        parts.append(atlas[chosen])
    return SeedSet(
        latents=np.concatenate(parts, axis=0),
        n_subject=take_subject,
        n_atlas=take_atlas,
    )


def silverman_bandwidth(points) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidths.

    h_j = sigma_j * (4 / ((d + 2) n)) ** (1 / (d + 4)) with sigma_j the
    sample standard deviation; a zero-variance dimension gets a 1e-6 floor
    so the kernel stays proper.
    """
    pts = _as_points(points)
    n, d = pts.shape
    if n < 2:
        raise DegenerateInputError(f"bandwidth estimation needs at least 2 points, got {n}")
    sigma = pts.std(axis=0, ddof=1)
    h = sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))
    h[h == 0.0] = BANDWIDTH_FLOOR
    return h


def build_kde(points) -> KdeModel:
    """Kernel density with Silverman bandwidths over the given points."""
    pts = _as_points(points)
    return KdeModel(points=pts, bandwidths=silverman_bandwidth(pts))


def kde_log_density(kde: KdeModel, z) -> np.ndarray | float:
    """Log density under the product-kernel estimate.

    Accepts one point or an (m, d) batch; evaluation runs against all seed
    points in fixed-size query chunks so memory stays bounded.
    """
    queries, single = _as_queries(z, kde.dim)
    h = kde.bandwidths
    scaled_seeds = kde.points / h
    seed_sq = np.einsum("ij,ij->i", scaled_seeds, scaled_seeds)
    log_norm = np.log(kde.points.shape[0]) + np.sum(np.log(h)) + 0.5 * kde.dim * np.log(
        2.0 * np.pi
    )
    out = np.empty(queries.shape[0], dtype=np.float64)
    for start in range(0, queries.shape[0], KDE_QUERY_CHUNK):
        block = queries[start : start + KDE_QUERY_CHUNK] / h
        block_sq = np.einsum("ij,ij->i", block, block)
        d2 = block_sq[:, np.newaxis] + seed_sq[np.newaxis, :] - 2.0 * (block @ scaled_seeds.T)
        np.maximum(d2, 0.0, out=d2)
        out[start : start + KDE_QUERY_CHUNK] = logsumexp(-0.5 * d2, axis=1) - log_norm
    return float(out[0]) if single else out


def kde_density(kde: KdeModel, z) -> np.ndarray | float:
    """Density under the product-kernel estimate; see kde_log_density."""
    return np.exp(kde_log_density(kde, z))


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[c] = points[idx]
        np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1), out=d2)
    return centers


def _component_log_prob(points: np.ndarray, weights, means, variances) -> np.ndarray:
    """Per-point, per-component log of weight * Gaussian, shape (n, k)."""
    inv = 1.0 / variances
    quad = (
        (points**2) @ inv.T
        - 2.0 * (points @ (means * inv).T)
        + np.sum(means**2 * inv, axis=1)[np.newaxis, :]
    )
    log_det = np.sum(np.log(variances), axis=1)
    d = points.shape[1]
    return np.log(weights)[np.newaxis, :] - 0.5 * (
        quad + log_det[np.newaxis, :] + d * np.log(2.0 * np.pi)
    )


def fit_gmm(
    points,
    k: int = DEFAULT_GMM_COMPONENTS,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-5,
) -> GmmModel:
    """Expectation-maximization fit of a diagonal-covariance mixture.

    Centers start from a k-means++ draw, covariances from the global
    per-dimension variance. Iteration stops when the mean log-likelihood
    improves by less than tol (relative) or max_iter is reached. A
    component that loses all responsibility is reseeded from a random
    point rather than left degenerate.
    """
    pts = _as_points(points)
    n, d = pts.shape
    if k < 1:
        raise ValueError(f"component count must be positive, got {k}")
    if n < k:
        raise DegenerateInputError(f"cannot fit {k} components to {n} points")
    if max_iter < 1 or tol <= 0:
        raise ValueError("max_iter must be >= 1 and tol positive")
    rng = np.random.default_rng(seed)
    global_var = pts.var(axis=0, ddof=0)
    ridge = 1e-6 * float(global_var.mean())
    if ridge <= 0.0:
        # Identical points have zero variance; a tiny positive ridge keeps
        # every Gaussian proper.
        ridge = 1e-12
    base_var = np.maximum(global_var, 0.0) + ridge
    means = _kmeans_pp(pts, k, rng)
    weights = np.full(k, 1.0 / k)
    variances = np.tile(base_var, (k, 1))
    trace: list[float] = []
    prev_ll = -np.inf
    reseeded = False
    pts_sq = pts**2
    for _ in range(max_iter):
        log_prob = _component_log_prob(pts, weights, means, variances)
        log_total = logsumexp(log_prob, axis=1)
        ll = float(log_total.mean())
        trace.append(ll)
        if trace[:-1] and not reseeded and ll - prev_ll <= tol * max(1.0, abs(ll)):
            break
        prev_ll = ll
        resp = np.exp(log_prob - log_total[:, np.newaxis])
        occupancy = resp.sum(axis=0)
        collapsed = ~np.isfinite(occupancy) | (occupancy < n * 1e-12)
        reseeded = bool(collapsed.any())
        safe = np.where(collapsed, 1.0, occupancy)
        means = (resp.T @ pts) / safe[:, np.newaxis]
        second = (resp.T @ pts_sq) / safe[:, np.newaxis]
        variances = np.maximum(second - means**2, 0.0) + ridge
        for c in np.flatnonzero(collapsed):
            means[c] = pts[rng.integers(n)]
            variances[c] = base_var
            occupancy[c] = 1.0
        weights = occupancy / occupancy.sum()
    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        ridge=ridge,
        log_likelihoods=tuple(trace),
    )


def gmm_log_density(gmm: GmmModel, z) -> np.ndarray | float:
    """Log density under the mixture; accepts one point or a batch."""
    queries, single = _as_queries(z, gmm.dim)
    out = np.empty(queries.shape[0], dtype=np.float64)
    for start in range(0, queries.shape[0], PROPOSAL_CHUNK):
        block = queries[start : start + PROPOSAL_CHUNK]
        log_prob = _component_log_prob(block, gmm.weights, gmm.means, gmm.variances)
        out[start : start + PROPOSAL_CHUNK] = logsumexp(log_prob, axis=1)
    return float(out[0]) if single else out


def sample_gmm(gmm: GmmModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points from the mixture; rng is a Generator, not a seed.

    Per draw: component by weight, then a diagonal Gaussian deviate, so
    sample order is independent and safe to consume incrementally.
    """
    if n < 0:
        raise ValueError(f"sample count must be nonnegative, got {n}")
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + noise * np.sqrt(gmm.variances[comp])


def _log_density(density, z):
    if isinstance(density, KdeModel):
        return kde_log_density(density, z)
    if isinstance(density, GmmModel):
        return gmm_log_density(density, z)
    raise TypeError(f"no density rule for {type(density).__name__}")


def rejection_sample(
    target,
    proposal: GmmModel,
    n_target: int = DEFAULT_N_TARGET,
    seed: int = 0,
    log_k: float | None = None,
) -> tuple[np.ndarray, dict]:
    """Sample the target density through the mixture proposal.

    The envelope constant defaults to 1.2 times the worst target/proposal
    ratio over the target's seed points. Proposals are drawn in chunks;
    each is accepted with probability target / (K * proposal). A proposal
    that exceeds the envelope is counted and accepted rather than silently
    biasing the output. Raises GenerationError if 50 * n_target proposals
    cannot produce n_target acceptances.

    Returns (samples, stats) where stats records attempts, acceptance
    rate, envelope violations, and the log envelope constant.
    """
    if n_target < 1:
        raise ValueError(f"n_target must be positive, got {n_target}")
    if log_k is None:
        if not isinstance(target, KdeModel):
            raise ValueError("log_k is required when the target has no seed points")
        ratios = kde_log_density(target, target.points) - gmm_log_density(
            proposal, target.points
        )
        log_k = float(np.log(ENVELOPE_SAFETY) + np.max(ratios))
    rng = np.random.default_rng(seed)
    cap = ATTEMPT_CAP_FACTOR * n_target
    accepted_blocks: list[np.ndarray] = []
    n_accepted = 0
    attempts = 0
    violations = 0
    while n_accepted < n_target and attempts < cap:
        m = min(PROPOSAL_CHUNK, cap - attempts)
        z = sample_gmm(proposal, m, rng)
        log_ratio = _log_density(target, z) - _log_density(proposal, z) - log_k
        violations += int(np.count_nonzero(log_ratio > 0.0))
        # 1 - u lies in (0, 1], so the log is always finite.
        u = rng.uniform(size=m)
        keep = np.log1p(-u) <= log_ratio
        accepted_blocks.append(z[keep])
        n_accepted += int(np.count_nonzero(keep))
        attempts += m
    if n_accepted < n_target:
        raise GenerationError(
            f"rejection sampling accepted {n_accepted} of {n_target} requested"
            f" samples after {attempts} proposals"
        )
    samples = np.concatenate(accepted_blocks, axis=0)[:n_target]
    stats = {
        "attempts": attempts,
        "acceptance_rate": n_accepted / attempts,
        "envelope_violations": violations,
        "log_k": log_k,
    }
    return samples, stats


def trim_to_wm(points, wm: VolumeGrid) -> np.ndarray:
    """Drop end vertices whose nearest voxel is outside the mask.

    Only the maximal prefix and suffix are removed; interior vertices stay
    even if they leave the mask. A streamline entirely outside comes back
    empty, and results with fewer than 2 points are for the caller to drop.
    """
    pts = np.asarray(points, dtype=np.float64)
    ref = wm.reference
    idx = ref.nearest_voxel(pts)
    ok = ref.in_bounds(idx)
    inside = np.zeros(pts.shape[0], dtype=bool)
    if ok.any():
        sel = idx[ok]
        inside[ok] = wm.data[sel[:, 0], sel[:, 1], sel[:, 2], 0] > 0.5
    hits = np.flatnonzero(inside)
    if hits.size == 0:
        return np.empty((0, 3), dtype=np.float64)
    return pts[hits[0] : hits[-1] + 1].copy()


@dataclass(frozen=True)
class FilterParams:
    """Anatomical plausibility constraints and their boundary senses.

    Length is inclusive on both ends; winding and the per-segment peak
    angle are strict; the peak pass rate is inclusive; mask coverage is
    strict.
    """

    min_length_mm: float = 20.0
    max_length_mm: float = 220.0
    max_winding_deg: float = 360.0
    max_peak_angle_deg: float = 30.0
    min_peak_pass_rate: float = 0.75
    min_wm_coverage: float = 0.95

    def __post_init__(self):
        if not 0 < self.min_length_mm <= self.max_length_mm:
            raise ValueError("length range must satisfy 0 < min <= max")
        if self.max_winding_deg <= 0:
            raise ValueError("winding bound must be positive")
        if not 0 < self.max_peak_angle_deg < 90:
            raise ValueError("peak angle bound must be within (0, 90) degrees")
        for rate in (self.min_peak_pass_rate, self.min_wm_coverage):
            if not 0 <= rate <= 1:
                raise ValueError("rates must be within [0, 1]")


@dataclass(frozen=True)
class FilterOutcome:
    """Filter survivors plus a per-constraint account of the rest."""

    accepted: list[np.ndarray]
    rejections: dict[str, int]
    n_input: int

    def __post_init__(self):
        if len(self.accepted) + sum(self.rejections.values()) != self.n_input:
            raise ValueError("accepted plus rejections must equal the input count")

    @property
    def acceptance_ratio(self) -> float:
        if self.n_input == 0:
            return 1.0
        return len(self.accepted) / self.n_input


def _peak_pass_rate(pts: np.ndarray, peaks: VolumeGrid, max_angle_deg: float) -> float:
    deltas = np.diff(pts, axis=0)
    norms = np.linalg.norm(deltas, axis=1)
    n_segments = deltas.shape[0]
    if n_segments == 0:
        return 0.0
    midpoints = 0.5 * (pts[:-1] + pts[1:])
    ref = peaks.reference
    voxels = ref.nearest_voxel(midpoints)
    usable = ref.in_bounds(voxels) & (norms > 0.0)
    if not usable.any():
        return 0.0
    sel = voxels[usable]
    directions = deltas[usable] / norms[usable, np.newaxis]
    field = peaks.data[sel[:, 0], sel[:, 1], sel[:, 2], :].astype(np.float64).reshape(-1, 3, 3)
    peak_norms = np.linalg.norm(field, axis=2)
    dots = np.abs(np.einsum("ij,ikj->ik", directions, field))
    # Folding with |cos| treats a peak and its negation as one direction.
    safe_norms = np.where(peak_norms > 0.0, peak_norms, 1.0)
    cosines = np.where(peak_norms > 0.0, dots / safe_norms, -1.0)
    best = cosines.max(axis=1)
    threshold = np.cos(np.radians(max_angle_deg))
    return float(np.count_nonzero(best > threshold)) / n_segments


def _wm_coverage(pts: np.ndarray, wm: VolumeGrid) -> float:
    ref = wm.reference
    idx = ref.nearest_voxel(pts)
    ok = ref.in_bounds(idx)
    covered = np.zeros(pts.shape[0], dtype=bool)
    if ok.any():
        sel = idx[ok]
        covered[ok] = wm.data[sel[:, 0], sel[:, 1], sel[:, 2], 0] > 0.5
    return float(covered.mean()) if pts.shape[0] else 0.0


def anatomical_filter(
    streamlines,
    peaks: VolumeGrid,
    wm: VolumeGrid,
    params: FilterParams = FilterParams(),
) -> FilterOutcome:
    """Keep streamlines passing length, winding, peak-angle, and coverage.

    Constraints run in that fixed order and a failing streamline is counted
    under the first one it breaks, so the rejection counts plus the
    survivors always add back up to the input count. The peak rule needs,
    per segment, the nearest-voxel peak within max_peak_angle_deg (no peak
    in the voxel, or a midpoint off the grid, fails that segment); at least
    min_peak_pass_rate of segments must pass.
    """
    if peaks.channels != 9:
        raise ConfigError(f"peak field must have 9 channels, got {peaks.channels}")
    if not peaks.reference.same_grid(wm.reference):
        raise ConfigError("peak field and mask must share one spatial reference")
    lines = list(streamlines)
    rejections = {"length": 0, "winding": 0, "peak_angle": 0, "wm_coverage": 0}
    accepted: list[np.ndarray] = []
    for line in lines:
        pts = np.asarray(line, dtype=np.float64)
        length = streamline_length(pts)
        if not params.min_length_mm <= length <= params.max_length_mm:
            rejections["length"] += 1
            continue
        if not winding_angle(pts) < params.max_winding_deg:
            rejections["winding"] += 1
            continue
        if not _peak_pass_rate(pts, peaks, params.max_peak_angle_deg) >= params.min_peak_pass_rate:
            rejections["peak_angle"] += 1
            continue
        if not _wm_coverage(pts, wm) > params.min_wm_coverage:
            rejections["wm_coverage"] += 1
            continue
        accepted.append(pts)
    return FilterOutcome(accepted=accepted, rejections=rejections, n_input=len(lines))


def _bundle_latents(model: AutoencoderModel, bundle: Bundle | None) -> np.ndarray:
    if bundle is None or len(bundle.streamlines) == 0:
        return np.empty((0, model.config.latent_dim), dtype=np.float64)
    lines = [
        resample_streamline(
            canonical_orientation(np.asarray(s, dtype=np.float64)),
            model.config.input_points,
        )
        for s in bundle.streamlines
    ]
    return encode(model, np.asarray(lines)).astype(np.float64)


def generate_bundle(
    model: AutoencoderModel,
    subject_bundle: Bundle | None,
    atlas_bundle: Bundle,
    peaks: VolumeGrid,
    wm: VolumeGrid,
    params: FilterParams = FilterParams(),
    n_target: int = DEFAULT_N_TARGET,
    n_seeds: int = DEFAULT_N_SEEDS,
    gmm_components: int = DEFAULT_GMM_COMPONENTS,
    ratio=0.5,
    seed: int = 0,
) -> tuple[Bundle, dict]:
    """One bundle through the whole completion pipeline.

    Seeds from the subject's segmented bundle plus the atlas bundle feed
    the kernel density; a mixture fit proposes latents for rejection
    sampling; accepted latents decode to streamlines, are trimmed to the
    mask, and pass through the anatomical filter. Returns the generated
    bundle (which may be empty) and a JSON-ready stage report whose counts
    satisfy n_sampled == dropped_by_trim + rejections + final_count.
    """
    if len(atlas_bundle.streamlines) == 0:
        raise DegenerateInputError("empty atlas bundle")
    if peaks.channels != 9:
        raise ConfigError(f"peak field must have 9 channels, got {peaks.channels}")
    if not peaks.reference.same_grid(wm.reference):
        raise ConfigError("peak field and mask must share one spatial reference")
    rng = np.random.default_rng(seed)
    stage_seeds = rng.integers(0, 2**63, size=3)
    seeds = assemble_seeds(
        _bundle_latents(model, subject_bundle),
        _bundle_latents(model, atlas_bundle),
        ratio=ratio,
        n_seeds=n_seeds,
        seed=int(stage_seeds[0]),
    )
    kde = build_kde(seeds.latents)
    gmm = fit_gmm(seeds.latents, k=gmm_components, seed=int(stage_seeds[1]))
    samples, stats = rejection_sample(kde, gmm, n_target=n_target, seed=int(stage_seeds[2]))
    decoded = decode(model, samples)
    survivors: list[np.ndarray] = []
    dropped_by_trim = 0
    for row in decoded:
        trimmed = trim_to_wm(np.asarray(row, dtype=np.float64), wm)
        if trimmed.shape[0] >= 2:
            survivors.append(trimmed)
        else:
            dropped_by_trim += 1
    outcome = anatomical_filter(survivors, peaks, wm, params)
    bundle = Bundle(
        label=atlas_bundle.label,
        name=atlas_bundle.name,
        streamlines=outcome.accepted,
        reference=wm.reference,
    )
    report = {
        "label": atlas_bundle.label,
        "name": atlas_bundle.name,
        "seed_composition": {"n_subject": seeds.n_subject, "n_atlas": seeds.n_atlas},
        "bandwidths": kde.bandwidths.tolist(),
        "gmm_log_likelihood": gmm.log_likelihoods[-1],
        "gmm_iterations": len(gmm.log_likelihoods),
        "log_k": stats["log_k"],
        "acceptance_rate": stats["acceptance_rate"],
        "envelope_violations": stats["envelope_violations"],
        "n_sampled": int(samples.shape[0]),
        "dropped_by_trim": dropped_by_trim,
        "rejections": dict(outcome.rejections),
        "final_count": len(outcome.accepted),
    }
    return bundle, report


def saturation_curve(
    bundle: Bundle,
    sample_sizes,
    trials: int = 50,
    reference=None,
    seed: int = 0,
) -> list[tuple[int, float, float]]:
    """Occupied volume versus streamline count, by resampling.

    For each requested count, draw that many streamlines with replacement,
    voxelize their vertices, and record nonzero-voxel volume in mm^3;
    repeated over trials to give (count, mean, std) rows. The curve
    flattens once extra streamlines stop finding new voxels.
    """
    if len(bundle.streamlines) == 0:
        raise DegenerateInputError("empty bundle")
    if trials < 1:
        raise ValueError(f"trials must be positive, got {trials}")
    ref = bundle.reference if reference is None else reference
    sizes = [int(c) for c in sample_sizes]
    if not sizes or any(c < 1 for c in sizes):
        raise ValueError("sample sizes must be positive integers")
    footprints = []
    for line in bundle.streamlines:
        voxels = visited_voxels(line, ref)
        footprints.append(
            np.ravel_multi_index((voxels[:, 0], voxels[:, 1], voxels[:, 2]), ref.dims)
            if voxels.size
            else np.empty(0, dtype=np.int64)
        )
    rng = np.random.default_rng(seed)
    voxel_volume = ref.voxel_volume
    curve = []
    n = len(footprints)
    for count in sizes:
        volumes = np.empty(trials, dtype=np.float64)
        for t in range(trials):
            chosen = rng.integers(0, n, size=count)
            merged = np.concatenate([footprints[i] for i in chosen])
            volumes[t] = np.unique(merged).size * voxel_volume
        curve.append((count, float(volumes.mean()), float(volumes.std())))
    return curve
