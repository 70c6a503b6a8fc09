"""1D convolutional autoencoder over fixed-length streamlines.

The encoder stacks strided convolutions (kernel 3, stride 2, leaky
rectifier) that halve the temporal length per stage, then flattens and
projects to the latent dimension with a linear dense layer. The decoder
mirrors it: dense + activation, reshape, and per stage nearest-neighbor
upsampling followed by a stride-1 convolution; the last stage maps to 3
output channels with no activation.

Training minimizes

    mean_i ||S_hat_i - S_i||^2  +  lambda * mean_pairs C(z_a, z_b, y)

where C is the margin contrastive term (see contrastive_term) and both
addends are batch means so lambda keeps its meaning across batch sizes.

Production models are float32; gradient checking runs on a float64 copy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .nn import AdamOptimizer, Conv1d, Dense, Flatten, LeakyRelu, Reshape, Upsample
from .qbx import ClusterTree, ContrastivePair, sample_pairs_from_labels

logger = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "AutoencoderModel",
    "GradientCheckResult",
    "init_model",
    "encode",
    "decode",
    "contrastive_term",
    "total_loss",
    "train",
    "gradient_check",
]

DEFAULT_CHANNEL_PLAN = (32, 64, 128, 256, 512, 1024)

# encode/decode process fixed-size chunks, zero-padding the last one: BLAS
# matmul kernels vary with operand shape (a 1-row batch takes a different
# path than a 500-row batch, shifting results by ~1e-7), so keeping every
# chunk the same shape makes per-row outputs independent of batch size.
INFERENCE_CHUNK = 256


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; input_points must be divisible by
    stride**len(channel_plan) so every stage halves the length exactly."""

    input_points: int = 256
    latent_dim: int = 32
    channel_plan: tuple[int, ...] = DEFAULT_CHANNEL_PLAN
    kernel_size: int = 3
    stride: int = 2
    negative_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.channel_plan or any(c < 1 for c in self.channel_plan):
            raise ConfigError(f"channel_plan must be positive integers, got {self.channel_plan}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride < 2:
            raise ConfigError(f"stride must be >= 2, got {self.stride}")
        reduction = self.stride ** len(self.channel_plan)
        if self.input_points < reduction or self.input_points % reduction != 0:
            raise ConfigError(
                f"input_points ({self.input_points}) must be a positive multiple of "
                f"stride**len(channel_plan) = {reduction}"
            )

    @property
    def min_length(self) -> int:
        return self.input_points // self.stride ** len(self.channel_plan)

    @property
    def flat_dim(self) -> int:
        return self.channel_plan[-1] * self.min_length

    def to_dict(self) -> dict:
        return {
            "input_points": self.input_points,
            "latent_dim": self.latent_dim,
            "channel_plan": list(self.channel_plan),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "negative_slope": self.negative_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key {sorted(unknown)[0]!r}")
        return cls(**{k: tuple(v) if k == "channel_plan" else v for k, v in d.items()})


class AutoencoderModel:
    """Encoder/decoder parameter container with forward and backward passes."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        k, s, slope = config.kernel_size, config.stride, config.negative_slope

        self.encoder = []
        in_ch = 3
        for out_ch in config.channel_plan:
            self.encoder.append(Conv1d(in_ch, out_ch, k, s, rng, self.dtype))
            self.encoder.append(LeakyRelu(slope))
            in_ch = out_ch
        self.encoder.append(Flatten())
        self.encoder.append(Dense(config.flat_dim, config.latent_dim, rng, self.dtype))

        self.decoder = [
            Dense(config.latent_dim, config.flat_dim, rng, self.dtype),
            LeakyRelu(slope),
            Reshape(config.channel_plan[-1], config.min_length),
        ]
        plan = config.channel_plan
        out_plan = list(plan[-2::-1]) + [3]
        in_ch = plan[-1]
        for stage, out_ch in enumerate(out_plan):
            self.decoder.append(Upsample(s))
            self.decoder.append(Conv1d(in_ch, out_ch, k, 1, rng, self.dtype))
            if stage < len(out_plan) - 1:
                self.decoder.append(LeakyRelu(slope))
            in_ch = out_ch

    # ------------------------------------------------------------ parameters

    def _conv_layers(self, layers):
        return [l for l in layers if isinstance(l, Conv1d)]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Deterministically ordered (name, array) list of every tensor."""
        named = []
        for i, conv in enumerate(self._conv_layers(self.encoder)):
            named.append((f"enc_conv{i}_w", conv.weight))
            named.append((f"enc_conv{i}_b", conv.bias))
        enc_dense = self.encoder[-1]
        named.append(("enc_dense_w", enc_dense.weight))
        named.append(("enc_dense_b", enc_dense.bias))
        dec_dense = self.decoder[0]
        named.append(("dec_dense_w", dec_dense.weight))
        named.append(("dec_dense_b", dec_dense.bias))
        for i, conv in enumerate(self._conv_layers(self.decoder)):
            named.append((f"dec_conv{i}_w", conv.weight))
            named.append((f"dec_conv{i}_b", conv.bias))
        return named

    def _ordered_params(self):
        return [p for _, p in self.named_parameters()]

    def _ordered_grads(self):
        grads = []
        for conv in self._conv_layers(self.encoder):
            grads.extend([conv.grad_weight, conv.grad_bias])
        enc_dense = self.encoder[-1]
        grads.extend([enc_dense.grad_weight, enc_dense.grad_bias])
        dec_dense = self.decoder[0]
        grads.extend([dec_dense.grad_weight, dec_dense.grad_bias])
        for conv in self._conv_layers(self.decoder):
            grads.extend([conv.grad_weight, conv.grad_bias])
        return grads

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grads(self):
        for layer in self.encoder + self.decoder:
            layer.zero_grads()

    def to_dtype(self, dtype) -> "AutoencoderModel":
        """Copy of this model with every parameter cast to dtype."""
        other = AutoencoderModel(self.config, dtype=dtype)
        for (_, src), (_, dst) in zip(self.named_parameters(), other.named_parameters()):
            dst[...] = src.astype(dtype)
        return other

    def layer_descriptors(self) -> list[dict]:
        """Architecture summary used by the model file codec."""
        descriptors = []
        for i, conv in enumerate(self._conv_layers(self.encoder)):
            descriptors.append(
                {
                    "kind": "conv1d",
                    "name": f"enc_conv{i}",
                    "in_channels": conv.in_channels,
                    "out_channels": conv.out_channels,
                    "kernel": conv.kernel,
                    "stride": conv.stride,
                }
            )
        enc_dense = self.encoder[-1]
        descriptors.append(
            {
                "kind": "dense",
                "name": "enc_dense",
                "in_features": enc_dense.in_features,
                "out_features": enc_dense.out_features,
            }
        )
        dec_dense = self.decoder[0]
        descriptors.append(
            {
                "kind": "dense",
                "name": "dec_dense",
                "in_features": dec_dense.in_features,
                "out_features": dec_dense.out_features,
            }
        )
        for i, conv in enumerate(self._conv_layers(self.decoder)):
            descriptors.append(
                {
                    "kind": "conv1d",
                    "name": f"dec_conv{i}",
                    "in_channels": conv.in_channels,
                    "out_channels": conv.out_channels,
                    "kernel": conv.kernel,
                    "stride": conv.stride,
                }
            )
        return descriptors

    # ------------------------------------------------------------ forward

    def forward_encoder(self, x3, train=False):
        out = x3
        for layer in self.encoder:
            out = layer.forward(out, train=train)
        return out

    def forward_decoder(self, z, train=False):
        out = z
        for layer in self.decoder:
            out = layer.forward(out, train=train)
        return out

    def backward(self, grad_reconstruction, grad_latent):
        """Backpropagate; either gradient may be None when that path is off."""
        if grad_reconstruction is not None:
            g = grad_reconstruction
            for layer in reversed(self.decoder):
                g = layer.backward(g)
            grad_latent = g if grad_latent is None else g + grad_latent
        g = grad_latent
        for layer in reversed(self.encoder):
            g = layer.backward(g)


def init_model(config: ModelConfig, dtype=np.float32) -> AutoencoderModel:
    """Build a model with seed-deterministic uniform fan-in initialization."""
    return AutoencoderModel(config, dtype=dtype)


# ---------------------------------------------------------------- inference


def _as_batch(streamlines, n_points, dtype):
    arr = np.asarray(streamlines, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected batch of (n, {n_points}, 3) streamlines, got {arr.shape}")
    if arr.shape[1] != n_points:
        raise ValueError(
            f"streamlines must have exactly {n_points} points, got {arr.shape[1]}"
        )
    return arr


def _fixed_chunks(array: np.ndarray):
    """Yield (view, real_row_count) in INFERENCE_CHUNK-row blocks, the last
    zero-padded to full size."""
    n = array.shape[0]
    for start in range(0, n, INFERENCE_CHUNK):
        stop = min(start + INFERENCE_CHUNK, n)
        block = array[start:stop]
        if block.shape[0] < INFERENCE_CHUNK:
            padded = np.zeros(
                (INFERENCE_CHUNK,) + array.shape[1:], dtype=array.dtype
            )
            padded[: block.shape[0]] = block
            yield padded, block.shape[0]
        else:
            yield block, block.shape[0]


def encode(model: AutoencoderModel, streamlines) -> np.ndarray:
    """Latent vectors, shape (n, latent_dim), for streamlines resampled to
    the model's input point count. Row results do not depend on how many
    streamlines are encoded together."""
    batch = _as_batch(streamlines, model.config.input_points, model.dtype)
    if batch.shape[0] == 0:
        return np.empty((0, model.config.latent_dim), dtype=model.dtype)
    outputs = []
    for chunk, real in _fixed_chunks(batch):
        z = model.forward_encoder(np.ascontiguousarray(chunk.transpose(0, 2, 1)))
        outputs.append(z[:real])
    return np.concatenate(outputs, axis=0)


def decode(model: AutoencoderModel, latents) -> np.ndarray:
    """Streamlines, shape (n, input_points, 3), decoded from latent vectors.
    Batch-size independent like encode."""
    z = np.asarray(latents, dtype=model.dtype)
    if z.ndim == 1:
        z = z[np.newaxis]
    if z.ndim != 2 or z.shape[1] != model.config.latent_dim:
        raise ValueError(
            f"latent vectors must have dimension {model.config.latent_dim}, got {z.shape}"
        )
    if z.shape[0] == 0:
        return np.empty((0, model.config.input_points, 3), dtype=model.dtype)
    outputs = []
    for chunk, real in _fixed_chunks(z):
        out = model.forward_decoder(chunk)
        outputs.append(out[:real].transpose(0, 2, 1))
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------- losses


def contrastive_term(z_i, z_j, y: int, margin: float = 1.25) -> float:
    """Margin contrastive term for one latent pair.

    y=0 (similar):    0.5 * D^2
    y=1 (dissimilar): 0.5 * max(0, margin - D)^2
    with D the Euclidean distance between the two vectors.
    """
    if y not in (0, 1):
        raise ValueError(f"pair label must be 0 or 1, got {y}")
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape:
        raise ValueError(f"latent shapes differ: {z_i.shape} vs {z_j.shape}")
    dist = float(np.linalg.norm(z_i - z_j))
    if y == 0:
        return 0.5 * dist * dist
    clipped = max(margin - dist, 0.0)
    return 0.5 * clipped * clipped


def _pairs_as_arrays(pairs):
    """Normalize a pair collection to (indices (p,2), y (p,)) int64 arrays."""
    if pairs is None:
        return np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=np.int64)
    if isinstance(pairs, tuple) and len(pairs) == 2:
        idx, y = pairs
        return np.asarray(idx, dtype=np.int64).reshape(-1, 2), np.asarray(y, dtype=np.int64)
    idx = np.array([(p.i, p.j) for p in pairs], dtype=np.int64).reshape(-1, 2)
    y = np.array([p.y for p in pairs], dtype=np.int64)
    return idx, y


def _pair_terms(z, idx, y, margin):
    delta = z[idx[:, 0]] - z[idx[:, 1]]
    dist = np.linalg.norm(delta, axis=1)
    shortfall = np.maximum(margin - dist, 0.0)
    terms = np.where(y == 0, 0.5 * dist**2, 0.5 * shortfall**2)
    return delta, dist, terms


def _loss_forward(model, batch3, idx, y, lam, margin, terms, train):
    """Forward pass for the selected loss terms.

    Returns (total, mse_mean, pair_mean, z, xhat) where unused pieces are 0
    or None. terms is one of {"reconstruction", "contrastive", "total"}.
    """
    z = model.forward_encoder(batch3, train=train)
    mse = 0.0
    xhat = None
    if terms in ("reconstruction", "total"):
        xhat = model.forward_decoder(z, train=train)
        diff = xhat - batch3
        mse = float(np.sum(diff.astype(np.float64) ** 2)) / batch3.shape[0]
    pair_mean = 0.0
    if terms in ("contrastive", "total") and idx.shape[0] > 0:
        _, _, pair_terms = _pair_terms(z.astype(np.float64), idx, y, margin)
        pair_mean = float(np.mean(pair_terms))
    if terms == "reconstruction":
        total = mse
    elif terms == "contrastive":
        total = pair_mean
    else:
        total = mse + lam * pair_mean
    return total, mse, pair_mean, z, xhat


def _loss_and_grads(model, batch3, idx, y, lam, margin, terms="total"):
    """Forward + backward for the selected loss terms; grads accumulate in
    the model's layers (call model.zero_grads() first)."""
    batch = batch3.shape[0]
    z = model.forward_encoder(batch3, train=True)
    dz = None
    pair_mean = 0.0
    if terms in ("contrastive", "total") and idx.shape[0] > 0:
        delta, dist, pair_terms = _pair_terms(z, idx, y, margin)
        pair_mean = float(np.mean(pair_terms.astype(np.float64)))
        with np.errstate(divide="ignore", invalid="ignore"):
            pull = np.where(
                (y == 1) & (dist < margin) & (dist > 0), (dist - margin) / dist, 0.0
            )
        coef = np.where(y == 0, 1.0, pull).astype(z.dtype)
        scale = (1.0 if terms == "contrastive" else lam) / idx.shape[0]
        weighted = (scale * coef)[:, np.newaxis] * delta
        dz = np.zeros_like(z)
        np.add.at(dz, idx[:, 0], weighted)
        np.add.at(dz, idx[:, 1], -weighted)
    mse = 0.0
    dxhat = None
    if terms in ("reconstruction", "total"):
        xhat = model.forward_decoder(z, train=True)
        diff = xhat - batch3
        mse = float(np.sum(diff.astype(np.float64) ** 2)) / batch
        dxhat = (2.0 / batch) * diff
    if dxhat is not None or dz is not None:
        model.backward(dxhat, dz)
    if terms == "reconstruction":
        total = mse
    elif terms == "contrastive":
        total = pair_mean
    else:
        total = mse + lam * pair_mean
    return total, mse, pair_mean


def total_loss(model, streamlines, pairs, lam: float = 400.0, margin: float = 1.25):
    """Combined loss on a batch: batch-mean reconstruction error plus lambda
    times the pair-mean contrastive term.

    Args:
        streamlines: batch resampled to the model's input point count.
        pairs: ContrastivePair list or (indices, y) arrays, indexing the batch.

    Returns:
        (total, breakdown) with breakdown keys reconstruction, contrastive,
        contrastive_weighted, and total.
    """
    batch = _as_batch(streamlines, model.config.input_points, model.dtype)
    idx, y = _pairs_as_arrays(pairs)
    if idx.shape[0] and (idx.min() < 0 or idx.max() >= batch.shape[0]):
        raise ValueError("pair indices out of batch range")
    batch3 = np.ascontiguousarray(batch.transpose(0, 2, 1))
    total, mse, pair_mean, _, _ = _loss_forward(
        model, batch3, idx, y, lam, margin, "total", train=False
    )
    breakdown = {
        "reconstruction": mse,
        "contrastive": pair_mean,
        "contrastive_weighted": lam * pair_mean,
        "total": total,
    }
    return total, breakdown


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 400.0
    margin: float = 1.25
    batch_size: int = 128
    epochs: int = 20
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pairs_per_batch: int = 128
    pos_fraction: float = 0.5
    pair_level: int | None = None
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if min(self.batch_size, self.epochs, self.learning_rate) <= 0:
            raise ConfigError("batch_size, epochs, and learning_rate must be positive")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ConfigError(f"pos_fraction must be in [0, 1], got {self.pos_fraction}")


def train(
    model: AutoencoderModel,
    streamlines,
    tree: ClusterTree | None,
    cfg: TrainConfig,
    progress_path=None,
):
    """Train in place; returns (model, history).

    Args:
        streamlines: (n, D, 3) array or list of (D, 3) streamlines, already
            resampled to the model's input point count.
        tree: cluster tree over the same streamlines; supplies the cluster
            identities that define similar/dissimilar pairs. May be None only
            when cfg.lam == 0.
        cfg: training hyperparameters.
        progress_path: optional path receiving one JSON line per step with
            keys step, epoch, mse, contrastive, total.

    Raises:
        TrainingDivergedError: on a non-finite loss.
    """
    data = _as_batch(streamlines, model.config.input_points, model.dtype)
    n_items = data.shape[0]
    use_pairs = cfg.lam > 0 and cfg.pairs_per_batch > 0
    labels = None
    if use_pairs:
        if tree is None:
            raise ConfigError("training with lambda > 0 requires a cluster tree")
        if tree.n_items != n_items:
            raise ConfigError(
                f"cluster tree covers {tree.n_items} streamlines, data has {n_items}"
            )
        level = tree.deepest_level if cfg.pair_level is None else cfg.pair_level
        labels = tree.level_labels(level)

    if cfg.deterministic:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return _train_loop(model, data, labels, cfg, progress_path)
    return _train_loop(model, data, labels, cfg, progress_path)


def _train_loop(model, data, labels, cfg, progress_path):
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(
        model._ordered_params(),
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
    )
    grads = model._ordered_grads()
    n_items = data.shape[0]
    use_pairs = labels is not None and cfg.lam > 0 and cfg.pairs_per_batch > 0
    history = []
    step = 0
    progress = open(progress_path, "w", encoding="utf-8") if progress_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n_items)
            for start in range(0, n_items, cfg.batch_size):
                batch_idx = order[start : start + cfg.batch_size]
                batch3 = np.ascontiguousarray(data[batch_idx].transpose(0, 2, 1))
                if use_pairs and batch_idx.shape[0] >= 2:
                    idx, y = sample_pairs_from_labels(
                        labels[batch_idx], cfg.pairs_per_batch, cfg.pos_fraction,
                        rng, strict=False,
                    )
                else:
                    idx = np.empty((0, 2), dtype=np.int64)
                    y = np.empty(0, dtype=np.int64)
                model.zero_grads()
                total, mse, pair_mean = _loss_and_grads(
                    model, batch3, idx, y, cfg.lam, cfg.margin, "total"
                )
                if not np.isfinite(total):
                    raise TrainingDivergedError(f"training diverged at step {step}")
                optimizer.step(grads)
                entry = {
                    "step": step,
                    "epoch": epoch,
                    "mse": mse,
                    "contrastive": pair_mean,
                    "total": total,
                }
                history.append(entry)
                if progress is not None:
                    progress.write(json.dumps(entry) + "\n")
                step += 1
            logger.info(
                "epoch %d/%d: total %.6g, mse %.6g, contrastive %.6g",
                epoch + 1, cfg.epochs, total, mse, pair_mean,
            )
    finally:
        if progress is not None:
            progress.close()
    return model, history


# ---------------------------------------------------------------- checking


@dataclass(frozen=True)
class GradientCheckResult:
    max_rel_error: float
    n_parameters_checked: int
    n_pairs_skipped: int
    n_below_noise_floor: int
    worst_tensor: str


def gradient_check(
    model: AutoencoderModel,
    streamlines,
    eps: float = 1e-5,
    pairs=None,
    lam: float = 400.0,
    margin: float = 1.25,
    terms: str = "total",
    samples_per_tensor: int = 6,
    seed: int = 0,
) -> GradientCheckResult:
    """Compare analytic gradients against central finite differences.

    Runs on a float64 copy of the model. Dissimilar pairs whose latent
    distance sits within 100*eps of the margin (a kink of the contrastive
    term) or of zero are flagged and excluded rather than failed.

    Central differences carry irreducible float64 roundoff of roughly
    ulp(loss) / (2 * eps) in absolute terms, so entries whose analytic
    gradient is smaller than that noise floor (scaled by the 1e-4 target)
    cannot be compared informatively at this eps. Sampling is restricted
    to entries above the floor; the excluded count is reported.

    Returns:
        GradientCheckResult with the max relative error
        |analytic - fd| / max(|analytic|, |fd|, 1e-8) over sampled entries.
    """
    if terms not in ("reconstruction", "contrastive", "total"):
        raise ValueError(f"unknown loss terms selector {terms!r}")
    model64 = model.to_dtype(np.float64)
    batch = _as_batch(streamlines, model64.config.input_points, np.float64)
    batch3 = np.ascontiguousarray(batch.transpose(0, 2, 1))
    idx, y = _pairs_as_arrays(pairs)

    n_skipped = 0
    if idx.shape[0] > 0:
        z = model64.forward_encoder(batch3)
        delta = z[idx[:, 0]] - z[idx[:, 1]]
        dist = np.linalg.norm(delta, axis=1)
        near_kink = (y == 1) & (
            (np.abs(dist - margin) <= 100 * eps) | (dist <= 100 * eps)
        )
        n_skipped = int(np.count_nonzero(near_kink))
        if n_skipped:
            logger.info("gradient check: skipping %d pair(s) at the margin kink", n_skipped)
        idx, y = idx[~near_kink], y[~near_kink]

    model64.zero_grads()
    loss0, _, _ = _loss_and_grads(model64, batch3, idx, y, lam, margin, terms)
    analytic = {name: g.copy() for name, g in zip(
        [n for n, _ in model64.named_parameters()], model64._ordered_grads()
    )}

    def loss_value():
        return _loss_forward(model64, batch3, idx, y, lam, margin, terms, train=False)[0]

    fd_noise = np.finfo(np.float64).eps * max(1.0, abs(loss0)) / (2.0 * eps)
    min_grad = 10.0 * fd_noise / 1e-4

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = ""
    checked = 0
    below_floor = 0
    for name, param in model64.named_parameters():
        flat = param.reshape(-1)
        eligible = np.flatnonzero(np.abs(analytic[name].reshape(-1)) >= min_grad)
        below_floor += flat.size - eligible.size
        if eligible.size == 0:
            continue
        n_samples = min(samples_per_tensor, eligible.size)
        positions = rng.choice(eligible, size=n_samples, replace=False)
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + eps
            f_plus = loss_value()
            flat[pos] = original - eps
            f_minus = loss_value()
            flat[pos] = original
            fd = (f_plus - f_minus) / (2 * eps)
            a = analytic[name].reshape(-1)[pos]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, name
    return GradientCheckResult(
        max_rel_error=float(max_rel),
        n_parameters_checked=checked,
        n_pairs_skipped=n_skipped,
        n_below_noise_floor=below_floor,
        worst_tensor=worst,
    )
