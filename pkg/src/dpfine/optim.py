"""DP-SGD step machinery.

The gradient pipeline runs in a fixed order: per-example backward, then
per-example averaging over augmented copies, then per-example L2 clipping,
then noisy aggregation, then the masked parameter update. Noise with
per-coordinate standard deviation sigma * C is added to the SUM of clipped
gradients, and the sum is normalized by the EXPECTED batch size q * N
rather than the realized Poisson size, which is itself private.

The noise stream is a dedicated seeded generator advanced exactly
``model.num_params`` Gaussian draws per step, regardless of batch
composition or mask, so runs are reproducible and the stream position
never depends on private data.
"""

from dataclasses import dataclass, replace

import numpy as np

from dpfine import nn
from dpfine.errors import NumericFailure


@dataclass(frozen=True)
class ClipConfig:
    """L2 clipping bound C; math.inf disables clipping (non-private mode)."""

    clip_norm: float

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass(frozen=True)
class NoiseConfig:
    """Noise multiplier sigma (std of the noise is sigma * C) and stream seed."""

    noise_multiplier: float
    seed: int = 0

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")


@dataclass(frozen=True)
class StepConfig:
    learning_rate: float
    expected_batch_size: float
    augment_multiplicity: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.augment_multiplicity < 1:
            raise ValueError("augment_multiplicity must be >= 1")


@dataclass
class PerExampleGrads:
    """Per-example flattened gradient rows for one microbatch."""

    rows: np.ndarray
    clipped: bool = False
    clip_norm: float = None


@dataclass(frozen=True)
class EmaState:
    """Exponential moving average of the flattened parameter vector."""

    decay: float
    shadow: np.ndarray

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError(f"ema decay must be in [0, 1), got {self.decay}")


def poisson_sample(dataset_size, q, rng):
    """Indices of a Poisson-subsampled batch: each included with prob q."""
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    return np.flatnonzero(rng.random(dataset_size) < q)


def augmentation_average(grads_per_aug):
    """Mean over the K augmented-copy gradients of one example.

    Runs before clipping, so per-example sensitivity stays C.
    """
    grads_per_aug = np.asarray(grads_per_aug)
    if grads_per_aug.ndim != 2 or grads_per_aug.shape[0] == 0:
        raise ValueError(f"expected non-empty [K, d] matrix, got shape {grads_per_aug.shape}")
    return grads_per_aug.mean(axis=0)


def clip(g, clip_norm):
    """Scale g to norm at most clip_norm: g * min(1, C / ||g||)."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericFailure("cannot clip a non-finite gradient")
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm or norm == 0.0:
        return g.copy()
    return g * (clip_norm / norm)


def clip_rows(pe, clip_norm):
    """Clip every row of a PerExampleGrads batch; returns a clipped copy."""
    rows = pe.rows
    if rows.size and not np.all(np.isfinite(rows)):
        raise NumericFailure("cannot clip non-finite gradients")
    norms = np.sqrt(np.einsum("bd,bd->b", rows, rows))
    factors = np.ones_like(norms)
    np.divide(clip_norm, norms, out=factors, where=norms > clip_norm)
    return PerExampleGrads(rows * factors[:, None], clipped=True, clip_norm=clip_norm)


def noisy_aggregate(pe, clip_norm, noise_multiplier, expected_batch_size, noise):
    """(sum of clipped rows + sigma*C*noise) / B with B the expected size.

    ``noise`` is a standard-normal vector of row dimension, drawn by the
    caller from the dedicated noise stream. Refuses unclipped input.
    """
    if not pe.clipped:
        raise ValueError("noisy_aggregate requires clipped per-example gradients")
    if not expected_batch_size > 0:
        raise ValueError("expected_batch_size must be positive")
    total = pe.rows.sum(axis=0) if pe.rows.size else np.zeros(noise.shape[0])
    if noise_multiplier > 0:
        total = total + (noise_multiplier * clip_norm) * noise
    return total / expected_batch_size


def dp_sgd_step(model, x_aug, labels, mask, clip_cfg, noise_cfg, step_cfg, noise_rng):
    """One DP-SGD update; returns (model', diagnostics).

    x_aug has shape [B, K, ...input] (K augmented copies per selected
    example, copy 0 the identity); an empty batch still performs the
    noise-only update. Parameters outside the mask are bitwise unchanged.
    """
    d = model.num_params
    if mask.flat.shape != (d,):
        raise ValueError(f"mask length {mask.flat.shape} != model params {d}")
    trainable = mask.trainable_layers
    k = step_cfg.augment_multiplicity
    batch = x_aug.shape[0]

    if batch:
        flat_x = x_aug.reshape(batch * k, *x_aug.shape[2:])
        flat_labels = np.repeat(np.asarray(labels), k)
        rows, losses = nn.per_example_gradients(
            model, flat_x, flat_labels, trainable, return_losses=True, aug_k=k
        )
    else:
        _, d_sel = nn.param_layout(model, trainable)
        rows, losses = np.zeros((0, d_sel)), np.empty(0)

    pe = clip_rows(PerExampleGrads(rows), clip_cfg.clip_norm)

    # Exactly d draws per step: the stream position is independent of the
    # batch and of the fine-tuning strategy.
    noise_full = noise_rng.standard_normal(d)
    update = noisy_aggregate(
        pe,
        clip_cfg.clip_norm,
        noise_cfg.noise_multiplier,
        step_cfg.expected_batch_size,
        noise_full[mask.flat],
    )

    theta = nn.flatten_params(model, trainable)
    new_model = nn.set_params(model, theta - step_cfg.learning_rate * update, trainable)

    grad_norms = np.sqrt(np.einsum("bd,bd->b", rows, rows)) if batch else np.empty(0)
    diagnostics = {
        "batch_size": batch,
        "mean_loss": float(losses.mean()) if batch else 0.0,
        "mean_grad_norm": float(grad_norms.mean()) if batch else 0.0,
        "clipped_fraction": float((grad_norms > clip_cfg.clip_norm).mean()) if batch else 0.0,
    }
    return new_model, diagnostics


def ema_init(model, decay):
    return EmaState(decay, nn.flatten_params(model))


def ema_update(ema, theta):
    """shadow <- mu * shadow + (1 - mu) * theta."""
    theta = np.asarray(theta)
    if theta.shape != ema.shadow.shape:
        raise ValueError(f"parameter vector {theta.shape} != shadow {ema.shadow.shape}")
    return replace(ema, shadow=ema.decay * ema.shadow + (1.0 - ema.decay) * theta)


def ema_model(ema, model):
    """Model with parameters replaced by the EMA shadow."""
    return nn.set_params(model, ema.shadow)
