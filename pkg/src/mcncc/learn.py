"""Siamese training of channel weights and domain projections.

The model scores a pair as the weighted per-channel NCC of its two
projected maps and is trained with a hinge loss over same-source labels
z in {-1, +1}:

    sum_pairs max(0, 1 - z * score + b)
        + alpha/2 * ||W||^2 + beta/2 * (||U||_F^2 + ||V||_F^2)

Everything is differentiable in closed form; the NCC gradient reuses
the forward quantities.  Note the correct gradient is

    dNCC/dx[j] = (y~[j] - x~[j] * NCC) / (|P| * (sigma_x + eps))

with a minus sign: the standardized value's derivative in the variance
is negative, and both the finite-difference check and the mean-shift /
scale-invariance orthogonality properties hold only for this form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .correlate import ChannelWeights
from .errors import DimensionMismatchError, McnccError, TrainingDivergedError
from .tensor import DEFAULT_EPSILON, SupportRegion, effective_mask
from .whiten import Projection, apply_projection


@dataclass(frozen=True)
class SiameseModel:
    proj_x: Projection
    proj_y: Projection
    weights: ChannelWeights
    alpha: float = 100.0
    beta: float = 1.0

    def __post_init__(self):
        if self.proj_x.k != self.proj_y.k:
            raise DimensionMismatchError(
                f"projections output {self.proj_x.k} and {self.proj_y.k} channels"
            )
        if len(self.weights) != self.proj_x.k:
            raise DimensionMismatchError(
                f"{len(self.weights)} weights for {self.proj_x.k} projected channels"
            )

    @classmethod
    def initial(
        cls,
        channels: int,
        alpha: float = 100.0,
        beta: float = 1.0,
        proj_x: Projection | None = None,
        proj_y: Projection | None = None,
    ) -> "SiameseModel":
        """Identity projections and uniform weights: scoring equals the
        unweighted multi-channel NCC, so "no learning" is a special case."""
        proj_x = proj_x or Projection.identity(channels, domain_tag="x")
        proj_y = proj_y or Projection.identity(channels, domain_tag="y")
        return cls(
            proj_x=proj_x,
            proj_y=proj_y,
            weights=ChannelWeights.uniform(proj_x.k),
            alpha=alpha,
            beta=beta,
        )


@dataclass(frozen=True)
class PairBatch:
    """Labelled map pairs; z = +1 for same source, -1 otherwise."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple(self.pairs)
        if not pairs:
            raise McnccError("pair batch must be nonempty")
        for x, y, z in pairs:
            if z not in (-1, 1):
                raise ValueError(f"labels must be +1 or -1, got {z!r}")
            if x.channels != y.channels or x.spatial_shape != y.spatial_shape:
                raise DimensionMismatchError("paired maps must share channels and shape")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def subset(self, indices) -> "PairBatch":
        return PairBatch(tuple(self.pairs[i] for i in indices))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    w_init: object = "uniform"  # "uniform" or an explicit weight vector
    freeze_weights: bool = False
    freeze_projections: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def ncc_gradient(
    x: np.ndarray,
    y: np.ndarray,
    region: SupportRegion,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """Gradient of NCC(x, y) with respect to x, zero outside the region.

    The gradient with respect to y follows by symmetry (swap arguments).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or region.shape != x.shape:
        raise DimensionMismatchError("x, y, and region must share one shape")
    mask = np.asarray(region.mask)
    xs = x[mask]
    ys = y[mask]
    g = _ncc_gradient_rows(xs[None, :], ys[None, :], epsilon)[0]
    out = np.zeros_like(x)
    out[mask] = g
    return out


def _standardized_rows(xs: np.ndarray, epsilon: float):
    """Centered/scaled rows, their scale denominators, and raw stds."""
    mu = xs.mean(axis=1, keepdims=True)
    sd = np.sqrt(np.maximum(xs.var(axis=1), 0.0))
    den = sd + epsilon
    with np.errstate(divide="ignore", invalid="ignore"):
        tilde = np.where(den[:, None] > 0, (xs - mu) / den[:, None], 0.0)
    return tilde, den, sd


def _ncc_gradient_rows(xs: np.ndarray, ys: np.ndarray, epsilon: float) -> np.ndarray:
    """Row-wise dNCC/dx for (C, n) sample matrices."""
    n = xs.shape[1]
    xt, denx, _ = _standardized_rows(xs, epsilon)
    yt, _, _ = _standardized_rows(ys, epsilon)
    nccs = (xt * yt).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = (yt - xt * nccs[:, None]) / (n * denx[:, None])
    return np.where(denx[:, None] > 0, g, 0.0)


def _pair_forward(x, y, model, epsilon):
    """Projected maps, joint region mask, per-channel NCCs, pair score."""
    px = apply_projection(x, model.proj_x)
    py = apply_projection(y, model.proj_y)
    region = SupportRegion.full(*px.spatial_shape)
    mask = effective_mask(px, region) & effective_mask(py, region)
    if int(mask.sum()) < 2:
        raise McnccError("fewer than 2 jointly valid pixels in a training pair")
    xs = px.values[:, mask]
    ys = py.values[:, mask]
    xt, denx, _ = _standardized_rows(xs, epsilon)
    yt, deny, _ = _standardized_rows(ys, epsilon)
    nccs = (xt * yt).mean(axis=1)
    score = float(model.weights.weights @ nccs)
    return mask, xs, ys, xt, yt, denx, deny, nccs, score


def loss_forward(batch: PairBatch, model: SiameseModel, epsilon: float = DEFAULT_EPSILON) -> float:
    """Hinge data term plus L2 regularizers on W, U, and V."""
    total = 0.0
    for x, y, z in batch:
        *_, score = _pair_forward(x, y, model, epsilon)
        total += max(0.0, 1.0 - z * score + model.weights.bias)
    total += 0.5 * model.alpha * float(np.sum(model.weights.weights**2))
    total += 0.5 * model.beta * (
        float(np.sum(model.proj_x.matrix**2)) + float(np.sum(model.proj_y.matrix**2))
    )
    return total


@dataclass(frozen=True)
class LossGradients:
    d_weights: np.ndarray
    d_bias: float
    d_proj_x: np.ndarray
    d_proj_y: np.ndarray
    loss: float


def loss_backward(
    batch: PairBatch, model: SiameseModel, epsilon: float = DEFAULT_EPSILON
) -> LossGradients:
    """Exact subgradients of :func:`loss_forward`.

    The hinge subgradient at the kink (margin exactly zero) is taken as
    zero; only strictly violated pairs contribute.
    """
    k = model.proj_x.k
    dw = np.zeros(k)
    db = 0.0
    du = np.zeros_like(model.proj_x.matrix)
    dv = np.zeros_like(model.proj_y.matrix)
    w = model.weights.weights
    loss = 0.0

    for x, y, z in batch:
        mask, xs, ys, xt, yt, denx, deny, nccs, score = _pair_forward(x, y, model, epsilon)
        margin = 1.0 - z * score + model.weights.bias
        loss += max(0.0, margin)
        if margin <= 0.0:
            continue
        n = xs.shape[1]
        dw += -z * nccs
        db += 1.0
        # Chain dNCC/d(projected pixel) through the linear projection.
        gx = np.where(denx[:, None] > 0, (yt - xt * nccs[:, None]) / (n * denx[:, None]), 0.0)
        gy = np.where(deny[:, None] > 0, (xt - yt * nccs[:, None]) / (n * deny[:, None]), 0.0)
        raw_x = x.values[:, mask] - model.proj_x.mean[:, None]
        raw_y = y.values[:, mask] - model.proj_y.mean[:, None]
        du += -z * (w[:, None] * gx) @ raw_x.T
        dv += -z * (w[:, None] * gy) @ raw_y.T

    dw += model.alpha * w
    du += model.beta * model.proj_x.matrix
    dv += model.beta * model.proj_y.matrix
    loss += 0.5 * model.alpha * float(np.sum(w**2))
    loss += 0.5 * model.beta * (
        float(np.sum(model.proj_x.matrix**2)) + float(np.sum(model.proj_y.matrix**2))
    )
    return LossGradients(d_weights=dw, d_bias=db, d_proj_x=du, d_proj_y=dv, loss=loss)


def _apply_update(model, grads, lr, cfg):
    weights = model.weights
    if not cfg.freeze_weights:
        weights = ChannelWeights(
            weights.weights - lr * grads.d_weights,
            bias=weights.bias - lr * grads.d_bias,
        )
    proj_x, proj_y = model.proj_x, model.proj_y
    if not cfg.freeze_projections:
        proj_x = Projection(
            proj_x.matrix - lr * grads.d_proj_x, proj_x.mean, domain_tag=proj_x.domain_tag
        )
        proj_y = Projection(
            proj_y.matrix - lr * grads.d_proj_y, proj_y.mean, domain_tag=proj_y.domain_tag
        )
    return replace(model, proj_x=proj_x, proj_y=proj_y, weights=weights)


def train(
    model: SiameseModel,
    data: PairBatch,
    cfg: TrainConfig,
    val_data: PairBatch | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> SiameseModel:
    """Deterministic mini-batch gradient descent.

    Batch order is shuffled by a generator seeded from the config; the
    model with the lowest validation loss seen (training loss when no
    validation split is given) is returned.  Covers the whole model
    ladder via the freeze flags: weights-only, fixed projections with
    learned weights, and joint fine-tuning.
    """
    if isinstance(cfg.w_init, (np.ndarray, list, tuple)):
        model = replace(model, weights=ChannelWeights(np.asarray(cfg.w_init, dtype=np.float64)))
    elif cfg.w_init == "uniform":
        model = replace(model, weights=ChannelWeights.uniform(model.proj_x.k))
    elif cfg.w_init != "keep":
        raise ValueError(f"w_init must be 'uniform', 'keep', or a vector, got {cfg.w_init!r}")

    monitor = val_data if val_data is not None else data
    best_model = model
    best_loss = loss_forward(monitor, model, epsilon)
    rng = np.random.default_rng(cfg.seed)
    step = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = data.subset(order[start : start + cfg.batch_size])
            grads = loss_backward(batch, model, epsilon)
            if not np.isfinite(grads.loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at update {step}", iteration=step
                )
            model = _apply_update(model, grads, cfg.learning_rate, cfg)
            step += 1
        epoch_loss = loss_forward(monitor, model, epsilon)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"validation loss became non-finite at update {step}", iteration=step
            )
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_model = model
    return best_model


def k_fold_splits(n_items: int, k: int = 10, seed: int = 0):
    """Deterministic k-fold index splits for cross-validated selection."""
    if k < 2 or n_items < k:
        raise ValueError(f"need 2 <= k <= n_items, got k={k}, n={n_items}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_items)
    folds = np.array_split(order, k)
    out = []
    for i in range(k):
        val = folds[i]
        trn = np.concatenate([folds[j] for j in range(k) if j != i])
        out.append((np.sort(trn), np.sort(val)))
    return out
