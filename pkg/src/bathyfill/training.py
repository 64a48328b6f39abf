"""Training and inference for the depth network.

Supervision comes from gappy depth rasters: the loss only ever sees valid
pixels, so the same orthoimage can be used for training and for predicting
the gaps it could not supervise. Preprocessing (glint removal, [0,1]
normalization) and augmentation (right-angle rotations, flips) apply one
rigid transform to image, depth, and mask alike.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import loss as lossmod
from . import network as net
from .rasters import (
    NODATA_DEFAULT,
    DepthRaster,
    NormalizationSpec,
    RgbRaster,
    check_coregistered,
    denormalize_depth,
    normalize_depth,
    normalize_image,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Unusable dataset or a non-finite gradient (named parameter)."""


@dataclass
class TrainConfig:
    lr0: float = 2.5e-4
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    rotations: bool = True
    flips: bool = True
    glint_threshold: int = 235
    norm: NormalizationSpec = field(default_factory=NormalizationSpec)
    loss: str = "bsw"  # or "rmse"
    bsw: lossmod.BswConfig = field(default_factory=lossmod.BswConfig)
    patch_px: int = 32

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in ("bsw", "rmse"):
            raise ValueError(f"loss must be 'bsw' or 'rmse', got {self.loss!r}")
        if not 0 < self.glint_threshold <= 255:
            raise ValueError(f"glint_threshold must be in (0, 255], got {self.glint_threshold}")


# -- preprocessing ------------------------------------------------------------------


def _shift2d(arr, dy, dx):
    out = np.zeros_like(arr)
    src_y = slice(max(0, -dy), arr.shape[0] - max(0, dy))
    src_x = slice(max(0, -dx), arr.shape[1] - max(0, dx))
    dst_y = slice(max(0, dy), arr.shape[0] - max(0, -dy))
    dst_x = slice(max(0, dx), arr.shape[1] - max(0, -dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def remove_glint(image: RgbRaster, threshold) -> RgbRaster:
    """Replace over-threshold pixels by the mean of their non-flagged 8-neighbors.

    One pass: luminance (band mean) above ``threshold`` flags a pixel;
    flagged-only neighborhoods fall back to the mean of all unflagged
    pixels (or the global mean if the whole patch is flagged).
    """
    if not 0 < threshold <= 255:
        raise ValueError(f"glint threshold must be in (0, 255], got {threshold}")
    pixels = image.pixels.astype(np.float64)
    lum = pixels.mean(axis=2)
    flagged = lum > threshold
    if not flagged.any():
        return image.copy()
    ok = (~flagged).astype(np.float64)
    weighted = pixels * ok[:, :, None]
    neighbor_n = np.zeros_like(ok)
    neighbor_sum = np.zeros_like(pixels)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neighbor_n += _shift2d(ok, dy, dx)
            neighbor_sum += _shift2d(weighted, dy, dx)
    if flagged.all():
        fallback = pixels.reshape(-1, 3).mean(axis=0)
    else:
        fallback = pixels[~flagged].mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_neighbors = neighbor_sum / neighbor_n[:, :, None]
    replacement = np.where(neighbor_n[:, :, None] > 0, mean_neighbors, fallback)
    out = np.where(flagged[:, :, None], replacement, pixels)
    return RgbRaster(np.clip(np.rint(out), 0, 255).astype(np.uint8), gsd=image.gsd)


def _draw_rigid(rng, rotations, flips):
    k = int(rng.integers(0, 4)) if rotations else 0
    flip_v = bool(rng.integers(0, 2)) if flips else False
    flip_h = bool(rng.integers(0, 2)) if flips else False
    return k, flip_v, flip_h


def _apply_rigid(grid, k, flip_v, flip_h):
    if k:
        grid = np.rot90(grid, k, axes=(0, 1))
    if flip_v:
        grid = grid[::-1]
    if flip_h:
        grid = grid[:, ::-1]
    return np.ascontiguousarray(grid)


def augment(image, depth, rng, rotations=True, flips=True):
    """Apply one random rigid transform (k*90 degree rotation, flips) to both grids."""
    image = np.asarray(image)
    depth = np.asarray(depth)
    if image.shape[:2] != depth.shape:
        raise ValueError(f"image {image.shape} and depth {depth.shape} are not coregistered")
    if rotations and image.shape[0] != image.shape[1]:
        raise ValueError("rotation augmentation requires square patches")
    k, flip_v, flip_h = _draw_rigid(rng, rotations, flips)
    return _apply_rigid(image, k, flip_v, flip_h), _apply_rigid(depth, k, flip_v, flip_h)


# -- optimization -------------------------------------------------------------------


def cosine_lr(t, epochs, lr0):
    """Cosine annealing from lr0 at t=0 to 0 at t=epochs."""
    return lr0 * (1.0 + np.cos(np.pi * t / epochs)) / 2.0


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads_or_state, state=None, lr=1e-3):
    """Bias-corrected Adam update; consumes and clears parameter gradients.

    Call as ``adam_step(params, state, lr=...)`` to read each Tensor's
    accumulated ``grad``, or pass an explicit name -> array gradient dict.
    """
    if isinstance(grads_or_state, AdamState):
        state = grads_or_state
        grads = {name: p.grad for name, p in params.items()}
    else:
        grads = grads_or_state
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        m_hat = state.m[name] / (1 - state.beta1**t)
        v_hat = state.v[name] / (1 - state.beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
        p.zero_grad()


# -- training loop ------------------------------------------------------------------


def _patch_loss(pred2d, target, mask, cfg: TrainConfig):
    if cfg.loss == "bsw":
        return lossmod.bsw_rmse(pred2d, target, mask, cfg.bsw)
    return lossmod.masked_rmse(pred2d, target, mask)


def prepare_patches(dataset, cfg: TrainConfig, nodata=NODATA_DEFAULT):
    """Glint-remove, normalize, and mask raw patches; drops all-gap patches."""
    images, depths, masks = [], [], []
    for i, pair in enumerate(dataset):
        mask = (pair.depth != nodata).astype(np.uint8)
        if mask.sum() == 0:
            logger.warning("patch %d has no valid depths; skipping", i)
            continue
        cleaned = remove_glint(RgbRaster(pair.image), cfg.glint_threshold)
        images.append(normalize_image(cleaned.pixels, cfg.norm))
        depths.append(normalize_depth(pair.depth, cfg.norm, nodata=nodata))
        masks.append(mask)
    if not images:
        raise TrainingError("every patch in the dataset is all-gap; nothing to train on")
    return images, depths, masks


def fit_patches(images, depths, masks, net_cfg: net.NetworkConfig, cfg: TrainConfig, params=None):
    """Optimize network parameters on normalized (image, depth, mask) patches.

    Returns (params, trace) where trace rows are (epoch, mean loss, lr).
    Depth values under mask == 0 are never read by the loss; augmentation
    applies one rigid transform per patch to image, depth, and mask alike.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        params = net.init_params(net_cfg, seed=seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    augment_rng = np.random.default_rng(seeds[2])
    state = AdamState()
    trace = []
    dtype = net_cfg.np_dtype
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = range(start, min(start + cfg.batch_size, n))
            losses = []
            for i in batch:
                img, dep, msk = np.asarray(images[i]), depths[i], masks[i]
                if cfg.augment:
                    if cfg.rotations and img.shape[0] != img.shape[1]:
                        raise ValueError("rotation augmentation requires square patches")
                    move = _draw_rigid(augment_rng, cfg.rotations, cfg.flips)
                    img = _apply_rigid(img, *move)
                    dep = _apply_rigid(dep, *move)
                    msk = _apply_rigid(msk, *move)
                x = np.ascontiguousarray(np.moveaxis(img, 2, 0)).astype(dtype)
                pred = net.forward(params, net_cfg, Tensor(x), training=True, rng=dropout_rng)
                losses.append(_patch_loss(pred.reshape(pred.shape[1], pred.shape[2]), dep, msk, cfg))
            total = losses[0] if len(losses) == 1 else _mean_losses(losses)
            total.backward()
            epoch_loss += float(total.data) * len(losses)
            adam_step(params, state, lr=lr)
        trace.append((epoch, epoch_loss / n, float(lr)))
    return params, trace


def _mean_losses(losses):
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses))


def train(dataset, net_cfg: net.NetworkConfig, cfg: TrainConfig, nodata=NODATA_DEFAULT):
    """Full pipeline on raw patches: preprocess then fit. See ``fit_patches``."""
    images, depths, masks = prepare_patches(dataset, cfg, nodata=nodata)
    return fit_patches(images, depths, masks, net_cfg, cfg)


def write_loss_trace(trace, path):
    with open(path, "w") as fh:
        fh.write("epoch,loss,lr\n")
        for epoch, value, lr in trace:
            fh.write(f"{epoch},{value!r},{lr!r}\n")


# -- inference ----------------------------------------------------------------------


def predict_raster(params, net_cfg: net.NetworkConfig, image: RgbRaster, cfg: TrainConfig) -> DepthRaster:
    """Whole prediction: tile, infer, stitch, denormalize. Output has no gaps.

    Edges are reflection-padded up to a patch multiple and cropped after
    reassembly; predictions are capped at the water surface (depth <= 0).
    """
    patch = cfg.patch_px
    cleaned = remove_glint(image, cfg.glint_threshold)
    pixels = normalize_image(cleaned.pixels, cfg.norm)
    h, w = image.height, image.width
    pad_h = (-h) % patch
    pad_w = (-w) % patch
    padded = np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    out = np.zeros(padded.shape[:2], dtype=np.float64)
    dtype = net_cfg.np_dtype
    for r in range(0, padded.shape[0], patch):
        for c in range(0, padded.shape[1], patch):
            tile = np.ascontiguousarray(np.moveaxis(padded[r : r + patch, c : c + patch], 2, 0))
            pred = net.forward(params, net_cfg, Tensor(tile.astype(dtype)), training=False)
            out[r : r + patch, c : c + patch] = pred.data[0]
    depths = denormalize_depth(out[:h, :w], cfg.norm)
    return DepthRaster(np.minimum(depths, 0.0), gsd=image.gsd)


def combine_prediction(sfm_dsm: DepthRaster, predicted_dsm: DepthRaster) -> DepthRaster:
    """Keep measured depths; fill only the gaps from the prediction."""
    check_coregistered(sfm_dsm, predicted_dsm)
    values = np.where(sfm_dsm.values == sfm_dsm.nodata, predicted_dsm.values, sfm_dsm.values)
    return DepthRaster(values, gsd=sfm_dsm.gsd, nodata=sfm_dsm.nodata)


# -- estimator facade ---------------------------------------------------------------


class DepthRegressor(BaseEstimator, RegressorMixin):
    """Image-patch to depth-patch regressor with the scikit-learn protocol.

    ``fit`` expects X of shape (n, 3, p, p) in normalized [0, 1] units and
    y of shape (n, p, p) normalized depths with NaN marking gaps; ``predict``
    returns (n, p, p) normalized depths. Raster-level workflows (glint
    removal, tiling, unit conversion) live in the functional API.
    """

    def __init__(self, base_filters=8, depth=4, num_swin_blocks=3, num_heads=8,
                 window_size=4, mlp_ratio=4, cross_attention=True, dropout=0.1,
                 loss="bsw", lr0=1e-3, epochs=30, batch_size=4, augment=False, seed=0):
        self.base_filters = base_filters
        self.depth = depth
        self.num_swin_blocks = num_swin_blocks
        self.num_heads = num_heads
        self.window_size = window_size
        self.mlp_ratio = mlp_ratio
        self.cross_attention = cross_attention
        self.dropout = dropout
        self.loss = loss
        self.lr0 = lr0
        self.epochs = epochs
        self.batch_size = batch_size
        self.augment = augment
        self.seed = seed

    def _configs(self):
        net_cfg = net.NetworkConfig(
            base_filters=self.base_filters,
            depth=self.depth,
            num_swin_blocks=self.num_swin_blocks,
            num_heads=self.num_heads,
            window_size=self.window_size,
            mlp_ratio=self.mlp_ratio,
            cross_attention=self.cross_attention,
            dropout=self.dropout,
        )
        train_cfg = TrainConfig(
            lr0=self.lr0,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            augment=self.augment,
            loss=self.loss,
        )
        return net_cfg, train_cfg

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ValueError(f"X must be (n, 3, p, p), got {X.shape}")
        if y.shape != (X.shape[0], X.shape[2], X.shape[3]):
            raise ValueError(f"y must be (n, p, p) matching X, got {y.shape}")
        net_cfg, train_cfg = self._configs()
        images = [np.moveaxis(X[i], 0, 2) for i in range(X.shape[0])]
        masks = [(~np.isnan(y[i])).astype(np.uint8) for i in range(y.shape[0])]
        depths = [np.nan_to_num(y[i], nan=0.0) for i in range(y.shape[0])]
        if all(m.sum() == 0 for m in masks):
            raise TrainingError("y has no finite depths at all")
        self.params_, self.loss_trace_ = fit_patches(images, depths, masks, net_cfg, train_cfg)
        self.net_config_ = net_cfg
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ValueError(f"X must be (n, 3, p, p), got {X.shape}")
        dtype = self.net_config_.np_dtype
        out = np.empty((X.shape[0], X.shape[2], X.shape[3]))
        for i in range(X.shape[0]):
            pred = net.forward(self.params_, self.net_config_, Tensor(X[i].astype(dtype)), training=False)
            out[i] = pred.data[0]
        return out
