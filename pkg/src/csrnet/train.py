"""Euclidean loss, nine-patch augmentation, plain SGD and the seeded training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model
from .errors import DivergenceError
from .gtgen import as_points, downsample_density_map
from .tensor import DTYPE, ConvWeights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-6
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables checkpoints
    target_downsample: int = 8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainingSample:
    image: np.ndarray  # (1, C, h, w)
    target: np.ndarray  # (h // f, w // f) density at network-output resolution


def euclidean_loss(pred: np.ndarray, targets: Sequence[np.ndarray]) -> tuple[float, np.ndarray]:
    """L = 1/(2N) * sum_i ||pred_i - target_i||^2 and its gradient w.r.t. pred."""
    pred = np.asarray(pred)
    n = pred.shape[0]
    if n < 1 or len(targets) != n:
        raise ValueError(f"{len(targets)} targets for a batch of {n}")
    # targets are 2-D maps; predictions carry a singleton channel axis
    target = np.stack([np.asarray(t, dtype=np.float64) for t in targets])
    if target.shape != (n, *pred.shape[-2:]) or pred.shape[1] != 1:
        raise ValueError(f"target shape {target.shape[1:]} does not match prediction {pred.shape[1:]}")
    diff = pred.astype(np.float64) - target[:, None]
    loss = float((diff ** 2).sum() / (2 * n))
    return loss, (diff / n).astype(pred.dtype)


# --- augmentation -------------------------------------------------------------

@dataclass
class Patch:
    image: np.ndarray  # (1, C, ph, pw), already flipped when mirrored
    source_points: np.ndarray  # (n, 2) patch coordinates before any flip
    density: Optional[np.ndarray] = None  # (ph, pw) full-resolution crop
    origin: tuple = (0, 0)  # (y0, x0) in the source image
    mirrored: bool = False

    @property
    def points(self) -> np.ndarray:
        if not self.mirrored:
            return self.source_points
        pts = self.source_points.copy()
        pts[:, 0] = (self.image.shape[-1] - 1) - pts[:, 0]
        return pts


def mirror_patch(patch: Patch) -> Patch:
    """Horizontal flip; applying it twice restores the patch exactly."""
    density = None if patch.density is None else patch.density[:, ::-1].copy()
    return Patch(patch.image[..., ::-1].copy(), patch.source_points, density, patch.origin,
                 not patch.mirrored)


def crop_patch(image, points, y0, x0, ph, pw, density=None) -> Patch:
    pts = as_points(points)
    # half-open ownership: x0 <= x < x0 + pw
    inside = ((pts[:, 0] >= x0) & (pts[:, 0] < x0 + pw)
              & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + ph))
    local = pts[inside] - np.array([x0, y0], dtype=np.float64)
    crop = image[..., y0:y0 + ph, x0:x0 + pw].copy()
    dcrop = None if density is None else density[y0:y0 + ph, x0:x0 + pw].copy()
    return Patch(crop, local, dcrop, (y0, x0))


def patch_origins(h: int, w: int, seed: int) -> list[tuple[int, int]]:
    """Four quarter origins followed by five uniformly random ones."""
    ph, pw = h // 2, w // 2
    quarters = [(0, 0), (0, pw), (ph, 0), (ph, pw)]
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - ph + 1, size=5)
    xs = rng.integers(0, w - pw + 1, size=5)
    return quarters + [(int(y), int(x)) for y, x in zip(ys, xs)]


def augment_nine_patches(image: np.ndarray, points, seed: int,
                         density: Optional[np.ndarray] = None) -> list[Patch]:
    """9 half-size crops (4 quarters + 5 random) and their mirrors: 18 patches.

    When `density` is given it is cropped alongside the image.
    """
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"image {h}x{w} is too small to halve")
    if density is not None and density.shape != (h, w):
        raise ValueError(f"density shape {density.shape} != image shape {(h, w)}")
    ph, pw = h // 2, w // 2
    patches = [crop_patch(image, points, y0, x0, ph, pw, density)
               for y0, x0 in patch_origins(h, w, seed)]
    return patches + [mirror_patch(p) for p in patches]


def make_sample(image: np.ndarray, density: np.ndarray, factor: int) -> TrainingSample:
    """Crop to a multiple of `factor` and block-sum the density to output resolution."""
    h, w = density.shape
    hc, wc = (h // factor) * factor, (w // factor) * factor
    if hc == 0 or wc == 0:
        raise ValueError(f"{h}x{w} patch is smaller than the output stride {factor}")
    img = np.ascontiguousarray(image[..., :hc, :wc], dtype=DTYPE)
    return TrainingSample(img, downsample_density_map(density[:hc, :wc], factor))


def samples_from_scene(image, points, density, seed: int, factor: int = 8) -> list[TrainingSample]:
    return [make_sample(p.image, p.density, factor)
            for p in augment_nine_patches(image, points, seed, density)]


# --- optimisation ---------------------------------------------------------------

def sgd_step(params: model.ParamStore, grads: model.ParamStore, lr: float) -> model.ParamStore:
    """theta <- theta - lr * grad for every kernel and bias (no momentum, no decay)."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient stores differ in layer count")
    updated = []
    for idx, (w, g) in enumerate(zip(params.layers, grads.layers)):
        if w.kernel.shape != g.kernel.shape or w.bias.shape != g.bias.shape:
            raise ValueError(f"layer {idx}: gradient shape does not match parameters")
        if not (np.all(np.isfinite(g.kernel)) and np.all(np.isfinite(g.bias))):
            raise DivergenceError(f"non-finite gradient in layer {idx}")
        updated.append(ConvWeights((w.kernel - lr * g.kernel).astype(w.kernel.dtype),
                                   (w.bias - lr * g.bias).astype(w.bias.dtype)))
    return model.ParamStore(updated)


def _accumulate(total: Optional[model.ParamStore], grads: model.ParamStore):
    if total is None:
        return grads
    return model.ParamStore([ConvWeights(a.kernel + b.kernel, a.bias + b.bias)
                             for a, b in zip(total.layers, grads.layers)])


@dataclass
class TrainResult:
    params: model.ParamStore
    losses: list = field(default_factory=list)  # mean per-sample loss per epoch

    def __iter__(self):
        return iter((self.params, self.losses))


def train_loop(config: model.NetworkConfig, tc: TrainConfig, dataset: Sequence[TrainingSample],
               params: Optional[model.ParamStore] = None,
               checkpoint_prefix: Optional[Path] = None) -> TrainResult:
    """Seeded SGD over `dataset`; returns final params and the per-epoch loss log.

    Sample order is reshuffled each epoch from a generator seeded by tc.seed.
    With `checkpoint_prefix`, a tab-separated loss log is written to
    `<prefix>.log` and weights to `<prefix>.epochNNNN.csrw` every
    tc.checkpoint_every epochs.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if params is None:
        params = model.init_weights(config, tc.seed)
    params.check(config)
    rng = np.random.default_rng([tc.seed, 1])
    losses: list[float] = []

    log_path = None
    if checkpoint_prefix is not None:
        checkpoint_prefix = Path(checkpoint_prefix)
        log_path = checkpoint_prefix.with_name(checkpoint_prefix.name + ".log")
        log_path.write_text("")

    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            total = None
            for idx in batch:
                sample = dataset[idx]
                pred, tape = model.forward(config, params, sample.image, keep_intermediates=True)
                loss, grad = euclidean_loss(pred, [sample.target])
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, sample {idx}")
                epoch_loss += loss
                total = _accumulate(total, model.backward(tape, grad / len(batch)))
            try:
                params = sgd_step(params, total, tc.learning_rate)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch starting with sample {batch[0]}") from None
        mean_loss = epoch_loss / len(dataset)
        losses.append(mean_loss)
        log.debug("epoch %d mean loss %.6g", epoch, mean_loss)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(f"{epoch}\t{mean_loss!r}\n")
            if tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
                model.save_weights(params, checkpoint_prefix.with_name(
                    f"{checkpoint_prefix.name}.epoch{epoch:04d}.csrw"))
    return TrainResult(params, losses)
