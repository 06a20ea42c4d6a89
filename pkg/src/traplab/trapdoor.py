"""Trigger sets, injection functions, and the adversarial trigger step.

Full-support blended triggers carry one image-shaped pattern per class;
patch triggers (five fixed squares per class) exist for the
trapdoor-detection ablation and are never optimized.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import save_image

__all__ = [
    "TrapdoorError",
    "TriggerSet",
    "PatchSquare",
    "PatchTriggerSpec",
    "init_triggers",
    "init_patch_triggers",
    "inject_blended",
    "inject_patch",
    "trigger_update_step",
]


class TrapdoorError(Exception):
    pass


@dataclass
class TriggerSet:
    """One trigger image per class plus the blend ratio.

    Mutated only by `trigger_update_step` inside the training loop;
    read-only everywhere else.
    """

    triggers: np.ndarray  # (C, H, W, Ch) float32 in [0, 1]
    alpha: float
    seed: int = 0

    def __post_init__(self):
        self.triggers = np.asarray(self.triggers, dtype=np.float32)
        if not 0.0 <= self.alpha <= 1.0:
            raise TrapdoorError(f"blend ratio must be in [0, 1], got {self.alpha}")
        if self.triggers.ndim != 4:
            raise TrapdoorError("triggers must be (classes, H, W, C)")
        if len(self.triggers) and (self.triggers.min() < 0 or self.triggers.max() > 1):
            raise TrapdoorError("trigger values must lie in [0, 1]")

    @property
    def n_classes(self):
        return len(self.triggers)

    def export_images(self, directory, prefix="trigger"):
        os.makedirs(directory, exist_ok=True)
        paths = []
        for y, pattern in enumerate(self.triggers):
            paths.append(save_image(os.path.join(directory, f"{prefix}_{y:03d}.pgm" if pattern.shape[-1] == 1 else f"{prefix}_{y:03d}.ppm"), pattern))
        return paths


def init_triggers(n_classes, image_shape, alpha, seed):
    """I.i.d. uniform [0, 1] triggers, one per class, derived from
    (seed, class) so each trigger is independently reproducible."""
    if not 0.0 <= alpha <= 1.0:
        raise TrapdoorError(f"blend ratio must be in [0, 1], got {alpha}")
    triggers = np.empty((n_classes,) + tuple(image_shape), dtype=np.float32)
    for y in range(n_classes):
        rng = np.random.default_rng([seed, 0x7219, y])
        triggers[y] = rng.uniform(0.0, 1.0, size=image_shape)
    return TriggerSet(triggers=triggers, alpha=alpha, seed=seed)


def inject_blended(x, trigger_set, y):
    """Blended injection (1 - alpha) x + alpha k_y; never mutates inputs.

    `y` may be a scalar class or a per-example label array matching a
    batch of images.
    """
    x = np.asarray(x, dtype=np.float32)
    alpha = trigger_set.alpha
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        yi = int(y)
        if not 0 <= yi < trigger_set.n_classes:
            raise TrapdoorError(f"label {yi} out of range")
        return (1.0 - alpha) * x + alpha * trigger_set.triggers[yi]
    labels = np.asarray(y, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= trigger_set.n_classes:
        raise TrapdoorError("label out of range")
    return (1.0 - alpha) * x + alpha * trigger_set.triggers[labels]


@dataclass
class PatchSquare:
    row: int
    col: int
    size: int
    mu: float
    sigma: float
    intensity: float  # realized draw from N(mu, sigma), clipped to [0, 1]


@dataclass
class PatchTriggerSpec:
    """Per-class scattered squares blended at a fixed ratio (never
    optimized during training)."""

    squares: list  # list (per class) of lists of PatchSquare
    alpha: float
    image_shape: tuple
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise TrapdoorError(f"blend ratio must be in [0, 1], got {self.alpha}")
        h, w = self.image_shape[0], self.image_shape[1]
        for per_class in self.squares:
            for sq in per_class:
                if sq.row < 0 or sq.col < 0 or sq.row + sq.size > h or sq.col + sq.size > w:
                    raise TrapdoorError(f"square at ({sq.row}, {sq.col}) size {sq.size} leaves the {h}x{w} image")

    @property
    def n_classes(self):
        return len(self.squares)


def init_patch_triggers(n_classes, image_shape, alpha, seed, n_squares=5, size=6):
    """Randomly scattered fixed squares; per-square intensity is drawn
    once from N(mu, sigma) with mu, sigma ~ U[0, 1], then clipped."""
    h, w = image_shape[0], image_shape[1]
    if size > h or size > w:
        raise TrapdoorError(f"square size {size} does not fit in {h}x{w}")
    squares = []
    for y in range(n_classes):
        rng = np.random.default_rng([seed, 0x9A7C4, y])
        per_class = []
        for _ in range(n_squares):
            row = int(rng.integers(0, h - size + 1))
            col = int(rng.integers(0, w - size + 1))
            mu = float(rng.uniform(0.0, 1.0))
            sig = float(rng.uniform(0.0, 1.0))
            intensity = float(np.clip(rng.normal(mu, sig), 0.0, 1.0))
            per_class.append(PatchSquare(row, col, size, mu, sig, intensity))
        squares.append(per_class)
    return PatchTriggerSpec(squares=squares, alpha=alpha, image_shape=tuple(image_shape), seed=seed)


def patch_trigger_images(spec):
    """Render the patch spec as (pattern, mask) arrays per class.

    Inside squares the pattern holds the square intensity and the mask is
    one; elsewhere both are zero. Injection uses
    x' = x outside, (1 - alpha) x + alpha intensity inside.
    """
    c = spec.n_classes
    h, w = spec.image_shape[0], spec.image_shape[1]
    ch = spec.image_shape[2] if len(spec.image_shape) > 2 else 1
    pattern = np.zeros((c, h, w, ch), dtype=np.float32)
    mask = np.zeros((c, h, w, 1), dtype=np.float32)
    for y, per_class in enumerate(spec.squares):
        for sq in per_class:
            pattern[y, sq.row : sq.row + sq.size, sq.col : sq.col + sq.size, :] = sq.intensity
            mask[y, sq.row : sq.row + sq.size, sq.col : sq.col + sq.size, :] = 1.0
    return pattern, mask


def inject_patch(x, spec, y):
    """Patch injection: pixels outside every square are untouched."""
    x = np.asarray(x, dtype=np.float32)
    pattern, mask = patch_trigger_images(spec)
    alpha = spec.alpha
    if np.isscalar(y) or np.asarray(y).ndim == 0:
        yi = int(y)
        if not 0 <= yi < spec.n_classes:
            raise TrapdoorError(f"label {yi} out of range")
        m, p = mask[yi], pattern[yi]
    else:
        labels = np.asarray(y, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= spec.n_classes:
            raise TrapdoorError("label out of range")
        m, p = mask[labels], pattern[labels]
    return x * (1.0 - m * alpha) + alpha * m * p


def trigger_update_step(trigger_set, gradient, step):
    """Signed-gradient descent on the triggers, then clip to [0, 1].

    Mutates and returns `trigger_set`. Coordinates with zero gradient are
    untouched (sign(0) = 0)."""
    gradient = np.asarray(gradient)
    if gradient.shape != trigger_set.triggers.shape:
        raise TrapdoorError(f"gradient shape {gradient.shape} != triggers {trigger_set.triggers.shape}")
    if not np.all(np.isfinite(gradient)):
        raise TrapdoorError("non-finite trigger gradient")
    updated = trigger_set.triggers - np.float32(step) * np.sign(gradient).astype(np.float32)
    trigger_set.triggers = np.clip(updated, 0.0, 1.0)
    return trigger_set
