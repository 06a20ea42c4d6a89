"""Datasets: synthetic identities with exact densities, folder ingestion,
private/public splits, and the random augmentation pipeline.

The synthetic generator draws each class from an isotropic Gaussian around
a smooth random base pattern. Training-path images are clipped to [0, 1];
the density oracle reports unclipped densities so distribution-level
checks are exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DataError",
    "LabeledDataset",
    "DensityOracle",
    "AugmentationSpec",
    "AugmentDraw",
    "gen_synthetic_identities",
    "load_image_folder",
    "save_image",
    "load_image",
    "split_private_public",
    "augment",
    "augmentation_grid",
    "draw_augmentation",
    "apply_augmentation",
]

ROLES = ("private-train", "private-test", "public-aux", "all")


class DataError(Exception):
    pass


@dataclass
class LabeledDataset:
    """Images in [0,1] with integer labels and a split-role tag.

    Datasets are immutable after construction and safe to share across
    workers. `indices` records positions in the source dataset so split
    disjointness stays checkable; `class_ids` maps dense labels back to
    source class ids after a remapping split.
    """

    images: np.ndarray
    labels: np.ndarray
    role: str = "all"
    indices: np.ndarray | None = None
    class_ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels length mismatch")
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}")
        if len(self.images):
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < 0.0 or hi > 1.0:
                raise DataError(f"image values outside [0, 1]: [{lo}, {hi}]")
            if self.labels.min() < 0:
                raise DataError("negative label")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        if self.class_ids is not None:
            return len(self.class_ids)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx, role=None):
        idx = np.asarray(idx)
        return LabeledDataset(
            self.images[idx],
            self.labels[idx],
            role or self.role,
            indices=self.indices[idx] if self.indices is not None else idx.copy(),
            class_ids=self.class_ids,
        )

    def manifest(self, seed=None):
        classes, counts = np.unique(self.labels, return_counts=True)
        return {
            "classes": classes.tolist(),
            "counts": counts.tolist(),
            "roles": self.role,
            "seed": seed,
        }


def _smooth_pattern(rng, height, width, channels, smoothness):
    """Low-pass filtered white noise, standardized to zero mean, unit std."""
    noise = rng.normal(size=(height, width, channels))
    if smoothness > 0:
        radius = max(1, int(np.ceil(3 * smoothness)))
        taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / smoothness) ** 2)
        taps /= taps.sum()
        pad = radius
        out = np.pad(noise, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        out = np.apply_along_axis(lambda v: np.convolve(v, taps, mode="valid"), 0, out)
        out = np.apply_along_axis(lambda v: np.convolve(v, taps, mode="valid"), 1, out)
        noise = out
    noise = noise - noise.mean()
    std = noise.std()
    if std < 1e-12:
        raise DataError("degenerate smooth pattern (zero variance)")
    return noise / std


@dataclass
class DensityOracle:
    """Exact log-densities for the synthetic Gaussian-mixture task.

    Per class y the law is N(mu_y, sigma^2 I) over flattened images; the
    marginal mixes classes by `prior`. Densities are evaluated on
    unclipped real-valued samples.
    """

    means: np.ndarray  # (C, H, W, Ch) float64, unclipped
    sigma: float
    prior: np.ndarray
    seed: int = 0
    class_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.sigma <= 0:
            raise DataError("sigma must be positive")
        if abs(self.prior.sum() - 1.0) > 1e-9:
            raise DataError("class prior must sum to 1")
        if self.class_ids is None:
            self.class_ids = np.arange(len(self.means))

    @property
    def n_classes(self):
        return len(self.means)

    @property
    def dim(self):
        return int(np.prod(self.means.shape[1:]))

    def _flat_means(self):
        return self.means.reshape(self.n_classes, -1)

    @staticmethod
    def _gauss_logpdf(x_flat, means_flat, sigma):
        d = x_flat.shape[1]
        sq = (
            (x_flat * x_flat).sum(axis=1)[:, None]
            - 2.0 * x_flat @ means_flat.T
            + (means_flat * means_flat).sum(axis=1)[None, :]
        )
        return -0.5 * d * np.log(2.0 * np.pi * sigma * sigma) - sq / (2.0 * sigma * sigma)

    def log_prob_class(self, x, y):
        """log p(x | y) for a batch of images."""
        x_flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        mu = self._flat_means()[int(y)][None, :]
        return self._gauss_logpdf(x_flat, mu, self.sigma)[:, 0]

    def log_prob(self, x):
        """log p(x) under the class mixture."""
        x_flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        comp = self._gauss_logpdf(x_flat, self._flat_means(), self.sigma) + np.log(self.prior)[None, :]
        return _logsumexp(comp, axis=1)

    def log_prob_poisoned(self, x, triggers, alpha, trigger_prior=None):
        """log density of the blended-trigger mixture at x.

        The poisoned law is (1 - alpha) X + alpha k_Y with X from the
        benign mixture and Y drawn from `trigger_prior` (uniform by
        default), giving Gaussian components centered at
        (1 - alpha) mu_c + alpha k_y with scale (1 - alpha) sigma.
        """
        triggers = np.asarray(triggers, dtype=np.float64)
        n_trig = len(triggers)
        if trigger_prior is None:
            trigger_prior = np.full(n_trig, 1.0 / n_trig)
        x_flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        shrink = 1.0 - alpha
        mu = shrink * self._flat_means()[:, None, :] + alpha * triggers.reshape(n_trig, -1)[None, :, :]
        mu = mu.reshape(self.n_classes * n_trig, -1)
        weights = (self.prior[:, None] * np.asarray(trigger_prior)[None, :]).reshape(-1)
        if alpha >= 1.0:
            # degenerate: point masses at the triggers; not a density
            raise DataError("poisoned density undefined at alpha = 1")
        comp = self._gauss_logpdf(x_flat, mu, shrink * self.sigma) + np.log(weights)[None, :]
        return _logsumexp(comp, axis=1)

    def sample_class(self, y, n, rng):
        """Unclipped samples from p(X | y)."""
        mu = self.means[int(y)]
        return mu[None] + self.sigma * rng.normal(size=(n,) + mu.shape)

    def sample(self, n, rng):
        """Unclipped samples from the marginal; returns (x, labels)."""
        labels = rng.choice(self.n_classes, size=n, p=self.prior)
        x = self.means[labels] + self.sigma * rng.normal(size=(n,) + self.means.shape[1:])
        return x, labels

    def restrict(self, classes):
        """Sub-oracle over the listed dense class indices, uniform prior."""
        classes = np.asarray(classes, dtype=np.int64)
        return DensityOracle(
            means=self.means[classes],
            sigma=self.sigma,
            prior=np.full(len(classes), 1.0 / len(classes)),
            seed=self.seed,
            class_ids=self.class_ids[classes],
        )


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def gen_synthetic_identities(
    n_classes,
    per_class,
    height=28,
    width=28,
    channels=1,
    sigma=0.1,
    smoothness=2.0,
    seed=0,
    amplitude=0.15,
):
    """Synthetic identity dataset plus its exact density oracle.

    Each class mean is 0.5 + amplitude * (smooth standardized noise),
    derived from (seed, class) so classes are reproducible independently.
    Returned images are clipped to [0, 1]; the oracle keeps the exact
    unclipped law.
    """
    if n_classes <= 0 or per_class <= 0 or height <= 0 or width <= 0 or channels <= 0:
        raise DataError("counts and dimensions must be positive")
    if sigma <= 0:
        raise DataError("sigma must be positive")
    means = np.empty((n_classes, height, width, channels), dtype=np.float64)
    for y in range(n_classes):
        class_rng = np.random.default_rng([seed, y])
        means[y] = 0.5 + amplitude * _smooth_pattern(class_rng, height, width, channels, smoothness)
    oracle = DensityOracle(means=means, sigma=sigma, prior=np.full(n_classes, 1.0 / n_classes), seed=seed)
    sample_rng = np.random.default_rng([seed, 0x5A17])
    images = np.empty((n_classes * per_class, height, width, channels), dtype=np.float32)
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for y in range(n_classes):
        raw = oracle.sample_class(y, per_class, sample_rng)
        images[y * per_class : (y + 1) * per_class] = np.clip(raw, 0.0, 1.0).astype(np.float32)
        labels[y * per_class : (y + 1) * per_class] = y
    dataset = LabeledDataset(images, labels, role="all", indices=np.arange(len(images)))
    return dataset, oracle


# -- PGM / PPM ---------------------------------------------------------------


def _read_pnm_header(fh, path):
    def token():
        out = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise DataError(f"{path}: truncated header")
            if ch in b" \t\r\n":
                if out:
                    return out
                continue
            if ch == b"#":
                while ch not in b"\r\n":
                    ch = fh.read(1)
                    if not ch:
                        raise DataError(f"{path}: truncated header")
                continue
            out += ch

    magic = fh.read(2)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r} (want binary P5/P6)")
    width = int(token())
    height = int(token())
    maxval = int(token())
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (want 255)")
    return magic, width, height


def load_image(path):
    """Read a binary PGM (P5) or PPM (P6) image into (H, W, C) in [0, 1]."""
    with open(path, "rb") as fh:
        magic, width, height = _read_pnm_header(fh, path)
        channels = 1 if magic == b"P5" else 3
        count = width * height * channels
        raw = fh.read(count)
        if len(raw) != count:
            raise DataError(f"{path}: truncated pixel data ({len(raw)} of {count} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float32) / 255.0


def save_image(path, image):
    """Write an (H, W, 1) or (H, W, 3) float image in [0, 1] as PGM/PPM."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise DataError(f"cannot save image with {c} channels")
    magic = b"P5" if c == 1 else b"P6"
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())
    return path


def load_image_folder(path):
    """Load a directory of per-class subfolders of PGM/PPM images.

    Labels follow lexicographic subfolder order; image shapes must agree.
    """
    classes = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise DataError(f"{path}: no class subfolders")
    images, labels = [], []
    shape = None
    for label, cls in enumerate(classes):
        folder = os.path.join(path, cls)
        files = sorted(f for f in os.listdir(folder) if f.lower().endswith((".pgm", ".ppm")))
        for fname in files:
            img = load_image(os.path.join(folder, fname))
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataError(f"{os.path.join(folder, fname)}: shape {img.shape} != {shape}")
            images.append(img)
            labels.append(label)
    if not images:
        raise DataError(f"{path}: no images found")
    return LabeledDataset(np.stack(images), np.asarray(labels), role="all", indices=np.arange(len(images)))


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


# -- splits -------------------------------------------------------------------


def split_private_public(dataset, private_classes, public_classes, seed, test_fraction=0.2):
    """Split into (private-train, private-test, public-aux).

    Private and public class sets must be disjoint; the private train/test
    split is stratified per class. Private labels are remapped to dense
    0..k-1 (original ids recorded in `class_ids`); aux keeps raw labels.
    """
    private_classes = sorted(int(c) for c in private_classes)
    public_classes = sorted(int(c) for c in public_classes)
    if set(private_classes) & set(public_classes):
        raise DataError("private and public class sets overlap")
    rng = np.random.default_rng([seed, 0x5B117])
    train_idx, test_idx = [], []
    for cls in private_classes:
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) == 0:
            raise DataError(f"private class {cls} has no samples")
        perm = rng.permutation(len(idx))
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(idx[perm[:n_test]])
        train_idx.extend(idx[perm[n_test:]])
    aux_idx = np.flatnonzero(np.isin(dataset.labels, public_classes))
    if len(train_idx) == 0 or len(aux_idx) == 0:
        raise DataError("empty split")

    remap = {cls: i for i, cls in enumerate(private_classes)}

    def private_subset(idx, role):
        idx = np.asarray(sorted(idx))
        return LabeledDataset(
            dataset.images[idx],
            np.asarray([remap[int(l)] for l in dataset.labels[idx]]),
            role,
            indices=idx,
            class_ids=np.asarray(private_classes),
        )

    train = private_subset(train_idx, "private-train")
    test = private_subset(test_idx, "private-test")
    aux = LabeledDataset(
        dataset.images[aux_idx],
        dataset.labels[aux_idx],
        "public-aux",
        indices=aux_idx,
    )
    return train, test, aux


# -- augmentation --------------------------------------------------------------


@dataclass
class AugmentationSpec:
    """Random crop / horizontal flip / rotation, each applied with
    probability `prob`, in that fixed order."""

    crop_scale: tuple = (0.8, 1.0)
    rotate_degrees: tuple = (-30.0, 30.0)
    hflip: bool = True
    prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise DataError(f"crop scale range must lie in (0, 1], got {self.crop_scale}")
        if not (0.0 <= self.prob <= 1.0):
            raise DataError(f"probability must lie in [0, 1], got {self.prob}")


@dataclass
class AugmentDraw:
    """One realized augmentation: None fields mean 'not applied'.

    Crop position fractions are in [0, 1] and scale with the image so a
    draw is shape-independent."""

    crop_scale: float | None = None
    crop_top: float = 0.0
    crop_left: float = 0.0
    flip: bool = False
    angle: float | None = None


def draw_augmentation(spec, rng):
    crop = crop_top = crop_left = None
    if rng.random() < spec.prob:
        crop = float(rng.uniform(*spec.crop_scale))
        crop_top = float(rng.random())
        crop_left = float(rng.random())
    flip = bool(spec.hflip and rng.random() < spec.prob)
    angle = float(rng.uniform(*spec.rotate_degrees)) if rng.random() < spec.prob else None
    return AugmentDraw(
        crop_scale=crop,
        crop_top=crop_top if crop_top is not None else 0.0,
        crop_left=crop_left if crop_left is not None else 0.0,
        flip=flip,
        angle=angle,
    )


def augmentation_grid(draw, height, width):
    """Source-coordinate grid for one draw, shape (H, W, 2).

    Output pixel (r, c) samples the input at grid[r, c]. The image-op
    order is crop -> flip -> rotate, so the source maps compose as
    crop o flip o rotate applied to output coordinates.
    """
    to_src = np.eye(3, dtype=np.float64)

    if draw.angle is not None:
        theta = np.deg2rad(draw.angle)
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot = np.array(
            [
                [cos_t, -sin_t, cy - cos_t * cy + sin_t * cx],
                [sin_t, cos_t, cx - sin_t * cy - cos_t * cx],
                [0.0, 0.0, 1.0],
            ]
        )
        to_src = rot @ to_src

    if draw.flip:
        flip = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, width - 1.0], [0.0, 0.0, 1.0]])
        to_src = flip @ to_src

    if draw.crop_scale is not None:
        side_h = max(1, int(round(np.sqrt(draw.crop_scale) * height)))
        side_w = max(1, int(round(np.sqrt(draw.crop_scale) * width)))
        top = draw.crop_top * (height - side_h)
        left = draw.crop_left * (width - side_w)
        sr = (side_h - 1) / (height - 1) if height > 1 else 0.0
        sc = (side_w - 1) / (width - 1) if width > 1 else 0.0
        crop = np.array([[sr, 0.0, top], [0.0, sc, left], [0.0, 0.0, 1.0]])
        to_src = crop @ to_src

    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    ones = np.ones_like(rows)
    coords = np.stack([rows, cols, ones], axis=-1) @ to_src.T
    return coords[..., :2]


def apply_augmentation(image, draw):
    """Apply one realized draw to a single (H, W, C) image."""
    from .diffcore.tensor import bilinear_gather

    image = np.asarray(image, dtype=np.float32)
    grid = augmentation_grid(draw, image.shape[0], image.shape[1])
    out, _ = bilinear_gather(image[None], grid[None])
    return out[0]


def augment(image, spec, draw_seed):
    """Augment a single image deterministically from `draw_seed`."""
    rng = np.random.default_rng([spec.seed, int(draw_seed)])
    return apply_augmentation(image, draw_augmentation(spec, rng))
