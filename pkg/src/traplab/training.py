"""Defense training: the trapdoor-injected loop and all baseline trainers.

Within every mini-batch the trapdoor trainer performs three updates in a
fixed order: discriminator, trigger sign-step, model. The trigger and
model updates are computed on the same mini-batch with fresh forward
passes, so the model step sees already-updated triggers.

Random streams are derived per concern from the config seed (model init,
discriminator init, batch order, benign augmentation, trapdoor
augmentation, target sampling). The plain trainer consumes exactly the
same model-init / batch / benign-augmentation streams, which is what
makes the beta = 0 degeneracy bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AugmentationSpec, AugmentDraw, augmentation_grid, draw_augmentation
from .diffcore import (
    SGD,
    Tensor,
    bilinear_sample,
    binary_cross_entropy_with_logits,
    build_classifier,
    build_discriminator,
    gather_rows,
    log_sigmoid,
    make_optimizer,
    softmax_cross_entropy,
)
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .trapdoor import (
    PatchSquare,
    PatchTriggerSpec,
    TriggerSet,
    inject_blended,
    inject_patch,
    init_patch_triggers,
    init_triggers,
    trigger_update_step,
)

__all__ = [
    "TrainingError",
    "DefenseConfig",
    "TrainedDefense",
    "DEFENSE_KINDS",
    "negls_schedule",
    "smoothed_ce",
    "compute_defense_losses",
    "train_defense",
    "train_eval_classifier",
    "trapdoor_success_rate",
    "accuracy",
    "save_defense",
    "load_defense",
]

DEFENSE_KINDS = ("none", "trapmid", "negls", "trapmid+negls", "ted")

# named random streams derived from the config seed
_STREAM_MODEL = 0
_STREAM_DISC = 1
_STREAM_BATCH = 3
_STREAM_AUG_BENIGN = 4
_STREAM_AUG_TRAP = 5
_STREAM_TARGETS = 6


class TrainingError(Exception):
    pass


@dataclass
class DefenseConfig:
    kind: str = "trapmid"
    alpha: float = 0.02
    beta: float = 0.2
    trigger_step: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "sgd-momentum"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    arch: str = "mlp"
    augmentation: AugmentationSpec | None = field(default_factory=AugmentationSpec)
    negls_floor: float = -0.05
    negls_total: int = 100
    patch_squares: int = 5
    patch_size: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise TrainingError(f"unknown defense kind {self.kind!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise TrainingError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.trigger_step <= 0:
            raise TrainingError(f"trigger step must be positive, got {self.trigger_step}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise TrainingError("epochs and batch size must be positive")


@dataclass
class TrainedDefense:
    """A trained classifier bundle: model, optional discriminator and
    triggers, plus per-epoch history."""

    model: object
    discriminator: object | None
    triggers: TriggerSet | None
    patch_spec: PatchTriggerSpec | None
    config: DefenseConfig
    history: list
    step_losses: list
    class_ids: np.ndarray | None = None

    def predict(self, images):
        return self.model.predict(images)

    def predict_proba(self, images):
        logits = self.model.logits_np(images).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def negls_schedule(epoch, total_epochs=100, floor=-0.05):
    """Piecewise smoothing schedule: zero for the first half of training,
    a linear ramp to `floor` over the third quarter, then constant."""
    if epoch < 1:
        raise TrainingError(f"epoch must be >= 1, got {epoch}")
    warm = total_epochs / 2.0
    ramp_end = 3.0 * total_epochs / 4.0
    if epoch <= warm:
        return 0.0
    if epoch <= ramp_end:
        return floor * (epoch - warm) / (total_epochs - warm)
    return floor


def smoothed_ce(logits, labels, smoothing, reduction="mean"):
    """Cross-entropy against a smoothed target: true class gets
    1 - s (C - 1) / C, the others s / C. Negative s sharpens."""
    if smoothing > 1:
        raise TrainingError(f"smoothing factor must be <= 1, got {smoothing}")
    n_classes = logits.shape[1]
    true_mass = 1.0 - smoothing * (n_classes - 1) / n_classes
    if true_mass <= 0:
        raise TrainingError(f"smoothing {smoothing} drives the true-class mass to {true_mass} <= 0")
    labels = np.asarray(labels, dtype=np.int64)
    if smoothing == 0:
        return softmax_cross_entropy(logits, labels, reduction=reduction)
    targets = np.full((len(labels), n_classes), smoothing / n_classes, dtype=np.float32)
    targets[np.arange(len(labels)), labels] = true_mass
    return softmax_cross_entropy(logits, targets, reduction=reduction)


# -- loss builders -----------------------------------------------------------


def _grids_for(draws, height, width):
    if draws is None:
        return None
    return np.stack([augmentation_grid(d, height, width) for d in draws])


def _augmented(x_tensor, grids):
    if grids is None:
        return x_tensor
    return bilinear_sample(x_tensor, grids)


def _poisoned_tensor(x_tensor, trigger_tensor, targets, alpha):
    picked = gather_rows(trigger_tensor, targets)
    return (1.0 - alpha) * x_tensor + alpha * picked


def _disc_loss(discriminator, x_tensor, poisoned):
    real_logit = discriminator(x_tensor)
    fake_logit = discriminator(poisoned)
    real_term = binary_cross_entropy_with_logits(real_logit, np.ones_like(real_logit.data))
    fake_term = binary_cross_entropy_with_logits(fake_logit, np.zeros_like(fake_logit.data))
    return real_term + fake_term


def _trigger_loss(model, discriminator, poisoned, targets, grids_trap):
    natural = -log_sigmoid(discriminator(poisoned)).mean()
    ce = softmax_cross_entropy(model(_augmented(poisoned, grids_trap)), targets)
    return natural + ce


def _model_loss(model, x_tensor, labels, poisoned, targets, grids_benign, grids_trap, beta, smoothing=0.0):
    def ce(logits, target_labels):
        if smoothing:
            return smoothed_ce(logits, target_labels, smoothing)
        return softmax_cross_entropy(logits, target_labels)

    if beta == 0.0 or poisoned is None:
        return ce(model(_augmented(x_tensor, grids_benign)), labels)
    trap_term = ce(model(_augmented(poisoned, grids_trap)), targets)
    if beta == 1.0:
        return trap_term
    benign_term = ce(model(_augmented(x_tensor, grids_benign)), labels)
    return (1.0 - beta) * benign_term + beta * trap_term


def compute_defense_losses(
    images,
    labels,
    targets,
    model,
    discriminator,
    trigger_set,
    beta,
    draws_benign=None,
    draws_trap=None,
):
    """Build the three training losses on one batch with fixed
    augmentation draws. Returns {"model", "disc", "trigger"} tensors.

    The discriminator terms see unaugmented images; augmentation applies
    only inside the classifier terms.
    """
    if not 0.0 <= beta <= 1.0:
        raise TrainingError(f"beta must be in [0, 1], got {beta}")
    images = np.asarray(images, dtype=np.float32)
    h, w = images.shape[1], images.shape[2]
    x_tensor = Tensor(images)
    targets = np.asarray(targets, dtype=np.int64)
    trig_tensor = Tensor(trigger_set.triggers, requires_grad=True)
    poisoned = _poisoned_tensor(x_tensor, trig_tensor, targets, trigger_set.alpha)
    grids_benign = _grids_for(draws_benign, h, w)
    grids_trap = _grids_for(draws_trap, h, w)
    return {
        "model": _model_loss(model, x_tensor, labels, poisoned, targets, grids_benign, grids_trap, beta),
        "disc": _disc_loss(discriminator, x_tensor, poisoned),
        "trigger": _trigger_loss(model, discriminator, poisoned, targets, grids_trap),
        "_trigger_tensor": trig_tensor,
    }


# -- trainers ----------------------------------------------------------------


def _stream(seed, which):
    return np.random.default_rng([seed, which])


def _batch_draws(spec, rng, count):
    if spec is None:
        return None
    return [draw_augmentation(spec, rng) for _ in range(count)]


def train_defense(config, train_data, step_hook=None):
    """Train one defense bundle on a private-train dataset.

    `step_hook(phase, epoch, step)` fires after each update with phase in
    {"disc", "trigger", "model"}; used to assert the update interleaving.
    """
    kind = config.kind
    images = train_data.images
    labels = train_data.labels
    n = len(images)
    if n == 0:
        raise TrainingError("empty training set")
    n_classes = train_data.n_classes
    image_shape = train_data.image_shape
    h, w = image_shape[0], image_shape[1]

    def new_optimizer(params):
        if config.optimizer == "sgd-momentum":
            return make_optimizer(
                config.optimizer, params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
            )
        return make_optimizer(config.optimizer, params, lr=config.lr, weight_decay=config.weight_decay)

    model = build_classifier(config.arch, image_shape, n_classes, _stream(config.seed, _STREAM_MODEL))
    opt_model = new_optimizer(model.parameters())

    trapdoor_on = kind in ("trapmid", "trapmid+negls")
    negls_on = kind in ("negls", "trapmid+negls")
    discriminator = None
    opt_disc = None
    trigger_set = None
    patch_spec = None
    if trapdoor_on:
        discriminator = build_discriminator(config.arch, image_shape, _stream(config.seed, _STREAM_DISC))
        opt_disc = new_optimizer(discriminator.parameters())
        trigger_set = init_triggers(n_classes, image_shape, config.alpha, config.seed)
    elif kind == "ted":
        patch_spec = init_patch_triggers(
            n_classes, image_shape, config.alpha, config.seed, n_squares=config.patch_squares, size=config.patch_size
        )

    batch_rng = _stream(config.seed, _STREAM_BATCH)
    aug_benign_rng = _stream(config.seed, _STREAM_AUG_BENIGN)
    aug_trap_rng = _stream(config.seed, _STREAM_AUG_TRAP)
    target_rng = _stream(config.seed, _STREAM_TARGETS)

    history = []
    step_losses = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = batch_rng.permutation(n)
        smoothing = negls_schedule(epoch, config.negls_total, config.negls_floor) if negls_on else 0.0
        epoch_stats = {"model_loss": 0.0, "disc_loss": 0.0, "trigger_loss": 0.0, "benign_hits": 0, "trap_hits": 0, "count": 0}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x_np = images[idx]
            y_np = labels[idx]
            bsz = len(idx)
            x_tensor = Tensor(x_np)

            targets = None
            if trapdoor_on or kind == "ted":
                targets = target_rng.integers(0, n_classes, size=bsz)

            if trapdoor_on:
                # discriminator step (real vs freshly poisoned)
                trig_tensor = Tensor(trigger_set.triggers, requires_grad=True)
                poisoned = _poisoned_tensor(x_tensor, trig_tensor, targets, config.alpha)
                discriminator.zero_grad()
                loss_d = _disc_loss(discriminator, x_tensor, poisoned)
                loss_d.backward()
                opt_disc.step()
                epoch_stats["disc_loss"] += loss_d.item() * bsz
                if step_hook:
                    step_hook("disc", epoch, step)

                # trigger sign-step on the same batch
                draws_trap = _batch_draws(config.augmentation, aug_trap_rng, bsz)
                grids_trap = _grids_for(draws_trap, h, w)
                trig_tensor = Tensor(trigger_set.triggers, requires_grad=True)
                poisoned = _poisoned_tensor(x_tensor, trig_tensor, targets, config.alpha)
                model.zero_grad()
                discriminator.zero_grad()
                loss_t = _trigger_loss(model, discriminator, poisoned, targets, grids_trap)
                loss_t.backward()
                trigger_update_step(trigger_set, trig_tensor.grad, config.trigger_step)
                epoch_stats["trigger_loss"] += loss_t.item() * bsz
                if step_hook:
                    step_hook("trigger", epoch, step)

            # model step; benign draws come from their own stream so the
            # plain trainer consumes the identical sequence
            draws_benign = _batch_draws(config.augmentation, aug_benign_rng, bsz)
            grids_benign = _grids_for(draws_benign, h, w)
            poisoned_for_model = None
            grids_trap_model = None
            if trapdoor_on and config.beta > 0:
                draws_trap2 = _batch_draws(config.augmentation, aug_trap_rng, bsz)
                grids_trap_model = _grids_for(draws_trap2, h, w)
                trig_const = Tensor(trigger_set.triggers)
                poisoned_for_model = _poisoned_tensor(x_tensor, trig_const, targets, config.alpha)
            elif kind == "ted":
                draws_trap2 = _batch_draws(config.augmentation, aug_trap_rng, bsz)
                grids_trap_model = _grids_for(draws_trap2, h, w)
                poisoned_for_model = Tensor(inject_patch(x_np, patch_spec, targets))

            model.zero_grad()
            beta = config.beta if (trapdoor_on or kind == "ted") else 0.0
            loss_m = _model_loss(
                model, x_tensor, y_np, poisoned_for_model, targets, grids_benign, grids_trap_model, beta, smoothing
            )
            loss_m.backward()
            opt_model.step()
            value = loss_m.item()
            step_losses.append(value)
            epoch_stats["model_loss"] += value * bsz
            if step_hook:
                step_hook("model", epoch, step)

            # cheap running accuracies from fresh, non-augmented forwards
            preds = model.predict(x_np)
            epoch_stats["benign_hits"] += int((preds == y_np).sum())
            if poisoned_for_model is not None:
                trap_preds = model.predict(poisoned_for_model.data)
                epoch_stats["trap_hits"] += int((trap_preds == targets).sum())
            epoch_stats["count"] += bsz
            step += 1

        count = epoch_stats["count"]
        history.append(
            {
                "epoch": epoch,
                "model_loss": epoch_stats["model_loss"] / count,
                "disc_loss": epoch_stats["disc_loss"] / count,
                "trigger_loss": epoch_stats["trigger_loss"] / count,
                "train_accuracy": epoch_stats["benign_hits"] / count,
                "trapdoor_accuracy": epoch_stats["trap_hits"] / count if (trapdoor_on or kind == "ted") else None,
                "smoothing": smoothing,
            }
        )

    return TrainedDefense(
        model=model,
        discriminator=discriminator,
        triggers=trigger_set,
        patch_spec=patch_spec,
        config=config,
        history=history,
        step_losses=step_losses,
        class_ids=train_data.class_ids,
    )


def accuracy(model, dataset):
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    return float((model.predict(dataset.images) == dataset.labels).mean())


def trapdoor_success_rate(model, trigger_set, dataset, seed=0):
    """Fraction of samples whose poisoned version is classified as the
    sampled target label; no augmentation is applied."""
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng([seed, 0x50C])
    targets = rng.integers(0, trigger_set.n_classes, size=len(dataset))
    poisoned = inject_blended(dataset.images, trigger_set, targets)
    preds = model.predict(np.clip(poisoned, 0.0, 1.0))
    return float((preds == targets).mean())


def train_eval_classifier(train_data, test_data, arch, defense_arch, seed=0, epochs=30, lr=0.01):
    """Train the held-out evaluation classifier on the same private data.

    Must use a different architecture tag from the defended model."""
    if arch == defense_arch:
        raise TrainingError(f"evaluation architecture {arch!r} must differ from the target's")
    config = DefenseConfig(kind="none", arch=arch, epochs=epochs, lr=lr, seed=seed)
    bundle = train_defense(config, train_data)
    return bundle.model, accuracy(bundle.model, test_data)


# -- persistence ---------------------------------------------------------------


def _aug_to_dict(spec):
    if spec is None:
        return None
    d = asdict(spec)
    d["crop_scale"] = list(d["crop_scale"])
    d["rotate_degrees"] = list(d["rotate_degrees"])
    return d


def _aug_from_dict(d):
    if d is None:
        return None
    return AugmentationSpec(
        crop_scale=tuple(d["crop_scale"]),
        rotate_degrees=tuple(d["rotate_degrees"]),
        hflip=d["hflip"],
        prob=d["prob"],
        seed=d["seed"],
    )


def save_defense(path, bundle):
    config_doc = asdict(bundle.config)
    config_doc["augmentation"] = _aug_to_dict(bundle.config.augmentation)
    meta = {
        "kind": "defense-bundle",
        "tool": "traplab-0.1.0",
        "config": config_doc,
        "model": {
            "arch": bundle.model.arch,
            "input_shape": list(bundle.model.input_shape),
            "n_classes": bundle.model.n_classes,
        },
        "has_discriminator": bundle.discriminator is not None,
        "trigger_alpha": bundle.triggers.alpha if bundle.triggers is not None else None,
        "trigger_seed": bundle.triggers.seed if bundle.triggers is not None else None,
        "patch_spec": None,
        "class_ids": bundle.class_ids.tolist() if bundle.class_ids is not None else None,
    }
    if bundle.patch_spec is not None:
        meta["patch_spec"] = {
            "alpha": bundle.patch_spec.alpha,
            "image_shape": list(bundle.patch_spec.image_shape),
            "seed": bundle.patch_spec.seed,
            "squares": [[asdict(sq) for sq in per_class] for per_class in bundle.patch_spec.squares],
        }
    arrays = {}
    for name, param in bundle.model.named_parameters():
        arrays[f"model.{name}"] = param.data
    if bundle.discriminator is not None:
        for name, param in bundle.discriminator.named_parameters():
            arrays[f"disc.{name}"] = param.data
    if bundle.triggers is not None:
        arrays["triggers"] = bundle.triggers.triggers
    save_checkpoint(path, meta, arrays)
    return path


def load_defense(path):
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "defense-bundle":
        raise TrainingError(f"{path} is not a defense bundle checkpoint")
    config_doc = dict(meta["config"])
    config_doc["augmentation"] = _aug_from_dict(config_doc.get("augmentation"))
    config = DefenseConfig(**config_doc)
    model_meta = meta["model"]
    rng = np.random.default_rng(0)
    model = build_classifier(model_meta["arch"], tuple(model_meta["input_shape"]), model_meta["n_classes"], rng)
    for name, param in model.named_parameters():
        param.data = arrays[f"model.{name}"].astype(np.float32)
    discriminator = None
    if meta["has_discriminator"]:
        discriminator = build_discriminator(model_meta["arch"], tuple(model_meta["input_shape"]), rng)
        for name, param in discriminator.named_parameters():
            param.data = arrays[f"disc.{name}"].astype(np.float32)
    triggers = None
    if "triggers" in arrays:
        triggers = TriggerSet(arrays["triggers"], meta["trigger_alpha"], meta["trigger_seed"] or 0)
    patch_spec = None
    if meta.get("patch_spec"):
        ps = meta["patch_spec"]
        patch_spec = PatchTriggerSpec(
            squares=[[PatchSquare(**sq) for sq in per_class] for per_class in ps["squares"]],
            alpha=ps["alpha"],
            image_shape=tuple(ps["image_shape"]),
            seed=ps["seed"],
        )
    class_ids = np.asarray(meta["class_ids"]) if meta.get("class_ids") else None
    return TrainedDefense(
        model=model,
        discriminator=discriminator,
        triggers=triggers,
        patch_spec=patch_spec,
        config=config,
        history=[],
        step_losses=[],
        class_ids=class_ids,
    )


def save_history(path, bundle):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"history": bundle.history, "step_losses": bundle.step_losses}, fh, indent=2, sort_keys=True)
    return path
