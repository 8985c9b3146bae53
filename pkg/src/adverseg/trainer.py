"""Alternating optimization of the segmentation network and discriminator.

One labeled iteration updates the segmentation network on cross entropy plus
the (weighted) adversarial term with the discriminator frozen, then updates
the discriminator on the same batch using the pre-update prediction as a
constant fake input and the one-hot ground truth as the real input. Unlabeled
iterations update only the segmentation network, on the adversarial and
confidence-masked self-training terms, and never touch the discriminator.

Unlabeled batches are consumed only after the warm-up phase, and only when a
loss actually uses them. The discriminator path is never evaluated when every
adversarial/semi weight is zero, so the baseline configuration is a pure
cross-entropy trainer.
"""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (AugmentConfig, Batch, DatasetSplit, Sample, LABELED,
                   UNLABELED, augment, pool_batch_ids)
from .losses import (HyperParams, LossValue, ignore_mask_from_labels, loss_adv,
                     loss_ce, loss_discriminator, loss_semi, loss_seg_total,
                     one_hot_targets)
from .networks import (ConfigError, DiscNetConfig, SegNetConfig,
                       build_discriminator, build_segmentation_network,
                       config_from_dict, scale_scheme, CHECKPOINT_VERSION)
from .rng import derive_seed

LOG_FIELDS = ("iter", "tag", "l_ce", "l_adv", "l_semi", "l_d", "lr_seg", "lr_disc")


class ScheduleError(ValueError):
    """An iteration index violates the training schedule."""


class CheckpointError(RuntimeError):
    """A training checkpoint is missing, corrupt, or incompatible."""


def poly_lr(lr0: float, iteration: int, max_iterations: int, power: float) -> float:
    """Polynomial decay: lr0 * (1 - iteration / max_iterations) ** power."""
    if max_iterations < 1:
        raise ScheduleError("max_iterations must be >= 1")
    if iteration < 0 or iteration > max_iterations:
        raise ScheduleError(f"iteration {iteration} outside 0..{max_iterations}")
    return lr0 * (1.0 - iteration / max_iterations) ** power


@dataclass
class TrainConfig:
    """Desk-scale training defaults; see the presets for paper-scale values."""

    max_iterations: int = 2000
    batch_size: int = 8
    seg_lr0: float = 2.5e-4
    disc_lr0: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    warm_up_iterations: int = 500
    seed: int = 0
    checkpoint_every: int = 1000
    deterministic: bool = True
    scale_alpha: float = 0.0  # ground-truth diffusion for the discriminator
    hp: HyperParams = field(default_factory=HyperParams)
    seg: SegNetConfig = field(default_factory=lambda: SegNetConfig(class_count=4))
    disc: DiscNetConfig = field(
        default_factory=lambda: DiscNetConfig(class_count=4, base_channels=16))
    augment: Optional[AugmentConfig] = None

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.batch_size < 1:
            raise ConfigError("iteration and batch counts must be positive")
        if not 0 <= self.warm_up_iterations <= self.max_iterations:
            raise ConfigError("need 0 <= warm_up_iterations <= max_iterations")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if not 0.0 <= self.scale_alpha <= 1.0:
            raise ConfigError("scale_alpha must lie in [0, 1]")
        if self.seg.class_count != self.disc.class_count:
            raise ConfigError("segmentation and discriminator class counts differ")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("seg", "disc"):
            for k, v in out[key].items():
                if isinstance(v, tuple):
                    out[key][k] = list(v)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "hp" in kwargs and isinstance(kwargs["hp"], dict):
            kwargs["hp"] = config_from_dict(HyperParams, kwargs["hp"])
        if "seg" in kwargs and isinstance(kwargs["seg"], dict):
            kwargs["seg"] = config_from_dict(SegNetConfig, kwargs["seg"])
        if "disc" in kwargs and isinstance(kwargs["disc"], dict):
            kwargs["disc"] = config_from_dict(DiscNetConfig, kwargs["disc"])
        if kwargs.get("augment") is not None and isinstance(kwargs["augment"], dict):
            kwargs["augment"] = config_from_dict(AugmentConfig, kwargs["augment"])
        return cls(**kwargs)


def pascal_preset(class_count: int) -> TrainConfig:
    """20k iterations, batch 10, 321x321 random scale + crop."""
    return TrainConfig(
        max_iterations=20000, batch_size=10, warm_up_iterations=5000,
        seg=SegNetConfig(class_count=class_count),
        disc=DiscNetConfig(class_count=class_count),
        augment=AugmentConfig(crop_h=321, crop_w=321, enable_scale=True),
    )


def cityscapes_preset(class_count: int) -> TrainConfig:
    """40k iterations, batch 2, fixed 512x1024 frames, no scale/crop jitter."""
    return TrainConfig(
        max_iterations=40000, batch_size=2, warm_up_iterations=5000,
        seg=SegNetConfig(class_count=class_count),
        disc=DiscNetConfig(class_count=class_count),
        augment=AugmentConfig(crop_h=512, crop_w=1024, enable_scale=False),
    )


@contextmanager
def _frozen(module: torch.nn.Module):
    """Temporarily stop gradient accumulation into a module's parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class Trainer:
    """Owns both networks, their optimizers, and the iteration counter."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        self.seg = build_segmentation_network(cfg.seg, derive_seed(cfg.seed, "init-seg"))
        self.disc = build_discriminator(cfg.disc, derive_seed(cfg.seed, "init-disc"))
        self.seg_opt = torch.optim.SGD(
            self.seg.parameters(), lr=cfg.seg_lr0, momentum=cfg.momentum,
            weight_decay=cfg.weight_decay, nesterov=True)
        self.disc_opt = torch.optim.Adam(
            self.disc.parameters(), lr=cfg.disc_lr0, betas=(0.9, 0.999), eps=1e-8)
        self.iteration = 0
        self.records: list = []

    @property
    def uses_discriminator(self) -> bool:
        hp = self.cfg.hp
        return (hp.lambda_adv_labeled > 0 or hp.lambda_adv_unlabeled > 0
                or hp.lambda_semi > 0)

    def _disc_confidence(self, prob: torch.Tensor) -> torch.Tensor:
        """Confidence map for a prediction; (N, 1, H, W) for either variant."""
        if self.cfg.disc.fully_convolutional:
            return self.disc(prob)
        n, _, h, w = prob.shape
        score = self.disc.forward_global(prob)
        return score.view(n, 1, 1, 1).expand(n, 1, h, w)

    def _seg_backward_step(self, total: LossValue, lr: float) -> None:
        _set_lr(self.seg_opt, lr)
        self.seg_opt.zero_grad(set_to_none=True)
        if total.value.requires_grad:
            total.value.backward()
        # Weight decay must act even when the data gradient vanishes.
        for p in self.seg.parameters():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self.seg_opt.step()

    def step_labeled(self, images: torch.Tensor, labels: torch.Tensor) -> dict:
        """One labeled iteration: update S, then update D on the same batch."""
        if labels is None:
            raise ValueError("labeled step requires ground-truth labels")
        cfg, hp = self.cfg, self.cfg.hp
        it = self.iteration
        lr_seg = poly_lr(cfg.seg_lr0, it, cfg.max_iterations, cfg.poly_power)
        lr_disc = poly_lr(cfg.disc_lr0, it, cfg.max_iterations, cfg.poly_power)

        prob = self.seg(images)
        onehot = one_hot_targets(labels, cfg.seg.class_count)
        l_ce = loss_ce(prob, onehot)
        l_adv = None
        if hp.lambda_adv_labeled > 0:
            with _frozen(self.disc):
                conf = self._disc_confidence(prob)
            l_adv = loss_adv(conf)
        total = loss_seg_total(l_ce, l_adv, None, hp, labeled=True)
        self._seg_backward_step(total, lr_seg)

        l_d = 0.0
        if self.uses_discriminator:
            _set_lr(self.disc_opt, lr_disc)
            self.disc_opt.zero_grad(set_to_none=True)
            pred = prob.detach()
            real = onehot if cfg.scale_alpha == 0.0 else scale_scheme(
                onehot, pred, cfg.scale_alpha)
            if cfg.disc.fully_convolutional:
                ignore = ignore_mask_from_labels(labels)
                d_fake = loss_discriminator(self.disc(pred), False, ignore=ignore)
                d_real = loss_discriminator(self.disc(real), True, ignore=ignore)
            else:
                d_fake = loss_discriminator(self.disc.forward_global(pred), False)
                d_real = loss_discriminator(self.disc.forward_global(real), True)
            d_total = d_fake.value + d_real.value
            if d_total.requires_grad:
                d_total.backward()
                self.disc_opt.step()
            l_d = float(d_total.detach())

        record = self._record(it, LABELED, l_ce=l_ce.item(),
                              l_adv=0.0 if l_adv is None else l_adv.item(),
                              l_semi=0.0, l_d=l_d,
                              lr_seg=lr_seg, lr_disc=lr_disc)
        self.iteration += 1
        return record

    def step_unlabeled(self, images: torch.Tensor) -> dict:
        """One unlabeled iteration: update S only; D is never touched."""
        cfg, hp = self.cfg, self.cfg.hp
        it = self.iteration
        if it < cfg.warm_up_iterations:
            raise ScheduleError(
                f"unlabeled step at iteration {it} before warm-up "
                f"({cfg.warm_up_iterations})"
            )
        lr_seg = poly_lr(cfg.seg_lr0, it, cfg.max_iterations, cfg.poly_power)
        lr_disc = poly_lr(cfg.disc_lr0, it, cfg.max_iterations, cfg.poly_power)

        l_adv = l_semi = None
        if hp.lambda_adv_unlabeled > 0 or hp.lambda_semi > 0:
            prob = self.seg(images)
            with _frozen(self.disc):
                conf = self._disc_confidence(prob)  # one forward, reused below
            if hp.lambda_adv_unlabeled > 0:
                l_adv = loss_adv(conf)
            if hp.lambda_semi > 0:
                l_semi = loss_semi(prob, conf, hp.t_semi)
        total = loss_seg_total(None, l_adv, l_semi, hp, labeled=False)
        if total.value.requires_grad:
            self._seg_backward_step(total, lr_seg)

        record = self._record(it, UNLABELED,
                              l_ce=0.0,
                              l_adv=0.0 if l_adv is None else l_adv.item(),
                              l_semi=0.0 if l_semi is None else l_semi.item(),
                              l_d=0.0, lr_seg=lr_seg, lr_disc=lr_disc)
        self.iteration += 1
        return record

    def _record(self, it: int, tag: str, **values) -> dict:
        record = {"iter": it, "tag": tag, **values}
        self.records.append(record)
        return record

    # ---- batch assembly -------------------------------------------------

    def _assemble(self, samples_by_id: dict, ids: Sequence[str], iteration: int,
                  with_labels: bool):
        imgs, labs = [], []
        for slot, sample_id in enumerate(ids):
            s = samples_by_id[sample_id]
            if self.cfg.augment is not None:
                s = augment(s, self.cfg.augment,
                            derive_seed(self.cfg.seed, "augment", iteration, slot))
            imgs.append(np.transpose(s.image, (2, 0, 1)))
            if with_labels:
                if s.label is None:
                    raise ValueError(f"sample {s.id} has no label for a labeled batch")
                labs.append(s.label)
        images = torch.from_numpy(np.stack(imgs).astype(np.float32))
        labels = torch.from_numpy(np.stack(labs).astype(np.int64)) if with_labels else None
        return images, labels

    def _uses_unlabeled(self, split: DatasetSplit) -> bool:
        hp = self.cfg.hp
        return bool(split.unlabeled_ids) and (
            hp.lambda_semi > 0 or hp.lambda_adv_unlabeled > 0)

    def _tag_for(self, iteration: int, uses_unlabeled: bool) -> str:
        if iteration < self.cfg.warm_up_iterations or not uses_unlabeled:
            return LABELED
        return LABELED if (iteration - self.cfg.warm_up_iterations) % 2 == 0 else UNLABELED

    def _pool_batch_index(self, iteration: int, tag: str, uses_unlabeled: bool) -> int:
        wu = self.cfg.warm_up_iterations
        if not uses_unlabeled:
            return iteration
        if iteration < wu:
            return iteration
        after = iteration - wu
        if tag == LABELED:
            return wu + after // 2
        return after // 2

    def batch_for_iteration(self, split: DatasetSplit, iteration: int) -> Batch:
        """Stateless batch schedule: iteration index -> tagged sample ids."""
        uses_unlabeled = self._uses_unlabeled(split)
        tag = self._tag_for(iteration, uses_unlabeled)
        pool = split.labeled_ids if tag == LABELED else split.unlabeled_ids
        index = self._pool_batch_index(iteration, tag, uses_unlabeled)
        ids = pool_batch_ids(pool, self.cfg.batch_size,
                             derive_seed(self.cfg.seed, tag), index)
        return Batch(tag=tag, sample_ids=ids)

    def run(self, samples: Sequence[Sample], split: DatasetSplit,
            checkpoint_dir=None) -> list:
        """Train from the current iteration to cfg.max_iterations."""
        if not split.labeled_ids:
            raise ValueError("split has no labeled samples")
        samples_by_id = {s.id: s for s in samples}
        missing = [i for i in (*split.labeled_ids, *split.unlabeled_ids)
                   if i not in samples_by_id]
        if missing:
            raise ValueError(f"split references missing sample ids: {missing[:5]}")
        if checkpoint_dir is not None:
            checkpoint_dir = Path(checkpoint_dir)
            checkpoint_dir.mkdir(parents=True, exist_ok=True)

        for it in range(self.iteration, self.cfg.max_iterations):
            batch = self.batch_for_iteration(split, it)
            images, labels = self._assemble(
                samples_by_id, batch.sample_ids, it, batch.tag == LABELED)
            if batch.tag == LABELED:
                self.step_labeled(images, labels)
            else:
                self.step_unlabeled(images)
            if checkpoint_dir is not None and (it + 1) % self.cfg.checkpoint_every == 0:
                self.save_state(checkpoint_dir / f"state_{it + 1:06d}.pt")
        if checkpoint_dir is not None:
            self.save_state(checkpoint_dir / "state_final.pt")
        return self.records

    # ---- checkpointing ---------------------------------------------------

    def save_state(self, path) -> None:
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "train_state",
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "seg_state": self.seg.state_dict(),
            "disc_state": self.disc.state_dict(),
            "seg_opt_state": self.seg_opt.state_dict(),
            "disc_opt_state": self.disc_opt.state_dict(),
        }
        torch.save(payload, path)

    def load_state(self, path) -> None:
        """Restore parameters, optimizer state, and the iteration counter.

        The checkpoint's network configuration must match this trainer's.
        """
        payload = _read_train_payload(path)
        stored = TrainConfig.from_dict(payload["config"])
        if stored.seg != self.cfg.seg or stored.disc != self.cfg.disc:
            raise ConfigError(
                "checkpoint network configuration does not match trainer "
                f"(stored class_count={stored.seg.class_count}, "
                f"trainer class_count={self.cfg.seg.class_count})"
            )
        self.seg.load_state_dict(payload["seg_state"])
        self.disc.load_state_dict(payload["disc_state"])
        self.seg_opt.load_state_dict(payload["seg_opt_state"])
        self.disc_opt.load_state_dict(payload["disc_opt_state"])
        self.iteration = payload["iteration"]


def _read_train_payload(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')} unsupported"
        )
    return payload


def load_trainer(path) -> Trainer:
    """Rebuild a trainer (networks, optimizers, iteration) from a checkpoint."""
    payload = _read_train_payload(path)
    trainer = Trainer(TrainConfig.from_dict(payload["config"]))
    trainer.load_state(path)
    return trainer


def train(samples: Sequence[Sample], split: DatasetSplit, cfg: TrainConfig,
          out_dir=None, resume_from=None) -> Trainer:
    """Convenience wrapper: build (or resume) a trainer, run, persist the log."""
    trainer = Trainer(cfg)
    if resume_from is not None:
        trainer.load_state(resume_from)
    checkpoint_dir = None if out_dir is None else Path(out_dir) / "checkpoints"
    trainer.run(samples, split, checkpoint_dir=checkpoint_dir)
    if out_dir is not None:
        write_train_log(trainer.records, Path(out_dir) / "train_log.csv")
    return trainer


def write_train_log(records: Sequence[dict], path) -> None:
    """Persist per-iteration records; floats use repr so logs are exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for record in records:
            writer.writerow([
                record["iter"], record["tag"],
                *[repr(float(record[k])) for k in LOG_FIELDS[2:]],
            ])


def read_train_log(path) -> list:
    """Inverse of :func:`write_train_log`."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(LOG_FIELDS):
            raise ValueError(f"unexpected train log header: {reader.fieldnames}")
        for row in reader:
            out.append({
                "iter": int(row["iter"]), "tag": row["tag"],
                **{k: float(row[k]) for k in LOG_FIELDS[2:]},
            })
    return out
