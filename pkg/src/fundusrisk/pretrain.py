"""Severity-aware metric pretraining of the vision encoder.

Stage 1 learns the encoder together with one prototype vector per class.
An image's logit for class c is the cosine similarity between its pooled
embedding and prototype c; cross-entropy on those logits pulls embeddings
toward their class prototype and apart from the others. The trained encoder
and prototypes are frozen afterwards and reused by the fusion stage.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .backbone import Backbone, BackboneConfig, global_avg_pool
from .checkpoint import load_archive, load_state_arrays, save_archive, state_dict_arrays
from .errors import ValidationError
from .rng import stream
from .synthdata import LATE_SEVERITY

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

LABEL_SCHEMES = ("four_class", "twelve_class", "two_class")

MIN_PROTO_NORM = 1e-6


@dataclass
class Stage1Config:
    epochs: int = 50
    batch_size: int = 96
    lr: float = 1e-4
    label_scheme: str = "four_class"
    logit_scale: float = 1.0
    rotation_degrees: float = 10.0
    hflip_prob: float = 0.5
    seed: int = 0
    early_stop_train_acc: float | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.label_scheme not in LABEL_SCHEMES:
            raise ValidationError(f"unknown label scheme {self.label_scheme!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.logit_scale <= 0:
            raise ValidationError("lr and logit_scale must be positive")
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)


def scheme_n_classes(scheme: str) -> int:
    sizes = {"four_class": 4, "twelve_class": 12, "two_class": 2}
    if scheme not in sizes:
        raise ValidationError(f"unknown label scheme {scheme!r}")
    return sizes[scheme]


def map_labels(severity: np.ndarray, class_label: np.ndarray, scheme: str) -> np.ndarray:
    """Class targets for a labeling scheme, from severity scores 1..12.

    four_class uses the manifest's grouped label; twelve_class uses the raw
    score; two_class separates late disease (score >= 10) from everything else.
    """
    if scheme == "four_class":
        return class_label.astype(np.int64)
    if scheme == "twelve_class":
        return severity.astype(np.int64) - 1
    if scheme == "two_class":
        return (severity >= LATE_SEVERITY).astype(np.int64)
    raise ValidationError(f"unknown label scheme {scheme!r}")


class PrototypeBank(nn.Module):
    """One learnable prototype vector per class."""

    def __init__(self, n_classes: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        init = torch.randn(n_classes, dim, generator=generator)
        init = init / init.norm(dim=1, keepdim=True)
        self.weight = nn.Parameter(init)

    def renorm_guard(self) -> None:
        """Keep every prototype's norm at or above a small floor.

        A prototype driven to zero would make its cosine direction undefined;
        degenerate rows are rescaled (or nudged, if exactly zero) in place.
        """
        with torch.no_grad():
            norms = self.weight.norm(dim=1)
            for i in torch.nonzero(norms < MIN_PROTO_NORM).flatten().tolist():
                if norms[i] > 0:
                    self.weight[i] *= MIN_PROTO_NORM / norms[i]
                else:
                    self.weight[i, 0] = MIN_PROTO_NORM


def cosine_logits(features: torch.Tensor, prototypes: torch.Tensor,
                  logit_scale: float = 1.0) -> torch.Tensor:
    """Scaled cosine similarity between each feature row and each prototype."""
    f = features / features.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    g = prototypes / prototypes.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return logit_scale * (f @ g.t())


def metric_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return nn.functional.cross_entropy(logits, labels)


def normalize_images(images: torch.Tensor) -> torch.Tensor:
    mean = images.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = images.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (images - mean) / std


def augment(images: torch.Tensor, rng: np.random.Generator,
            rotation_degrees: float = 10.0, hflip_prob: float = 0.5) -> torch.Tensor:
    """Random rotation and horizontal flip per image, then normalization."""
    angles = rng.uniform(-rotation_degrees, rotation_degrees, size=len(images))
    flips = rng.random(len(images)) < hflip_prob
    out = []
    for img, angle, flip in zip(images, angles, flips):
        img = TF.rotate(img, float(angle), interpolation=InterpolationMode.BILINEAR)
        if flip:
            img = torch.flip(img, dims=(-1,))
        out.append(img)
    return normalize_images(torch.stack(out))


def class_balanced_batches(labels: np.ndarray, batch_size: int,
                           rng: np.random.Generator) -> list[np.ndarray]:
    """Batches that interleave the classes while covering every sample once.

    Each class keeps its own shuffled queue; samples are drawn round-robin
    from the non-empty queues, so early batches are close to uniform over
    classes no matter how imbalanced the data is.
    """
    queues = [list(rng.permutation(np.flatnonzero(labels == c)))
              for c in np.unique(labels)]
    order = []
    while queues:
        still = []
        for q in queues:
            order.append(q.pop())
            if q:
                still.append(q)
        queues = still
    return [np.asarray(order[i:i + batch_size])
            for i in range(0, len(order), batch_size)]


@dataclass
class Stage1Result:
    backbone: Backbone
    prototypes: PrototypeBank
    config: Stage1Config
    history: list[dict]
    best_epoch: int

    @property
    def final_train_acc(self) -> float:
        return self.history[-1]["train_acc"]


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return (logits.argmax(dim=1) == labels).float().mean().item()


def evaluate(backbone: Backbone, prototypes: PrototypeBank, images: torch.Tensor,
             labels: torch.Tensor, logit_scale: float = 1.0,
             batch_size: int = 256) -> float:
    backbone.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            emb = global_avg_pool(backbone(normalize_images(images[i:i + batch_size])).f4)
            logits = cosine_logits(emb, prototypes.weight, logit_scale)
            hits += (logits.argmax(dim=1) == labels[i:i + batch_size]).sum().item()
    return hits / len(images)


def train_stage1(images: torch.Tensor, severity: np.ndarray, class_label: np.ndarray,
                 cfg: Stage1Config,
                 val: tuple[torch.Tensor, np.ndarray, np.ndarray] | None = None,
                 verbose: bool = False) -> Stage1Result:
    """Train encoder and prototypes; returns the selected epoch's weights.

    `images` are float tensors in [0, 1], shape (N, 3, H, W). When a
    validation triple is given the epoch with the best validation accuracy
    wins; otherwise the final epoch is kept.
    """
    if len(images) != len(severity) or len(images) != len(class_label):
        raise ValidationError("images and labels disagree on sample count")
    labels = map_labels(severity, class_label, cfg.label_scheme)
    n_classes = scheme_n_classes(cfg.label_scheme)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError("labels out of range for scheme")
    labels_t = torch.from_numpy(labels)

    torch_gen = torch.Generator().manual_seed(int(stream(cfg.seed, 0, 2).integers(2 ** 62)))
    with torch.random.fork_rng():
        torch.manual_seed(int(torch_gen.initial_seed()))
        backbone = Backbone(cfg.backbone)
        prototypes = PrototypeBank(n_classes, cfg.backbone.embed_dim, torch_gen)

    opt = torch.optim.Adam(list(backbone.parameters()) + list(prototypes.parameters()),
                           lr=cfg.lr)
    val_labels = None
    if val is not None:
        val_images, val_sev, val_cls = val
        val_labels = torch.from_numpy(map_labels(val_sev, val_cls, cfg.label_scheme))

    history: list[dict] = []
    best = {"epoch": -1, "acc": -1.0, "state": None}
    for epoch in range(cfg.epochs):
        batch_rng = stream(cfg.seed, epoch, 3)
        aug_rng = stream(cfg.seed, epoch, 4)
        backbone.train()
        n_hit = n_seen = 0
        loss_sum = 0.0
        for idx in class_balanced_batches(labels, cfg.batch_size, batch_rng):
            batch = augment(images[idx], aug_rng, cfg.rotation_degrees, cfg.hflip_prob)
            emb = global_avg_pool(backbone(batch).f4)
            logits = cosine_logits(emb, prototypes.weight, cfg.logit_scale)
            loss = metric_ce_loss(logits, labels_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            prototypes.renorm_guard()
            n_hit += (logits.argmax(dim=1) == labels_t[idx]).sum().item()
            n_seen += len(idx)
            loss_sum += loss.item() * len(idx)
        rec = {"epoch": epoch, "train_loss": loss_sum / n_seen, "train_acc": n_hit / n_seen}
        if val_labels is not None:
            rec["val_acc"] = evaluate(backbone, prototypes, val_images, val_labels,
                                      cfg.logit_scale)
            if rec["val_acc"] > best["acc"]:
                best = {"epoch": epoch, "acc": rec["val_acc"],
                        "state": (copy.deepcopy(backbone.state_dict()),
                                  copy.deepcopy(prototypes.state_dict()))}
        if cfg.early_stop_train_acc is not None:
            rec["clean_train_acc"] = evaluate(backbone, prototypes, images, labels_t,
                                              cfg.logit_scale)
        history.append(rec)
        if verbose:
            print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in rec.items()))
        if (cfg.early_stop_train_acc is not None
                and rec["clean_train_acc"] >= cfg.early_stop_train_acc):
            break

    best_epoch = history[-1]["epoch"]
    if val_labels is not None and best["state"] is not None:
        backbone.load_state_dict(best["state"][0])
        prototypes.load_state_dict(best["state"][1])
        best_epoch = best["epoch"]
    backbone.eval()
    return Stage1Result(backbone, prototypes, cfg, history, best_epoch)


def export_embeddings(backbone: Backbone, images: torch.Tensor,
                      batch_size: int = 256) -> dict[str, np.ndarray]:
    """Pooled per-scale features for every image, with augmentation off."""
    backbone.eval()
    chunks: list[list[torch.Tensor]] = [[], [], [], []]
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            feats = backbone(normalize_images(images[i:i + batch_size]))
            for j, fmap in enumerate(feats.as_tuple()):
                chunks[j].append(global_avg_pool(fmap))
    return {f"scale{j + 1}": torch.cat(parts).numpy() for j, parts in enumerate(chunks)}


def save_stage1(path, result: Stage1Result) -> None:
    arrays = state_dict_arrays(result.backbone, "backbone")
    arrays.update(state_dict_arrays(result.prototypes, "prototypes"))
    header = {
        "kind": "stage1",
        "backbone": result.config.backbone.to_dict(),
        "label_scheme": result.config.label_scheme,
        "logit_scale": result.config.logit_scale,
        "best_epoch": result.best_epoch,
    }
    save_archive(path, arrays, header)


def load_stage1(path) -> tuple[Backbone, PrototypeBank, dict]:
    arrays, header = load_archive(path)
    if header.get("kind") != "stage1":
        raise ValidationError(f"{path} is not a stage-1 checkpoint")
    cfg = BackboneConfig.from_dict(header["backbone"])
    backbone = Backbone(cfg)
    load_state_arrays(backbone, arrays, "backbone")
    n_classes = scheme_n_classes(header["label_scheme"])
    prototypes = PrototypeBank(n_classes, cfg.embed_dim)
    load_state_arrays(prototypes, arrays, "prototypes")
    backbone.eval()
    return backbone, prototypes, header
