"""Lesion segmentation: a small U-Net trained with a soft-Dice objective.

Binary formulation (lesion vs everything else); the liver label is input
context only. Spatial dims must be divisible by 16 because the encoder
halves them four times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import LESION
from .errors import ConfigError, DimensionError, TrainingDiverged, UsageError
from .layers import (
    Adam,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm2d,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

DICE_EPS = 1.0
SEG_WIDTHS = (16, 32, 64, 128)


@dataclass
class SegTrainConfig:
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 4
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


class SegNet:
    """Depth-3 U-Net: 1->16->32->64 encoder, 128 bottleneck, skip-connected
    decoder, sigmoid lesion-probability output."""

    def __init__(self, rng: np.random.Generator):
        w1, w2, w3, w4 = SEG_WIDTHS
        self.enc1 = Conv2d(1, w1, 4, 2, 1, rng)
        self.enc2 = Conv2d(w1, w2, 4, 2, 1, rng)
        self.norm_e2 = InstanceNorm2d(w2)
        self.enc3 = Conv2d(w2, w3, 4, 2, 1, rng)
        self.norm_e3 = InstanceNorm2d(w3)
        self.bottleneck = Conv2d(w3, w4, 4, 2, 1, rng)
        self.norm_b = InstanceNorm2d(w4)

        self.up1 = ConvTranspose2d(w4, w3, 4, 2, 1, rng)
        self.norm_u1 = InstanceNorm2d(w3)
        self.up2 = ConvTranspose2d(w3 + w3, w2, 4, 2, 1, rng)
        self.norm_u2 = InstanceNorm2d(w2)
        self.up3 = ConvTranspose2d(w2 + w2, w1, 4, 2, 1, rng)
        self.norm_u3 = InstanceNorm2d(w1)
        self.up4 = ConvTranspose2d(w1 + w1, 1, 4, 2, 1, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        lrelu = ad.leaky_relu
        e1 = lrelu(self.enc1(x), 0.2)
        e2 = lrelu(self.norm_e2(self.enc2(e1)), 0.2)
        e3 = lrelu(self.norm_e3(self.enc3(e2)), 0.2)
        b = lrelu(self.norm_b(self.bottleneck(e3)), 0.2)
        u1 = lrelu(self.norm_u1(self.up1(b)), 0.0)
        u2 = lrelu(self.norm_u2(self.up2(ad.concat([u1, e3]))), 0.0)
        u3 = lrelu(self.norm_u3(self.up3(ad.concat([u2, e2]))), 0.0)
        return ad.sigmoid(self.up4(ad.concat([u3, e1])))

    def _layers(self):
        return {
            "enc1": self.enc1, "enc2": self.enc2, "norm_e2": self.norm_e2,
            "enc3": self.enc3, "norm_e3": self.norm_e3,
            "bottleneck": self.bottleneck, "norm_b": self.norm_b,
            "up1": self.up1, "norm_u1": self.norm_u1,
            "up2": self.up2, "norm_u2": self.norm_u2,
            "up3": self.up3, "norm_u3": self.norm_u3, "up4": self.up4,
        }

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self._layers().values():
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers().items():
            for i, p in enumerate(layer.parameters()):
                out[f"{name}.{i}"] = p.data
        return out

    def save(self, path, hyperparameters=None):
        hyper = {"arch": "lesion-segmenter", "widths": list(SEG_WIDTHS)}
        hyper.update(hyperparameters or {})
        save_checkpoint(path, self.named_parameters(), hyper)

    @classmethod
    def load(cls, path) -> "SegNet":
        from .synthesis import _assign_parameters

        params, hyper = load_checkpoint(path)
        if hyper.get("arch") != "lesion-segmenter":
            raise ConfigError(f"checkpoint at {path} is not a segmenter")
        net = cls(np.random.default_rng(0))
        _assign_parameters(net, params)
        return net


def soft_dice_loss(prob: Tensor, gt: Tensor) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) with eps = 1."""
    if prob.shape != gt.shape:
        raise DimensionError(f"prob {prob.shape} and gt {gt.shape} differ")
    overlap = ad.sum_(ad.mul(prob, gt))
    num = ad.add(ad.mul(overlap, 2.0), DICE_EPS)
    den = ad.add(ad.add(ad.sum_(prob), ad.sum_(gt)), DICE_EPS)
    return ad.add(ad.neg(ad.div(num, den)), 1.0)


def train_seg(images: list[np.ndarray], labels: list[np.ndarray],
              config: SegTrainConfig, out_dir=None):
    """Train a SegNet on full slices; returns (net, per-epoch loss log)."""
    if not images:
        raise UsageError("training needs at least one slice")
    if len(images) != len(labels):
        raise UsageError(f"{len(images)} images vs {len(labels)} labels")
    if not any((lab == LESION).any() for lab in labels):
        raise UsageError("no lesion labels anywhere in the training set")

    net = SegNet(np.random.default_rng([config.seed, 0]))
    shuffle_rng = np.random.default_rng([config.seed, 1])
    opt = Adam(net.parameters(), config.learning_rate, beta1=0.9,
               beta2=0.999)

    targets = [np.asarray(lab == LESION, dtype=np.float64) for lab in labels]
    log_rows = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = Tensor(np.stack([images[i][None] for i in idx]))
            g = Tensor(np.stack([targets[i][None] for i in idx]))
            step += 1
            loss = soft_dice_loss(net.forward(x), g)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"segmentation loss became non-finite at step {step} "
                    f"(epoch {epoch})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        log_rows.append(row)
        log.info("seg epoch %d loss %.4f", epoch, row["loss"])

    if out_dir is not None:
        out_dir = Path(out_dir)
        net.save(out_dir / "segmenter",
                 {"epochs": config.epochs, "seed": config.seed})
        _write_log(log_rows, out_dir / "training_log.csv")
    return net, log_rows


def _write_log(rows, path):
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss"])
        writer.writeheader()
        for row in rows:
            writer.writerow({"epoch": row["epoch"], "loss": f"{row['loss']:.6f}"})


def predict(net: SegNet, image: np.ndarray) -> np.ndarray:
    """Lesion probability map for one slice; pure function of (net, image)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"predict expects a 2-D slice, got {image.shape}")
    if image.shape[0] % 16 or image.shape[1] % 16:
        raise DimensionError(
            f"slice dims must be divisible by 16, got {image.shape}"
        )
    return net.forward(Tensor(image[None, None])).data[0, 0]


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map; values >= threshold map to 1."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)
