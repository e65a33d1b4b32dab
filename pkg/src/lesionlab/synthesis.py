"""Conditional lesion synthesizers.

Two interchangeable backends produce a lesion appearance patch from a
conditional map:

* a neural translator (encoder/decoder generator + patch discriminator)
  trained adversarially with an L1 reconstruction term, where inference-time
  dropout doubles as the stochastic noise source;
* a procedural fallback that fills the mask with the requested mean plus
  band-limited texture.

Both are callables ``(ConditionalMap, rng) -> patch`` once bound, so the
implanter treats them uniformly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, TrainingDiverged, UsageError
from .layers import (
    Adam,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    InstanceNorm2d,
    load_checkpoint,
    save_checkpoint,
)
from .pairs import ConditionalMap, LesionPair

log = logging.getLogger(__name__)

PATCH = 64
GEN_WIDTHS = (32, 64, 128, 128)
DISC_WIDTHS = (32, 64, 128)


@dataclass
class SynthTrainConfig:
    epochs: int = 150
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    gan_weight: float = 1.0
    l1_weight: float = 100.0
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.gan_weight < 0 or self.l1_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


class GeneratorNet:
    """Encoder/decoder with skip connections, 3->1 channels at 64x64.

    Four stride-2 down blocks (3->32->64->128->128), four stride-2 up blocks
    mirroring them with skip concatenation, dropout 0.5 on the two innermost
    up blocks, sigmoid output. Dropout stays active at inference and provides
    the stochastic component of the translation.
    """

    def __init__(self, rng: np.random.Generator):
        w1, w2, w3, w4 = GEN_WIDTHS
        self.down1 = Conv2d(3, w1, 4, 2, 1, rng)
        self.down2 = Conv2d(w1, w2, 4, 2, 1, rng)
        self.norm_d2 = InstanceNorm2d(w2)
        self.down3 = Conv2d(w2, w3, 4, 2, 1, rng)
        self.norm_d3 = InstanceNorm2d(w3)
        self.down4 = Conv2d(w3, w4, 4, 2, 1, rng)
        self.norm_d4 = InstanceNorm2d(w4)

        self.up1 = ConvTranspose2d(w4, w3, 4, 2, 1, rng)
        self.norm_u1 = InstanceNorm2d(w3)
        self.drop1 = Dropout(0.5)
        self.up2 = ConvTranspose2d(w3 + w3, w2, 4, 2, 1, rng)
        self.norm_u2 = InstanceNorm2d(w2)
        self.drop2 = Dropout(0.5)
        self.up3 = ConvTranspose2d(w2 + w2, w1, 4, 2, 1, rng)
        self.norm_u3 = InstanceNorm2d(w1)
        self.up4 = ConvTranspose2d(w1 + w1, 1, 4, 2, 1, rng, bias=True)

    def forward(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        lrelu = ad.leaky_relu
        d1 = lrelu(self.down1(x), 0.2)
        d2 = lrelu(self.norm_d2(self.down2(d1)), 0.2)
        d3 = lrelu(self.norm_d3(self.down3(d2)), 0.2)
        d4 = lrelu(self.norm_d4(self.down4(d3)), 0.2)

        u1 = self.drop1(lrelu(self.norm_u1(self.up1(d4)), 0.0), rng)
        u2 = self.drop2(lrelu(self.norm_u2(self.up2(ad.concat([u1, d3]))), 0.0), rng)
        u3 = lrelu(self.norm_u3(self.up3(ad.concat([u2, d2]))), 0.0)
        return ad.sigmoid(self.up4(ad.concat([u3, d1])))

    def _layers(self):
        return {
            "down1": self.down1, "down2": self.down2, "norm_d2": self.norm_d2,
            "down3": self.down3, "norm_d3": self.norm_d3,
            "down4": self.down4, "norm_d4": self.norm_d4,
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
        hyper = {"arch": "lesion-generator", "widths": list(GEN_WIDTHS)}
        hyper.update(hyperparameters or {})
        save_checkpoint(path, self.named_parameters(), hyper)

    @classmethod
    def load(cls, path) -> "GeneratorNet":
        params, hyper = load_checkpoint(path)
        if hyper.get("arch") != "lesion-generator":
            raise ConfigError(f"checkpoint at {path} is not a generator")
        net = cls(np.random.default_rng(0))
        _assign_parameters(net, params)
        return net


class DiscriminatorNet:
    """Patch classifier over (conditional map, image): 4 channels in,
    three stride-2 conv blocks (4->32->64->128), 1x1 conv to a logit map.
    A 64x64 input yields an 8x8 logit grid."""

    def __init__(self, rng: np.random.Generator):
        w1, w2, w3 = DISC_WIDTHS
        self.conv1 = Conv2d(4, w1, 4, 2, 1, rng)
        self.conv2 = Conv2d(w1, w2, 4, 2, 1, rng)
        self.norm2 = InstanceNorm2d(w2)
        self.conv3 = Conv2d(w2, w3, 4, 2, 1, rng)
        self.norm3 = InstanceNorm2d(w3)
        self.head = Conv2d(w3, 1, 1, 1, 0, rng, bias=True)

    def forward(self, cond: Tensor, image: Tensor) -> Tensor:
        x = ad.concat([cond, image])
        h = ad.leaky_relu(self.conv1(x), 0.2)
        h = ad.leaky_relu(self.norm2(self.conv2(h)), 0.2)
        h = ad.leaky_relu(self.norm3(self.conv3(h)), 0.2)
        return self.head(h)

    def _layers(self):
        return {
            "conv1": self.conv1, "conv2": self.conv2, "norm2": self.norm2,
            "conv3": self.conv3, "norm3": self.norm3, "head": self.head,
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


def _assign_parameters(net, params: dict[str, np.ndarray]):
    live = {}
    for name, layer in net._layers().items():
        for i, p in enumerate(layer.parameters()):
            live[f"{name}.{i}"] = p
    if set(live) != set(params):
        raise ConfigError("checkpoint parameter names do not match the architecture")
    for name, tensor in live.items():
        if tensor.data.shape != params[name].shape:
            raise DimensionError(
                f"checkpoint parameter {name} has shape {params[name].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = params[name].copy()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def discriminator_loss(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tensor:
    """Mean over patch logits of -[log sigma(real) + log(1 - sigma(fake))]."""
    if d_real_logits.shape != d_fake_logits.shape:
        raise DimensionError(
            f"logit maps differ: {d_real_logits.shape} vs {d_fake_logits.shape}"
        )
    real_term = ad.mean_(ad.softplus(ad.neg(d_real_logits)))
    fake_term = ad.mean_(ad.softplus(d_fake_logits))
    return ad.add(real_term, fake_term)


def generator_loss(d_fake_logits: Tensor, generated: Tensor, target: Tensor,
                   config: SynthTrainConfig) -> Tensor:
    """Non-saturating adversarial term plus weighted L1 reconstruction."""
    if generated.shape != target.shape:
        raise DimensionError(
            f"generated {generated.shape} and target {target.shape} differ"
        )
    loss = ad.mul(ad.mean_(ad.abs_(generated - target)), config.l1_weight)
    if config.gan_weight > 0:
        gan = ad.mean_(ad.softplus(ad.neg(d_fake_logits)))
        loss = ad.add(ad.mul(gan, config.gan_weight), loss)
    return loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _stack_batch(pairs: list[LesionPair]):
    cond = np.stack([p.source.channels for p in pairs])
    target = np.stack([p.target[None] for p in pairs])
    return Tensor(cond), Tensor(target)


def train(pairs: list[LesionPair], config: SynthTrainConfig, out_dir=None):
    """Alternating D/G optimisation; returns (generator, per-epoch log rows).

    Per batch: one discriminator step on (real pair, detached fake), then one
    generator step through the refreshed discriminator. With gan_weight 0 the
    discriminator is never touched and training degenerates to supervised L1
    regression.
    """
    if len(pairs) < 2:
        raise UsageError(f"training needs at least 2 pairs, got {len(pairs)}")
    gen = GeneratorNet(np.random.default_rng([config.seed, 0]))
    disc = DiscriminatorNet(np.random.default_rng([config.seed, 1]))
    shuffle_rng = np.random.default_rng([config.seed, 2])
    noise_rng = np.random.default_rng([config.seed, 3])

    adversarial = config.gan_weight > 0
    opt_g = Adam(gen.parameters(), config.learning_rate, config.beta1, config.beta2)
    opt_d = Adam(disc.parameters(), config.learning_rate, config.beta1, config.beta2)

    log_rows = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(pairs))
        d_losses, g_losses, l1_values = [], [], []
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            cond, target = _stack_batch(batch)
            fake = gen.forward(cond, noise_rng)
            step += 1

            if adversarial:
                d_real = disc.forward(cond, target)
                d_fake_detached = disc.forward(cond, fake.detach())
                d_loss = discriminator_loss(d_real, d_fake_detached)
                if not np.isfinite(d_loss.item()):
                    raise TrainingDiverged(
                        f"discriminator loss became non-finite at step {step} "
                        f"(epoch {epoch})"
                    )
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                d_fake = disc.forward(cond, fake)
                d_losses.append(d_loss.item())
            else:
                d_fake = None

            l1 = ad.mean_(ad.abs_(fake - target))
            g_loss = generator_loss(d_fake, fake, target, config) \
                if adversarial else ad.mul(l1, config.l1_weight)
            if not np.isfinite(g_loss.item()):
                raise TrainingDiverged(
                    f"generator loss became non-finite at step {step} (epoch {epoch})"
                )
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            g_losses.append(g_loss.item())
            l1_values.append(l1.item())

        row = {
            "epoch": epoch,
            "d_loss": float(np.mean(d_losses)) if d_losses else 0.0,
            "g_loss": float(np.mean(g_losses)),
            "l1": float(np.mean(l1_values)),
        }
        log_rows.append(row)
        log.info("epoch %d d_loss %.4f g_loss %.4f l1 %.4f",
                 epoch, row["d_loss"], row["g_loss"], row["l1"])

    if out_dir is not None:
        out_dir = Path(out_dir)
        gen.save(out_dir / "generator", {"epochs": config.epochs, "seed": config.seed})
        write_training_log(log_rows, out_dir / "training_log.csv")
    return gen, log_rows


def write_training_log(rows, path):
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "d_loss", "g_loss", "l1"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] if k == "epoch" else f"{row[k]:.6f}"
                             for k in writer.fieldnames})


# ---------------------------------------------------------------------------
# inference backends
# ---------------------------------------------------------------------------


def synthesize(generator: GeneratorNet, cmap: ConditionalMap,
               rng: np.random.Generator) -> np.ndarray:
    """One stochastic translation of a conditional map to a lesion patch."""
    if cmap.size % 16 != 0 or cmap.size < 16:
        raise DimensionError(
            f"generator input size must be a positive multiple of 16, got {cmap.size}"
        )
    out = generator.forward(Tensor(cmap.channels[None]), rng)
    return out.data[0, 0]


def procedural_synthesize(cmap: ConditionalMap, rng: np.random.Generator,
                          noise_sd: float = 0.05, noise_sigma: float = 1.5,
                          edge_darkening: float = 0.1,
                          feather_sigma: float = 1.0) -> np.ndarray:
    """Mask-fill backend: mean intensity, band-limited texture, darkened
    edges, feathered boundary. No training required."""
    mask = cmap.shape_mask
    if not mask.any():
        return np.zeros_like(mask)
    fill = np.full(mask.shape, cmap.mean)
    if noise_sd > 0:
        noise = rng.normal(0.0, noise_sd, mask.shape)
        fill += ndimage.gaussian_filter(noise, noise_sigma, mode="nearest")
    fill[cmap.edge_mask > 0] -= edge_darkening
    alpha = ndimage.gaussian_filter(mask, feather_sigma, mode="constant",
                                    truncate=3.0)
    return np.clip(alpha * fill, 0.0, 1.0)


class NeuralSynthesizer:
    """Binds a trained generator into the common (cmap, rng) interface."""

    def __init__(self, generator: GeneratorNet):
        self.generator = generator

    def __call__(self, cmap: ConditionalMap, rng: np.random.Generator) -> np.ndarray:
        return synthesize(self.generator, cmap, rng)


class ProceduralSynthesizer:
    def __call__(self, cmap: ConditionalMap, rng: np.random.Generator) -> np.ndarray:
        return procedural_synthesize(cmap, rng)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def masked_region(mask: np.ndarray, ring: int = 2) -> np.ndarray:
    """Union of the mask and a dilated ring around it."""
    mask = mask > 0
    if ring <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool),
                                   iterations=ring)

def eval_mse(synthesizer, held_out_pairs: list[LesionPair],
             rng: np.random.Generator | None = None) -> float:
    """Mean per-pair MSE restricted to the mask plus a 2-px ring.

    Whole-patch MSE would be dominated by background pixels the synthesizer
    never touches, so the region tracks where appearance actually lands.
    """
    if not held_out_pairs:
        raise UsageError("eval_mse needs at least one pair")
    rng = rng or np.random.default_rng(0)
    scores = []
    for pair in held_out_pairs:
        region = masked_region(pair.source.shape_mask)
        generated = synthesizer(pair.source, rng)
        diff = generated[region] - pair.target[region]
        scores.append(float(np.mean(diff * diff)))
    return float(np.mean(scores))
