"""Network building blocks, the Adam optimizer, and parameter checkpoints.

Layers are thin stateful wrappers around the autodiff ops: they own their
parameter tensors and expose ``__call__``. Networks assemble them explicitly;
there is no generic module system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataFormatError, DimensionError

WEIGHT_INIT_SD = 0.02


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator, bias: bool = False):
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            rng.normal(0.0, WEIGHT_INIT_SD, (out_ch, in_ch, kernel, kernel)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = ad.channel_bias(y, self.bias)
        return y

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ConvTranspose2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator, bias: bool = False):
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            rng.normal(0.0, WEIGHT_INIT_SD, (in_ch, out_ch, kernel, kernel)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d_transpose(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = ad.channel_bias(y, self.bias)
        return y

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class InstanceNorm2d:
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.instance_norm(x, self.gain, self.shift, self.eps)

    def parameters(self):
        return [self.gain, self.shift]


class Dropout:
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        return ad.dropout(x, self.rate, rng)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Optimizer state; moment buffers are allocated on the first step."""

    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.step_count < 0:
            raise ConfigError(f"step_count must be >= 0, got {self.step_count}")


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise DimensionError(
            f"adam_step: {len(params)} parameters but {len(grads)} gradients"
        )
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.data.shape:
            raise DimensionError(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


class Adam:
    """Convenience wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], learning_rate=0.0002,
                 beta1=0.5, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params
        ]
        adam_step(self.params, grads, self.state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(path, named_params: dict[str, np.ndarray], hyperparameters: dict):
    """Write a checkpoint directory: JSON manifest + one raw f64le blob per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(named_params.items()):
        fname = f"param_{i:03d}.f64"
        np.asarray(arr, dtype="<f8").tofile(path / fname)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": "lesionlab-checkpoint-v1",
        "hyperparameters": hyperparameters,
        "parameters": entries,
    }
    with open(path / CHECKPOINT_MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint directory; returns (named arrays, hyperparameters)."""
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise DataFormatError(f"checkpoint manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"malformed checkpoint manifest: {exc}") from exc
    if manifest.get("format") != "lesionlab-checkpoint-v1":
        raise DataFormatError(
            f"unsupported checkpoint format: {manifest.get('format')!r}"
        )
    params: dict[str, np.ndarray] = {}
    for entry in manifest["parameters"]:
        blob = path / entry["file"]
        if not blob.exists():
            raise DataFormatError(f"checkpoint blob missing: {blob}")
        arr = np.fromfile(blob, dtype="<f8")
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise DataFormatError(
                f"checkpoint blob {blob} holds {arr.size} values, "
                f"manifest expects {expected}"
            )
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return params, manifest["hyperparameters"]
