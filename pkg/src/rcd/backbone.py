"""Noise-map generator backbones.

The trainable backbone is deliberately tiny: a stack of stride-1
zero-padded 3x3 convolutions with tanh between them and a linear final
layer whose output channel count is L*C, so the output splits into L noise
maps of the input's shape. A non-learned oracle backbone that emits the
true residual (plus seeded per-level perturbations) backs pipeline tests
that must not depend on training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .errors import ConfigError
from .tape import GradTape, Var, conv2d_forward

Array = np.ndarray


@dataclass
class ConvLayer:
    weight: Array  # (kh, kw, cin, cout)
    bias: Array    # (cout,)


@dataclass
class BackboneParams:
    layers: list[ConvLayer]
    levels: int    # L
    channels: int  # C

    def __post_init__(self):
        last_out = self.layers[-1].weight.shape[3]
        if last_out != self.levels * self.channels:
            raise ConfigError(
                f"final layer must emit L*C={self.levels * self.channels} channels, "
                f"got {last_out}")
        for i, layer in enumerate(self.layers):
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                raise ConfigError(f"layer {i} has non-finite parameters")

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            [ConvLayer(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.levels, self.channels)


def init_backbone(levels: int, channels: int, hidden: int = 8, depth: int = 3,
                  kernel: int = 3, seed: int = 0) -> BackboneParams:
    """Seeded uniform init in [-s, s] with s = fan_in^{-1/2}."""
    rng = np.random.default_rng(seed)
    widths = [channels] + [hidden] * (depth - 1) + [levels * channels]
    layers = []
    for cin, cout in zip(widths[:-1], widths[1:]):
        s = (kernel * kernel * cin) ** -0.5
        layers.append(ConvLayer(
            rng.uniform(-s, s, size=(kernel, kernel, cin, cout)),
            rng.uniform(-s, s, size=(cout,))))
    return BackboneParams(layers, levels, channels)


def forward(params: BackboneParams, image: Array) -> Array:
    """Raw multi-level output, shape (H, W, L*C). Pure and deterministic."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != params.layers[0].weight.shape[2]:
        raise ConfigError(
            f"image shape {image.shape} does not match first layer "
            f"in-channels {params.layers[0].weight.shape[2]}")
    x = image
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        x = conv2d_forward(x, layer.weight, layer.bias)
        if i != last:
            x = np.tanh(x)
    return x


def param_vars(tape: GradTape, params: BackboneParams) -> list[tuple[Var, Var]]:
    return [(tape.leaf(l.weight), tape.leaf(l.bias)) for l in params.layers]


def forward_graph(tape: GradTape, layer_vars: list[tuple[Var, Var]], image: Array) -> Var:
    """Differentiable forward; matches forward() bit-for-bit on the same input."""
    x = tape.leaf(np.asarray(image, dtype=np.float64))
    last = len(layer_vars) - 1
    for i, (w, b) in enumerate(layer_vars):
        x = tp.conv2d(x, w, b)
        if i != last:
            x = tp.tanh(x)
    return x


def backbone_vjp(params: BackboneParams, image: Array, upstream: Array) -> BackboneParams:
    """Parameter cotangents for a given cotangent on the raw output."""
    upstream = np.asarray(upstream, dtype=np.float64)
    tape = GradTape()
    lvars = param_vars(tape, params)
    raw = forward_graph(tape, lvars, image)
    if upstream.shape != raw.value.shape:
        raise ConfigError(
            f"upstream cotangent shape {upstream.shape} != output shape {raw.value.shape}")
    grads = tape.backward(tp.vsum(tp.mul(raw, upstream)))
    return BackboneParams(
        [ConvLayer(grads[w], grads[b]) for w, b in lvars],
        params.levels, params.channels)


def oracle_backbone(image: Array, true_clean: Array, levels: int,
                    perturbation: float = 0.0, seed: int = 0) -> Array:
    """Test-double backbone: the true residual in every level slot.

    Each slot gets an independent seeded Gaussian perturbation scaled by
    ``perturbation`` so downstream normalization and decorrelation see
    distinguishable maps without any training.
    """
    image = np.asarray(image, dtype=np.float64)
    true_clean = np.asarray(true_clean, dtype=np.float64)
    if image.shape != true_clean.shape:
        raise ConfigError(f"shape mismatch: {image.shape} vs {true_clean.shape}")
    residual = true_clean - image
    rng = np.random.default_rng(seed)
    slots = [residual + perturbation * rng.standard_normal(image.shape)
             for _ in range(levels)]
    return np.concatenate(slots, axis=2)
