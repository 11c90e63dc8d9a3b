"""Network-free editing: interpolation, intensity arithmetic, AutoTune.

Every operation here is pure array arithmetic over an already-computed
noise map stack — no model evaluation anywhere, which is what makes edits
real-time. The effective output noise level of a control vector c is

    intensity(c) = sqrt(sum_i c_i^2 l_i^2),

exact when the maps are zero-correlated. Fixing that quantity defines an
ellipsoid in c-space; component_step walks along it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .errors import (
    ConfigError,
    InfeasibleStepError,
    NumericError,
    PreconditionError,
    UnderdeterminedError,
)
from .pipeline import LevelSchedule, NoiseMapStack
from .tape import GradTape, Var

Array = np.ndarray


@dataclass
class ControlVector:
    coeffs: Array
    source: str = "user"  # "user" | "autotune"

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 1:
            raise ConfigError("control vector must be 1-D")
        if not np.isfinite(self.coeffs).all():
            raise ConfigError(f"control vector has non-finite entries: {self.coeffs}")
        if self.source == "autotune":
            if abs(self.coeffs.sum() - 1.0) > 1e-9 or (self.coeffs < 0).any():
                raise ConfigError("autotune vectors must be nonnegative and sum to 1")

    def __len__(self) -> int:
        return self.coeffs.size


@dataclass
class AutoTuneHead:
    weight: Array       # (L, L*C)
    bias: Array         # (L,)
    temperature: float = 0.05

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.weight.shape != (self.bias.size, self.weight.shape[1]):
            raise ConfigError(f"weight {self.weight.shape} / bias {self.bias.shape} mismatch")


def init_autotune_head(levels: int, channels: int, temperature: float = 0.05) -> AutoTuneHead:
    """Zero init: suggests the uniform vector until trained."""
    return AutoTuneHead(np.zeros((levels, levels * channels)), np.zeros(levels), temperature)


def edit(noisy: Array, stack: NoiseMapStack, c: ControlVector | Array) -> Array:
    """I_n + sum_i c_i * map_i. Pure interpolation; unclamped."""
    coeffs = c.coeffs if isinstance(c, ControlVector) else np.asarray(c, dtype=np.float64)
    if not stack.decorrelated:
        raise PreconditionError("edit requires a decorrelated stack")
    if coeffs.size != stack.count:
        raise ConfigError(f"control vector has {coeffs.size} entries, stack has {stack.count}")
    noisy = np.asarray(noisy)
    if noisy.shape != stack.maps.shape[1:]:
        raise ConfigError(f"image {noisy.shape} does not match maps {stack.maps.shape[1:]}")
    mix = (coeffs @ stack.flat()).reshape(noisy.shape)
    return noisy + mix


def intensity(c: ControlVector | Array, schedule: LevelSchedule) -> float:
    """Effective output noise level sqrt(sum c_i^2 l_i^2)."""
    coeffs = c.coeffs if isinstance(c, ControlVector) else np.asarray(c, dtype=np.float64)
    if coeffs.size != schedule.count:
        raise ConfigError(f"|c|={coeffs.size} but schedule has {schedule.count} levels")
    return float(np.sqrt(np.sum(coeffs ** 2 * schedule.levels ** 2)))


def rescale_to_intensity(c: ControlVector, schedule: LevelSchedule,
                         target: float) -> ControlVector:
    """Scale c uniformly so its intensity hits target; direction preserved."""
    if target < 0:
        raise ConfigError(f"target intensity must be >= 0, got {target}")
    if target == 0.0:
        return ControlVector(np.zeros_like(c.coeffs))
    current = intensity(c, schedule)
    if current == 0.0:
        raise UnderdeterminedError(
            "cannot scale a zero control vector to a positive intensity; "
            "pick a direction first (e.g. the AutoTune vector)")
    return ControlVector(c.coeffs * (target / current))


def component_step(c: ControlVector, schedule: LevelSchedule, i: int, j: int,
                   delta: float) -> ControlVector:
    """Move c_i by delta, recomputing c_j so the intensity is unchanged.

    c_j keeps its sign. When no feasible c_j exists the error reports the
    largest feasible delta in the requested direction.
    """
    L = schedule.count
    if not (0 <= i < L and 0 <= j < L) or i == j:
        raise ConfigError(f"invalid component pair ({i}, {j}) for L={L}")
    coeffs = c.coeffs.copy()
    li, lj = float(schedule.levels[i]), float(schedule.levels[j])
    budget = coeffs[i] ** 2 * li ** 2 + coeffs[j] ** 2 * lj ** 2
    new_ci = coeffs[i] + delta
    remainder = budget - new_ci ** 2 * li ** 2
    if remainder < -1e-15 * max(budget, 1.0):
        reach = np.sqrt(budget) / li  # max |c_i| with c_j = 0
        max_feasible = (reach - coeffs[i]) if delta > 0 else (-reach - coeffs[i])
        raise InfeasibleStepError(
            f"step {delta:+.6g} on component {i} needs c_{j}^2 < 0; "
            f"max feasible step is {max_feasible:+.6g}", max_feasible)
    sign = 1.0 if coeffs[j] >= 0 else -1.0
    coeffs[i] = new_ci
    coeffs[j] = sign * np.sqrt(max(remainder, 0.0)) / lj
    return ControlVector(coeffs)


ENERGY_EPS = 1e-12


def pool_features(raw: Array) -> Array:
    """Per-channel log mean energy of the raw output: (H, W, L*C) -> (L*C,).

    Pooling the outputs themselves would be useless here: residual maps are
    near zero-mean, so their spatial average carries no amplitude
    information and the head could never react to the input's noise
    strength. Log mean energy grows with log sigma and is O(1)-scaled, so a
    linear head can learn ordered level selection at practical rates.
    """
    raw = np.asarray(raw, dtype=np.float64)
    return np.log((raw * raw).mean(axis=(0, 1)) + ENERGY_EPS)


def autotune(head: AutoTuneHead, raw: Array) -> ControlVector:
    """Temperature softmax over the head's scores of the pooled raw output."""
    f = pool_features(raw)
    if f.size != head.weight.shape[1]:
        raise ConfigError(
            f"pooled feature length {f.size} != head input {head.weight.shape[1]}")
    scores = head.weight @ f + head.bias
    if not np.isfinite(scores).all():
        raise NumericError(f"autotune scores are not finite: {scores}")
    z = (scores - scores.max()) / head.temperature
    e = np.exp(z)
    return ControlVector(e / e.sum(), source="autotune")


# -- differentiable versions ------------------------------------------------

def autotune_graph(tape: GradTape, weight: Var, bias: Var, raw: Var,
                   temperature: float) -> Var:
    H, W, F = raw.value.shape
    energy = tp.vmean(tp.square(tp.reshape(raw, (H * W, F))), axis=0)
    pooled = tp.log(tp.add(energy, ENERGY_EPS))
    scores = tp.add(tp.matmul(weight, pooled), bias)
    return tp.softmax_t(scores, temperature)


def edit_graph(tape: GradTape, noisy: Array, maps: list[Var], c: Var) -> Var:
    out = tape.leaf(np.asarray(noisy, dtype=np.float64))
    for i, m in enumerate(maps):
        out = tp.add(out, tp.mul(tp.take(c, i), m))
    return out
