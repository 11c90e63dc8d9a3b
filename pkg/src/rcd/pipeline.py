"""From raw backbone output to calibrated, decorrelated noise map stacks.

Two stages, both network-free:

  1. level normalization — each split map is rescaled so its standard
     deviation equals its slot's scheduled noise level;
  2. decorrelation — the stack is row-centered, whitened with the inverse
     square root of its trace-normalized covariance, the row means are
     restored, and the maps are normalized to their levels again (whitening
     destroys the per-map scale; the second normalization restores it
     without disturbing the near-zero pairwise correlations).

Levels are stored as fractions of full intensity scale; the familiar
[0, 255] figures are a constructor convenience.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import tape as tp
from . import whitening
from .backbone import BackboneParams, forward
from .errors import ConfigError, DegenerateInputError, DivergenceError, SingularMatrixError
from .tape import GradTape, Var

Array = np.ndarray

SD_EPSILON = 1e-8  # below this a split map is considered degenerate


@dataclass(frozen=True)
class LevelSchedule:
    """Strictly increasing noise levels, as fractions of full scale."""

    levels: Array

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        object.__setattr__(self, "levels", levels)
        if levels.ndim != 1 or levels.size < 1:
            raise ConfigError("schedule needs at least one level")
        if not (levels > 0).all() or not (np.diff(levels) > 0).all():
            raise ConfigError(f"levels must be strictly increasing and > 0: {levels}")

    @classmethod
    def from_255(cls, values) -> "LevelSchedule":
        return cls(np.asarray(values, dtype=np.float64) / 255.0)

    @property
    def count(self) -> int:
        return int(self.levels.size)

    @property
    def as_255(self) -> Array:
        return self.levels * 255.0


def default_schedule(count: int = 12, spacing_255: float = 5.0) -> LevelSchedule:
    return LevelSchedule.from_255(spacing_255 * np.arange(1, count + 1))


@dataclass
class NoiseMapStack:
    maps: Array  # (L, H, W, C)
    schedule: LevelSchedule
    decorrelated: bool = False

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 4 or self.maps.shape[0] != self.schedule.count:
            raise ConfigError(
                f"maps shape {self.maps.shape} does not match schedule "
                f"L={self.schedule.count}")

    @property
    def count(self) -> int:
        return self.maps.shape[0]

    def flat(self) -> Array:
        """(L, M) view with M = H*W*C."""
        return self.maps.reshape(self.count, -1)


def sd(values: Array) -> float:
    """Standard deviation over all elements, mean-subtracted, denominator M-1."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise DegenerateInputError(f"need at least 2 elements, got {values.size}")
    return float(np.std(values, ddof=1))


def split_raw(raw: Array, levels: int) -> Array:
    """(H, W, L*C) -> (L, H, W, C) along the channel axis, losslessly."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] % levels != 0:
        raise ConfigError(f"raw shape {raw.shape} does not split into {levels} maps")
    channels = raw.shape[2] // levels
    return np.stack([raw[:, :, i * channels:(i + 1) * channels] for i in range(levels)])


def _calibrate_maps(maps: Array, schedule: LevelSchedule, fallback_seed: int) -> Array:
    out = np.empty_like(maps)
    for i, level in enumerate(schedule.levels):
        s = sd(maps[i])
        if s <= SD_EPSILON:
            warnings.warn(
                f"split map {i} is degenerate (sd={s:.3e}); substituting seeded "
                f"white noise at level {level:.6g}", stacklevel=3)
            noise = np.random.default_rng(fallback_seed + i).standard_normal(maps[i].shape)
            out[i] = noise * (level / sd(noise))
        else:
            out[i] = maps[i] * (level / s)
    return out


def normalize_to_levels(raw: Array, schedule: LevelSchedule,
                        fallback_seed: int = 0) -> NoiseMapStack:
    """Scale each split map so sd(map_i) == level_i exactly (up to rounding)."""
    maps = split_raw(raw, schedule.count)
    return NoiseMapStack(_calibrate_maps(maps, schedule, fallback_seed), schedule)


def decorrelate(stack: NoiseMapStack, iterations: int = 4, method: str = "newton",
                fallback_seed: int = 0) -> NoiseMapStack:
    """Whiten the stack so pairwise correlations are near zero.

    ``method="newton"`` runs the T-step iteration; ``method="eigen"`` uses
    the exact oracle. A diverging iteration falls back to the oracle; a
    near-singular covariance (level collapse) falls back to the oracle with
    floored eigenvalues, with a warning naming the offending eigenvalue.
    """
    if method not in ("newton", "eigen"):
        raise ConfigError(f"unknown decorrelation method {method!r}")
    if stack.count == 1:
        return replace(stack, maps=stack.maps.copy(), decorrelated=True)

    rows = stack.flat()
    row_means = rows.mean(axis=1, keepdims=True)
    centered = rows - row_means
    try:
        sigma = whitening.trace_normalize(whitening.covariance(rows))
    except DegenerateInputError:
        warnings.warn("all-zero noise stack; decorrelation is the identity", stacklevel=2)
        return replace(stack, maps=stack.maps.copy(), decorrelated=True)

    inv_sqrt = None
    if method == "newton":
        try:
            candidate = whitening.newton_schulz_inv_sqrt(sigma, iterations)
            baseline = whitening.whitening_residual(np.eye(stack.count), sigma)
            if whitening.whitening_residual(candidate, sigma) < baseline:
                inv_sqrt = candidate
            else:
                warnings.warn(
                    f"Newton iteration did not improve whitening after {iterations} "
                    "steps; falling back to the eigen oracle", stacklevel=2)
        except DivergenceError as exc:
            warnings.warn(f"{exc}; falling back to the eigen oracle", stacklevel=2)
    if inv_sqrt is None:
        try:
            inv_sqrt = whitening.eigen_inv_sqrt(sigma)
        except SingularMatrixError as exc:
            warnings.warn(
                f"covariance is near-singular (eigenvalue {exc.eigenvalue:.3e}); "
                "noise levels may have collapsed — flooring eigenvalues", stacklevel=2)
            inv_sqrt = whitening.eigen_inv_sqrt(
                sigma, clamp=whitening.EIGEN_FLOOR_REL)

    whitened = inv_sqrt @ centered + row_means
    maps = whitened.reshape(stack.maps.shape)
    maps = _calibrate_maps(maps, stack.schedule, fallback_seed)
    return NoiseMapStack(maps, stack.schedule, decorrelated=True)


def run_pipeline(params: BackboneParams, image: Array, schedule: LevelSchedule,
                 iterations: int = 4, method: str = "newton",
                 fallback_seed: int = 0) -> NoiseMapStack:
    """backbone forward -> level normalization -> decorrelation."""
    if schedule.count != params.levels:
        raise ConfigError(
            f"schedule has {schedule.count} levels but backbone emits {params.levels}")
    raw = forward(params, image)
    stack = normalize_to_levels(raw, schedule, fallback_seed)
    return decorrelate(stack, iterations, method, fallback_seed)


def pairwise_correlation(stack: NoiseMapStack) -> Array:
    """(L, L) correlation matrix of the flattened maps."""
    sigma = whitening.covariance(stack.flat())
    d = np.sqrt(np.diag(sigma))
    return sigma / np.outer(d, d)


def max_offdiag_correlation(stack: NoiseMapStack) -> float:
    corr = pairwise_correlation(stack)
    return float(np.abs(corr - np.diag(np.diag(corr))).max())


# -- differentiable versions for the training graph ------------------------

def sd_graph(x: Var) -> Var:
    centered = tp.sub(x, tp.vmean(x))
    return tp.sqrt(tp.div(tp.vsum(tp.square(centered)), float(x.value.size - 1)))


def normalize_graph(tape: GradTape, raw: Var, schedule: LevelSchedule,
                    fallback_seed: int = 0) -> list[Var]:
    """Differentiable normalize_to_levels; degenerate maps become constants.

    The white-noise substitute is a tape constant, so no gradient flows into
    a collapsed slot — the level keeps its calibration and training stays
    total, exactly like the inference path.
    """
    H, W, total = raw.value.shape
    channels = total // schedule.count
    out = []
    for i, level in enumerate(schedule.levels):
        m = tp.channel_slice(raw, i * channels, (i + 1) * channels)
        s = sd_graph(m)
        if float(s.value) <= SD_EPSILON:
            warnings.warn(
                f"split map {i} is degenerate in the training graph; substituting "
                "constant seeded noise", stacklevel=2)
            noise = np.random.default_rng(fallback_seed + i).standard_normal((H, W, channels))
            out.append(tape.leaf(noise * (level / sd(noise))))
        else:
            out.append(tp.mul(float(level), tp.div(m, s)))
    return out


def decorrelate_graph(tape: GradTape, maps: list[Var], schedule: LevelSchedule,
                      iterations: int = 4) -> list[Var]:
    """Differentiable decorrelate; backward runs through the unrolled iterations."""
    L = len(maps)
    if L == 1:
        return list(maps)
    shape = maps[0].value.shape
    M = int(np.prod(shape))
    rows = tp.row_stack([tp.reshape(m, (M,)) for m in maps])
    row_means = tp.vmean(rows, axis=1, keepdims=True)
    centered = tp.sub(rows, row_means)
    cov = tp.div(tp.matmul(centered, tp.transpose(centered)), float(M - 1))
    sigma = tp.div(cov, tp.trace(cov))
    y = tape.leaf(np.eye(L))
    for _ in range(iterations):
        y3 = tp.matmul(tp.matmul(y, y), y)
        y = tp.mul(0.5, tp.sub(tp.mul(3.0, y), tp.matmul(y3, sigma)))
        y = tp.mul(0.5, tp.add(y, tp.transpose(y)))
    if not np.isfinite(y.value).all():
        raise DivergenceError("Newton iteration diverged inside the training graph")
    whitened = tp.add(tp.matmul(y, centered), row_means)
    out = []
    for i, level in enumerate(schedule.levels):
        m = tp.reshape(tp.take_row(whitened, i), shape)
        out.append(tp.mul(float(level), tp.div(m, sd_graph(m))))
    return out
