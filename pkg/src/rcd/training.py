"""Desk-scale end-to-end training on synthetic AWGN data.

The training set is procedurally generated (piecewise-smooth images built
from gradients, rectangles and soft disks), so the repository carries no
dataset payload. Each step draws a fresh seeded batch, builds the full
differentiable graph per sample — backbone, level normalization,
decorrelation through the unrolled Newton iterations, AutoTune edit,
losses — and applies one momentum-SGD update. Everything is derived from
the config seed, so identical configs produce bit-identical parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as tp
from .backbone import BackboneParams, forward_graph, init_backbone, param_vars
from .control import AutoTuneHead, autotune_graph, edit_graph, init_autotune_head
from .errors import ConfigError, DivergenceError, RcdError
from .pipeline import LevelSchedule, NoiseMapStack, decorrelate_graph, normalize_graph, sd
from .tape import GradTape
from .whitening import covariance, offdiag_frobenius

Array = np.ndarray


@dataclass
class TrainConfig:
    schedule: LevelSchedule = field(
        default_factory=lambda: LevelSchedule.from_255([15.0, 30.0, 45.0, 60.0]))
    loss_weight: float = 0.1          # weight of the per-level term
    newton_iterations: int = 4
    learning_rate: float = 0.02
    head_learning_rate: float = 0.0    # >0 adds gradient refinement between refits
    head_weight_decay: float = 0.003   # only relevant when the head takes gradients
    head_warmup_steps: int = 600       # maps-only phase before the head calibrates
    head_refit_every: int = 200        # re-fit cadence; features drift as maps train
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 8
    patch_size: int = 16
    channels: int = 1
    hidden_channels: int = 8
    depth: int = 3
    kernel_size: int = 3
    sigma_range: tuple[float, float] = (3.0 / 255.0, 60.0 / 255.0)
    autotune_temperature: float = 0.5  # stored in the trained head
    seed: int = 0
    decorrelation: bool = True        # ablation switch
    level_loss_kind: str = "mse"      # "mse" | "psnr"
    grad_clip: float = 100.0          # global-norm cap; 0 disables
    log_every: int = 25

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ConfigError(f"loss weight must be >= 0, got {self.loss_weight}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        lo, hi = self.sigma_range
        if not (0 < lo <= hi <= self.schedule.levels.max() + 1e-12):
            raise ConfigError(
                f"sigma range {self.sigma_range} must lie within "
                f"(0, {self.schedule.levels.max():.6g}]")
        if self.level_loss_kind not in ("mse", "psnr"):
            raise ConfigError(f"unknown level loss kind {self.level_loss_kind!r}")


@dataclass
class SyntheticSample:
    clean: Array
    noisy: Array
    sigma: float


@dataclass
class LogRecord:
    step: int
    total_loss: float
    level_loss: float
    collapse_pre: float    # off-diagonal covariance norm before whitening
    collapse_post: float   # same, on the stack edits actually use
    wall_time: float


def synthetic_image(height: int, width: int, channels: int = 1, rng=None) -> Array:
    """Piecewise-smooth test image: gradient + rectangles + soft disks."""
    rng = np.random.default_rng(rng)
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    y /= max(height - 1, 1)
    x /= max(width - 1, 1)
    fld = rng.uniform(-1, 1) * x + rng.uniform(-1, 1) * y + rng.uniform(0, 1)
    for _ in range(int(rng.integers(2, 5))):
        r0, r1 = np.sort(rng.integers(0, height, 2))
        c0, c1 = np.sort(rng.integers(0, width, 2))
        fld[r0:r1 + 1, c0:c1 + 1] = rng.uniform(0, 1)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, 1, 2)
        radius = rng.uniform(0.1, 0.4)
        fld += rng.uniform(-0.6, 0.6) * np.exp(-0.5 * ((y - cy) ** 2 + (x - cx) ** 2) / radius ** 2)
    lo, hi = fld.min(), fld.max()
    fld = 0.05 + 0.9 * (fld - lo) / max(hi - lo, 1e-9)
    if channels == 1:
        return fld[..., None]
    color = rng.uniform(0.3, 1.0, channels)
    img = fld[..., None] * color + 0.05 * rng.uniform(-1, 1, channels)
    return np.clip(img, 0.0, 1.0)


def make_awgn_sample(clean: Array, sigma: float, seed) -> SyntheticSample:
    """clean + seeded white Gaussian noise at standard deviation sigma."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.random.default_rng(seed).standard_normal(clean.shape) * sigma
    return SyntheticSample(clean, clean + noise, float(sigma))


def mse(a: Array, b: Array) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def psnr(a: Array, b: Array, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf sentinel for identical inputs."""
    m = mse(a, b)
    if m == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / m)


def level_loss(gt: Array, noisy: Array, stack: NoiseMapStack) -> float:
    """Mean over levels of MSE(gt, noisy + map_i)."""
    return float(np.mean([mse(gt, noisy + m) for m in stack.maps]))


def total_loss(gt: Array, noisy: Array, stack: NoiseMapStack, head: AutoTuneHead,
               raw: Array, loss_weight: float) -> float:
    from .control import autotune, edit
    c = autotune(head, raw)
    return loss_weight * level_loss(gt, noisy, stack) + mse(gt, edit(noisy, stack, c))


def collapse_diagnostic(maps) -> float:
    """Off-diagonal Frobenius norm of the stack covariance (level-collapse probe)."""
    flat = maps.flat() if isinstance(maps, NoiseMapStack) else \
        np.asarray(maps).reshape(len(maps), -1)
    if flat.shape[0] < 2:
        raise ConfigError("collapse diagnostic needs at least 2 maps")
    return offdiag_frobenius(covariance(flat))


def _mse_graph(a, b):
    return tp.vmean(tp.square(tp.sub(a, b)))


def _per_level_graph(pred, gt, kind):
    if kind == "mse":
        return _mse_graph(pred, gt)
    # negated PSNR, guarded against exact-zero MSE
    m = tp.add(_mse_graph(pred, gt), 1e-12)
    return tp.mul(10.0 / np.log(10.0), tp.log(m))


def build_training_graph(tape: GradTape, lvars, head_w, head_b, sample: SyntheticSample,
                         cfg: TrainConfig, fallback_seed: int = 0):
    """Full differentiable objective for one sample.

    Returns (total loss Var, level loss Var, pre-whitening maps, edit-facing maps).
    """
    raw = forward_graph(tape, lvars, sample.noisy)
    maps = normalize_graph(tape, raw, cfg.schedule, fallback_seed)
    if cfg.decorrelation:
        dec = decorrelate_graph(tape, maps, cfg.schedule, cfg.newton_iterations)
    else:
        dec = maps
    cbar = autotune_graph(tape, head_w, head_b, raw, cfg.autotune_temperature)
    edited = edit_graph(tape, sample.noisy, dec, cbar)

    gt = sample.clean
    lvl = tape.leaf(np.float64(0.0))
    for m in dec:
        lvl = tp.add(lvl, _per_level_graph(tp.add(tape.leaf(sample.noisy), m), gt,
                                           cfg.level_loss_kind))
    lvl = tp.mul(1.0 / len(dec), lvl)
    total = tp.add(tp.mul(cfg.loss_weight, lvl), _per_level_graph(edited, gt,
                                                                  cfg.level_loss_kind))
    return total, lvl, maps, dec


@dataclass
class TrainResult:
    params: BackboneParams
    head: AutoTuneHead
    log: list[LogRecord]


def calibrate_head(params: BackboneParams, cfg: TrainConfig,
                   samples_per_sigma: int = 12) -> AutoTuneHead:
    """Data-dependent head initialization by least squares.

    Joint gradient training of the selection head is prone to winner-take-all
    collapse (whichever level the softmax picks first is the only one the
    edit loss improves, so its lead is self-reinforcing). Instead, the head
    is seeded from a closed-form fit: pooled features of seeded calibration
    batches are regressed onto tent-shaped target scores peaked at the level
    matching each batch's known noise strength. The objective itself never
    uses the noise strength — this only replaces the zero init.
    """
    levels = cfg.schedule.levels
    log_levels = np.log(levels)
    gaps = np.diff(log_levels)
    scale = 2.0 * cfg.autotune_temperature / (gaps.min() if gaps.size else 1.0)

    sigmas = np.geomspace(max(cfg.sigma_range[0], levels[0] / 2.0),
                          cfg.sigma_range[1], 2 * cfg.schedule.count + 1)
    feats, targets = [], []
    from .control import pool_features
    from .backbone import forward as backbone_forward
    for si, sigma in enumerate(sigmas):
        for k in range(samples_per_sigma):
            clean = synthetic_image(cfg.patch_size, cfg.patch_size, cfg.channels,
                                    rng=[cfg.seed, 900_000 + si, k])
            sample = make_awgn_sample(clean, float(sigma),
                                      seed=[cfg.seed, 900_000 + si, k, 1])
            feats.append(pool_features(backbone_forward(params, sample.noisy)))
            targets.append(-np.abs(np.log(sigma) - log_levels) * scale)
    phi = np.hstack([np.asarray(feats), np.ones((len(feats), 1))])
    theta, *_ = np.linalg.lstsq(phi, np.asarray(targets), rcond=None)
    return AutoTuneHead(theta[:-1].T.copy(), theta[-1].copy(),
                        cfg.autotune_temperature)


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Momentum-SGD over seeded synthetic batches; bit-deterministic per seed."""
    params = init_backbone(cfg.schedule.count, cfg.channels, cfg.hidden_channels,
                           cfg.depth, cfg.kernel_size, seed=cfg.seed)
    head = init_autotune_head(cfg.schedule.count, cfg.channels,
                              cfg.autotune_temperature)

    weights = [l.weight for l in params.layers] + [l.bias for l in params.layers] \
        + [head.weight, head.bias]
    velocity = [np.zeros_like(w) for w in weights]
    log: list[LogRecord] = []
    started = time.perf_counter()

    for step in range(cfg.steps):
        if step == min(cfg.head_warmup_steps, max(cfg.steps - 1, 0)) and cfg.steps > 0:
            calibrated = calibrate_head(params, cfg)
            head.weight[:] = calibrated.weight
            head.bias[:] = calibrated.bias
            head.temperature = calibrated.temperature
            velocity[-2][:] = 0.0
            velocity[-1][:] = 0.0
        grads = [np.zeros_like(w) for w in weights]
        batch_total = 0.0
        batch_level = 0.0
        pre_stack = post_stack = None
        for k in range(cfg.batch_size):
            clean = synthetic_image(cfg.patch_size, cfg.patch_size, cfg.channels,
                                    rng=[cfg.seed, step, k])
            sigma_rng = np.random.default_rng([cfg.seed, step, k, 1])
            sigma = float(sigma_rng.uniform(*cfg.sigma_range))
            sample = make_awgn_sample(clean, sigma, seed=[cfg.seed, step, k, 2])

            tape = GradTape()
            lvars = param_vars(tape, params)
            hw, hb = tape.leaf(head.weight), tape.leaf(head.bias)
            total, lvl, pre, post = build_training_graph(
                tape, lvars, hw, hb, sample, cfg, fallback_seed=cfg.seed + step)
            if not np.isfinite(total.value):
                raise DivergenceError(f"non-finite loss at step {step}")
            batch_total += float(total.value)
            batch_level += float(lvl.value)
            g = tape.backward(total)
            flat_vars = [w for w, _ in lvars] + [b for _, b in lvars] + [hw, hb]
            for i, v in enumerate(flat_vars):
                grads[i] += g[v]
            pre_stack, post_stack = pre, post

        scale = 1.0 / cfg.batch_size
        grads = [g * scale for g in grads]
        if cfg.grad_clip > 0:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
        if step < cfg.head_warmup_steps:
            # maps-only phase: the uniform zero-init head stays frozen
            grads[-2][:] = 0.0
            grads[-1][:] = 0.0
        elif cfg.head_weight_decay > 0:
            grads[-2] += cfg.head_weight_decay * weights[-2]
            grads[-1] += cfg.head_weight_decay * weights[-1]
        rates = [cfg.learning_rate] * (len(weights) - 2) + [cfg.head_learning_rate] * 2
        for w, v, g, lr in zip(weights, velocity, grads, rates):
            v *= cfg.momentum
            v -= lr * g
            w += v

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            pre_maps = np.stack([m.value for m in pre_stack])
            post_maps = np.stack([m.value for m in post_stack])
            if cfg.decorrelation:
                _check_calibration(post_maps, cfg.schedule, step)
            rec = LogRecord(
                step=step,
                total_loss=batch_total / cfg.batch_size,
                level_loss=batch_level / cfg.batch_size,
                collapse_pre=collapse_diagnostic(pre_maps) if cfg.schedule.count > 1 else 0.0,
                collapse_post=collapse_diagnostic(post_maps) if cfg.schedule.count > 1 else 0.0,
                wall_time=time.perf_counter() - started)
            log.append(rec)
            if progress is not None:
                progress(rec)

    return TrainResult(params, head, log)


def _check_calibration(maps: Array, schedule: LevelSchedule, step: int) -> None:
    for m, level in zip(maps, schedule.levels):
        if abs(sd(m) - level) / level > 1e-9:
            raise RcdError(
                f"level calibration violated at step {step}: sd={sd(m):.9g} "
                f"vs level {level:.9g}")


@dataclass
class HeldoutReport:
    noisy_psnr: float
    autotune_psnr: float
    one_hot: list[tuple[float, float, float]]  # (level, noisy_psnr, edited_psnr)


def heldout_eval(params: BackboneParams, head: AutoTuneHead, cfg: TrainConfig,
                 sigma: float, count: int = 32, size: int = 32,
                 seed: int = 9_999) -> HeldoutReport:
    """PSNR of AutoTune edits on held-out patches, plus one-hot corner cases.

    One-hot edits are evaluated at their matching noise level: level i's
    edit runs on inputs degraded with sigma = l_i.
    """
    from .control import autotune, edit
    from .pipeline import run_pipeline
    from .backbone import forward as backbone_forward

    def batch_psnrs(noise_sigma, coeffs_for):
        noisy_vals, edited_vals = [], []
        for k in range(count):
            clean = synthetic_image(size, size, cfg.channels, rng=[seed, k])
            sample = make_awgn_sample(clean, noise_sigma, seed=[seed, k, 1])
            stack = run_pipeline(params, sample.noisy, cfg.schedule,
                                 cfg.newton_iterations)
            raw = backbone_forward(params, sample.noisy)
            coeffs = coeffs_for(raw)
            noisy_vals.append(psnr(sample.noisy, clean))
            edited_vals.append(psnr(edit(sample.noisy, stack, coeffs), clean))
        return float(np.mean(noisy_vals)), float(np.mean(edited_vals))

    noisy_db, auto_db = batch_psnrs(sigma, lambda raw: autotune(head, raw))
    one_hot = []
    for i, level in enumerate(cfg.schedule.levels):
        hot = np.zeros(cfg.schedule.count)
        hot[i] = 1.0
        n_db, e_db = batch_psnrs(float(level), lambda raw: hot)
        one_hot.append((float(level), n_db, e_db))
    return HeldoutReport(noisy_db, auto_db, one_hot)
