"""Desk-scale training: explicit backward passes, L1 loss, Adam, augmentation.

The recipe follows the usual SISR setup: random crops with the 8 dihedral
flips/rotations, LR patches made by bicubic downscaling of the HR patch,
L1 loss, Adam and a step learning-rate decay. Every sample draws from its
own RNG stream keyed by ``(seed, sample index)`` so results do not depend on
how batches are assembled.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DivergenceError, LoadError, StateError
from .export import load, model_paths, save
from .model import Model, run
from .tensor import Kernel

# Full-scale schedule (1M iterations, batch 32, halve every 200k).
FULL_ITERATIONS = 1_000_000
FULL_BATCH_SIZE = 32
FULL_LR = 5e-4
FULL_LR_DECAY_FACTOR = 0.5
FULL_LR_DECAY_EVERY = 200_000
# at 5e-4 the first Adam steps knock short runs off the identity solution
DESK_LR = 2e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    patch_size: int = 48
    lr_initial: float = FULL_LR
    lr_decay_factor: float = FULL_LR_DECAY_FACTOR
    lr_decay_every: int = 1000
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("batch_size", "patch_size", "lr_decay_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (self.lr_initial > 0 and self.lr_decay_factor > 0 and self.eps > 0):
            raise ConfigError("learning rate, decay factor and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(
            iterations=FULL_ITERATIONS,
            batch_size=FULL_BATCH_SIZE,
            lr_decay_every=FULL_LR_DECAY_EVERY,
        )
        return cls(**{**base, **overrides})

    @classmethod
    def desk_scale(cls, iterations: int = 5000, **overrides) -> "TrainConfig":
        """Full schedule shrunk proportionally (five LR halvings over the run), at DESK_LR."""
        every = max(1, iterations * FULL_LR_DECAY_EVERY // FULL_ITERATIONS)
        return cls(**{**dict(iterations=iterations, lr_decay_every=every, lr_initial=DESK_LR), **overrides})

    def lr_at(self, step: int) -> float:
        return self.lr_initial * self.lr_decay_factor ** (step // self.lr_decay_every)


# -- loss and gradients -----------------------------------------------------


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient (sign(0) = 0)."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    loss = float(np.abs(diff.astype(np.float64)).mean())
    return loss, (np.sign(diff) / diff.size).astype(pred.dtype)


@dataclass
class GradientSet:
    weights: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    input: Optional[np.ndarray] = None

    def __getitem__(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.weights[name]

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.weights.values())


def forward_with_cache(model: Model, image: np.ndarray, strict: bool = True) -> tuple[np.ndarray, list]:
    cache: list = []
    out = run(model, image, cache=cache, strict=strict)
    return out, cache


def _conv_backward(kernel: Kernel, inp: np.ndarray, g: np.ndarray, need_input: bool):
    n, c, h, w = inp.shape
    gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, kernel.out_ch)
    cols = T.im2col(inp, kernel.size)
    dw = (gmat.T @ cols).reshape(kernel.weight.shape)
    db = g.sum(axis=(0, 2, 3))
    dx = None
    if need_input:
        # adjoint of same-padded correlation: swap in/out channels and flip spatially
        wt = np.ascontiguousarray(kernel.weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        adj = Kernel(wt, np.zeros(kernel.in_ch, kernel.weight.dtype))
        dx = T.conv2d(g, adj, accumulate=g.dtype)
    return dw, db, dx


def backward(
    model: Model,
    image: np.ndarray,
    output_grad: np.ndarray,
    cache: Optional[list] = None,
    input_grad: bool = False,
) -> GradientSet:
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Pass the ``cache`` from :func:`forward_with_cache` to skip recomputing the
    forward pass; otherwise it is rebuilt from ``image``.
    """
    if cache is None:
        if image is None:
            raise StateError("backward needs either a forward cache or the input image")
        _, cache = forward_with_cache(model, image)
    if not cache:
        raise StateError("empty forward cache")
    grads = GradientSet()
    g = output_grad
    anchor_grad = None
    first_conv = next(i for i, e in enumerate(cache) if e[0] == "conv")
    anchor_conv = None
    if model.config.anchor_residual:
        anchor_conv = max(i for i, e in enumerate(cache) if e[0] == "conv")
    for i in range(len(cache) - 1, -1, -1):
        kind, layer, inp, pre = cache[i]
        if kind == "avgpool":
            g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25)
        elif kind == "d2s":
            g = T.space_to_depth(g, layer.block, layer.order)
        elif kind == "s2d":
            g = T.depth_to_space(g, layer.block, layer.order)
        elif kind == "conv":
            if layer.relu1:
                g = g * ((pre > 0) & (pre < 1))
            if i == anchor_conv:
                d2s = cache[i + 1][1]
                s2 = d2s.block * d2s.block
                n, c, hh, ww = g.shape
                if d2s.order == "CRD":
                    anchor_grad = g.reshape(n, 3, s2, hh, ww).sum(axis=2)
                else:
                    anchor_grad = g.reshape(n, s2, 3, hh, ww).sum(axis=1)
            need_input = i != first_conv or input_grad
            dw, db, dx = _conv_backward(layer.kernel, inp, g, need_input)
            grads.weights[layer.name] = (dw.astype(layer.kernel.weight.dtype), db.astype(layer.kernel.bias.dtype))
            g = dx
    if input_grad:
        grads.input = g if anchor_grad is None else g + anchor_grad
    return grads


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    v: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: Model) -> "AdamState":
        z = {c.name: (np.zeros_like(c.kernel.weight), np.zeros_like(c.kernel.bias)) for c in model.convs()}
        return cls(0, _copy_moments(z), z)

    def copy(self) -> "AdamState":
        return AdamState(self.step, _copy_moments(self.m), _copy_moments(self.v))


def _copy_moments(d):
    return {k: (a.copy(), b.copy()) for k, (a, b) in d.items()}


def adam_update(param, grad, m, v, t: int, lr: float, beta1=ADAM_BETAS[0], beta2=ADAM_BETAS[1], eps=ADAM_EPS):
    """One bias-corrected Adam step for a single array; ``t`` is 1-based."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def adam_step(
    model: Model,
    grads: GradientSet,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETAS[0],
    beta2: float = ADAM_BETAS[1],
    eps: float = ADAM_EPS,
) -> None:
    """Update ``model`` weights and ``state`` in place."""
    state.step += 1
    t = state.step
    for conv in model.convs():
        gw, gb = grads[conv.name]
        mw, mb = state.m[conv.name]
        vw, vb = state.v[conv.name]
        k = conv.kernel
        if mw.shape != gw.shape or mb.shape != gb.shape:
            raise StateError(f"optimizer state shape mismatch for {conv.name}")
        w, mw, vw = adam_update(k.weight, gw, mw, vw, t, lr, beta1, beta2, eps)
        b, mb, vb = adam_update(k.bias, gb, mb, vb, t, lr, beta1, beta2, eps)
        k.weight = w.astype(k.weight.dtype)
        k.bias = b.astype(k.bias.dtype)
        state.m[conv.name] = (mw.astype(k.weight.dtype), mb.astype(k.bias.dtype))
        state.v[conv.name] = (vw.astype(k.weight.dtype), vb.astype(k.bias.dtype))


# -- augmentation ---------------------------------------------------------------


def apply_dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` in 0..7 of the dihedral group on the last two axes."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def hr_patch_size(patch_size: int, scale) -> int:
    size = Fraction(patch_size) * T.as_fraction(scale)
    if size.denominator != 1:
        raise DimensionError(f"LR patch {patch_size} times scale {scale} is not an integer")
    return int(size)


def augment(
    hr_image: np.ndarray,
    rng: np.random.Generator,
    scale,
    patch_size: Optional[int] = None,
    transform: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random crop + dihedral transform of a (3, H, W) HR image; returns (lr, hr).

    ``patch_size`` is in LR pixels; ``None`` keeps the whole image, which must
    then already have a valid size. ``transform`` pins the dihedral element.
    """
    frac = T.as_fraction(scale)
    _, h, w = hr_image.shape
    if patch_size is None:
        hr = hr_image
        if Fraction(h) / frac != int(Fraction(h) / frac) or Fraction(w) / frac != int(Fraction(w) / frac):
            raise DimensionError(f"HR patch {h}x{w} is not divisible by scale {frac}")
    else:
        p = hr_patch_size(patch_size, frac)
        if h < p or w < p:
            raise DimensionError(f"HR image {h}x{w} smaller than patch {p}")
        y = int(rng.integers(0, h - p + 1))
        x = int(rng.integers(0, w - p + 1))
        hr = hr_image[:, y : y + p, x : x + p]
    k = int(rng.integers(0, 8)) if transform is None else transform
    hr = apply_dihedral(hr, k)
    lr = T.bicubic_resize(hr[None], 1 / frac)[0]
    return np.clip(lr, 0.0, 1.0).astype(np.float32), hr.astype(np.float32)


def sample_batch(dataset: Sequence[np.ndarray], cfg: TrainConfig, scale, step: int):
    lrs, hrs = [], []
    for b in range(cfg.batch_size):
        rng = np.random.default_rng([cfg.seed, step * cfg.batch_size + b])
        img = dataset[int(rng.integers(0, len(dataset)))]
        lr, hr = augment(img, rng, scale, cfg.patch_size)
        lrs.append(lr)
        hrs.append(hr)
    return np.stack(lrs), np.stack(hrs)


# -- loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    curve: list[tuple[int, float, float]]
    state: AdamState


def train_loop(
    model: Model,
    dataset: Sequence[np.ndarray],
    cfg: TrainConfig,
    state: Optional[AdamState] = None,
    log: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """Train a copy of ``model``; the input model is left untouched.

    ``cfg.iterations`` is the total step count. A ``state`` from a checkpoint
    resumes at ``state.step``, so a split run matches an uninterrupted one.
    """
    if not len(dataset):
        raise ConfigError("training dataset is empty")
    model = model.copy()
    state = AdamState.zeros_like(model) if state is None else state.copy()
    curve = []
    for step in range(state.step, cfg.iterations):
        lr_img, hr_img = sample_batch(dataset, cfg, model.config.scale, step)
        pred, cache = forward_with_cache(model, lr_img)
        loss, g = l1_loss(pred, hr_img)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step} (lr={cfg.lr_at(step)})")
        grads = backward(model, lr_img, g, cache=cache)
        lr = cfg.lr_at(step)
        adam_step(model, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        curve.append((step, lr, loss))
        if log is not None:
            log(step, lr, loss)
    return TrainResult(model, curve, state)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            wr.writerow([step, repr(float(lr)), repr(float(loss))])


# -- checkpoints ------------------------------------------------------------------

_ADAM_MAGIC = b"QSRADAM1"


def optimizer_path(path) -> Path:
    mpath, _ = model_paths(path)
    return mpath.with_name(mpath.name[: -len(".json")] + ".adam.bin")


def save_checkpoint(model: Model, state: AdamState, path) -> None:
    save(model, path)
    parts = [_ADAM_MAGIC, struct.pack("<Q", state.step)]
    for conv in model.convs():
        for arr in (*state.m[conv.name], *state.v[conv.name]):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    optimizer_path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[Model, AdamState]:
    model = load(path)
    opath = optimizer_path(path)
    if not opath.exists():
        return model, AdamState.zeros_like(model)
    data = opath.read_bytes()
    if data[:8] != _ADAM_MAGIC:
        raise LoadError(f"{opath}: not an optimizer state file")
    (step,) = struct.unpack("<Q", data[8:16])
    pos = 16
    state = AdamState(step)

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape)) * 4
        if pos + n > len(data):
            raise LoadError(f"{opath}: truncated")
        arr = np.frombuffer(data, "<f4", count=n // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += n
        return arr

    for conv in model.convs():
        ws, bs = conv.kernel.weight.shape, conv.kernel.bias.shape
        state.m[conv.name] = (take(ws), take(bs))
        state.v[conv.name] = (take(ws), take(bs))
    return model, state
