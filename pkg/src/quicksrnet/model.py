"""Model construction, identity initialisation and forward pass.

A model is a flat list of layers: 3x3/1x1 convolutions (each optionally
followed by ReLU1) and the structural ops that change resolution. The conv
layers are named ``conv_first``, ``conv_body.<i>`` and ``conv_last``; these
names are shared by the serialized manifest and the quantization encodings.

Head variants:

``standard``
    conv 3->f, m x conv f->f, conv f->3S^2, depth-to-space(S).
``naive1p5x``
    the standard scale-3 stack followed by 2x2 average pooling.
``proposed1p5x``
    conv 3->f, m x conv f->f, space-to-depth(2), 1x1 conv 4f->27,
    depth-to-space(3).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, InitError
from .tensor import Kernel

HEADS = ("standard", "naive1p5x", "proposed1p5x")
INITS = ("identity", "random")
INTEGER_SCALES = (2, 3, 4)
ONE_AND_HALF = Fraction(3, 2)

DEFAULT_STD = 0.002

# Proposed 1.5x head: for each of the 3x3 output sub-pixels (row-major) of a
# 2x2 low-res block, the space-to-depth sub-pixel that nearest-neighbour 1.5x
# resampling reads from. Derived by brute force in tests/test_model.py.
SUBPIXEL_SOURCE_1P5X = (0, 1, 1, 2, 3, 3, 2, 3, 3)


@dataclass(frozen=True)
class ModelConfig:
    f: int = 32
    m: int = 2
    scale: Fraction = Fraction(2)
    head: str = "standard"
    anchor_residual: bool = False
    init: str = "identity"
    std: float = DEFAULT_STD
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale", T.as_fraction(self.scale))
        object.__setattr__(self, "head", self.head.lower())
        object.__setattr__(self, "init", self.init.lower())
        self.validate()

    def validate(self) -> None:
        if self.f < 4:
            raise ConfigError(f"f must be >= 4, got {self.f}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        if self.std < 0:
            raise ConfigError(f"std must be non-negative, got {self.std}")
        if self.scale == ONE_AND_HALF:
            if self.head == "standard":
                raise ConfigError("scale 3/2 needs the naive1p5x or proposed1p5x head")
        elif self.scale in INTEGER_SCALES:
            if self.head != "standard":
                raise ConfigError(f"head {self.head!r} is only valid for scale 3/2")
        else:
            raise ConfigError(f"scale must be one of 2, 3, 4, 3/2; got {self.scale}")
        if self.anchor_residual and self.head != "standard":
            raise ConfigError("anchor_residual is only supported with the standard head")

    @property
    def subpixel_factor(self) -> int:
        """Block size of the final depth-to-space."""
        return 3 if self.scale == ONE_AND_HALF else int(self.scale)

    @property
    def label(self) -> str:
        s = "1.5" if self.scale == ONE_AND_HALF else str(self.scale)
        tag = f"f{self.f}-m{self.m}-x{s}"
        if self.head != "standard":
            tag += f"-{self.head}"
        if self.anchor_residual:
            tag += "-anchor"
        return tag

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "m": self.m,
            "scale": str(self.scale),
            "head": self.head,
            "anchor_residual": self.anchor_residual,
            "init": self.init,
            "std": self.std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "scale": Fraction(d["scale"])})


@dataclass
class Conv:
    name: str
    kernel: Kernel
    relu1: bool = True


@dataclass(frozen=True)
class SpaceToDepth:
    block: int = 2
    order: str = "CRD"


@dataclass(frozen=True)
class DepthToSpace:
    block: int
    order: str = "CRD"


@dataclass(frozen=True)
class AvgPool2:
    pass


Layer = Union[Conv, SpaceToDepth, DepthToSpace, AvgPool2]


@dataclass
class Model:
    config: ModelConfig
    layers: list = field(default_factory=list)

    def convs(self) -> list[Conv]:
        return [l for l in self.layers if isinstance(l, Conv)]

    def conv(self, name: str) -> Conv:
        for c in self.convs():
            if c.name == name:
                return c
        raise KeyError(name)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for c in m.convs():
            c.kernel = c.kernel.astype(dtype)
        return m

    @property
    def d2s(self) -> DepthToSpace:
        return next(l for l in self.layers if isinstance(l, DepthToSpace))

    def output_shape(self, input_shape: tuple) -> tuple:
        return propagate_shapes(self, input_shape)[-1]


# -- identity collapse ------------------------------------------------------


def _center(kernel: Kernel) -> int:
    return kernel.size // 2


def identity_collapse_intermediate(kernel: Kernel) -> Kernel:
    """Fold ``y = W * x + x`` into the kernel: +1 on the centre diagonal."""
    if kernel.in_ch != kernel.out_ch:
        raise InitError(f"intermediate collapse needs square channels, got {kernel.out_ch}x{kernel.in_ch}")
    if kernel.size != 3:
        raise InitError("intermediate collapse expects a 3x3 kernel")
    k = kernel.copy()
    c = _center(k)
    idx = np.arange(k.out_ch)
    k.weight[idx, idx, c, c] += 1
    return k


def identity_collapse_first(kernel: Kernel) -> Kernel:
    """Partial identity: the RGB input is added to output channels 0..2 only."""
    if kernel.in_ch != 3:
        raise InitError(f"first-layer collapse expects 3 input channels, got {kernel.in_ch}")
    if kernel.out_ch < 3:
        raise InitError(f"first-layer collapse needs >= 3 output channels, got {kernel.out_ch}")
    k = kernel.copy()
    c = _center(k)
    idx = np.arange(3)
    k.weight[idx, idx, c, c] += 1
    return k


def identity_collapse_last(kernel: Kernel, s: int) -> Kernel:
    """Repeat-interleave identity: output channel i copies input channel i // s^2."""
    s = int(s)
    if kernel.out_ch != 3 * s * s:
        raise InitError(f"last-layer collapse expects {3 * s * s} output channels for s={s}, got {kernel.out_ch}")
    if kernel.in_ch < 3:
        raise InitError(f"last-layer collapse needs >= 3 input channels, got {kernel.in_ch}")
    k = kernel.copy()
    c = _center(k)
    out_idx = np.arange(3 * s * s)
    k.weight[out_idx, out_idx // (s * s), c, c] += 1
    return k


def identity_collapse_head_1p5x(kernel: Kernel) -> Kernel:
    """Nearest-neighbour-equivalent init for the 1x1 head after space-to-depth(2)."""
    if kernel.out_ch != 27 or kernel.size != 1 or kernel.in_ch % 4 or kernel.in_ch < 12:
        raise InitError(f"1.5x head collapse expects a 1x1 kernel 4f->27, got {kernel.weight.shape}")
    k = kernel.copy()
    for color in range(3):
        for sub, src in enumerate(SUBPIXEL_SOURCE_1P5X):
            k.weight[color * 9 + sub, color * 4 + src, 0, 0] += 1
    return k


# -- construction -----------------------------------------------------------


def _random_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, std: float) -> Kernel:
    shape = (out_ch, in_ch, k, k)
    if std > 0:
        w = rng.normal(0.0, std, size=shape).astype(np.float32)
    else:
        w = np.zeros(shape, np.float32)
    return Kernel(w, np.zeros(out_ch, np.float32))


def build(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    f, m = config.f, config.m
    identity = config.init == "identity"
    layers: list = []

    k = _random_kernel(rng, f, 3, 3, config.std)
    layers.append(Conv("conv_first", identity_collapse_first(k) if identity else k))
    for i in range(m):
        k = _random_kernel(rng, f, f, 3, config.std)
        layers.append(Conv(f"conv_body.{i}", identity_collapse_intermediate(k) if identity else k))

    if config.head == "proposed1p5x":
        layers.append(SpaceToDepth(2))
        k = _random_kernel(rng, 27, 4 * f, 1, config.std)
        layers.append(Conv("conv_last", identity_collapse_head_1p5x(k) if identity else k))
        layers.append(DepthToSpace(3))
    else:
        s = config.subpixel_factor
        k = _random_kernel(rng, 3 * s * s, f, 3, config.std)
        # with an anchor the repeat-interleave path already exists outside the conv
        if identity and not config.anchor_residual:
            k = identity_collapse_last(k, s)
        layers.append(Conv("conv_last", k))
        layers.append(DepthToSpace(s))
        if config.head == "naive1p5x":
            layers.append(AvgPool2())

    model = Model(config, layers)
    propagate_shapes(model, (1, 3, 8, 8))
    return model


def underlying_3x(model: Model) -> Model:
    """The scale-3 network inside a naive 1.5x model (kernels are shared)."""
    if model.config.head != "naive1p5x":
        raise ConfigError("only naive1p5x models wrap a 3x network")
    cfg = replace(model.config, scale=Fraction(3), head="standard")
    return Model(cfg, [l for l in model.layers if not isinstance(l, AvgPool2)])


def propagate_shapes(model: Model, input_shape: tuple) -> list[tuple]:
    """Shape after every layer; raises DimensionError on any channel/size mismatch."""
    n, c, h, w = input_shape
    if c != 3:
        raise DimensionError(f"model input must have 3 channels, got {c}")
    shapes = []
    d2s_count = 0
    for layer in model.layers:
        if isinstance(layer, Conv):
            if layer.kernel.in_ch != c:
                raise DimensionError(f"{layer.name} expects {layer.kernel.in_ch} channels, receives {c}")
            c = layer.kernel.out_ch
        elif isinstance(layer, SpaceToDepth):
            b = layer.block
            if h % b or w % b:
                raise DimensionError(f"space-to-depth({b}) needs spatial dims divisible by {b}, got {h}x{w}")
            c, h, w = c * b * b, h // b, w // b
        elif isinstance(layer, DepthToSpace):
            b = layer.block
            if c % (b * b):
                raise DimensionError(f"depth-to-space({b}) needs channels divisible by {b * b}, got {c}")
            c, h, w = c // (b * b), h * b, w * b
            d2s_count += 1
        elif isinstance(layer, AvgPool2):
            if h % 2 or w % 2:
                raise DimensionError(f"avg_pool2 needs even dims, got {h}x{w}")
            h, w = h // 2, w // 2
        shapes.append((n, c, h, w))
    if c != 3 or d2s_count != 1:
        raise DimensionError(f"model must end in one depth-to-space producing 3 channels, got c={c}")
    return shapes


# -- forward ----------------------------------------------------------------


def anchor(x: np.ndarray, s: int, order: str = "CRD") -> np.ndarray:
    """Channel-wise nearest-neighbour anchor laid out for depth-to-space(s, order)."""
    s2 = s * s
    if order == "CRD":
        return np.repeat(x, s2, axis=1)
    return np.tile(x, (1, s2, 1, 1))


def _check_range(image: np.ndarray, strict: bool) -> np.ndarray:
    if strict:
        lo, hi = float(image.min()), float(image.max())
        if not (lo >= 0.0 and hi <= 1.0):
            raise ContractError(f"input pixels must lie in [0, 1], got range [{lo}, {hi}]")
        return image
    return np.clip(image, 0.0, 1.0)


ActFn = Callable[[str, np.ndarray], np.ndarray]
WeightFn = Callable[[Conv], Kernel]


def run(
    model: Model,
    image: np.ndarray,
    weight_fn: Optional[WeightFn] = None,
    act_fn: Optional[ActFn] = None,
    cache: Optional[list] = None,
    strict: bool = True,
) -> np.ndarray:
    """Shared forward loop.

    ``weight_fn`` may substitute each conv's kernel (quantized weights),
    ``act_fn(site, tensor)`` observes or rewrites every activation site, and
    ``cache`` (a list) collects what the backward pass needs.
    """
    T.check_tensor(image, "image")
    propagate_shapes(model, image.shape)
    x = _check_range(image, strict)
    dtype = np.result_type(x.dtype, model.convs()[0].kernel.weight.dtype)
    h = x.astype(dtype, copy=False)
    layers = model.layers
    anchor_at = None
    if model.config.anchor_residual:
        # the conv feeding the depth-to-space
        anchor_at = max(i for i, l in enumerate(layers) if isinstance(l, Conv))
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            kernel = weight_fn(layer) if weight_fn else layer.kernel
            inp = h
            pre = T.conv2d(h, kernel)
            if i == anchor_at:
                d2s = layers[i + 1]
                pre = pre + anchor(x, d2s.block, d2s.order).astype(pre.dtype)
            h = T.relu1(pre) if layer.relu1 else pre
            if cache is not None:
                cache.append(("conv", layer, inp, pre))
            if act_fn:
                h = act_fn(layer.name, h)
        elif isinstance(layer, SpaceToDepth):
            h = T.space_to_depth(h, layer.block, layer.order)
            if cache is not None:
                cache.append(("s2d", layer, None, None))
        elif isinstance(layer, DepthToSpace):
            h = T.depth_to_space(h, layer.block, layer.order)
            if cache is not None:
                cache.append(("d2s", layer, None, None))
        elif isinstance(layer, AvgPool2):
            h = T.avg_pool2(h)
            if cache is not None:
                cache.append(("avgpool", layer, None, None))
    if act_fn:
        h = act_fn("output", h)
    return h


def forward(model: Model, image: np.ndarray, strict: bool = True) -> np.ndarray:
    """Super-resolve a batch of images in [0, 1].

    With ``strict`` (the default) out-of-range pixels raise ContractError;
    otherwise they are clamped.
    """
    return run(model, image, strict=strict)


def forward_1p5x(model: Model, image: np.ndarray, strict: bool = True) -> np.ndarray:
    if model.config.scale != ONE_AND_HALF:
        raise ConfigError(f"forward_1p5x needs a 1.5x model, got scale {model.config.scale}")
    return run(model, image, strict=strict)


def activation_sites(model: Model) -> list[str]:
    return [c.name for c in model.convs()] + ["output"]
