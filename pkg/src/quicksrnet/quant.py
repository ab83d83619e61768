"""W8A8 quantization simulation (min-max post-training quantization).

Asymmetric affine grid: ``q = clamp(round(x / scale) + offset, 0, 2^bw - 1)``
and ``x' = (q - offset) * scale``, with round-half-away-from-zero. The range
is always widened to contain zero so that zero is exactly representable; an
all-zero range falls back to [0, 1]. Weights use per-tensor or
per-output-channel encodings; activations are always per-tensor. Biases stay in floating point.

An encoding with ``bitwidth >= 32`` is a float passthrough, which turns
:func:`quantized_forward` into the plain forward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CalibrationError, ConfigError, EncodingError, FormatError
from .model import Model, activation_sites, run
from .tensor import Kernel

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"
GRANULARITIES = (PER_TENSOR, PER_CHANNEL)
PASSTHROUGH_BITWIDTH = 32
ENCODINGS_VERSION = 1


@dataclass(frozen=True)
class QuantEncoding:
    min: float
    max: float
    scale: float
    offset: int
    bitwidth: int = 8

    @property
    def passthrough(self) -> bool:
        return self.bitwidth >= PASSTHROUGH_BITWIDTH

    @property
    def qmax(self) -> int:
        return 2**self.bitwidth - 1


@dataclass(frozen=True)
class QuantScheme:
    weight_granularity: str = PER_CHANNEL
    activation_granularity: str = PER_TENSOR
    bitwidth: int = 8

    def __post_init__(self):
        if self.weight_granularity not in GRANULARITIES:
            raise ConfigError(f"weight granularity must be one of {GRANULARITIES}")
        if self.activation_granularity != PER_TENSOR:
            raise ConfigError("activations are always quantized per tensor")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def calibrate(min_observed: float, max_observed: float, bitwidth: int = 8) -> QuantEncoding:
    lo, hi = float(min_observed), float(max_observed)
    if math.isnan(lo) or math.isnan(hi) or math.isinf(lo) or math.isinf(hi):
        raise CalibrationError(f"cannot calibrate from non-finite range [{lo}, {hi}]")
    if lo > hi:
        raise CalibrationError(f"min {lo} exceeds max {hi}")
    if bitwidth >= PASSTHROUGH_BITWIDTH:
        return QuantEncoding(lo, hi, 0.0, 0, bitwidth)
    if bitwidth < 2:
        raise CalibrationError(f"bitwidth must be >= 2, got {bitwidth}")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / (2**bitwidth - 1)
    if scale < np.finfo(np.float64).tiny:
        # all-zero, or so narrow the step would be subnormal or underflow to 0
        lo, hi = 0.0, 1.0
        scale = 1.0 / (2**bitwidth - 1)
    offset = int(round_half_away(np.float64(-lo / scale)))
    return QuantEncoding(lo, hi, scale, offset, bitwidth)


def qdq(t: np.ndarray, enc: QuantEncoding) -> np.ndarray:
    """Quantize then dequantize; output dtype matches the input."""
    t = np.asarray(t)
    if enc.passthrough:
        return t.copy()
    x = t.astype(np.float64)
    q = np.clip(round_half_away(x / enc.scale) + enc.offset, 0, enc.qmax)
    return ((q - enc.offset) * enc.scale).astype(t.dtype)


def per_tensor_encoding(kernel: Kernel, bitwidth: int = 8) -> QuantEncoding:
    return calibrate(kernel.weight.min(), kernel.weight.max(), bitwidth)


def per_channel_encodings(kernel: Kernel, bitwidth: int = 8) -> list[QuantEncoding]:
    w = kernel.weight.reshape(kernel.out_ch, -1)
    return [calibrate(row.min(), row.max(), bitwidth) for row in w]


def qdq_weight(kernel: Kernel, entries: Sequence[QuantEncoding]) -> Kernel:
    """Quantize kernel weights with one entry (per-tensor) or out_ch entries."""
    if len(entries) == 1:
        w = qdq(kernel.weight, entries[0])
    elif len(entries) == kernel.out_ch:
        w = np.stack([qdq(kernel.weight[i], e) for i, e in enumerate(entries)])
    else:
        raise EncodingError(f"{len(entries)} weight encodings for a kernel with {kernel.out_ch} output channels")
    return Kernel(w, kernel.bias.copy())


@dataclass
class LayerEncoding:
    granularity: str
    entries: list[QuantEncoding]


@dataclass
class ModelEncodings:
    """Weight encodings keyed by conv name, activation encodings keyed by site."""

    params: dict[str, LayerEncoding] = field(default_factory=dict)
    activations: dict[str, LayerEncoding] = field(default_factory=dict)

    @property
    def weight_granularity(self) -> str:
        grans = {e.granularity for e in self.params.values()}
        if len(grans) != 1:
            raise EncodingError(f"mixed weight granularities: {sorted(grans)}")
        return grans.pop()


class _MinMaxObserver:
    def __init__(self):
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}

    def __call__(self, site: str, t: np.ndarray) -> np.ndarray:
        lo, hi = float(t.min()), float(t.max())
        self.lo[site] = min(lo, self.lo.get(site, lo))
        self.hi[site] = max(hi, self.hi.get(site, hi))
        return t


def calibrate_activations(
    model: Model, calib_images: Iterable[np.ndarray], bitwidth: int = 8
) -> dict[str, QuantEncoding]:
    """Running min-max over every activation site of the float model."""
    obs = _MinMaxObserver()
    seen = 0
    for img in calib_images:
        if img.ndim == 3:
            img = img[None]
        run(model, img, act_fn=obs)
        seen += 1
    if not seen:
        raise CalibrationError("calibration set is empty")
    return {site: calibrate(obs.lo[site], obs.hi[site], bitwidth) for site in activation_sites(model)}


def weight_encodings(model: Model, granularity: str, bitwidth: int = 8) -> dict[str, LayerEncoding]:
    if granularity not in GRANULARITIES:
        raise ConfigError(f"weight granularity must be one of {GRANULARITIES}")
    out = {}
    for conv in model.convs():
        if granularity == PER_CHANNEL:
            entries = per_channel_encodings(conv.kernel, bitwidth)
        else:
            entries = [per_tensor_encoding(conv.kernel, bitwidth)]
        out[conv.name] = LayerEncoding(granularity, entries)
    return out


def build_encodings(model: Model, calib_images: Iterable[np.ndarray], scheme: QuantScheme) -> ModelEncodings:
    acts = calibrate_activations(model, calib_images, scheme.bitwidth)
    return ModelEncodings(
        params=weight_encodings(model, scheme.weight_granularity, scheme.bitwidth),
        activations={k: LayerEncoding(PER_TENSOR, [v]) for k, v in acts.items()},
    )


def passthrough_encodings(model: Model, granularity: str = PER_TENSOR) -> ModelEncodings:
    """Encodings that disable quantization everywhere."""
    enc = calibrate(0.0, 1.0, PASSTHROUGH_BITWIDTH)
    params = {}
    for conv in model.convs():
        n = conv.kernel.out_ch if granularity == PER_CHANNEL else 1
        params[conv.name] = LayerEncoding(granularity, [enc] * n)
    acts = {site: LayerEncoding(PER_TENSOR, [enc]) for site in activation_sites(model)}
    return ModelEncodings(params, acts)


def check_encodings(model: Model, encodings: ModelEncodings, scheme: QuantScheme | None = None) -> None:
    for conv in model.convs():
        le = encodings.params.get(conv.name)
        if le is None:
            raise EncodingError(f"no weight encoding for layer {conv.name!r}")
        want = conv.kernel.out_ch if le.granularity == PER_CHANNEL else 1
        if len(le.entries) != want:
            raise EncodingError(f"layer {conv.name!r}: expected {want} {le.granularity} entries, got {len(le.entries)}")
        if scheme is not None and le.granularity != scheme.weight_granularity:
            raise EncodingError(
                f"layer {conv.name!r} has {le.granularity} encodings but the scheme asks for {scheme.weight_granularity}"
            )
    for site in activation_sites(model):
        le = encodings.activations.get(site)
        if le is None:
            raise EncodingError(f"no activation encoding for site {site!r}")
        if len(le.entries) != 1:
            raise EncodingError(f"activation site {site!r} must have exactly one encoding")


def quantize_weights(model: Model, encodings: ModelEncodings) -> dict[str, Kernel]:
    return {c.name: qdq_weight(c.kernel, encodings.params[c.name].entries) for c in model.convs()}


def quantized_forward(
    model: Model,
    encodings: ModelEncodings,
    scheme: QuantScheme | None,
    image: np.ndarray,
    strict: bool = True,
) -> np.ndarray:
    """Forward pass with fake-quantized weights and activation sites."""
    check_encodings(model, encodings, scheme)
    qweights = quantize_weights(model, encodings)

    def act_fn(site: str, t: np.ndarray) -> np.ndarray:
        return qdq(t, encodings.activations[site].entries[0])

    return run(model, image, weight_fn=lambda conv: qweights[conv.name], act_fn=act_fn, strict=strict)


# -- JSON format --------------------------------------------------------------


def _layer_to_json(le: LayerEncoding) -> dict:
    return {"granularity": le.granularity, "entries": [asdict(e) for e in le.entries]}


def _layer_from_json(name: str, d: dict) -> LayerEncoding:
    try:
        gran = d["granularity"]
        entries = [
            QuantEncoding(float(e["min"]), float(e["max"]), float(e["scale"]), int(e["offset"]), int(e["bitwidth"]))
            for e in d["entries"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed encoding for {name!r}: {exc}") from exc
    if gran not in GRANULARITIES:
        raise FormatError(f"unknown granularity {gran!r} for {name!r}")
    return LayerEncoding(gran, entries)


def encodings_to_json(encodings: ModelEncodings) -> dict:
    return {
        "version": ENCODINGS_VERSION,
        "param_encodings": {k: _layer_to_json(v) for k, v in encodings.params.items()},
        "activation_encodings": {k: _layer_to_json(v) for k, v in encodings.activations.items()},
    }


def encodings_from_json(doc: dict) -> ModelEncodings:
    if doc.get("version") != ENCODINGS_VERSION:
        raise FormatError(f"unsupported encodings version {doc.get('version')!r}")
    return ModelEncodings(
        params={k: _layer_from_json(k, v) for k, v in doc.get("param_encodings", {}).items()},
        activations={k: _layer_from_json(k, v) for k, v in doc.get("activation_encodings", {}).items()},
    )


def save_encodings(encodings: ModelEncodings, path) -> None:
    text = json.dumps(encodings_to_json(encodings), sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_encodings(path) -> ModelEncodings:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return encodings_from_json(doc)
