"""Image I/O, LR/HR pairing and evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import DataError, DimensionError, FormatError
from .metrics import psnr, ssim, to_luma
from .model import Model, forward
from .quant import ModelEncodings, QuantScheme, quantized_forward

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _check_png_header(path, head: bytes) -> None:
    if head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise FormatError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    if bit_depth != 8 or color_type != 2:
        raise FormatError(f"{path}: need 8-bit RGB PNG, got bit depth {bit_depth}, color type {color_type}")


def load_png(path) -> np.ndarray:
    """8-bit RGB PNG -> (1, 3, H, W) float32 in [0, 1]."""
    data = Path(path).read_bytes()
    _check_png_header(path, data[:26])
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr.transpose(2, 0, 1)[None] / np.float32(255.0)).astype(np.float32)


def to_uint8(t: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) in [0, 1] -> (H, W, 3) uint8."""
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise DimensionError(f"can only save a single image, got batch of {t.shape[0]}")
        t = t[0]
    if t.ndim != 3 or t.shape[0] != 3:
        raise DimensionError(f"expected 3 channels, got shape {t.shape}")
    q = np.floor(np.clip(t.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def save_png(t: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(t), mode="RGB").save(path, format="PNG")


# -- pairs -----------------------------------------------------------------------


@dataclass
class ImagePair:
    lr: np.ndarray  # (1, 3, h, w)
    hr: np.ndarray  # (1, 3, H, W)
    name: str


def _valid_hr_size(size: int, scale: Fraction) -> int:
    # largest HR size with an integral LR size; for 3/2 that LR size is also even
    return size - size % scale.numerator


def center_crop(img: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = img.shape[-2:]
    y, x = (H - h) // 2, (W - w) // 2
    return img[..., y : y + h, x : x + w]


def make_pair(hr: np.ndarray, scale, name: str, lr: Optional[np.ndarray] = None) -> ImagePair:
    """Crop ``hr`` to a valid size and derive (or check) its LR counterpart."""
    frac = T.as_fraction(scale)
    if hr.ndim == 3:
        hr = hr[None]
    H, W = hr.shape[-2:]
    hh, ww = _valid_hr_size(H, frac), _valid_hr_size(W, frac)
    if hh == 0 or ww == 0:
        raise DataError(f"{name}: HR image {H}x{W} too small for scale {frac}")
    hr = np.ascontiguousarray(center_crop(hr, hh, ww))
    if lr is None:
        lr = np.clip(T.bicubic_resize(hr, 1 / frac), 0.0, 1.0)
    else:
        if lr.ndim == 3:
            lr = lr[None]
        if (Fraction(lr.shape[-2]) * frac, Fraction(lr.shape[-1]) * frac) != (hh, ww):
            raise DataError(f"{name}: LR {lr.shape[-2:]} x {frac} does not match cropped HR {hh}x{ww}")
    return ImagePair(lr.astype(np.float32), hr.astype(np.float32), name)


def load_pairs(root, scale) -> list[ImagePair]:
    """Pairs from ``<root>/HR/*.png`` with optional ``<root>/LR/*.png`` matched by name.

    Without an LR directory the LR images are derived by bicubic downscaling.
    A directory with no HR subfolder is treated as the HR folder itself.
    """
    root = Path(root)
    hr_dir = root / "HR" if (root / "HR").is_dir() else root
    lr_dir = root / "LR"
    hr_files = sorted(hr_dir.glob("*.png"))
    if not hr_files:
        raise DataError(f"no PNG files in {hr_dir}")
    pairs = []
    for hp in hr_files:
        lr = None
        if lr_dir.is_dir():
            lp = lr_dir / hp.name
            if not lp.exists():
                raise DataError(f"no LR image for {hp.name} in {lr_dir}")
            lr = load_png(lp)
        pairs.append(make_pair(load_png(hp), scale, hp.stem, lr))
    return pairs


def load_images(directory) -> list[np.ndarray]:
    """All PNGs in a directory (sorted by name) as (3, H, W) arrays."""
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise DataError(f"no PNG files in {directory}")
    return [load_png(p)[0] for p in files]


# -- evaluation ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalOptions:
    encodings: Optional[ModelEncodings] = None
    scheme: Optional[QuantScheme] = None
    luma_only: bool = False


@dataclass
class ImageResult:
    name: str
    psnr: dict[str, float] = field(default_factory=dict)
    ssim: dict[str, float] = field(default_factory=dict)

    @property
    def fp_int8_delta(self) -> Optional[float]:
        if "int8" not in self.psnr:
            return None
        return self.psnr["model"] - self.psnr["int8"]


@dataclass
class EvalReport:
    methods: list[str]
    images: list[ImageResult]

    def mean_psnr(self, method: str) -> float:
        return float(np.mean([r.psnr[method] for r in self.images]))

    def mean_ssim(self, method: str) -> float:
        return float(np.mean([r.ssim[method] for r in self.images]))

    def mean_fp_int8_delta(self) -> Optional[float]:
        if "int8" not in self.methods:
            return None
        return float(np.mean([r.fp_int8_delta for r in self.images]))

    def delta(self, method: str, baseline: str) -> float:
        return self.mean_psnr(method) - self.mean_psnr(baseline)

    def columns(self) -> list[str]:
        cols = ["name"]
        for m in self.methods:
            cols += [f"{m}_psnr", f"{m}_ssim"]
        if "int8" in self.methods:
            cols.append("fp_int8_psnr_delta")
        cols += ["model_minus_bicubic_psnr", "model_minus_nearest_psnr"]
        return cols

    def rows(self) -> list[list]:
        out = []
        for r in self.images:
            row = [r.name]
            for m in self.methods:
                row += [r.psnr[m], r.ssim[m]]
            if "int8" in self.methods:
                row.append(r.fp_int8_delta)
            row += [r.psnr["model"] - r.psnr["bicubic"], r.psnr["model"] - r.psnr["nearest"]]
            out.append(row)
        mean = ["MEAN"]
        for m in self.methods:
            mean += [self.mean_psnr(m), self.mean_ssim(m)]
        if "int8" in self.methods:
            mean.append(self.mean_fp_int8_delta())
        mean += [self.delta("model", "bicubic"), self.delta("model", "nearest")]
        out.append(mean)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.columns())
            for row in self.rows():
                wr.writerow([_fmt(v) for v in row])

    def format_table(self) -> str:
        cols = self.columns()
        body = [[_fmt(v, 4) for v in row] for row in self.rows()]
        widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
        return "\n".join(lines)


def _fmt(v, digits: int = 6) -> str:
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}f}"


def _metric_view(img: np.ndarray, luma_only: bool) -> np.ndarray:
    return to_luma(img) if luma_only else img


def evaluate(model: Model, pairs: Sequence[ImagePair], options: EvalOptions = EvalOptions()) -> EvalReport:
    if not pairs:
        raise DataError("evaluation needs at least one image pair")
    scale = model.config.scale
    methods = ["model", "bicubic", "nearest"]
    if options.encodings is not None:
        methods.append("int8")
    results = []
    for pair in pairs:
        hh, ww = pair.hr.shape[-2:]
        if (Fraction(pair.lr.shape[-2]) * scale, Fraction(pair.lr.shape[-1]) * scale) != (hh, ww):
            raise DataError(f"{pair.name}: LR {pair.lr.shape[-2:]} x {scale} != HR {(hh, ww)}")
        outputs = {
            "model": forward(model, pair.lr),
            "bicubic": np.clip(T.bicubic_resize(pair.lr, scale), 0.0, 1.0),
            "nearest": T.nearest_resize(pair.lr, hh, ww),
        }
        if options.encodings is not None:
            outputs["int8"] = quantized_forward(model, options.encodings, options.scheme, pair.lr)
        hr = _metric_view(pair.hr, options.luma_only)
        res = ImageResult(pair.name)
        for m in methods:
            out = _metric_view(outputs[m], options.luma_only)
            res.psnr[m] = psnr(out, hr)
            res.ssim[m] = ssim(out[0], hr[0])
        results.append(res)
    return EvalReport(methods, results)
