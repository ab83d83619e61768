"""Model files and deployment-layout transforms.

On disk a model is two files sharing a stem:

``<stem>.qsr.json``
    UTF-8 manifest: format version, model config, one record per layer and
    a description of the weight blob (length + 64-bit FNV-1a checksum).
``<stem>.qsr.bin``
    little-endian float32 weights and biases, in manifest order.

The DCR transforms rewrite a CRD model so that its depth-to-space (and, for
the proposed 1.5x head, its space-to-depth) can run in DCR mode while the
network computes the same function.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    LoadError,
    TransformError,
    TruncatedBlobError,
    VersionMismatchError,
)
from .model import AvgPool2, Conv, DepthToSpace, Model, ModelConfig, SpaceToDepth, forward, propagate_shapes
from .quant import LayerEncoding, ModelEncodings, quantized_forward
from .tensor import Kernel

FORMAT_NAME = "qsr"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def model_paths(path) -> tuple[Path, Path]:
    """Manifest and blob paths for ``path`` (``x``, ``x.qsr`` or ``x.qsr.json``)."""
    p = str(path)
    for suffix in (".json", ".bin"):
        if p.endswith(".qsr" + suffix):
            p = p[: -len(suffix)]
    if not p.endswith(".qsr"):
        p += ".qsr"
    return Path(p + ".json"), Path(p + ".bin")


# -- serialization ------------------------------------------------------------


def build_manifest(model: Model) -> tuple[dict, bytes]:
    records = []
    chunks = []
    offset = 0
    for layer in model.layers:
        if isinstance(layer, Conv):
            w = np.ascontiguousarray(layer.kernel.weight, dtype="<f4").tobytes()
            b = np.ascontiguousarray(layer.kernel.bias, dtype="<f4").tobytes()
            records.append({
                "name": layer.name,
                "kind": "conv",
                "dims": list(layer.kernel.weight.shape),
                "activation": "relu1" if layer.relu1 else "none",
                "weight_offset": offset,
                "weight_length": len(w),
                "bias_offset": offset + len(w),
                "bias_length": len(b),
            })
            chunks += [w, b]
            offset += len(w) + len(b)
        elif isinstance(layer, SpaceToDepth):
            records.append({"name": "s2d", "kind": "s2d", "block": layer.block, "order": layer.order})
        elif isinstance(layer, DepthToSpace):
            records.append({"name": "d2s", "kind": "d2s", "block": layer.block, "order": layer.order})
        elif isinstance(layer, AvgPool2):
            records.append({"name": "avgpool", "kind": "avgpool2"})
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layers": records,
        "blob": {"length": len(blob), "fnv1a64": f"{fnv1a64(blob):016x}"},
    }
    return manifest, blob


def save(model: Model, path) -> tuple[Path, Path]:
    manifest, blob = build_manifest(model)
    mpath, bpath = model_paths(path)
    manifest["blob"]["file"] = bpath.name
    mpath.parent.mkdir(parents=True, exist_ok=True)
    bpath.write_bytes(blob)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mpath, bpath


def _read_f4(blob: bytes, offset: int, length: int, shape) -> np.ndarray:
    arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset)
    return arr.astype(np.float32).reshape(shape)


def load(path) -> Model:
    mpath, bpath = model_paths(path)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise LoadError(f"model manifest not found: {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{mpath}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{mpath}: format version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    try:
        blob = bpath.read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"weight blob not found: {bpath}") from exc
    info = manifest["blob"]
    if len(blob) < info["length"]:
        raise TruncatedBlobError(f"{bpath}: {len(blob)} bytes, manifest declares {info['length']}")
    if len(blob) > info["length"]:
        raise LoadError(f"{bpath}: {len(blob)} bytes, manifest declares {info['length']}")
    if f"{fnv1a64(blob):016x}" != info["fnv1a64"]:
        raise ChecksumError(f"{bpath}: checksum mismatch")

    config = ModelConfig.from_dict(manifest["config"])
    layers = []
    expected_offset = 0
    for rec in manifest["layers"]:
        kind = rec["kind"]
        if kind == "conv":
            if rec["weight_offset"] != expected_offset or rec["bias_offset"] != expected_offset + rec["weight_length"]:
                raise FormatError(f"{mpath}: non-contiguous offsets for {rec['name']}")
            dims = tuple(rec["dims"])
            w = _read_f4(blob, rec["weight_offset"], rec["weight_length"], dims)
            b = _read_f4(blob, rec["bias_offset"], rec["bias_length"], (dims[0],))
            layers.append(Conv(rec["name"], Kernel(w, b), rec["activation"] == "relu1"))
            expected_offset = rec["bias_offset"] + rec["bias_length"]
        elif kind == "s2d":
            layers.append(SpaceToDepth(rec["block"], rec["order"]))
        elif kind == "d2s":
            layers.append(DepthToSpace(rec["block"], rec["order"]))
        elif kind == "avgpool2":
            layers.append(AvgPool2())
        else:
            raise FormatError(f"{mpath}: unknown layer kind {kind!r}")
    if expected_offset != info["length"]:
        raise FormatError(f"{mpath}: layer records cover {expected_offset} bytes of {info['length']}")
    model = Model(config, layers)
    propagate_shapes(model, (1, 3, 8, 8))
    return model


# -- CRD -> DCR -----------------------------------------------------------------


def block_permutation(groups: int, per_group: int) -> np.ndarray:
    """Index map from group-major (CRD) to position-major (DCR) channel order.

    ``new[k * groups + c] = old[c * per_group + k]``.
    """
    k, c = np.meshgrid(np.arange(per_group), np.arange(groups), indexing="ij")
    return (c * per_group + k).ravel()


def shuffle_d2s_weights_crd_to_dcr(kernel: Kernel, s: int, colors: int = 3) -> Kernel:
    if kernel.out_ch != colors * s * s:
        raise TransformError(f"kernel has {kernel.out_ch} output channels, expected {colors}*{s}^2")
    p = block_permutation(colors, s * s)
    return Kernel(kernel.weight[p].copy(), kernel.bias[p].copy())


def shuffle_d2s_weights_dcr_to_crd(kernel: Kernel, s: int, colors: int = 3) -> Kernel:
    if kernel.out_ch != colors * s * s:
        raise TransformError(f"kernel has {kernel.out_ch} output channels, expected {colors}*{s}^2")
    inv = np.argsort(block_permutation(colors, s * s))
    return Kernel(kernel.weight[inv].copy(), kernel.bias[inv].copy())


def shuffle_s2d_weights_crd_to_dcr(kernel: Kernel, block: int) -> Kernel:
    """Permute the input channels of a conv that consumes a space-to-depth output."""
    b2 = block * block
    if kernel.in_ch % b2:
        raise TransformError(f"kernel input channels {kernel.in_ch} not divisible by {b2}")
    p = block_permutation(kernel.in_ch // b2, b2)
    return Kernel(kernel.weight[:, p].copy(), kernel.bias.copy())


def reorder_per_channel_encodings(encodings: Sequence, s: int, colors: int = 3) -> list:
    """DCR order for the per-channel encodings of the conv before depth-to-space.

    A single (per-tensor) encoding is returned unchanged.
    """
    n = len(encodings)
    if n == 1:
        return list(encodings)
    s2 = s * s
    if n != colors * s2:
        raise TransformError(f"{n} encodings; expected 1 or {colors * s2} for s={s}")
    return [encodings[i + k * s2] for i in range(s2) for k in range(colors)]


def _d2s_producer(model: Model) -> int:
    idx = next(i for i, l in enumerate(model.layers) if isinstance(l, DepthToSpace))
    if not isinstance(model.layers[idx - 1], Conv):
        raise TransformError("depth-to-space is not fed directly by a conv")
    return idx - 1


def to_dcr(model: Model) -> Model:
    """Copy of ``model`` running every space/depth op in DCR mode."""
    layers = list(model.layers)
    d2s_idx = _d2s_producer(model) + 1
    d2s = layers[d2s_idx]
    if d2s.order == "DCR":
        raise TransformError("model is already in DCR layout")
    prod = layers[d2s_idx - 1]
    layers[d2s_idx - 1] = Conv(prod.name, shuffle_d2s_weights_crd_to_dcr(prod.kernel, d2s.block), prod.relu1)
    layers[d2s_idx] = replace(d2s, order="DCR")
    for i, layer in enumerate(layers):
        if isinstance(layer, SpaceToDepth):
            consumer = layers[i + 1]
            if not isinstance(consumer, Conv):
                raise TransformError("space-to-depth is not followed by a conv")
            layers[i + 1] = Conv(consumer.name, shuffle_s2d_weights_crd_to_dcr(consumer.kernel, layer.block), consumer.relu1)
            layers[i] = replace(layer, order="DCR")
    return Model(model.config, layers)


def encodings_to_dcr(model: Model, encodings: ModelEncodings) -> ModelEncodings:
    """Reorder the weight encodings of the depth-to-space producer of a CRD ``model``."""
    name = model.layers[_d2s_producer(model)].name
    s = model.d2s.block
    params = dict(encodings.params)
    le = params[name]
    params[name] = LayerEncoding(le.granularity, reorder_per_channel_encodings(le.entries, s))
    return ModelEncodings(params, dict(encodings.activations))


def dcr_self_check(
    model: Model,
    dcr_model: Model,
    encodings: Optional[ModelEncodings] = None,
    dcr_encodings: Optional[ModelEncodings] = None,
    n_inputs: int = 10,
    size: int = 16,
    seed: int = 0,
) -> dict[str, float]:
    """Max abs output difference between CRD and DCR models on random inputs."""
    rng = np.random.default_rng(seed)
    fp_diff = 0.0
    q_diff = 0.0
    for _ in range(n_inputs):
        x = rng.random((1, 3, size, size), dtype=np.float32)
        fp_diff = max(fp_diff, float(np.abs(forward(model, x) - forward(dcr_model, x)).max()))
        if encodings is not None:
            a = quantized_forward(model, encodings, None, x)
            b = quantized_forward(dcr_model, dcr_encodings, None, x)
            q_diff = max(q_diff, float(np.abs(a - b).max()))
    result = {"fp_max_abs_diff": fp_diff}
    if encodings is not None:
        result["quant_max_abs_diff"] = q_diff
    return result
