"""Round-to-nearest uniform affine quantization with clipping and grouping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from .errors import InputError, LoadError
from .tensor import check_matrix

GRANULARITIES = ("per_tensor", "per_column", "per_row")


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    clip_ratio: float = 1.0
    granularity: str = "per_tensor"

    def __post_init__(self):
        if not 1 <= int(self.bits) <= 8:
            raise InputError(f"bits must be in [1, 8], got {self.bits}")
        if not 0.0 < float(self.clip_ratio) <= 1.0:
            raise InputError(f"clip_ratio must be in (0, 1], got {self.clip_ratio}")
        if self.granularity not in GRANULARITIES:
            raise InputError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")

    @property
    def qmax(self) -> int:
        return (1 << int(self.bits)) - 1


# Defaults: per-token activations, per-output-channel weights.
def activation_config(bits=4, clip_ratio=0.9) -> QuantConfig:
    return QuantConfig(bits, clip_ratio, "per_column")


def weight_config(bits=4, clip_ratio=0.8) -> QuantConfig:
    return QuantConfig(bits, clip_ratio, "per_row")


@dataclass
class QuantizedTensor:
    """Integer codes with one ``(scale, zero_point)`` pair per group."""

    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    config: QuantConfig

    @property
    def shape(self):
        return self.codes.shape

    def group_shape(self):
        rows, cols = self.codes.shape
        return {"per_tensor": (1, 1), "per_column": (1, cols), "per_row": (rows, 1)}[
            self.config.granularity]

    def validate(self):
        if self.codes.ndim != 2:
            raise InputError("codes must be 2-D")
        gshape = self.group_shape()
        if self.scales.size != int(np.prod(gshape)) or self.zero_points.size != self.scales.size:
            raise InputError("scale / zero-point count does not match the grouping")
        if np.any(self.scales <= 0) or not np.all(np.isfinite(self.scales)):
            raise InputError("scales must be positive and finite")
        if self.codes.min(initial=0) < 0 or self.codes.max(initial=0) > self.config.qmax:
            raise InputError("code outside [0, 2^b - 1]")
        return self

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def _reduce_axis(granularity):
    return {"per_tensor": None, "per_column": 0, "per_row": 1}[granularity]


def _scales(X, cfg):
    axis = _reduce_axis(cfg.granularity)
    lo = np.min(X, axis=axis, keepdims=True) if axis is not None else np.min(X).reshape(1, 1)
    hi = np.max(X, axis=axis, keepdims=True) if axis is not None else np.max(X).reshape(1, 1)
    lo_c, hi_c = cfg.clip_ratio * lo, cfg.clip_ratio * hi
    const = hi == lo
    s = np.where(const, 1.0, (hi_c - lo_c) / cfg.qmax)
    z = -round_half_away(lo_c / s)
    # A constant group c encodes exactly with s = |c|, z = -sign(c), code 0.
    c_abs = np.abs(lo)
    s = np.where(const & (c_abs > 0), c_abs, s)
    z = np.where(const, -np.sign(lo), z)
    return s, z


def _codes(X, s, z, qmax):
    raw = round_half_away(X / s) + z
    inside = (raw >= 0) & (raw <= qmax)
    return np.clip(raw, 0, qmax), inside


def uniform_quantize(X, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize ``X`` group-wise to ``cfg.bits``-bit codes.

    Per group the clipped range ``clip_ratio * [min, max]`` is split into
    ``2^b - 1`` steps; codes are ``clamp(round(x / s) + z, 0, 2^b - 1)``.
    """
    X = check_matrix(X, "X", min_cols=1)
    s, z = _scales(X, cfg)
    codes, _ = _codes(X, s, z, cfg.qmax)
    return QuantizedTensor(codes.astype(np.int32), s.ravel().astype(np.float64),
                           z.ravel().astype(np.int32), cfg)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    q.validate()
    gshape = q.group_shape()
    s = q.scales.reshape(gshape)
    z = q.zero_points.reshape(gshape).astype(np.float64)
    return (q.codes.astype(np.float64) - z) * s


def fake_quantize(X, cfg: QuantConfig, return_mask=False):
    """Quantize then dequantize.  With ``return_mask`` also return the
    straight-through mask (``True`` where the code was not clamped)."""
    X = np.asarray(X, dtype=np.float64)
    s, z = _scales(X, cfg)
    codes, inside = _codes(X, s, z, cfg.qmax)
    Xq = (codes - z) * s
    return (Xq, inside) if return_mask else Xq


def quantization_mse(X, q: QuantizedTensor) -> float:
    X = check_matrix(X, "X")
    if X.shape != q.shape:
        raise InputError(f"shape mismatch: {X.shape} vs {q.shape}")
    return float(np.mean((X - dequantize(q)) ** 2))


def rtn_levels(x, cfg: QuantConfig) -> np.ndarray:
    """Reconstruction levels of the uniform quantizer fitted to the 1-D data ``x``."""
    s, z = _scales(np.asarray(x, dtype=np.float64).reshape(-1, 1),
                   QuantConfig(cfg.bits, cfg.clip_ratio, "per_tensor"))
    return (np.arange(cfg.qmax + 1) - z.item()) * s.item()


def save_quantized(path, q: QuantizedTensor) -> None:
    q.validate()
    cfg = {"bits": int(q.config.bits), "clip_ratio": float(q.config.clip_ratio),
           "granularity": q.config.granularity}
    io.write_container(path, q.codes.astype(np.int32), [
        ("QSCL", q.scales.astype("<f8").tobytes()),
        ("QZPT", q.zero_points.astype("<i4").tobytes()),
        ("QCFG", io.pack_json(cfg)),
    ])


def load_quantized(path) -> QuantizedTensor:
    codes, sections = io.read_container(path)
    if codes.dtype != np.int32:
        raise LoadError("quantized file must carry i32 codes", 8)
    found = io.section_map(sections, ("QSCL", "QZPT", "QCFG"))
    cfg = QuantConfig(**io.unpack_json(found["QCFG"][0]))
    q = QuantizedTensor(codes, np.frombuffer(found["QSCL"][0], "<f8").astype(np.float64),
                        np.frombuffer(found["QZPT"][0], "<i4").astype(np.int32), cfg)
    return q.validate()
