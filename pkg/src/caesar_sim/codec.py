"""Model and gradient codecs with bit-exact payload accounting.

Three message kinds travel between the server and a device:

* ``CompressedModel``: the hybrid download. The ``floor(ratio * n)`` smallest
  magnitude parameters are sent as sign bits only, plus the average and the
  maximum of their magnitudes; everything else is sent at full precision. The
  device restores the sign-only positions from its previous local model.
* ``SparseGradient``: the Top-K upload, as (index, value) pairs.
* ``SparseModel``: a plain Top-K sparsified download (dropped parameters
  become zero), used by the fixed and capability-aware baselines.

Wire layout is a single little-endian bit stream (LSB first inside each byte),
header first: ``u32 length, f32 ratio``. Payload counts exclude the final
padding to a byte boundary.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    PARAM_DTYPE,
    ProtocolError,
    UsageError,
    as_param_vector,
    k_largest_abs_indices,
    k_smallest_abs_indices,
)

HEADER_BITS = 64
VALUE_BITS = 32
INDEX_BITS = 32
SUMMARY_BITS = 64

# absorbs representation error in products such as 0.29 * 100
_ROUND_EPS = 1e-9


def _check_ratio(theta: float) -> float:
    theta = float(theta)
    if not 0.0 <= theta < 1.0:
        raise UsageError(f"compression ratio {theta} outside [0, 1)")
    return theta


def masked_count(n: int, theta: float) -> int:
    """Number of parameters degraded by a model codec at ``theta``."""
    return min(n, int(math.floor(theta * n + _ROUND_EPS)))


def kept_count(n: int, theta: float) -> int:
    """Number of entries a sparse gradient keeps at ``theta`` (never zero)."""
    return min(n, max(1, int(math.ceil((1.0 - theta) * n - _ROUND_EPS))))


@dataclass(frozen=True, eq=False)
class CompressedModel:
    length: int
    quantized_mask: np.ndarray  # bool[n], True => sent as a sign bit
    signs: np.ndarray  # bool[popcount], True => non-negative
    full_values: np.ndarray  # float32[n - popcount]
    avg_abs: np.float32
    max_abs: np.float32
    ratio: float

    @property
    def n_masked(self) -> int:
        return int(self.signs.size)


@dataclass(frozen=True, eq=False)
class SparseGradient:
    length: int
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # float32
    ratio: float

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True, eq=False)
class SparseModel:
    length: int
    kept_mask: np.ndarray  # bool[n], True => value transmitted
    values: np.ndarray  # float32[popcount]
    ratio: float


# ---------------------------------------------------------------------------
# hybrid model codec


def encode_model(w, theta_d: float) -> CompressedModel:
    w = as_param_vector(w)
    theta_d = _check_ratio(theta_d)
    n = w.size
    k = masked_count(n, theta_d)
    idx = k_smallest_abs_indices(w, k)
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    masked = w[idx]
    if k:
        mags = np.abs(masked).astype(np.float64)
        avg_abs = np.float32(mags.mean())
        max_abs = np.float32(mags.max())
        # float32 rounding of the mean must not exceed the max
        avg_abs = min(avg_abs, max_abs)
    else:
        avg_abs = max_abs = np.float32(0.0)
    return CompressedModel(
        length=n,
        quantized_mask=mask,
        signs=masked >= 0,
        full_values=w[~mask].copy(),
        avg_abs=np.float32(avg_abs),
        max_abs=np.float32(max_abs),
        ratio=float(np.float32(theta_d)),
    )


def recover_model(cm: CompressedModel, local: Optional[np.ndarray]) -> np.ndarray:
    """Rebuild a full model from ``cm`` using the device's previous ``local`` model.

    A sign-only position keeps the local value when it has the transmitted
    sign and a magnitude no larger than ``max_abs``; otherwise it becomes
    ``sign * avg_abs``. A local value of exactly zero never matches.
    """
    n = cm.length
    out = np.empty(n, dtype=PARAM_DTYPE)
    mask = cm.quantized_mask
    out[~mask] = cm.full_values
    if cm.n_masked == 0:
        return out
    if local is None:
        raise ProtocolError("device without a local model must receive the full-precision model (ratio 0)")
    local = as_param_vector(local)
    if local.size != n:
        raise UsageError(f"local model has length {local.size}, expected {n}")
    c = local[mask]
    positive = cm.signs
    same_sign = np.where(positive, c > 0, c < 0)
    usable = same_sign & (np.abs(c) <= cm.max_abs)
    fallback = np.where(positive, cm.avg_abs, -cm.avg_abs).astype(PARAM_DTYPE)
    out[mask] = np.where(usable, c, fallback)
    return out


def model_payload_bits_for(n: int, theta_d: float) -> int:
    k = masked_count(n, theta_d)
    return HEADER_BITS + n + k + VALUE_BITS * (n - k) + SUMMARY_BITS


def model_payload_bits(cm: CompressedModel) -> int:
    k = cm.n_masked
    return HEADER_BITS + cm.length + k + VALUE_BITS * (cm.length - k) + SUMMARY_BITS


# ---------------------------------------------------------------------------
# Top-K gradient codec


def encode_gradient(g, theta_u: float) -> SparseGradient:
    g = as_param_vector(g)
    theta_u = _check_ratio(theta_u)
    idx = k_largest_abs_indices(g, kept_count(g.size, theta_u))
    return SparseGradient(
        length=g.size,
        indices=idx.astype(np.uint32),
        values=g[idx].copy(),
        ratio=float(np.float32(theta_u)),
    )


def decode_gradient(sg: SparseGradient) -> np.ndarray:
    out = np.zeros(sg.length, dtype=PARAM_DTYPE)
    out[sg.indices.astype(np.intp)] = sg.values
    return out


def gradient_payload_bits_for(n: int, theta_u: float) -> int:
    return HEADER_BITS + kept_count(n, theta_u) * (INDEX_BITS + VALUE_BITS)


def gradient_payload_bits(sg: SparseGradient) -> int:
    return HEADER_BITS + len(sg) * (INDEX_BITS + VALUE_BITS)


# ---------------------------------------------------------------------------
# plain Top-K model sparsification (baselines)


def encode_sparse_model(w, theta: float) -> SparseModel:
    w = as_param_vector(w)
    theta = _check_ratio(theta)
    n = w.size
    dropped = k_smallest_abs_indices(w, masked_count(n, theta))
    kept = np.ones(n, dtype=bool)
    kept[dropped] = False
    return SparseModel(length=n, kept_mask=kept, values=w[kept].copy(), ratio=float(np.float32(theta)))


def decode_sparse_model(sm: SparseModel) -> np.ndarray:
    out = np.zeros(sm.length, dtype=PARAM_DTYPE)
    out[sm.kept_mask] = sm.values
    return out


def sparse_model_payload_bits_for(n: int, theta: float) -> int:
    return HEADER_BITS + n + VALUE_BITS * (n - masked_count(n, theta))


def sparse_model_payload_bits(sm: SparseModel) -> int:
    return HEADER_BITS + sm.length + VALUE_BITS * int(sm.values.size)


# ---------------------------------------------------------------------------
# wire format


def _bytes_to_bits(buf: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")


def _bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _f32_bits(values: np.ndarray) -> np.ndarray:
    return _bytes_to_bits(np.asarray(values, dtype="<f4").tobytes())


def _read_f32(bits: np.ndarray, count: int) -> np.ndarray:
    return np.frombuffer(_bits_to_bytes(bits[: VALUE_BITS * count]), dtype="<f4").astype(PARAM_DTYPE)


def _header(n: int, ratio: float) -> np.ndarray:
    return _bytes_to_bits(struct.pack("<If", n, ratio))


def _parse_header(bits: np.ndarray) -> tuple[int, float]:
    n, ratio = struct.unpack("<If", _bits_to_bytes(bits[:HEADER_BITS]))
    return n, float(ratio)


def model_to_bytes(cm: CompressedModel) -> bytes:
    bits = np.concatenate(
        [
            _header(cm.length, cm.ratio),
            cm.quantized_mask.astype(np.uint8),
            cm.signs.astype(np.uint8),
            _f32_bits(cm.full_values),
            _f32_bits(np.array([cm.avg_abs, cm.max_abs])),
        ]
    )
    assert bits.size == model_payload_bits(cm)
    return _bits_to_bytes(bits)


def model_from_bytes(buf: bytes) -> CompressedModel:
    bits = _bytes_to_bits(buf)
    n, ratio = _parse_header(bits)
    pos = HEADER_BITS
    mask = bits[pos : pos + n].astype(bool)
    pos += n
    k = int(mask.sum())
    signs = bits[pos : pos + k].astype(bool)
    pos += k
    full = _read_f32(bits[pos:], n - k)
    pos += VALUE_BITS * (n - k)
    avg_abs, max_abs = _read_f32(bits[pos:], 2)
    return CompressedModel(n, mask, signs, full, np.float32(avg_abs), np.float32(max_abs), ratio)


_ENTRY = np.dtype([("index", "<u4"), ("value", "<f4")])


def gradient_to_bytes(sg: SparseGradient) -> bytes:
    entries = np.empty(len(sg), dtype=_ENTRY)
    entries["index"] = sg.indices
    entries["value"] = sg.values
    return struct.pack("<If", sg.length, sg.ratio) + entries.tobytes()


def gradient_from_bytes(buf: bytes) -> SparseGradient:
    n, ratio = struct.unpack_from("<If", buf)
    entries = np.frombuffer(buf, dtype=_ENTRY, offset=HEADER_BITS // 8)
    return SparseGradient(
        length=n,
        indices=entries["index"].astype(np.uint32),
        values=entries["value"].astype(PARAM_DTYPE),
        ratio=float(ratio),
    )


def sparse_model_to_bytes(sm: SparseModel) -> bytes:
    bits = np.concatenate([_header(sm.length, sm.ratio), sm.kept_mask.astype(np.uint8), _f32_bits(sm.values)])
    return _bits_to_bytes(bits)


def sparse_model_from_bytes(buf: bytes) -> SparseModel:
    bits = _bytes_to_bits(buf)
    n, ratio = _parse_header(bits)
    kept = bits[HEADER_BITS : HEADER_BITS + n].astype(bool)
    values = _read_f32(bits[HEADER_BITS + n :], int(kept.sum()))
    return SparseModel(n, kept, values, ratio)
