"""Round-to-nearest (RTN) asymmetric integer quantization.

Three layouts decide which elements share one ``(scale, zero_point)`` pair on a
``(..., tokens, head_dim)`` tensor:

* ``per-token``: each token's head vector is split into groups of
  ``group_size`` channels.
* ``per-seq``: runs of ``group_size`` consecutive tokens share one pair per
  leading index (head). A trailing partial run gets its own pair.
* ``per-tensor``: one pair for everything.

Scales are rounded toward zero to ``SCALE_MANTISSA_BITS`` significant bits.
With codes spanning at most 8 bits, ``(code - zero) * scale`` is then exact in
float32, which is what makes ``qdq(qdq(x)) == qdq(x)`` hold bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

SCALE_MANTISSA_BITS = 16
DEGENERATE_SPAN = 1e-8
PASSTHROUGH_BITS = 16


class LayoutError(ValueError):
    """Tensor shape cannot be partitioned by the requested granularity."""


class Granularity(str, Enum):
    PER_TOKEN_GROUP = "per-token"
    PER_SEQUENCE_GROUP = "per-seq"
    PER_TENSOR = "per-tensor"

    @property
    def short(self) -> str:
        return {"per-token": "pt", "per-seq": "ps", "per-tensor": "tensor"}[self.value]


@dataclass(frozen=True)
class QuantSpec:
    """Quantization recipe. ``bits == 16`` means pass-through (no rounding)."""

    bits: int = 8
    granularity: Granularity = Granularity.PER_TOKEN_GROUP
    group_size: int = 32
    smoothing: bool = False
    signed: bool = True

    def __post_init__(self):
        if self.bits not in (2, 4, 8, PASSTHROUGH_BITS):
            raise ValueError(f"unsupported bit width {self.bits}")
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.group_size < 1:
            raise ValueError("group_size must be positive")

    @property
    def passthrough(self) -> bool:
        return self.bits == PASSTHROUGH_BITS

    @property
    def qmin(self) -> int:
        return code_range(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return code_range(self.bits, self.signed)[1]

    def with_bits(self, bits: int) -> "QuantSpec":
        return replace(self, bits=bits)


PASSTHROUGH = QuantSpec(bits=PASSTHROUGH_BITS)


def code_range(bits: int, signed: bool = True) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass
class QuantizedBlock:
    """Integer codes plus the per-group parameters needed to reconstruct them.

    ``scale`` and ``zero`` are shaped like the group grid of the layout
    (``(..., tokens, groups)`` per-token, ``(..., groups)`` per-seq, ``()``
    per-tensor). ``means`` holds the subtracted key means when smoothing was on.
    """

    codes: np.ndarray
    scale: np.ndarray
    zero: np.ndarray
    spec: QuantSpec
    shape: tuple[int, ...]
    means: np.ndarray | None = None
    packed: bytes | None = field(default=None, repr=False)

    @property
    def num_groups(self) -> int:
        return int(np.size(self.scale))


def _floor_mantissa(s: np.ndarray, bits: int = SCALE_MANTISSA_BITS) -> np.ndarray:
    m, e = np.frexp(s)
    return np.ldexp(np.floor(m * 2.0**bits) / 2.0**bits, e)


def _step_down(s: np.ndarray, bits: int = SCALE_MANTISSA_BITS) -> np.ndarray:
    m, e = np.frexp(s)
    return np.ldexp((np.floor(m * 2.0**bits) - 1) / 2.0**bits, e)


def _params_from_range(lo, hi, qmin: int, qmax: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.minimum(np.asarray(lo, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(hi, dtype=np.float64), 0.0)
    # tiny spans would underflow the float32 scale
    hi = np.maximum(hi, lo + DEGENERATE_SPAN)
    exact = (hi - lo) / (qmax - qmin)
    s = _floor_mantissa(exact)
    u = qmin - lo / s
    z = np.rint(u)
    # An exact scale with a +0.5 tie on the zero point leaves the top code
    # unused; nudging the scale down keeps both range ends on qmin/qmax.
    tie = (s == exact) & (u - z == 0.5)
    if np.any(tie):
        s = np.where(tie, _step_down(s), s)
        z = np.rint(qmin - lo / s)
    z = np.clip(z, qmin, qmax)
    return s.astype(np.float32), z.astype(np.int16)


def compute_qparams(values, bits: int, signed: bool = True) -> tuple[float, int]:
    """Scale and zero point for one group of values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot compute quantization parameters of an empty slice")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value in quantization group")
    qmin, qmax = code_range(bits, signed)
    s, z = _params_from_range(v.min(), v.max(), qmin, qmax)
    return float(s), int(z)


def _encode(x: np.ndarray, s: np.ndarray, z: np.ndarray, qmin: int, qmax: int) -> np.ndarray:
    q = np.rint(x.astype(np.float64) / s.astype(np.float64)) + z
    return np.clip(q, qmin, qmax).astype(np.int8 if qmax <= 127 else np.int16)


def _decode(codes: np.ndarray, s: np.ndarray, z: np.ndarray) -> np.ndarray:
    return (codes.astype(np.float32) - z.astype(np.float32)) * s.astype(np.float32)


def quantize_rows(x: np.ndarray, bits: int, signed: bool = True):
    """Quantize each row of a 2-d array as its own group. Returns ``(codes, scale, zero)``."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in quantization input")
    qmin, qmax = code_range(bits, signed)
    s, z = _params_from_range(x.min(axis=-1), x.max(axis=-1), qmin, qmax)
    return _encode(x, s[..., None], z[..., None], qmin, qmax), s, z


def dequantize_rows(codes: np.ndarray, scale: np.ndarray, zero: np.ndarray) -> np.ndarray:
    return _decode(codes, scale[..., None], zero[..., None])


# -- layouts ---------------------------------------------------------------

def _check_layout(shape: tuple[int, ...], spec: QuantSpec) -> None:
    g = spec.granularity
    if g is Granularity.PER_TENSOR:
        return
    if len(shape) < 2:
        raise LayoutError(f"{g.value} quantization needs a (..., tokens, dim) tensor, got shape {shape}")
    if g is Granularity.PER_TOKEN_GROUP and shape[-1] % spec.group_size:
        raise LayoutError(f"head_dim {shape[-1]} is not divisible by group_size {spec.group_size}")


def _seq_group_ids(n: int, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    starts = np.arange(0, n, group_size)
    return starts, np.arange(n) // group_size


def _group_ranges(x: np.ndarray, spec: QuantSpec):
    g = spec.granularity
    if g is Granularity.PER_TENSOR:
        return x.min(), x.max()
    if g is Granularity.PER_TOKEN_GROUP:
        xg = x.reshape(x.shape[:-1] + (x.shape[-1] // spec.group_size, spec.group_size))
        return xg.min(axis=-1), xg.max(axis=-1)
    starts, _ = _seq_group_ids(x.shape[-2], spec.group_size)
    return (np.minimum.reduceat(x.min(axis=-1), starts, axis=-1),
            np.maximum.reduceat(x.max(axis=-1), starts, axis=-1))


def _expand(p: np.ndarray, shape: tuple[int, ...], spec: QuantSpec) -> np.ndarray:
    """Broadcast per-group parameters back to element shape."""
    g = spec.granularity
    if g is Granularity.PER_TENSOR:
        return np.broadcast_to(p, shape)
    if g is Granularity.PER_TOKEN_GROUP:
        return np.repeat(p, spec.group_size, axis=-1)
    _, gid = _seq_group_ids(shape[-2], spec.group_size)
    return np.broadcast_to(p[..., gid, None], shape)


def smooth_k(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the per-channel mean over the token axis (second to last).

    Returns the centered tensor and the means with a kept token axis of size 1.
    """
    k = np.asarray(k, dtype=np.float32)
    if k.ndim < 2 or k.shape[-2] < 1:
        raise LayoutError("smoothing needs at least one token")
    means = k.mean(axis=-2, keepdims=True, dtype=np.float64).astype(np.float32)
    return k - means, means


def quantize(t: np.ndarray, spec: QuantSpec) -> QuantizedBlock:
    x = np.asarray(t, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in quantization input")
    means = None
    if spec.passthrough:
        return QuantizedBlock(x.copy(), np.ones((), np.float32), np.zeros((), np.int16), spec, x.shape)
    _check_layout(x.shape, spec)
    if spec.smoothing:
        x, means = smooth_k(x)
    lo, hi = _group_ranges(x, spec)
    s, z = _params_from_range(lo, hi, spec.qmin, spec.qmax)
    codes = _encode(x, _expand(s, x.shape, spec), _expand(z, x.shape, spec), spec.qmin, spec.qmax)
    return QuantizedBlock(codes, s, z, spec, x.shape, means)


def requantize(t: np.ndarray, block: QuantizedBlock) -> QuantizedBlock:
    """Encode ``t`` with the frozen parameters (and means) of an existing block."""
    spec = block.spec
    x = np.asarray(t, dtype=np.float32)
    if x.shape != block.shape:
        raise LayoutError(f"shape {x.shape} does not match fitted shape {block.shape}")
    if spec.passthrough:
        return QuantizedBlock(x.copy(), block.scale, block.zero, spec, x.shape)
    if block.means is not None:
        x = x - block.means
    codes = _encode(x, _expand(block.scale, x.shape, spec), _expand(block.zero, x.shape, spec),
                    spec.qmin, spec.qmax)
    return QuantizedBlock(codes, block.scale, block.zero, spec, x.shape, block.means)


def dequantize(b: QuantizedBlock) -> np.ndarray:
    if b.spec.passthrough:
        return b.codes.astype(np.float32, copy=True)
    codes = b.codes if b.packed is None else unpack_codes(b.packed, b.spec.bits, b.shape, b.spec.signed)
    out = _decode(codes, _expand(b.scale, b.shape, b.spec), _expand(b.zero, b.shape, b.spec))
    if b.means is not None:
        out = out + b.means
    return out


def qdq(t: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(t, spec))


# -- packing ---------------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int, signed: bool = True) -> bytes:
    """Pack codes into ``8 // bits`` fields per byte, lowest field first."""
    qmin, _ = code_range(bits, signed)
    u = (np.asarray(codes, dtype=np.int16).ravel() - qmin).astype(np.uint8)
    per = 8 // bits
    pad = (-u.size) % per
    u = np.concatenate([u, np.zeros(pad, np.uint8)]).reshape(-1, per)
    shifts = (np.arange(per) * bits).astype(np.uint8)
    return np.bitwise_or.reduce(u << shifts, axis=1).astype(np.uint8).tobytes()


def unpack_codes(buf: bytes, bits: int, shape: tuple[int, ...], signed: bool = True) -> np.ndarray:
    qmin, _ = code_range(bits, signed)
    per = 8 // bits
    raw = np.frombuffer(buf, dtype=np.uint8)
    shifts = (np.arange(per) * bits).astype(np.uint8)
    u = ((raw[:, None] >> shifts) & np.uint8((1 << bits) - 1)).ravel()
    n = int(np.prod(shape))
    qmax = code_range(bits, signed)[1]
    return (u[:n].astype(np.int16) + qmin).astype(np.int8 if qmax <= 127 else np.int16).reshape(shape)


def pack_block(b: QuantizedBlock) -> QuantizedBlock:
    if b.spec.passthrough:
        return b
    return replace(b, packed=pack_codes(b.codes, b.spec.bits, b.spec.signed))


# -- estimator -------------------------------------------------------------

class RTNQuantizer(TransformerMixin, BaseEstimator):
    """QDQ transformer with parameters frozen at ``fit`` time.

    ``fit_transform(X)`` is the usual dynamic RTN round trip of ``X``;
    ``transform`` on new data reuses the fitted scales, zero points and means.
    """

    def __init__(self, bits=8, granularity="per-token", group_size=32, smoothing=False):
        self.bits = bits
        self.granularity = granularity
        self.group_size = group_size
        self.smoothing = smoothing

    def _spec(self) -> QuantSpec:
        return QuantSpec(self.bits, Granularity(self.granularity), self.group_size, self.smoothing)

    def fit(self, X, y=None):
        X = _check_float_array(X)
        self.block_ = quantize(X, self._spec())
        self.n_groups_ = self.block_.num_groups
        return self

    def transform(self, X):
        check_is_fitted(self, "block_")
        return dequantize(requantize(_check_float_array(X), self.block_))

    def fit_transform(self, X, y=None, **fit_params):
        return dequantize(self.fit(X).block_)


def _check_float_array(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X
