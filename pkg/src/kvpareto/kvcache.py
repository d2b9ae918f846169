"""Append-only quantized KV cache.

Each ``append`` quantizes the incoming chunk once and seals it; sealed segments
are never re-quantized. Per-sequence layouts only seal whole token groups and
keep the remainder as a full-precision residual until the group fills up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import Granularity, QuantizedBlock, QuantSpec, dequantize, quantize
from .tensor import DimensionError

# bytes per stored parameter / residual element, matching memmodel defaults
PARAM_BYTES = 2
RESIDUAL_BYTES = 2


@dataclass(frozen=True)
class KVCacheConfig:
    k_spec: QuantSpec
    v_spec: QuantSpec
    layers: int
    heads_kv: int
    head_dim: int

    def __post_init__(self):
        if not (self.k_spec.passthrough or self.v_spec.passthrough):
            if (self.k_spec.granularity, self.k_spec.group_size) != (self.v_spec.granularity, self.v_spec.group_size):
                raise ValueError("k_spec and v_spec must share granularity and group size")
        if min(self.layers, self.heads_kv, self.head_dim) < 1:
            raise ValueError("layers, heads_kv and head_dim must be positive")

    @classmethod
    def mixed(cls, k_bits: int, v_bits: int, *, layers: int, heads_kv: int, head_dim: int,
              granularity="per-token", group_size: int = 32, smoothing: bool = False) -> "KVCacheConfig":
        """Build a ``kXvY`` config; smoothing applies to keys only."""
        k = QuantSpec(k_bits, Granularity(granularity), group_size, smoothing and k_bits != 16)
        v = QuantSpec(v_bits, Granularity(granularity), group_size, False)
        return cls(k, v, layers, heads_kv, head_dim)


@dataclass
class Segment:
    start: int
    length: int
    k: QuantizedBlock
    v: QuantizedBlock


@dataclass
class _Layer:
    segments: list[Segment] = field(default_factory=list)
    res_k: np.ndarray | None = None
    res_v: np.ndarray | None = None
    k_view: np.ndarray | None = None
    v_view: np.ndarray | None = None

    @property
    def residual_len(self) -> int:
        return 0 if self.res_k is None else self.res_k.shape[1]


class KVCache:
    """Per-layer segment store. Single writer; ``read`` returns dequantized views."""

    def __init__(self, config: KVCacheConfig):
        self.config = config
        self._layers = [_Layer() for _ in range(config.layers)]
        empty = np.zeros((config.heads_kv, 0, config.head_dim), np.float32)
        for layer in self._layers:
            layer.k_view = empty
            layer.v_view = empty

    def __len__(self) -> int:
        return self.token_count

    @property
    def token_count(self) -> int:
        return self.layer_tokens(0)

    def layer_tokens(self, layer: int) -> int:
        st = self._layers[layer]
        return sum(s.length for s in st.segments) + st.residual_len

    def segments(self, layer: int) -> list[Segment]:
        return list(self._layers[self._check_layer(layer)].segments)

    def residual_len(self, layer: int) -> int:
        return self._layers[self._check_layer(layer)].residual_len

    def _check_layer(self, layer: int) -> int:
        if not 0 <= layer < self.config.layers:
            raise IndexError(f"layer {layer} out of range [0, {self.config.layers})")
        return layer

    def append(self, layer: int, k_chunk: np.ndarray, v_chunk: np.ndarray) -> "KVCache":
        st = self._layers[self._check_layer(layer)]
        cfg = self.config
        k_chunk = np.asarray(k_chunk, dtype=np.float32)
        v_chunk = np.asarray(v_chunk, dtype=np.float32)
        want = (cfg.heads_kv, cfg.head_dim)
        if k_chunk.ndim != 3 or (k_chunk.shape[0], k_chunk.shape[2]) != want or k_chunk.shape != v_chunk.shape:
            raise DimensionError(f"expected k/v chunks shaped ({cfg.heads_kv}, t, {cfg.head_dim}), "
                                 f"got {k_chunk.shape} and {v_chunk.shape}")
        if k_chunk.shape[1] == 0:
            return self

        start = self.layer_tokens(layer)
        seq_grouped = cfg.k_spec.granularity is Granularity.PER_SEQUENCE_GROUP and not cfg.k_spec.passthrough
        if seq_grouped:
            if st.res_k is not None:
                start -= st.residual_len
                k_chunk = np.concatenate([st.res_k, k_chunk], axis=1)
                v_chunk = np.concatenate([st.res_v, v_chunk], axis=1)
            n = k_chunk.shape[1]
            sealed = n - n % cfg.k_spec.group_size
            st.res_k = k_chunk[:, sealed:].copy() if sealed < n else None
            st.res_v = v_chunk[:, sealed:].copy() if sealed < n else None
            k_chunk, v_chunk = k_chunk[:, :sealed], v_chunk[:, :sealed]

        if k_chunk.shape[1]:
            seg = Segment(start, k_chunk.shape[1], quantize(k_chunk, cfg.k_spec), quantize(v_chunk, cfg.v_spec))
            st.segments.append(seg)
            st.k_view = np.concatenate([st.k_view, dequantize(seg.k)], axis=1)
            st.v_view = np.concatenate([st.v_view, dequantize(seg.v)], axis=1)
        return self

    def read(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        st = self._layers[self._check_layer(layer)]
        if st.res_k is None:
            return st.k_view, st.v_view
        return (np.concatenate([st.k_view, st.res_k], axis=1),
                np.concatenate([st.v_view, st.res_v], axis=1))

    def stored_bytes(self, count_overhead: bool = False) -> float:
        """Logical storage: codes at their bit width, plus metadata when requested.

        Metadata is one 16-bit scale and one 16-bit zero point per group and
        16-bit smoothing means. Residual tokens are charged at 16 bits.
        """
        cfg = self.config
        total = 0.0
        for st in self._layers:
            for seg in st.segments:
                n = seg.length * cfg.heads_kv * cfg.head_dim
                for blk in (seg.k, seg.v):
                    total += n * blk.spec.bits / 8
                    if count_overhead and not blk.spec.passthrough:
                        total += blk.num_groups * 2 * PARAM_BYTES
                        if blk.means is not None:
                            total += blk.means.size * PARAM_BYTES
            total += 2 * st.residual_len * cfg.heads_kv * cfg.head_dim * RESIDUAL_BYTES
        return total
