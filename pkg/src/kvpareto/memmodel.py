"""Analytic memory accounting: model weights + KV cache + peak activation.

All results are in bytes. ``total = model + kv + peak`` where the peak is the
larger of the attention score buffer and the ``lm_head`` output buffer.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from .structured import ConfigError, load_mapping

GB = 1e9
DEFAULT_CONTEXT = 10240
ATTENTION_KINDS = ("sdpa", "flash")
KV_GRANULARITIES = ("per-token", "per-seq", "per-tensor")
QPARAM_BITS = 16  # scale and zero point each


@dataclass(frozen=True)
class ArchSpec:
    name: str
    param_count: int
    layers: int
    heads: int
    kv_heads: int
    head_dim: int
    vocab_size: int
    tie_word_embeddings: bool = False
    source: str = ""

    def __post_init__(self):
        for f in ("param_count", "layers", "heads", "kv_heads", "head_dim", "vocab_size"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.heads % self.kv_heads:
            raise ValueError("heads must be a multiple of kv_heads")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def embedding_params(self) -> int:
        """Input embedding plus a separate ``lm_head`` copy when untied."""
        return self.vocab_size * self.hidden * (1 if self.tie_word_embeddings else 2)


@dataclass(frozen=True)
class MemQuery:
    """One point in configuration space.

    ``chunk=None`` is single-pass prefill. ``attention="flash"`` replaces the
    score buffer by the tiled workspace ``(b_q**2 + 2*b_kv**2 + delta)``
    elements; the ``lm_head`` buffer still covers one chunk (or the full
    context without chunking).
    """

    context: int = DEFAULT_CONTEXT
    batch: int = 1
    weight_bits: int = 16
    k_bits: int = 16
    v_bits: int = 16
    act_bytes: float = 2
    chunk: int | None = None
    attention: str = "sdpa"
    b_q: int = 128
    b_kv: int = 128
    delta: int = 0
    count_group_overhead: bool = False
    group_size: int = 32
    kv_granularity: str = "per-token"
    weight_group_size: int = 128
    embedding_bits: int = 16

    def __post_init__(self):
        if self.context < 0 or self.batch < 1:
            raise ValueError("context must be >= 0 and batch >= 1")
        if self.chunk is not None and self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}")
        if self.b_q <= 0 or self.b_kv <= 0 or self.delta < 0:
            raise ValueError("b_q, b_kv must be positive and delta non-negative")
        if self.group_size < 1 or self.weight_group_size < 1:
            raise ValueError("group sizes must be positive")
        if self.kv_granularity not in KV_GRANULARITIES:
            raise ValueError(f"kv_granularity must be one of {KV_GRANULARITIES}")

    @property
    def tokens_per_pass(self) -> int:
        """Tokens processed by one forward call: the chunk, clamped to the context."""
        return self.context if self.chunk is None else min(self.chunk, self.context)

    @property
    def weight_bits_effective(self) -> float:
        if self.count_group_overhead and self.weight_bits < 16:
            return self.weight_bits + 2 * QPARAM_BITS / self.weight_group_size
        return float(self.weight_bits)

    def replace(self, **kw) -> "MemQuery":
        d = asdict(self)
        d.update(kw)
        return MemQuery(**d)


@dataclass(frozen=True)
class MemoryProfile:
    model_bytes: float
    kv_bytes: float
    peak_activation_bytes: float
    mha_peak_bytes: float
    lm_head_peak_bytes: float

    @property
    def total_bytes(self) -> float:
        return self.model_bytes + self.kv_bytes + self.peak_activation_bytes

    def breakdown(self) -> dict[str, str]:
        return {
            "model": f"{self.model_bytes / GB:.3f} GB",
            "kv_cache": f"{self.kv_bytes / GB:.3f} GB",
            "peak_activation": f"{self.peak_activation_bytes / GB:.3f} GB",
            "total": f"{self.total_bytes / GB:.3f} GB",
        }

    def as_dict(self) -> dict[str, float]:
        return {"model_bytes": self.model_bytes, "kv_bytes": self.kv_bytes,
                "peak_activation_bytes": self.peak_activation_bytes, "mha_peak_bytes": self.mha_peak_bytes,
                "lm_head_peak_bytes": self.lm_head_peak_bytes, "total_bytes": self.total_bytes}


def _kv_bits_per_element(bits: int, q: MemQuery, head_dim: int) -> float:
    """Code bits plus, with overhead counted, the amortized scale/zero pair.

    A per-token group spans ``group_size`` channels of one token. A per-seq
    group spans ``group_size`` tokens across all ``head_dim`` channels of one
    head. Per-tensor pays a fixed cost that ``kv_bytes`` adds separately.
    """
    if not (q.count_group_overhead and bits < 16) or q.kv_granularity == "per-tensor":
        return float(bits)
    elements = q.group_size * (head_dim if q.kv_granularity == "per-seq" else 1)
    return bits + 2 * QPARAM_BITS / elements


def kv_bytes(q: MemQuery, a: ArchSpec) -> float:
    """K and V storage over ``batch * kv_heads * context * head_dim * layers`` elements each."""
    n = q.batch * a.kv_heads * q.context * a.head_dim * a.layers
    bits = _kv_bits_per_element(q.k_bits, q, a.head_dim) + _kv_bits_per_element(q.v_bits, q, a.head_dim)
    total = n * bits / 8
    if q.count_group_overhead and q.kv_granularity == "per-tensor" and q.context > 0:
        quantized = (q.k_bits < 16) + (q.v_bits < 16)
        total += quantized * q.batch * a.layers * 2 * QPARAM_BITS / 8
    return total


def mha_peak(q: MemQuery, a: ArchSpec) -> float:
    if q.attention == "flash":
        return (q.b_q**2 + 2 * q.b_kv**2 + q.delta) * q.act_bytes
    return q.batch * a.heads * q.tokens_per_pass * q.context * q.act_bytes


def lm_head_peak(q: MemQuery, a: ArchSpec) -> float:
    return q.batch * q.tokens_per_pass * a.vocab_size * q.act_bytes


def model_bytes(q: MemQuery, a: ArchSpec) -> float:
    """Quantized weights at ``weight_bits_effective``; embeddings and ``lm_head`` at ``embedding_bits``."""
    if q.weight_bits >= 16:
        return a.param_count * q.weight_bits / 8
    emb = min(a.embedding_params, a.param_count)
    return (a.param_count - emb) * q.weight_bits_effective / 8 + emb * q.embedding_bits / 8


def total_memory(q: MemQuery, a: ArchSpec) -> MemoryProfile:
    mha, lm = mha_peak(q, a), lm_head_peak(q, a)
    return MemoryProfile(model_bytes(q, a), kv_bytes(q, a), max(mha, lm), mha, lm)


def memory_reduction(baseline: MemoryProfile, optimized: MemoryProfile) -> float:
    return 100.0 * (1.0 - optimized.total_bytes / baseline.total_bytes)


def baseline_query(context: int = DEFAULT_CONTEXT, **kw) -> MemQuery:
    """bf16 weights and KV, single-pass SDPA prefill."""
    return MemQuery(context=context, **kw)


# -- arch files --------------------------------------------------------------

_ARCH_FIELDS = tuple(ArchSpec.__dataclass_fields__)
_ARCH_REQUIRED = ("name", "param_count", "layers", "heads", "kv_heads", "head_dim", "vocab_size")


def load_arch(path: str | os.PathLike) -> ArchSpec:
    data = load_mapping(path, _ARCH_FIELDS, _ARCH_REQUIRED)
    try:
        data["param_count"] = int(float(data["param_count"]))
        return ArchSpec(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), os.fspath(path)) from None


def builtin_arch_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("kvpareto.archs").iterdir() if p.name.endswith(".yaml"))


def builtin_arch(name: str) -> ArchSpec:
    ref = resources.files("kvpareto.archs") / f"{name}.yaml"
    if not ref.is_file():
        raise ValueError(f"unknown architecture {name!r}; available: {', '.join(builtin_arch_names())}")
    with resources.as_file(ref) as p:
        return load_arch(Path(p))


def resolve_arch(spec: str | os.PathLike) -> ArchSpec:
    """A path to an arch file, or the name of a bundled one."""
    if os.path.exists(spec):
        return load_arch(spec)
    return builtin_arch(str(spec))


def arch_from_model(cfg, name: str = "toy") -> ArchSpec:
    """ArchSpec for a simulator ``ModelConfig``.

    ``param_count`` covers the projection matrices and the embedding/lm_head
    copies; norm gains and the fixed position table are left out.
    """
    linear = sum(cfg.shapes()[n][0] * cfg.shapes()[n][1] for n in cfg.linear_names())
    copies = 1 if cfg.tie_embeddings else 2
    return ArchSpec(name=name, param_count=linear + copies * cfg.vocab_size * cfg.hidden, layers=cfg.layers,
                    heads=cfg.heads, kv_heads=cfg.kv_heads, head_dim=cfg.head_dim, vocab_size=cfg.vocab_size,
                    tie_word_embeddings=cfg.tie_embeddings, source="simulator model config")
