"""Toy decoder-only transformer with chunked prefill over a quantized KV cache.

Pre-norm blocks with RMS normalization, multi-head attention with optional
grouped KV heads, a squared-ReLU FFN (omitted when ``ffn_dim == 0``) and an
additive learned positional table. Batch size is always 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .kvcache import KVCache, KVCacheConfig
from .quant import PASSTHROUGH, QuantSpec
from .tensor import AttentionMask, matmul, rms_norm, sdpa

WEIGHT_MODES = ("w16", "w4", "w4awq")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    kv_heads: int = 4
    head_dim: int = 64
    ffn_dim: int = 0
    vocab_size: int = 64
    max_positions: int = 1024
    tie_embeddings: bool = False

    def __post_init__(self):
        if min(self.layers, self.heads, self.kv_heads, self.head_dim, self.vocab_size, self.max_positions) < 1:
            raise ValueError("model dimensions must be positive")
        if self.heads % self.kv_heads:
            raise ValueError(f"heads ({self.heads}) must be a multiple of kv_heads ({self.kv_heads})")
        if self.ffn_dim < 0:
            raise ValueError("ffn_dim must be >= 0")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical tensor names and shapes. Linear weights are ``(in, out)``."""
        h, kv = self.hidden, self.kv_heads * self.head_dim
        out = {"embed": (self.vocab_size, h), "pos": (self.max_positions, h), "norm.final": (h,)}
        if not self.tie_embeddings:
            out["lm_head"] = (h, self.vocab_size)
        for i in range(self.layers):
            out[f"layers.{i}.attn.q"] = (h, h)
            out[f"layers.{i}.attn.k"] = (h, kv)
            out[f"layers.{i}.attn.v"] = (h, kv)
            out[f"layers.{i}.attn.o"] = (h, h)
            out[f"norm.{i}.attn"] = (h,)
            if self.ffn_dim:
                out[f"layers.{i}.ffn.up"] = (h, self.ffn_dim)
                out[f"layers.{i}.ffn.down"] = (self.ffn_dim, h)
                out[f"norm.{i}.ffn"] = (h,)
        return out

    def linear_names(self) -> list[str]:
        """Projection matrices subject to weight quantization (lm_head excluded)."""
        return [n for n in self.shapes() if n.startswith("layers.")]


class WeightError(ValueError):
    """Weights do not match the model configuration."""


@dataclass
class Weights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        want = self.config.shapes()
        missing = sorted(set(want) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(want))
        if missing or extra:
            raise WeightError(f"weight names do not match config: missing={missing} extra={extra}")
        for name, shape in want.items():
            got = tuple(np.shape(self.tensors[name]))
            if got != shape:
                raise WeightError(f"tensor {name!r}: expected shape {shape}, got {got}")
            self.tensors[name] = np.ascontiguousarray(self.tensors[name], dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def lm_head(self) -> np.ndarray:
        if self.config.tie_embeddings:
            return np.ascontiguousarray(self.tensors["embed"].T)
        return self.tensors["lm_head"]

    def replace(self, **tensors: np.ndarray) -> "Weights":
        new = dict(self.tensors)
        new.update(tensors)
        return Weights(self.config, new)


@dataclass(frozen=True)
class RunConfig:
    """How one inference run is executed. ``chunk_size=None`` means single-pass prefill."""

    chunk_size: int | None = 256
    k_spec: QuantSpec = PASSTHROUGH
    v_spec: QuantSpec = PASSTHROUGH
    weight_mode: str = "w16"

    def __post_init__(self):
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")

    def new_cache(self, cfg: ModelConfig) -> KVCache:
        return KVCache(KVCacheConfig(self.k_spec, self.v_spec, cfg.layers, cfg.kv_heads, cfg.head_dim))


def random_weights(cfg: ModelConfig, seed: int = 0) -> Weights:
    rng = np.random.default_rng(seed)
    t = {}
    for name, shape in cfg.shapes().items():
        if name.startswith("norm."):
            t[name] = np.ones(shape, np.float32)
        elif name == "embed":
            t[name] = rng.normal(0.0, 1.0, shape)
        elif name == "pos":
            t[name] = rng.normal(0.0, 0.1, shape)
        else:
            t[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return Weights(cfg, {k: np.asarray(v, np.float32) for k, v in t.items()})


# -- forward ---------------------------------------------------------------

def _block_chunk(w: Weights, cache: KVCache, x: np.ndarray, start: int) -> np.ndarray:
    cfg = w.config
    t = x.shape[0]
    for i in range(cfg.layers):
        h = rms_norm(x, w[f"norm.{i}.attn"])
        q = matmul(h, w[f"layers.{i}.attn.q"]).reshape(t, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
        k = matmul(h, w[f"layers.{i}.attn.k"]).reshape(t, cfg.kv_heads, cfg.head_dim).transpose(1, 0, 2)
        v = matmul(h, w[f"layers.{i}.attn.v"]).reshape(t, cfg.kv_heads, cfg.head_dim).transpose(1, 0, 2)
        cache.append(i, k, v)
        keys, values = cache.read(i)
        if cfg.kv_heads != cfg.heads:
            rep = cfg.heads // cfg.kv_heads
            keys, values = np.repeat(keys, rep, axis=0), np.repeat(values, rep, axis=0)
        a = sdpa(np.ascontiguousarray(q), keys, values, AttentionMask(start))
        x = x + matmul(np.ascontiguousarray(a.transpose(1, 0, 2).reshape(t, cfg.hidden)), w[f"layers.{i}.attn.o"])
        if cfg.ffn_dim:
            h = rms_norm(x, w[f"norm.{i}.ffn"])
            up = np.maximum(matmul(h, w[f"layers.{i}.ffn.up"]), 0)
            x = x + matmul(up * up, w[f"layers.{i}.ffn.down"])
    return x


def _logits(w: Weights, x: np.ndarray) -> np.ndarray:
    return matmul(rms_norm(x, w["norm.final"]), w.lm_head)


def _embed(w: Weights, tokens: np.ndarray, start: int) -> np.ndarray:
    return w["embed"][tokens] + w["pos"][start:start + len(tokens)]


def forward_prefill(weights: Weights, run: RunConfig, tokens, cache: KVCache, *,
                    return_all: bool = False) -> np.ndarray:
    """Process the prompt chunk by chunk, filling ``cache``.

    Returns logits for the last position (shape ``(1, vocab)``) or for every
    position when ``return_all`` is set.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    m = len(tokens)
    if m == 0:
        raise ValueError("empty prompt; use decode_step for the first token")
    if cache.token_count:
        raise ValueError("forward_prefill needs an empty cache")
    if m > cfg.max_positions:
        raise ValueError(f"prompt of {m} tokens exceeds max_positions={cfg.max_positions}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    c = m if run.chunk_size is None else run.chunk_size
    outs = []
    for start in range(0, m, c):
        x = _block_chunk(weights, cache, _embed(weights, tokens[start:start + c], start), start)
        if return_all:
            outs.append(_logits(weights, x))
        elif start + c >= m:
            outs.append(_logits(weights, x[-1:]))
    return np.concatenate(outs, axis=0)


def decode_step(weights: Weights, run: RunConfig, token: int, cache: KVCache) -> np.ndarray:
    cfg = weights.config
    pos = cache.token_count
    if pos >= cfg.max_positions:
        raise ValueError(f"position {pos} exceeds max_positions={cfg.max_positions}")
    if not 0 <= token < cfg.vocab_size:
        raise ValueError("token id out of range")
    x = _block_chunk(weights, cache, _embed(weights, np.array([token]), pos), pos)
    return _logits(weights, x)


def greedy_decode(weights: Weights, run: RunConfig, cache: KVCache, logits: np.ndarray, steps: int) -> list[int]:
    out = []
    for _ in range(steps):
        tok = int(np.argmax(logits[-1]))
        out.append(tok)
        logits = decode_step(weights, run, tok, cache)
    return out


# -- induction construction -------------------------------------------------

def induction_layout(vocab: int, max_positions: int) -> dict[str, int]:
    """Residual stream offsets: token | position code | start flag | previous token | answer | bias."""
    freqs = max(1, math.ceil(math.log2(max_positions)))
    tok = 0
    pos = tok + vocab
    flag = pos + 2 * freqs
    prev = flag + 1
    ans = prev + vocab
    bias = ans + vocab
    return {"freqs": freqs, "tok": tok, "pos": pos, "flag": flag, "prev": prev, "ans": ans, "bias": bias,
            "width": bias + 1}


def build_induction_model(vocab: int, cfg_template: ModelConfig | None = None, *,
                          prev_sharpness: float = 15.0, match_sharpness: float = 20.0,
                          logit_scale: float = 10.0, mix_seed: int | None = None,
                          key_offset: float = 0.0) -> tuple[ModelConfig, Weights]:
    """Hand-built two-layer attention-only induction circuit.

    Layer 0 head 0 attends from each position to its predecessor by matching a
    binary-frequency position code (``cos/sin(pi * p / 2**f)``) rotated back by
    one step, and writes the predecessor's token into the ``prev`` slot.
    Layer 1 head 0 matches the current token against every ``prev`` slot and
    copies the matched position's token into the ``answer`` slot, which
    ``lm_head`` reads out. Position 0 carries a flag that cancels its
    (self-referential) ``prev`` entry in layer 1 keys.

    ``mix_seed`` applies a random orthogonal change of basis inside every head
    (shared by q/k, and by v/o), which leaves the function unchanged but makes
    the cached keys and values dense. ``key_offset`` adds a constant vector to
    layer-0 keys in channels the query never reads: attention is unchanged
    while per-channel key ranges grow, which is what key smoothing removes.
    """
    tpl = cfg_template or ModelConfig()
    if vocab < 4:
        raise ValueError("induction model needs vocab >= 4")
    lay = induction_layout(vocab, tpl.max_positions)
    cfg = ModelConfig(layers=2, heads=tpl.heads, kv_heads=tpl.kv_heads, head_dim=tpl.head_dim, ffn_dim=0,
                      vocab_size=vocab, max_positions=tpl.max_positions, tie_embeddings=False)
    if 2 ** lay["freqs"] < cfg.max_positions:
        raise ValueError("insufficient position code for max_positions")
    if cfg.hidden < lay["width"] or cfg.head_dim < max(2 * lay["freqs"], vocab):
        raise ValueError(f"template too small: need hidden >= {lay['width']} and "
                         f"head_dim >= {max(2 * lay['freqs'], vocab)}")
    h, f = cfg.hidden, lay["freqs"]
    root_d = math.sqrt(cfg.head_dim)
    t = {name: np.zeros(shape, np.float64) for name, shape in cfg.shapes().items()}

    t["embed"][np.arange(vocab), lay["tok"] + np.arange(vocab)] = 1.0
    p = np.arange(cfg.max_positions)
    for k in range(f):
        w = math.pi / 2**k
        t["pos"][:, lay["pos"] + 2 * k] = np.cos(w * p)
        t["pos"][:, lay["pos"] + 2 * k + 1] = np.sin(w * p)
    t["pos"][0, lay["flag"]] = 1.0

    # layer 0: previous-token head
    beta = prev_sharpness * root_d
    for k in range(f):
        w = math.pi / 2**k
        rc, rs = lay["pos"] + 2 * k, lay["pos"] + 2 * k + 1
        q = t["layers.0.attn.q"]
        q[rc, 2 * k], q[rs, 2 * k] = beta * math.cos(w), beta * math.sin(w)
        q[rc, 2 * k + 1], q[rs, 2 * k + 1] = -beta * math.sin(w), beta * math.cos(w)
        t["layers.0.attn.k"][rc, 2 * k] = 1.0
        t["layers.0.attn.k"][rs, 2 * k + 1] = 1.0
    idx = np.arange(vocab)
    t["layers.0.attn.v"][lay["tok"] + idx, idx] = 1.0
    t["layers.0.attn.o"][idx, lay["prev"] + idx] = 1.0

    # layer 1: induction head
    t["layers.1.attn.q"][lay["tok"] + idx, idx] = match_sharpness * root_d
    t["layers.1.attn.k"][lay["prev"] + idx, idx] = 1.0
    t["layers.1.attn.k"][lay["flag"], :vocab] = -1.0
    t["layers.1.attn.v"][lay["tok"] + idx, idx] = 1.0
    t["layers.1.attn.o"][idx, lay["ans"] + idx] = 1.0

    # norm gains (set below) undo the RMS rescaling for the nominal stream norm
    t["lm_head"][lay["ans"] + idx, idx] = logit_scale

    if key_offset:
        rng = np.random.default_rng(0 if mix_seed is None else mix_seed)
        free = np.arange(2 * f, cfg.head_dim)
        # the bias slot is a constant 1 in every token embedding
        t["embed"][:, lay["bias"]] = 1.0
        t["layers.0.attn.k"][lay["bias"], free] = key_offset * rng.standard_normal(len(free))
    base = 1 + f + (1 if key_offset else 0)
    t["norm.0.attn"][:] = math.sqrt(base / h)
    t["norm.1.attn"][:] = math.sqrt((base + 1) / h)
    t["norm.final"][:] = math.sqrt((base + 2) / h)

    if mix_seed is not None:
        rng = np.random.default_rng(mix_seed)
        d = cfg.head_dim
        for i in range(cfg.layers):
            rq, _ = np.linalg.qr(rng.standard_normal((d, d)))
            rv, _ = np.linalg.qr(rng.standard_normal((d, d)))
            for hd in range(cfg.kv_heads):
                sl = slice(hd * d, (hd + 1) * d)
                t[f"layers.{i}.attn.k"][:, sl] = t[f"layers.{i}.attn.k"][:, sl] @ rq
                t[f"layers.{i}.attn.v"][:, sl] = t[f"layers.{i}.attn.v"][:, sl] @ rv
            for hd in range(cfg.heads):
                sl = slice(hd * d, (hd + 1) * d)
                t[f"layers.{i}.attn.q"][:, sl] = t[f"layers.{i}.attn.q"][:, sl] @ rq
                t[f"layers.{i}.attn.o"][sl, :] = rv.T @ t[f"layers.{i}.attn.o"][sl, :]
    return cfg, Weights(cfg, {k: v.astype(np.float32) for k, v in t.items()})


# -- persistence -----------------------------------------------------------

def save_weights(path, weights: Weights, *, dtype: str = "f32") -> None:
    meta = {"config": json_config(weights.config)}
    container.write_tensors(path, weights.tensors, dtype=dtype, metadata=meta)


def json_config(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def config_from_json(text: str) -> ModelConfig:
    return ModelConfig(**json.loads(text))


def load_weights(path, cfg: ModelConfig | None = None) -> Weights:
    """Load a weight container. Without ``cfg`` the config stored in the file is used."""
    tensors, meta = container.read_tensors(path)
    if cfg is None:
        if "config" not in meta:
            raise WeightError(f"{path}: no model config given and none stored in the file")
        try:
            cfg = config_from_json(meta["config"])
        except (TypeError, ValueError) as e:
            raise WeightError(f"{path}: stored model config is invalid ({e})") from None
    return Weights(cfg, tensors)
