"""4-bit weight-only quantization with an AWQ-style per-channel scale search.

Weights are ``(in, out)`` matrices. Each output column is split into groups of
``group_size`` consecutive input channels; every group gets an unsigned
asymmetric 4-bit code book. The optional activation-aware step multiplies input
channel ``c`` by ``s_c = mean|x_c| ** alpha`` before quantization and divides
it back out afterwards, with ``alpha`` picked per matrix on calibration data.
This is the core scaling mechanism of AWQ only; no clipping search is done.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import Weights, _embed
from .quant import dequantize_rows, quantize_rows
from .tensor import AttentionMask, rms_norm, sdpa

DEFAULT_GRID = tuple(i / 8 for i in range(9))


@dataclass(frozen=True)
class WeightQuantSpec:
    bits: int = 4
    group_size: int = 128
    activation_aware: bool = False
    grid: tuple[float, ...] = DEFAULT_GRID


@dataclass
class CalibrationSet:
    """Inputs seen by each linear layer, keyed by weight name, as ``(tokens, in)`` arrays."""

    activations: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.activations[name]


def _padded(w: np.ndarray, group_size: int) -> tuple[np.ndarray, int]:
    pad = (-w.shape[0]) % group_size
    if pad:
        w = np.concatenate([w, np.zeros((pad, w.shape[1]), w.dtype)], axis=0)
    return w, pad


def qdq_matrix(w: np.ndarray, bits: int = 4, group_size: int = 128) -> np.ndarray:
    """Group-wise unsigned RTN round trip of an ``(in, out)`` matrix.

    The input axis is zero-padded to a multiple of ``group_size``; padding rows
    are dropped again from the result.
    """
    w = np.asarray(w, dtype=np.float32)
    n_in, n_out = w.shape
    wp, _ = _padded(w, group_size)
    rows = np.ascontiguousarray(wp.T).reshape(n_out, -1, group_size)
    codes, s, z = quantize_rows(rows, bits, signed=False)
    back = dequantize_rows(codes, s, z).reshape(n_out, -1).T
    return np.ascontiguousarray(back[:n_in])


def channel_scales(x: np.ndarray, alpha: float) -> np.ndarray:
    mag = np.mean(np.abs(np.asarray(x, dtype=np.float64)), axis=0)
    mag = np.maximum(mag, 1e-8)
    s = mag**alpha
    return s / np.exp(np.mean(np.log(s)))


def scaled_qdq(w: np.ndarray, scales: np.ndarray, bits: int = 4, group_size: int = 128) -> np.ndarray:
    s = np.asarray(scales, dtype=np.float64)[:, None]
    wq = qdq_matrix((w.astype(np.float64) * s).astype(np.float32), bits, group_size)
    return (wq.astype(np.float64) / s).astype(np.float32)


def search_scales(w: np.ndarray, calib: np.ndarray, grid=DEFAULT_GRID, *, bits: int = 4,
                  group_size: int = 128) -> tuple[np.ndarray, float, dict[float, float]]:
    """Pick ``alpha`` minimizing ``mean((X W - X W_hat)**2)`` over the calibration inputs.

    Returns ``(scales, alpha, mse_by_alpha)``; ties go to the smaller alpha.
    """
    x = np.asarray(calib, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty calibration set")
    x = x.reshape(-1, w.shape[0])
    ref = x @ w.astype(np.float64)
    best = None
    losses = {}
    for alpha in sorted(grid):
        s = channel_scales(x, alpha)
        err = float(np.mean((ref - x @ scaled_qdq(w, s, bits, group_size).astype(np.float64)) ** 2))
        losses[alpha] = err
        if best is None or err < best[0]:
            best = (err, alpha, s)
    return best[2], best[1], losses


def calibration_prompts(vocab: int, n: int = 32, length: int = 256, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, vocab, size=(n, length))


def collect_calibration(weights: Weights, prompts: np.ndarray) -> CalibrationSet:
    """Run the full-precision model over ``prompts`` and record linear-layer inputs."""

    cfg = weights.config
    acts: dict[str, list[np.ndarray]] = {}
    for tokens in np.asarray(prompts):
        x = _embed(weights, tokens, 0)
        t = len(tokens)
        for i in range(cfg.layers):
            h = rms_norm(x, weights[f"norm.{i}.attn"])
            for p in "qkv":
                acts.setdefault(f"layers.{i}.attn.{p}", []).append(h)
            q = (h @ weights[f"layers.{i}.attn.q"]).reshape(t, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
            k = (h @ weights[f"layers.{i}.attn.k"]).reshape(t, cfg.kv_heads, cfg.head_dim).transpose(1, 0, 2)
            v = (h @ weights[f"layers.{i}.attn.v"]).reshape(t, cfg.kv_heads, cfg.head_dim).transpose(1, 0, 2)
            rep = cfg.heads // cfg.kv_heads
            a = sdpa(q, np.repeat(k, rep, 0), np.repeat(v, rep, 0), AttentionMask(0))
            a = a.transpose(1, 0, 2).reshape(t, cfg.hidden)
            acts.setdefault(f"layers.{i}.attn.o", []).append(a)
            x = x + a @ weights[f"layers.{i}.attn.o"]
            if cfg.ffn_dim:
                h = rms_norm(x, weights[f"norm.{i}.ffn"])
                acts.setdefault(f"layers.{i}.ffn.up", []).append(h)
                up = np.maximum(h @ weights[f"layers.{i}.ffn.up"], 0)
                acts.setdefault(f"layers.{i}.ffn.down", []).append(up * up)
                x = x + (up * up) @ weights[f"layers.{i}.ffn.down"]
    return CalibrationSet({k: np.concatenate(v, axis=0) for k, v in acts.items()})


def quantize_weights(weights: Weights, spec: WeightQuantSpec = WeightQuantSpec(),
                     calib: CalibrationSet | None = None) -> tuple[Weights, dict[str, float]]:
    """QDQ every projection matrix; embeddings, norms and ``lm_head`` are left alone.

    Returns the new weights and the chosen ``alpha`` per matrix (0 when scaling
    is off).
    """
    if spec.activation_aware and calib is None:
        raise ValueError("activation-aware scaling needs a calibration set")
    new, alphas = {}, {}
    for name in weights.config.linear_names():
        w = weights[name]
        if spec.activation_aware:
            scales, alpha, _ = search_scales(w, calib[name], spec.grid, bits=spec.bits, group_size=spec.group_size)
            new[name] = scaled_qdq(w, scales, spec.bits, spec.group_size)
        else:
            alpha = 0.0
            new[name] = qdq_matrix(w, spec.bits, spec.group_size)
        alphas[name] = alpha
    return weights.replace(**new), alphas


def linear_param_count(weights: Weights) -> int:
    return sum(weights[n].size for n in weights.config.linear_names())


def quantized_linear_bytes(weights: Weights, bits: int = 4) -> float:
    """Logical bytes of the quantized projection matrices (group metadata excluded)."""
    return linear_param_count(weights) * bits / 8


class AWQLinearQuantizer(TransformerMixin, BaseEstimator):
    """Activation-aware 4-bit quantizer for one ``(in, out)`` weight matrix.

    ``fit(X)`` searches the scaling exponent on calibration inputs ``X``;
    ``transform(X)`` returns the layer output ``X @ W_hat`` with the quantized
    weight.
    """

    def __init__(self, weight=None, bits=4, group_size=128, grid=DEFAULT_GRID):
        self.weight = weight
        self.bits = bits
        self.group_size = group_size
        self.grid = grid

    def fit(self, X, y=None):
        w = np.asarray(self.weight, dtype=np.float32)
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != w.shape[0]:
            raise ValueError(f"expected calibration inputs of shape (n, {w.shape[0]}), got {X.shape}")
        self.scales_, self.alpha_, self.mse_ = search_scales(w, X, self.grid, bits=self.bits,
                                                             group_size=self.group_size)
        self.weight_q_ = scaled_qdq(w, self.scales_, self.bits, self.group_size)
        return self

    def transform(self, X):
        check_is_fitted(self, "weight_q_")
        return np.asarray(X, dtype=np.float32) @ self.weight_q_
