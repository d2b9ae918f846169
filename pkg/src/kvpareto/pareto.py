"""Configuration sweep, evaluation and Pareto frontier extraction.

Memory is minimized and accuracy maximized. A point is dominated when some
other point has memory <= and accuracy >= with at least one strict. Exact
(memory, accuracy) duplicates keep only the lexicographically smallest name.
"""
from __future__ import annotations

import csv
import io
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import memmodel
from .evaltasks import FidelityReport, InductionTask, fidelity, generate_task, score_exact_match
from .kvcache import KVCacheConfig
from .model import WEIGHT_MODES, ModelConfig, RunConfig, Weights, build_induction_model, forward_prefill
from .quant import Granularity
from .weightquant import WeightQuantSpec, calibration_prompts, collect_calibration, quantize_weights

KV_PAIRS = ((16, 16), (8, 8), (8, 4), (8, 2), (4, 4), (4, 2), (2, 2))
CSV_COLUMNS = ("config", "w_bits", "k_bits", "v_bits", "granularity", "group", "smoothing", "chunk",
               "total_mem_bytes", "model_bytes", "kv_bytes", "peak_bytes", "accuracy", "top1_agreement",
               "rel_logit_err", "on_frontier")
_WEIGHT_TAGS = {"w16": "w16a16", "w4": "w4a16", "w4awq": "w4a16awq"}

# defaults of the reference induction model used by sweeps
INDUCTION_VOCAB = 64
INDUCTION_MIX_SEED = 0
INDUCTION_KEY_OFFSET = 3.0


class EvaluationError(RuntimeError):
    def __init__(self, config: str, cause: BaseException):
        self.config = config
        super().__init__(f"evaluation of {config} failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True, order=True)
class SimConfig:
    weight_mode: str
    k_bits: int
    v_bits: int
    granularity: str
    group: int
    smoothing: bool
    chunk: int | None

    @property
    def passthrough(self) -> bool:
        return self.k_bits == 16 and self.v_bits == 16

    @property
    def w_bits(self) -> int:
        return 16 if self.weight_mode == "w16" else 4

    @property
    def name(self) -> str:
        parts = [_WEIGHT_TAGS[self.weight_mode], f"k{self.k_bits}v{self.v_bits}"]
        if not self.passthrough:
            g = Granularity(self.granularity)
            parts.append(g.short)
            if g is not Granularity.PER_TENSOR:
                parts.append(f"g{self.group}")
            if self.smoothing:
                parts.append("sm")
        parts.append("full" if self.chunk is None else f"pc{self.chunk}")
        return "_".join(parts)

    def kv_config(self, cfg: ModelConfig) -> KVCacheConfig:
        return KVCacheConfig.mixed(self.k_bits, self.v_bits, layers=cfg.layers, heads_kv=cfg.kv_heads,
                                   head_dim=cfg.head_dim, granularity=self.granularity, group_size=self.group,
                                   smoothing=self.smoothing)

    def run_config(self, cfg: ModelConfig) -> RunConfig:
        kv = self.kv_config(cfg)
        return RunConfig(self.chunk, kv.k_spec, kv.v_spec, self.weight_mode)

    def mem_query(self, context: int, **kw) -> memmodel.MemQuery:
        return memmodel.MemQuery(context=context, weight_bits=self.w_bits, k_bits=self.k_bits,
                                 v_bits=self.v_bits, chunk=self.chunk, group_size=self.group,
                                 kv_granularity=self.granularity, **kw)


IDENTITY = SimConfig("w16", 16, 16, "per-token", 32, False, None)


@dataclass(frozen=True)
class TaskSpec:
    seeds: tuple[int, ...] = tuple(range(20))
    length: int = 512
    vocab: int = INDUCTION_VOCAB


@dataclass(frozen=True)
class SweepSpec:
    kv_pairs: tuple[tuple[int, int], ...] = KV_PAIRS
    granularities: tuple[str, ...] = ("per-token",)
    groups: tuple[int, ...] = (32,)
    smoothing: tuple[bool, ...] = (False,)
    chunks: tuple[int | None, ...] = (None, 256)
    weights: tuple[str, ...] = ("w16",)
    model: str = "induction"
    task: TaskSpec = TaskSpec()
    context: int = memmodel.DEFAULT_CONTEXT
    arch: str | None = None
    act_bytes: float = 2
    count_group_overhead: bool = False
    calibration_seed: int = 0

    def __post_init__(self):
        for p in self.kv_pairs:
            if tuple(p) not in KV_PAIRS:
                raise ValueError(f"unsupported kv precision {p[0]}/{p[1]}; choose from "
                                 + ", ".join(f"{k}/{v}" for k, v in KV_PAIRS))
        for g in self.granularities:
            Granularity(g)
        for w in self.weights:
            if w not in WEIGHT_MODES:
                raise ValueError(f"unknown weight mode {w!r}")
        if any(c is not None and c < 1 for c in self.chunks):
            raise ValueError("chunk sizes must be positive")
        if any(g < 1 for g in self.groups):
            raise ValueError("group sizes must be positive")
        if not all((self.kv_pairs, self.granularities, self.groups, self.smoothing, self.chunks, self.weights)):
            raise ValueError("every sweep axis needs at least one value")


@dataclass
class Enumeration:
    configs: list[SimConfig]
    skipped: list[tuple[SimConfig, str]] = field(default_factory=list)


def enumerate_configs(spec: SweepSpec, head_dim: int) -> Enumeration:
    """Cross-product in axis order (weights, kv, granularity, group, smoothing, chunk).

    Skips per-token groups wider than ``head_dim`` and combinations that
    collapse onto an earlier config (pass-through KV ignores layout; per-tensor
    ignores group size).
    """
    out = Enumeration([])
    seen: dict[str, SimConfig] = {}
    for w, (k, v), g, grp, sm, c in itertools.product(spec.weights, spec.kv_pairs, spec.granularities,
                                                      spec.groups, spec.smoothing, spec.chunks):
        cfg = SimConfig(w, k, v, g, grp, sm, c)
        if not cfg.passthrough and Granularity(g) is Granularity.PER_TOKEN_GROUP and grp > head_dim:
            out.skipped.append((cfg, f"per-token group {grp} > head_dim {head_dim}"))
            continue
        if cfg.name in seen:
            out.skipped.append((cfg, f"same configuration as {seen[cfg.name].name}"))
            continue
        seen[cfg.name] = cfg
        out.configs.append(cfg)
    return out


# -- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class EvalPoint:
    config: SimConfig
    memory: memmodel.MemoryProfile
    accuracy: float
    fidelity: FidelityReport
    sim_kv_bytes: float

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def total_memory_bytes(self) -> float:
        return self.memory.total_bytes


@dataclass
class EvalContext:
    """Everything ``evaluate`` needs, prepared once per sweep."""

    spec: SweepSpec
    weights: dict[str, Weights]
    tasks: list[InductionTask]
    arch: memmodel.ArchSpec
    baseline_final: np.ndarray
    baseline_accuracy: float

    @property
    def model_config(self) -> ModelConfig:
        return self.weights["w16"].config


def reference_induction_model(vocab: int = INDUCTION_VOCAB) -> tuple[ModelConfig, Weights]:
    return build_induction_model(vocab, mix_seed=INDUCTION_MIX_SEED, key_offset=INDUCTION_KEY_OFFSET)


def load_model(source: str, vocab: int = INDUCTION_VOCAB) -> Weights:
    if source == "induction":
        return reference_induction_model(vocab)[1]
    from .model import load_weights
    return load_weights(source)


def _run(weights: Weights, run: RunConfig, task: InductionTask):
    cache = run.new_cache(weights.config)
    logits = forward_prefill(weights, run, task.tokens, cache, return_all=True)
    return logits, cache


def prepare(spec: SweepSpec, weight_modes=None, base: Weights | None = None) -> EvalContext:
    base = base if base is not None else load_model(spec.model, spec.task.vocab)
    cfg = base.config
    if spec.task.vocab > cfg.vocab_size:
        raise ValueError(f"task vocab {spec.task.vocab} exceeds model vocab {cfg.vocab_size}")
    variants = {"w16": base}
    modes = set(weight_modes if weight_modes is not None else spec.weights)
    if "w4" in modes:
        variants["w4"] = quantize_weights(base, WeightQuantSpec())[0]
    if "w4awq" in modes:
        calib = collect_calibration(base, calibration_prompts(cfg.vocab_size, seed=spec.calibration_seed))
        variants["w4awq"] = quantize_weights(base, WeightQuantSpec(activation_aware=True), calib)[0]
    tasks = [generate_task(s, spec.task.length, spec.task.vocab) for s in spec.task.seeds]
    arch = memmodel.resolve_arch(spec.arch) if spec.arch else memmodel.arch_from_model(cfg)
    finals, accs = [], []
    for t in tasks:
        logits, _ = _run(base, IDENTITY.run_config(cfg), t)
        finals.append(logits[-1])
        accs.append(score_exact_match(logits, t))
    return EvalContext(spec, variants, tasks, arch, np.stack(finals), float(np.mean(accs)))


def evaluate(config: SimConfig, ctx: EvalContext) -> EvalPoint:
    try:
        weights = ctx.weights[config.weight_mode]
        run = config.run_config(weights.config)
        finals, accs, kv_measured = [], [], None
        for t in ctx.tasks:
            logits, cache = _run(weights, run, t)
            finals.append(logits[-1])
            accs.append(score_exact_match(logits, t))
            if kv_measured is None:
                kv_measured = cache.stored_bytes(ctx.spec.count_group_overhead)
        fid = fidelity(ctx.baseline_final, np.stack(finals))
        q = config.mem_query(ctx.spec.context, act_bytes=ctx.spec.act_bytes,
                             count_group_overhead=ctx.spec.count_group_overhead)
        mem = memmodel.total_memory(q, ctx.arch)
    except Exception as e:  # surfaced with the config attached
        raise EvaluationError(config.name, e) from e
    return EvalPoint(config, mem, float(np.mean(accs)), fid, float(kv_measured))


_WORKER_CTX: EvalContext | None = None


def _init_worker(ctx: EvalContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _eval_in_worker(config: SimConfig) -> EvalPoint:
    return evaluate(config, _WORKER_CTX)


def evaluate_all(configs: list[SimConfig], ctx: EvalContext, jobs: int = 1) -> list[EvalPoint]:
    """Evaluate in parallel; results come back in ``configs`` order."""
    if jobs <= 1 or len(configs) <= 1:
        return [evaluate(c, ctx) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ctx,)) as pool:
        return list(pool.map(_eval_in_worker, configs))


# -- frontier ---------------------------------------------------------------

def frontier_indices(memory, accuracy, names=None) -> list[int]:
    """Indices of non-dominated points, ordered by memory ascending."""
    mem = np.asarray(memory, dtype=np.float64)
    acc = np.asarray(accuracy, dtype=np.float64)
    if mem.shape != acc.shape or mem.ndim != 1:
        raise ValueError("memory and accuracy must be 1-d and equally long")
    names = [str(i) for i in range(len(mem))] if names is None else list(names)
    order = sorted(range(len(mem)), key=lambda i: (mem[i], -acc[i], names[i]))
    keep, best = [], -np.inf
    for i in order:
        if acc[i] > best:
            keep.append(i)
            best = acc[i]
    return keep


def frontier_bruteforce(memory, accuracy, names=None) -> list[int]:
    """Quadratic dominance check; reference for ``frontier_indices``."""
    n = len(memory)
    names = [str(i) for i in range(n)] if names is None else list(names)
    kept = []
    for p in range(n):
        dominated = False
        for q in range(n):
            le = memory[q] <= memory[p] and accuracy[q] >= accuracy[p]
            if le and (memory[q] < memory[p] or accuracy[q] > accuracy[p]):
                dominated = True
                break
            if le and q != p and names[q] < names[p]:  # exact duplicate, smaller name wins
                dominated = True
                break
        if not dominated:
            kept.append(p)
    return sorted(kept, key=lambda i: memory[i])


def frontier(points: list[EvalPoint]) -> list[EvalPoint]:
    idx = frontier_indices([p.total_memory_bytes for p in points], [p.accuracy for p in points],
                           [p.name for p in points])
    return [points[i] for i in idx]


class ParetoFront(BaseEstimator):
    """Estimator view of the frontier over ``X = [[memory, accuracy], ...]``.

    ``fit`` stores the frontier; ``predict`` flags points that no fitted frontier
    point dominates.
    """

    def fit(self, X, y=None, names=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n, 2): memory, accuracy")
        self.frontier_indices_ = np.asarray(frontier_indices(X[:, 0], X[:, 1], names), dtype=np.int64)
        self.frontier_ = X[self.frontier_indices_] if len(X) else X
        return self

    def predict(self, X):
        check_is_fitted(self, "frontier_")
        X = np.asarray(X, dtype=np.float64)
        out = np.ones(len(X), dtype=bool)
        for m, a in self.frontier_:
            out &= ~((m <= X[:, 0]) & (a >= X[:, 1]) & ((m < X[:, 0]) | (a > X[:, 1])))
        return out


# -- CSV ----------------------------------------------------------------------

def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def point_row(p: EvalPoint, on_frontier: bool) -> list[str]:
    c = p.config
    return [p.name, str(c.w_bits), str(c.k_bits), str(c.v_bits),
            "none" if c.passthrough else c.granularity, "0" if c.passthrough else str(c.group),
            "on" if c.smoothing and not c.passthrough else "off", "full" if c.chunk is None else str(c.chunk),
            _num(p.memory.total_bytes), _num(p.memory.model_bytes), _num(p.memory.kv_bytes),
            _num(p.memory.peak_activation_bytes), repr(p.accuracy), repr(p.fidelity.top1_agreement),
            repr(p.fidelity.rel_logit_err), "1" if on_frontier else "0"]


def results_csv(points: list[EvalPoint]) -> str:
    front = {p.name for p in frontier(points)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in points:
        w.writerow(point_row(p, p.name in front))
    return buf.getvalue()


def read_results(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [c for c in ("config", "total_mem_bytes", "accuracy") if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)
