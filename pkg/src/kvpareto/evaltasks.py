"""Synthetic induction retrieval tasks and logit fidelity metrics."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

DECILES = 10


class InfeasibleTask(ValueError):
    pass


@dataclass(frozen=True)
class InductionTask:
    """A token sequence where each query token occurred exactly once before.

    The correct continuation at ``queries[i]`` is ``answers[i]``: the token that
    followed the earlier occurrence (``plants[i]``) of the same token.
    """

    seed: int
    length: int
    vocab: int
    tokens: np.ndarray
    queries: np.ndarray
    plants: np.ndarray
    answers: np.ndarray

    @property
    def num_queries(self) -> int:
        return len(self.queries)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "length": self.length, "vocab": self.vocab,
                "tokens": self.tokens.tolist(), "queries": self.queries.tolist(),
                "plants": self.plants.tolist(), "answers": self.answers.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InductionTask":
        arr = lambda k: np.asarray(d[k], dtype=np.int64)  # noqa: E731
        return cls(int(d["seed"]), int(d["length"]), int(d["vocab"]),
                   arr("tokens"), arr("queries"), arr("plants"), arr("answers"))


def num_queries(m: int) -> int:
    return max(1, math.ceil(m / 16))


def _decile_bounds(m: int, d: int) -> tuple[int, int]:
    """Positions ``p`` with ``p * DECILES // m == d``."""
    return -(-d * m // DECILES), -(-(d + 1) * m // DECILES)


def generate_task(seed: int, m: int, v: int) -> InductionTask:
    """Plant ``ceil(m/16)`` retrieval queries spread across depth deciles.

    Query tokens are drawn without replacement from the vocabulary and each
    appears exactly twice (plant, query). All other positions hold filler
    tokens from the rest of the vocabulary. The last position is always a
    query, so the final-position prediction is a retrieval.
    """
    if v < 8 or m < 16:
        raise InfeasibleTask(f"need vocab >= 8 and length >= 16 (got vocab={v}, length={m})")
    n = num_queries(m)
    if n > v - 1:
        raise InfeasibleTask(f"{n} unique query tokens plus filler need vocab > {n}; got {v}")
    rng = np.random.default_rng(seed)

    # query counts per decile, round-robin from the last decile backwards
    per = np.zeros(DECILES, np.int64)
    order = np.linspace(DECILES - 1, 0, DECILES).astype(int)
    for i in range(n):
        per[order[i % DECILES]] += 1
    queries = {m - 1}
    per[DECILES - 1] -= 1
    for d in range(DECILES):
        lo, hi = _decile_bounds(m, d)
        free = [p for p in range(max(lo, 2), hi) if p not in queries]
        if per[d] > len(free):
            raise InfeasibleTask(f"length {m} too short for {n} queries")
        queries.update(int(p) for p in rng.choice(free, size=per[d], replace=False))
    queries = np.array(sorted(queries), np.int64)

    taken = set(queries.tolist())
    plants = np.empty(n, np.int64)
    for idx in rng.permutation(n):
        i = int(queries[idx])
        free = [j for j in range(i - 1) if j not in taken]
        if not free and i - 1 not in taken:
            free = [i - 1]
        if not free:
            raise InfeasibleTask(f"no free plant slot before query at {i}")
        plants[idx] = free[rng.integers(len(free))]
        taken.add(int(plants[idx]))

    perm = rng.permutation(v)
    keys, filler = perm[:n], np.sort(perm[n:])
    tokens = filler[rng.integers(len(filler), size=m)]
    tokens[queries] = keys
    tokens[plants] = keys
    answers = tokens[plants + 1]
    return InductionTask(seed, m, v, tokens, queries, plants, answers)


def scan_answers(tokens: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Independent oracle: for each query, find the single earlier occurrence by scanning."""
    out = []
    for i in queries:
        hits = [j for j in range(i) if tokens[j] == tokens[i]]
        if len(hits) != 1:
            raise AssertionError(f"query at {i} has {len(hits)} earlier occurrences")
        out.append(tokens[hits[0] + 1])
    return np.array(out, np.int64)


def _predictions(pred, task: InductionTask) -> np.ndarray:
    p = np.asarray(pred)
    if p.ndim == 2:
        p = np.argmax(p, axis=-1)
    if p.ndim != 1:
        raise ValueError("expected logits (positions, vocab) or token ids (positions,)")
    if len(p) == task.length:
        return p[task.queries]
    if len(p) == task.num_queries:
        return p
    raise ValueError(f"got {len(p)} predictions; expected {task.length} positions or {task.num_queries} queries")


def score_exact_match(pred, task: InductionTask) -> float:
    """Fraction of queries whose argmax prediction equals the planted answer.

    ``pred`` holds logits or token ids for every position, or one entry per query.
    """
    return float(np.mean(_predictions(pred, task) == task.answers))


@dataclass(frozen=True)
class FidelityReport:
    top1_agreement: float
    rel_logit_err: float
    cosine: float

    def as_dict(self) -> dict[str, float]:
        return {"top1_agreement": self.top1_agreement, "rel_logit_err": self.rel_logit_err, "cosine": self.cosine}


def fidelity(baseline, candidate) -> FidelityReport:
    """Compare final-position logits, one row per prompt.

    Relative error is ``||c - b|| / ||b||`` per row, averaged. Rows with zero
    baseline norm count as error 0 when the candidate matches and 1 otherwise.
    """
    b = np.atleast_2d(np.asarray(baseline, dtype=np.float64))
    c = np.atleast_2d(np.asarray(candidate, dtype=np.float64))
    if b.shape != c.shape:
        raise ValueError(f"shape mismatch {b.shape} vs {c.shape}")
    agree = float(np.mean(np.argmax(b, -1) == np.argmax(c, -1)))
    nb, nc = np.linalg.norm(b, axis=-1), np.linalg.norm(c, axis=-1)
    diff = np.linalg.norm(c - b, axis=-1)
    rel = np.where(nb > 0, diff / np.where(nb > 0, nb, 1), (diff > 0).astype(np.float64))
    denom = nb * nc
    same = np.all(b == c, axis=-1)
    cos = np.where(same, 1.0, np.where(denom > 0, np.sum(b * c, -1) / np.where(denom > 0, denom, 1), 0.0))
    return FidelityReport(agree, float(np.mean(rel)), float(np.clip(np.mean(cos), -1.0, 1.0)))


def dump_task(task: InductionTask, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(task.to_dict(), fh, indent=1)
        fh.write("\n")


def load_task(path: str | os.PathLike) -> InductionTask:
    with open(path, encoding="utf-8") as fh:
        return InductionTask.from_dict(json.load(fh))
