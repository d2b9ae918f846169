"""``kvpareto`` command line: sweep, frontier, memory and eval subcommands.

Exit codes: 0 success, 2 bad input (flags, sweep/arch files, weight files),
3 a configuration failed to evaluate.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
from pathlib import Path

from . import memmodel, pareto
from .container import ContainerError
from .model import WEIGHT_MODES, WeightError
from .plot import frontier_svg
from .quant import Granularity
from .structured import ConfigError, load_mapping, value_location

EXIT_INPUT = 2
EXIT_EVAL = 3
JOBS_ENV = "KVPARETO_JOBS"

SWEEP_KEYS = ("kv", "granularity", "group", "smoothing", "chunk", "weights", "model", "task", "memory",
              "out", "jobs", "seed", "svg")
TASK_KEYS = ("seeds", "length", "vocab")
MEMORY_KEYS = ("context", "arch", "act_bytes", "count_group_overhead")


class InputError(ValueError):
    pass


# -- value parsing -------------------------------------------------------------

def parse_context(text) -> int:
    """Token count; ``k`` suffix means x1024 (``10k`` -> 10240)."""
    s = str(text).strip().lower()
    m = re.fullmatch(r"(\d+)(k?)", s)
    if not m:
        raise InputError(f"bad context length {text!r}")
    return int(m.group(1)) * (1024 if m.group(2) else 1)


def parse_kv(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)) and len(text) == 2:
        k, v = text
    else:
        m = re.fullmatch(r"\s*k?(\d+)\s*[,/v]\s*(\d+)\s*", str(text))
        if not m:
            raise InputError(f"bad kv precision {text!r}; use K,V such as 8,4")
        k, v = m.groups()
    try:
        pair = (int(k), int(v))
    except (TypeError, ValueError):
        raise InputError(f"bad kv precision {text!r}") from None
    if pair not in pareto.KV_PAIRS:
        raise InputError(f"unsupported kv precision {pair[0]},{pair[1]}; choose from "
                         + ", ".join(f"{a},{b}" for a, b in pareto.KV_PAIRS))
    return pair


def parse_chunk(text) -> int | None:
    if text is None or str(text).strip().lower() == "full":
        return None
    try:
        c = int(text)
    except (TypeError, ValueError):
        raise InputError(f"bad chunk {text!r}; use a positive integer or 'full'") from None
    if c < 1:
        raise InputError("chunk must be positive")
    return c


def parse_switch(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise InputError(f"bad on/off value {text!r}")


def parse_granularity(text) -> str:
    try:
        return Granularity(str(text)).value
    except ValueError:
        raise InputError(f"bad granularity {text!r}; choose from "
                         + ", ".join(g.value for g in Granularity)) from None


def parse_weights(text) -> str:
    if text not in WEIGHT_MODES:
        raise InputError(f"bad weight mode {text!r}; choose from {', '.join(WEIGHT_MODES)}")
    return text


def parse_positive(text, what: str) -> int:
    try:
        n = int(text)
    except (TypeError, ValueError):
        raise InputError(f"bad {what} {text!r}") from None
    if isinstance(text, bool) or n < 1:
        raise InputError(f"{what} must be a positive integer")
    return n


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


# -- sweep files ---------------------------------------------------------------------

def _sweep_value(path: str, text: str, keys: tuple[str, ...], fn):
    try:
        return fn()
    except (InputError, ValueError, TypeError) as e:
        raise ConfigError(str(e), path, *value_location(text, *keys)) from None


def load_sweep(path: str | os.PathLike, seed: int | None = None) -> tuple[pareto.SweepSpec, dict]:
    """Parse a sweep file. Returns the spec and the file-level options (out, jobs, svg)."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read sweep file ({e.strerror})", path) from None
    d = load_mapping(path, SWEEP_KEYS, text=text, nested={"task": TASK_KEYS, "memory": MEMORY_KEYS})
    task = d.get("task") or {}
    mem = d.get("memory") or {}
    base_seed = seed if seed is not None else _sweep_value(path, text, ("seed",), lambda: int(d.get("seed", 0)))
    kw = {}
    if "kv" in d:
        kw["kv_pairs"] = _sweep_value(path, text, ("kv",), lambda: tuple(parse_kv(x) for x in _as_list(d["kv"])))
    if "granularity" in d:
        kw["granularities"] = _sweep_value(path, text, ("granularity",),
                                           lambda: tuple(parse_granularity(x) for x in _as_list(d["granularity"])))
    if "group" in d:
        kw["groups"] = _sweep_value(path, text, ("group",),
                                    lambda: tuple(parse_positive(x, "group") for x in _as_list(d["group"])))
    if "smoothing" in d:
        kw["smoothing"] = _sweep_value(path, text, ("smoothing",),
                                       lambda: tuple(parse_switch(x) for x in _as_list(d["smoothing"])))
    if "chunk" in d:
        kw["chunks"] = _sweep_value(path, text, ("chunk",), lambda: tuple(parse_chunk(x) for x in _as_list(d["chunk"])))
    if "weights" in d:
        kw["weights"] = _sweep_value(path, text, ("weights",),
                                     lambda: tuple(parse_weights(x) for x in _as_list(d["weights"])))
    if "model" in d:
        kw["model"] = _sweep_value(path, text, ("model",), lambda: str(d["model"]))

    def task_spec():
        seeds = task.get("seeds", 20)
        if isinstance(seeds, list):
            seeds = tuple(int(s) for s in seeds)
        else:
            seeds = tuple(range(base_seed, base_seed + parse_positive(seeds, "seed count")))
        return pareto.TaskSpec(seeds, parse_positive(task.get("length", 512), "task length"),
                               parse_positive(task.get("vocab", pareto.INDUCTION_VOCAB), "vocab"))
    kw["task"] = _sweep_value(path, text, ("task",), task_spec)
    if "context" in mem:
        kw["context"] = _sweep_value(path, text, ("memory", "context"), lambda: parse_context(mem["context"]))
    if "arch" in mem:
        kw["arch"] = _sweep_value(path, text, ("memory", "arch"), lambda: _resolve_arch_name(mem["arch"], path))
    if "act_bytes" in mem:
        kw["act_bytes"] = _sweep_value(path, text, ("memory", "act_bytes"), lambda: float(mem["act_bytes"]))
    if "count_group_overhead" in mem:
        kw["count_group_overhead"] = _sweep_value(path, text, ("memory", "count_group_overhead"),
                                                  lambda: parse_switch(mem["count_group_overhead"]))
    kw["calibration_seed"] = base_seed
    spec = _sweep_value(path, text, (), lambda: pareto.SweepSpec(**kw))
    opts = {}
    if "out" in d:
        opts["out"] = str(d["out"])
    if "jobs" in d:
        opts["jobs"] = _sweep_value(path, text, ("jobs",), lambda: parse_positive(d["jobs"], "jobs"))
    if "svg" in d:
        opts["svg"] = str(d["svg"])
    return spec, opts


def _resolve_arch_name(value, sweep_path: str) -> str:
    """Arch paths in sweep files are relative to the file; bundled names pass through."""
    s = str(value)
    rel = Path(sweep_path).parent / s
    if rel.exists():
        memmodel.load_arch(rel)
        return str(rel)
    memmodel.resolve_arch(s)
    return s


def resolve_jobs(flag: int | None, file_value: int | None = None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(JOBS_ENV)
    if env:
        return parse_positive(env, JOBS_ENV)
    return file_value or 1


# -- commands ----------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _svg_from_rows(rows: list[dict], on_frontier: list[bool], log_x: bool) -> str:
    ident = pareto.IDENTITY.name
    base = next((float(r["accuracy"]) for r in rows if r["config"] == ident), None)
    return frontier_svg([r["config"] for r in rows], [float(r["total_mem_bytes"]) for r in rows],
                        [float(r["accuracy"]) for r in rows], on_frontier, baseline_accuracy=base, log_x=log_x)


def _load_model(source: str, vocab: int):
    try:
        return pareto.load_model(source, vocab)
    except (OSError, ContainerError, WeightError) as e:
        raise InputError(f"cannot load model {source!r}: {e}") from None


def cmd_sweep(args) -> int:
    spec, opts = load_sweep(args.sweep, args.seed)
    out = Path(args.out or opts.get("out") or "kvpareto_out")
    jobs = resolve_jobs(args.jobs, opts.get("jobs"))
    base = _load_model(spec.model, spec.task.vocab)
    enum = pareto.enumerate_configs(spec, base.config.head_dim)
    if not enum.configs:
        raise InputError("the sweep has no valid configurations")
    ctx = pareto.prepare(spec, base=base)
    points = pareto.evaluate_all(enum.configs, ctx, jobs)
    csv_text = pareto.results_csv(points)
    _write(out / "results.csv", csv_text)
    front = pareto.frontier(points)
    summary = {
        "configs": len(points),
        "baseline_accuracy": ctx.baseline_accuracy,
        "reporting_context": spec.context,
        "arch": ctx.arch.name,
        "frontier": [p.name for p in front],
        "skipped": [{"config": c.name, "reason": r} for c, r in enum.skipped],
        "points": [{"config": p.name, "accuracy": p.accuracy, "fidelity": p.fidelity.as_dict(),
                    "memory": p.memory.as_dict(), "breakdown": p.memory.breakdown(),
                    "simulated_kv_bytes": p.sim_kv_bytes} for p in points],
    }
    _write(out / "summary.json", _json(summary))
    svg = args.svg or opts.get("svg")
    if svg:
        names = {p.name for p in front}
        rows = [dict(zip(pareto.CSV_COLUMNS, pareto.point_row(p, p.name in names))) for p in points]
        _write(Path(svg), _svg_from_rows(rows, [p.name in names for p in points], args.log_x))
    print(f"{len(points)} configs evaluated ({len(enum.skipped)} skipped), {len(front)} on the frontier")
    print(f"wrote {out / 'results.csv'} and {out / 'summary.json'}")
    return 0


def cmd_frontier(args) -> int:
    try:
        rows = pareto.read_results(args.results)
    except OSError as e:
        raise InputError(f"cannot read {args.results}: {e.strerror}") from None
    try:
        mem = [float(r["total_mem_bytes"]) for r in rows]
        acc = [float(r["accuracy"]) for r in rows]
    except (TypeError, ValueError) as e:
        raise InputError(f"{args.results}: non-numeric memory or accuracy value ({e})") from None
    idx = pareto.frontier_indices(mem, acc, [r["config"] for r in rows])
    if not rows:
        print(f"warning: {args.results} has no data rows; frontier is empty", file=sys.stderr)
    keep = set(idx)
    fields = list(pareto.CSV_COLUMNS)
    out = Path(args.out or ".") / "frontier.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for i in idx:
        row = dict(rows[i], on_frontier="1")
        w.writerow([row.get(c, "") for c in fields])
    _write(out, buf.getvalue())
    if args.svg:
        _write(Path(args.svg), _svg_from_rows(rows, [i in keep for i in range(len(rows))], args.log_x))
    for i in idx:
        print(f"{rows[i]['config']}\t{rows[i]['total_mem_bytes']}\t{rows[i]['accuracy']}")
    return 0


def _memory_query(args, context: int) -> memmodel.MemQuery:
    k, v = args.kv
    return memmodel.MemQuery(context=context, weight_bits=16 if args.weights == "w16" else 4, k_bits=k, v_bits=v,
                             chunk=args.chunk, attention=args.attention, b_q=args.block_q, b_kv=args.block_kv,
                             delta=args.delta, count_group_overhead=args.overhead, group_size=args.group,
                             kv_granularity=args.granularity,
                             act_bytes=args.act_bytes)


def cmd_memory(args) -> int:
    arch = memmodel.resolve_arch(args.arch)
    q = _memory_query(args, args.context)
    prof = memmodel.total_memory(q, arch)
    base = memmodel.total_memory(memmodel.baseline_query(args.context, act_bytes=args.act_bytes), arch)
    red = memmodel.memory_reduction(base, prof)
    k, v = args.kv
    desc = (f"{args.weights} k{k}v{v} {args.attention}"
            + ("" if args.chunk is None else f"+pc{args.chunk}"))
    result = {"arch": arch.name, "context": args.context, "config": desc, "profile": prof.as_dict(),
              "breakdown": prof.breakdown(), "baseline_total_bytes": base.total_bytes, "reduction_percent": red}
    if args.out:
        _write(Path(args.out) / "memory.json", _json(result))
    if args.json:
        sys.stdout.write(_json(result))
        return 0
    g = memmodel.GB
    print(f"arch {arch.name}, context {args.context} tokens, {desc}")
    for key, val in prof.breakdown().items():
        print(f"  {key:<16}{val}")
    print(f"  {'(mha peak)':<16}{prof.mha_peak_bytes / g:.3f} GB")
    print(f"  {'(lm_head peak)':<16}{prof.lm_head_peak_bytes / g:.3f} GB")
    print(f"bf16 SDPA baseline {base.total_bytes / g:.3f} GB, reduction {red:.1f}%")
    return 0


def cmd_eval(args) -> int:
    k, v = args.kv
    config = pareto.SimConfig(args.weights, k, v, args.granularity, args.group, args.smooth, args.chunk)
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    spec = pareto.SweepSpec(kv_pairs=((k, v),), granularities=(args.granularity,), groups=(args.group,),
                            smoothing=(args.smooth,), chunks=(args.chunk,), weights=(args.weights,),
                            model=args.model, task=pareto.TaskSpec(seeds, args.length, args.vocab),
                            context=args.context, arch=args.arch, calibration_seed=args.seed)
    base = _load_model(spec.model, spec.task.vocab)
    ctx = pareto.prepare(spec, base=base)
    p = pareto.evaluate(config, ctx)
    result = {"config": p.name, "accuracy": p.accuracy, "baseline_accuracy": ctx.baseline_accuracy,
              "fidelity": p.fidelity.as_dict(), "memory": p.memory.as_dict(), "simulated_kv_bytes": p.sim_kv_bytes}
    if args.out:
        _write(Path(args.out) / "eval.json", _json(result))
    sys.stdout.write(_json(result))
    return 0


# -- argument parser -------------------------------------------------------------

def _typed(fn):
    def conv(text):
        try:
            return fn(text)
        except InputError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    conv.__name__ = fn.__name__
    return conv


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kv", type=_typed(parse_kv), default=(16, 16), metavar="K,V", help="key,value bits")
    p.add_argument("--granularity", type=_typed(parse_granularity), default="per-token",
                   choices=[g.value for g in Granularity])
    p.add_argument("--group", type=int, default=32, choices=(32, 64, 128))
    p.add_argument("--smooth", type=_typed(parse_switch), default=False, metavar="{on,off}")
    p.add_argument("--chunk", type=_typed(parse_chunk), default=None, metavar="{N,full}")
    p.add_argument("--weights", default="w16", choices=WEIGHT_MODES)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvpareto", description="KV quantization / chunked prefill memory-accuracy sweeps")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="evaluate every config of a sweep file")
    s.add_argument("--sweep", required=True, metavar="FILE")
    s.add_argument("--out", metavar="DIR")
    s.add_argument("--jobs", type=_typed(lambda t: parse_positive(t, "jobs")), metavar="N")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--svg", metavar="PATH")
    s.add_argument("--log-x", action="store_true", help="log-scale memory axis in the SVG")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("frontier", help="recompute the frontier from a results CSV")
    f.add_argument("results", metavar="RESULTS_CSV")
    f.add_argument("--out", metavar="DIR")
    f.add_argument("--svg", metavar="PATH")
    f.add_argument("--log-x", action="store_true")
    f.set_defaults(func=cmd_frontier)

    m = sub.add_parser("memory", help="analytic memory profile of one configuration")
    m.add_argument("--arch", required=True, metavar="FILE", help="arch file or bundled arch name")
    m.add_argument("--context", type=_typed(parse_context), default=memmodel.DEFAULT_CONTEXT, metavar="N")
    m.add_argument("--kv", type=_typed(parse_kv), default=(16, 16), metavar="K,V")
    m.add_argument("--chunk", type=_typed(parse_chunk), default=None, metavar="{N,full}")
    m.add_argument("--weights", default="w16", choices=WEIGHT_MODES)
    m.add_argument("--group", type=int, default=32, choices=(32, 64, 128))
    m.add_argument("--granularity", type=_typed(parse_granularity), default="per-token",
                   choices=[g.value for g in Granularity], help="KV group layout, used with --overhead")
    m.add_argument("--attention", default="sdpa", choices=memmodel.ATTENTION_KINDS)
    m.add_argument("--block-q", type=int, default=128)
    m.add_argument("--block-kv", type=int, default=128)
    m.add_argument("--delta", type=int, default=0, help="extra flash workspace elements")
    m.add_argument("--act-bytes", type=float, default=2)
    m.add_argument("--overhead", action="store_true", help="count scale/zero-point storage")
    m.add_argument("--json", action="store_true", help="print JSON only")
    m.add_argument("--out", metavar="DIR")
    m.set_defaults(func=cmd_memory)

    e = sub.add_parser("eval", help="evaluate a single configuration")
    e.add_argument("--model", default="induction", help="'induction' or a weight file")
    _add_config_flags(e)
    e.add_argument("--seeds", type=int, default=20, help="number of task seeds")
    e.add_argument("--length", type=int, default=512)
    e.add_argument("--vocab", type=int, default=pareto.INDUCTION_VOCAB)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--context", type=_typed(parse_context), default=memmodel.DEFAULT_CONTEXT)
    e.add_argument("--arch", default=None)
    e.add_argument("--out", metavar="DIR")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pareto.EvaluationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EVAL
    except ValueError as e:  # ConfigError, InputError, WeightError, ContainerError, bad task geometry
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
