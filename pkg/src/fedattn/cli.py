"""Seeded sweep runner: ``fedattn run spec.json`` and ``fedattn bounds spec.json``.

Exit codes: 0 success, 2 invalid experiment description, 3 numerical
degeneracy (a fully masked softmax row).
"""

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import jsonschema
import numpy as np

from .analysis import (chained_bounds, corollary1_bound, gain_table, gamma_reduction,
                       theorem1_bound, theorem3_bound, uniform_H, uniform_maxima)
from .cost import comm_bits, cost_report
from .errors import ConfigError, DegenerateRowError, FedAttnError
from .model import ModelConfig, embed_tokens, init_weights
from .oracle import cenattn_trace, measure_sigma, run_cenattn
from .partition import STRATEGIES, gather, gen_corpus, make_partition
from .protocol import (SCHEDULE_KINDS, TOPOLOGIES, FedOptions, SyncSchedule, decode_greedy,
                       named_schedule, run_fedattn, uniform_schedule)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SCHEDULE_CHOICES = ("uniform", "local") + SCHEDULE_KINDS

METRICS = ("deviation", "decode_agreement", "bits_sent_mean", "bits_total",
           "predicted_bits_total", "prefill_flops_mean", "decode_flops_mean",
           "peak_scalars_mean", "sigma_profile")
SUMMARY_METRICS = ("deviation", "decode_agreement", "bits_sent_mean",
                   "prefill_flops_mean", "peak_scalars_mean")
GRID_COLUMNS = ("strategy", "N", "H", "schedule", "local_token_ratio",
                "kv_exchange_ratio", "publisher_H")
BOUND_COLUMNS = ("measured", "chained_bound", "theorem1_bound", "corollary1_bound",
                 "theorem3_bound", "Gamma_profile")

_pos_int = {"type": "integer", "minimum": 1}
_ratio = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}


def _axis(item):
    return {"type": "array", "minItems": 1, "items": item}


SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {"d": _pos_int, "d_ff": _pos_int, "M": _pos_int, "vocab": _pos_int,
                           "seed": {"type": "integer", "minimum": 0}},
        },
        "corpus": {
            "type": "object", "additionalProperties": False,
            "properties": {"shots": _pos_int, "unit_len_min": _pos_int, "unit_len_max": _pos_int},
        },
        "strategies": _axis({"enum": list(STRATEGIES)}),
        "sweep": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "H": _axis(_pos_int),
                "N": _axis(_pos_int),
                "schedule": _axis({"enum": list(SCHEDULE_CHOICES)}),
                "local_token_ratio": _axis(_ratio),
                "kv_exchange_ratio": _axis(_ratio),
                "publisher_H": _axis({"anyOf": [_pos_int, {"type": "null"}]}),
            },
        },
        "seeds": _axis({"type": "integer", "minimum": 0}),
        "max_new": {"type": "integer", "minimum": 0},
        "wire_bits": _pos_int,
        "topology": {"enum": list(TOPOLOGIES)},
        "metrics": _axis({"enum": list(METRICS)}),
        "out": {"type": "string"},
    },
}


@dataclass(frozen=True)
class ExperimentSpec:
    model: ModelConfig
    shots: int
    unit_len: tuple
    strategies: tuple
    H: tuple
    N: tuple
    schedules: tuple
    local_token_ratios: tuple
    kv_exchange_ratios: tuple
    publisher_H: tuple
    seeds: tuple
    max_new: int = 16
    wire_bits: int = 16
    topology: str = "all_to_all"
    metrics: tuple = METRICS
    out: str = "out"

    def grid(self):
        """Grid points in deterministic order; the last axis varies fastest."""
        return list(itertools.product(self.strategies, self.N, self.H, self.schedules,
                                      self.local_token_ratios, self.kv_exchange_ratios,
                                      self.publisher_H))


def _path(err):
    parts = []
    for p in err.absolute_path:
        if isinstance(p, int):
            parts[-1] = f"{parts[-1]}[{p}]" if parts else f"[{p}]"
        else:
            parts.append(str(p))
    return ".".join(parts) or "<root>"


def parse_spec(doc):
    """Validate a decoded JSON document into an :class:`ExperimentSpec`."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(SPEC_SCHEMA).iter_errors(doc))
    if err is not None:
        raise ConfigError(_path(err), err.message)
    m = doc.get("model", {})
    model = ModelConfig(m.get("d", 32), m.get("d_ff", 64), m.get("M", 8), m.get("vocab", 64),
                        m.get("seed", 0))
    c = doc.get("corpus", {})
    unit_len = (c.get("unit_len_min", 20), c.get("unit_len_max", 32))
    if unit_len[0] > unit_len[1]:
        raise ConfigError("corpus.unit_len_min", "exceeds unit_len_max")
    s = doc.get("sweep", {})
    spec = ExperimentSpec(
        model=model, shots=c.get("shots", 4), unit_len=unit_len,
        strategies=tuple(doc.get("strategies", ["TokSeg_QEx"])),
        H=tuple(s.get("H", [1, 2, 4, 8])), N=tuple(s.get("N", [4])),
        schedules=tuple(s.get("schedule", ["uniform"])),
        local_token_ratios=tuple(s.get("local_token_ratio", [1.0])),
        kv_exchange_ratios=tuple(s.get("kv_exchange_ratio", [1.0])),
        publisher_H=tuple(s.get("publisher_H", [None])),
        seeds=tuple(doc.get("seeds", range(10))),
        max_new=doc.get("max_new", 16), wire_bits=doc.get("wire_bits", 16),
        topology=doc.get("topology", "all_to_all"),
        metrics=tuple(doc.get("metrics", METRICS)), out=doc.get("out", "out"))
    for i, H in enumerate(spec.H):
        if model.M % H:
            raise ConfigError(f"sweep.H[{i}]", f"{H} does not divide M={model.M}")
    for i, H in enumerate(spec.publisher_H):
        if H is not None and model.M % H:
            raise ConfigError(f"sweep.publisher_H[{i}]", f"{H} does not divide M={model.M}")
    for i, N in enumerate(spec.N):
        if N > spec.shots + 1:
            raise ConfigError(f"sweep.N[{i}]", f"{N} participants but only {spec.shots + 1} units")
    return spec


def load_spec(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return parse_spec(doc)


def build_schedule(kind, M, H):
    if kind == "uniform":
        return uniform_schedule(M, H)
    if kind == "local":
        return SyncSchedule(M, ())
    return named_schedule(kind, M, M // H)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def run_point(spec, point, seed, with_bounds=False):
    """Execute one grid point for one seed; returns ``(metrics, bounds)`` dicts."""
    strategy, N, H, kind, r_local, r_kv, pub_H = point
    cfg = ModelConfig(spec.model.d, spec.model.d_ff, spec.model.M, spec.model.vocab,
                      spec.model.seed + seed)
    weights = init_weights(cfg)
    corpus = gen_corpus(spec.shots, spec.unit_len, cfg.vocab, seed)
    p = make_partition(corpus, N, strategy, seed)
    sched = build_schedule(kind, cfg.M, H)
    per = None if pub_H is None else {p.publisher: uniform_schedule(cfg.M, pub_H)}
    opts = FedOptions(local_token_ratio=r_local, kv_exchange_ratio=r_kv,
                      per_participant_schedules=per, wire_bits=spec.wire_bits, seed=seed,
                      topology=spec.topology)
    X = embed_tokens(corpus.tokens, np.arange(corpus.L), weights)
    trace = run_fedattn([gather(X, p, n) for n in range(p.N)], weights, p, sched, opts)
    cen = run_cenattn(X, weights)
    report = measure_sigma(weights, trace, cen)

    fed_tokens = decode_greedy(trace, weights, max_new=spec.max_new)
    cen_tokens = decode_greedy(cenattn_trace(X, weights), weights, max_new=spec.max_new)
    agree = (sum(a == b for a, b in zip(fed_tokens, cen_tokens)) / spec.max_new
             if spec.max_new else 1.0)
    costs = cost_report(p, sched, cfg, opts)
    predicted = comm_bits(p, sched, opts, cfg.d)
    metrics = {
        "deviation": float(report.state_dev[-1]),
        "decode_agreement": float(agree),
        "bits_sent_mean": costs.mean("bits_sent"),
        "bits_total": int(trace.bits_sent.sum()),
        "predicted_bits_total": int(predicted.sent.sum()),
        "prefill_flops_mean": costs.mean("prefill_flops"),
        "decode_flops_mean": costs.mean("decode_flops_per_step"),
        "peak_scalars_mean": costs.mean("peak_memory_scalars"),
        "sigma_profile": ";".join(repr(float(v)) for v in report.sigma.sum(axis=1)),
    }
    bounds = None
    if with_bounds:
        bounds = {c: None for c in BOUND_COLUMNS}
        bounds["measured"] = metrics["deviation"]
        if r_local == 1.0:
            gains = gain_table(weights, trace, cen)
            union = trace.schedule
            bounds["chained_bound"] = float(chained_bounds(gains, union)[-1])
            bounds["Gamma_profile"] = ";".join(
                repr(float(gamma_reduction(gains, m))) for m in range(1, cfg.M + 1))
            # closed forms assume every sync block is an exact dense exchange
            if not np.any(gains.injection[[m - 1 for m in union.sync_blocks]]):
                bounds["theorem3_bound"] = theorem3_bound(gains, union)
                uH = uniform_H(union)
                if uH is not None:
                    bounds["theorem1_bound"] = theorem1_bound(gains, uH, cfg.M // uH)
                    bounds["corollary1_bound"] = corollary1_bound(
                        *uniform_maxima(gains), uH, cfg.M)
    return metrics, bounds


def run_experiment(spec, threads=1, with_bounds=False):
    """Every ``(grid point, seed)`` job; returned in grid order."""
    jobs = [(pt, s) for pt in spec.grid() for s in spec.seeds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda j: run_point(spec, *j, with_bounds), jobs))
    else:
        results = [run_point(spec, *j, with_bounds) for j in jobs]
    return [(pt, s, m, b) for (pt, s), (m, b) in zip(jobs, results)]


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in r] for r in rows])


def write_results(spec, results, out):
    os.makedirs(out, exist_ok=True)
    metrics = [m for m in METRICS if m in spec.metrics]
    _write(os.path.join(out, "results.csv"), GRID_COLUMNS + ("seed",) + tuple(metrics),
           [list(pt) + [s] + [m[k] for k in metrics] for pt, s, m, _ in results])
    summary_metrics = [m for m in SUMMARY_METRICS if m in spec.metrics]
    header = list(GRID_COLUMNS) + ["n_seeds"]
    for k in summary_metrics:
        header += [f"{k}_mean", f"{k}_min", f"{k}_max"]
    rows = []
    for pt, group in itertools.groupby(results, key=lambda r: r[0]):
        group = list(group)
        row = list(pt) + [len(group)]
        for k in summary_metrics:
            vals = np.array([g[2][k] for g in group], float)
            row += [float(np.mean(vals)), float(vals.min()), float(vals.max())]
        rows.append(row)
    _write(os.path.join(out, "summary.csv"), header, rows)


def write_bounds(results, out):
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "bounds.csv"), GRID_COLUMNS + ("seed",) + BOUND_COLUMNS,
           [list(pt) + [s] + [b[c] for c in BOUND_COLUMNS] for pt, s, _, b in results])


def _parse_seeds(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError("--seeds", "expected comma-separated integers") from exc
    if not seeds or min(seeds) < 0:
        raise ConfigError("--seeds", "expected nonnegative integers")
    return seeds


def build_parser():
    ap = argparse.ArgumentParser(prog="fedattn", description="Seeded federated-attention sweeps.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the sweep and write results.csv and summary.csv"),
                       ("bounds", "also write bounds.csv with bound-vs-measurement columns")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("spec", help="experiment description (JSON)")
        sp.add_argument("--out", help="output directory (overrides the spec)")
        sp.add_argument("--seeds", help="comma-separated seeds (overrides the spec)")
        sp.add_argument("--threads", type=int, default=1, help="concurrent grid jobs")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        spec = load_spec(args.spec)
        if args.seeds:
            spec = replace(spec, seeds=_parse_seeds(args.seeds))
        out = args.out or spec.out
        results = run_experiment(spec, args.threads, with_bounds=args.command == "bounds")
        write_results(spec, results, out)
        if args.command == "bounds":
            write_bounds(results, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateRowError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FedAttnError as exc:
        # a grid point the partitioner or scheduler cannot realize
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
