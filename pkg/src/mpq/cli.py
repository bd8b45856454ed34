"""``mpq`` command line: partition, calibrate, time, plan, validate, sweep.

Stages hand off through files so that a timing table measured elsewhere can
replace the synthetic one. Exit codes: 0 ok, 1 bad input, 2 infeasible or a
size guard tripped.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Any

from .autodiff import ToyModel, model_from_dict
from .errors import GuardError, MPQError, SchemaError
from .fixtures import batch_from_dict, batch_to_dict, llama_graph, model_spec, calib_batch
from .graphir import (
    SCHEMA_VERSION,
    CompGraph,
    build_graph,
    groups_from_dict,
    groups_to_dict,
    partition_sequential,
    removed_opaque,
)
from .perfmodel import CostParams, SynthTiming, TimingTable, perf_vectors, perf_vectors_csv
from .sensitivity import (
    FormatRegistry,
    MPAssignment,
    SensitivityReport,
    calibrate,
    default_registry,
    load_registry,
    mc_loss_mse,
    predict_config_mse,
    registry_to_dict,
)
from .solver import build_instance, plan_to_dict, solve_bb, solve_brute, solve_dp, sweep_csv, sweep_tau

log = logging.getLogger("mpq")

SOLVERS = {"bb": solve_bb, "dp": solve_dp, "brute": solve_brute}


# ---------------------------------------------------------------------------
# file helpers


def _read_json(path: str | Path, what: str, external: bool = False) -> dict[str, Any]:
    """Load a JSON artifact and check its schema version.

    Files this tool writes must carry the version. ``external`` inputs (graphs,
    timing tables) may omit it; a present but different version is an error.
    """
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MPQError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    except OSError as e:
        raise MPQError(f"{path}: cannot read {what}: {e.strerror}") from e
    if not isinstance(d, dict):
        raise SchemaError(f"{path}: {what} must be a JSON object")
    if external and "schema_version" not in d:
        return d
    if d.get("schema_version") != SCHEMA_VERSION:
        got = d.get("schema_version")
        raise SchemaError(f"{path}: {what} schema_version {got!r}, expected {SCHEMA_VERSION}")
    return d


def _write_json(path: Path, d: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=2, sort_keys=False) + "\n")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_graph(path: str) -> CompGraph:
    d = _read_json(path, "graph", external=True)
    try:
        return build_graph(d)
    except MPQError as e:
        raise type(e)(f"{path}: {e}") from e


def _load_formats(path: str | None) -> FormatRegistry:
    return load_registry(path) if path else default_registry()


def _load_model(graph: CompGraph, path: str) -> ToyModel:
    return model_from_dict(graph, _read_json(path, "model"))


def _require_seed(args: argparse.Namespace) -> int:
    if args.seed is None:
        raise MPQError(f"{args.command}: --seed is required")
    return int(args.seed)


def _parse_taus(text: str) -> list[float]:
    taus = [float(t) for t in text.split(",") if t.strip()]
    for t in taus:
        if not 0 <= t < 1:
            raise MPQError(f"tau must be in [0, 1), got {t}")
    return taus


# ---------------------------------------------------------------------------
# commands


def cmd_init_toy(args: argparse.Namespace) -> int:
    seed = _require_seed(args)
    out = Path(args.out)
    graph, ops = llama_graph(args.blocks, args.d_model, args.d_ff, args.vocab)
    _write_json(out / "graph.json", graph)
    _write_json(out / "model.json", model_spec(graph, ops, seed, loss=args.loss))
    batch = calib_batch(args.samples, args.seq_len, args.d_model, args.vocab, seed + 7919, args.loss)
    _write_json(out / "calib.json", batch_to_dict(batch))
    _write_json(out / "formats.json", registry_to_dict(default_registry()))
    print(f"wrote graph.json model.json calib.json formats.json to {out}")
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    g = _load_graph(args.graph)
    groups = partition_sequential(g, args.max_group_size)
    out = Path(args.out)
    _write_json(out / "groups.json", groups_to_dict(groups, g))
    hist = Counter(len(grp) for grp in groups)
    print(f"J = {len(groups)} groups")
    print("group sizes: " + ", ".join(f"L={k}: {hist[k]}" for k in sorted(hist)))
    for grp in groups:
        print(f"  {grp.j:3d}  " + " ".join(g.name(v) for v in grp.layers))
    dropped = removed_opaque(g)
    if dropped:
        log.info("non-quantizable vertices: %d", len(dropped))
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    g = _load_graph(args.graph)
    model = _load_model(g, args.model)
    batch = batch_from_dict(_read_json(args.calib, "calibration data"))
    rep = calibrate(model, batch)
    _write_text(Path(args.out) / "sensitivity.csv", rep.to_csv())
    print(f"E[g^2] = {rep.mean_sq_loss!r} over {rep.sample_count} samples")
    for vid in sorted(rep.s):
        print(f"  {vid:4d}  {rep.names.get(vid, ''):32s} {rep.s[vid]:.6e}")
    return 0


def cmd_synth_timing(args: argparse.Namespace) -> int:
    seed = _require_seed(args)
    g = _load_graph(args.graph)
    groups = groups_from_dict(_read_json(args.groups, "groups"))
    fmts = _load_formats(args.formats)
    params = CostParams(fmts, n_tokens=args.n_tokens)
    st = SynthTiming(
        groups, g, params, seed,
        interaction_strength=args.interaction, jitter=args.jitter, repeats=args.repeats,
    )
    st.table().save(Path(args.out) / "timing.json")
    print(f"wrote timing table for {len(groups)} groups (baseline TTFT {st.baseline_ttft} ms)")
    return 0


def _instance_inputs(args: argparse.Namespace):
    g = _load_graph(args.graph)
    groups = groups_from_dict(_read_json(args.groups, "groups"))
    fmts = _load_formats(args.formats)
    rep = SensitivityReport.load(args.sens)
    metric = args.metric.upper()
    params = CostParams(fmts, n_tokens=args.n_tokens)
    table = None
    if metric == "ET":
        if not args.timing:
            raise MPQError("metric et needs --timing")
        table = TimingTable.from_dict(_read_json(args.timing, "timing table", external=True))
    vectors = perf_vectors(metric, groups, g, params, table)
    if metric == "M" and all(not v.values.any() for v in vectors):
        log.warning("metric M: every memory gain is 0 (no linear layers to quantize)")
    if args.perf_out:
        _write_text(Path(args.out) / "perf_vectors.csv", perf_vectors_csv(vectors))
    return g, groups, fmts, rep, metric, [v.values for v in vectors]


def cmd_plan(args: argparse.Namespace) -> int:
    (tau,) = _parse_taus(str(args.tau))
    g, groups, fmts, rep, metric, gains = _instance_inputs(args)
    inst = build_instance(groups, gains, rep, fmts, tau)
    sol = SOLVERS[args.solver](inst)
    plan = plan_to_dict(sol, inst, groups, fmts, metric, g)
    _write_json(Path(args.out) / "plan.json", plan)
    n_q = sum(1 for c in plan["choice"] for layer in c["layers"] if layer["format"] != fmts.baseline.name)
    print(
        f"tau={tau} budget={inst.budget!r} gain={sol.total_gain!r} "
        f"loss_mse={sol.total_cost!r} quantized_layers={n_q} solver={sol.solver} ({sol.optimality})"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    taus = _parse_taus(args.taus)
    seeds = []
    if args.random:
        seed = _require_seed(args)
        seeds = [seed + k for k in range(args.random)]
    g, groups, fmts, rep, metric, gains = _instance_inputs(args)
    points = sweep_tau(
        groups, gains, rep, fmts, taus,
        include_all_quantized=args.all_quantized, random_seeds=seeds, prefix=args.prefix, solver=args.solver,
    )
    out = Path(args.out)
    _write_text(out / "sweep.csv", sweep_csv(points))
    base = build_instance(groups, gains, rep, fmts, 0.0)
    for pt in points:
        if pt.strategy != "ip":
            continue
        inst = base.with_budget(pt.budget, pt.tau)
        sol = SOLVERS[args.solver](inst)
        _write_json(out / "plans" / f"plan_tau_{pt.tau:.6f}.json", plan_to_dict(sol, inst, groups, fmts, metric, g))
    ip = [pt for pt in points if pt.strategy == "ip"]
    for a, b in zip(ip, ip[1:]):
        if b.total_gain < a.total_gain:
            raise MPQError(f"gain decreased from tau={a.tau} to tau={b.tau}")
    for pt in points:
        print(f"{pt.strategy:14s} tau={pt.tau:.6f} gain={pt.total_gain:.6g} loss_mse={pt.total_cost:.6g} layers={pt.n_quantized}")
    return 0


def _plan_assignment(plan: dict[str, Any], fmts: FormatRegistry) -> tuple[MPAssignment, list[MPAssignment]]:
    whole: dict[int, int] = {}
    parts = []
    for c in plan["choice"]:
        part = {int(layer["id"]): fmts.index(layer["format"]) for layer in c["layers"]}
        whole.update(part)
        if any(f != fmts.baseline_index for f in part.values()):
            parts.append(MPAssignment(part))
    return MPAssignment(whole), parts


def cmd_validate(args: argparse.Namespace) -> int:
    seed = _require_seed(args)
    g = _load_graph(args.graph)
    model = _load_model(g, args.model)
    batch = batch_from_dict(_read_json(args.calib, "calibration data"))
    fmts = _load_formats(args.formats)
    plan = _read_json(args.plan, "plan")
    rep = SensitivityReport.load(args.sens) if args.sens else calibrate(model, batch)
    whole, parts = _plan_assignment(plan, fmts)

    def estimate(a: MPAssignment, k: int):
        return mc_loss_mse(model, a, batch, args.trials, seed * 1009 + k, fmts, threads=args.threads)

    rows = []
    ok = True
    part_sum = 0.0
    part_var = 0.0
    for k, a in enumerate([whole] + parts):
        pred = predict_config_mse(a, rep, fmts)
        mc = estimate(a, k)
        passed = abs(mc.mean - pred) <= 3 * mc.stderr
        ok &= passed
        label = "whole" if k == 0 else f"group_{k - 1}"
        rows.append([label, repr(pred), repr(mc.mean), repr(mc.stderr), "pass" if passed else "fail"])
        if k:
            part_sum += mc.mean
            part_var += mc.stderr**2
    whole_mc = float(rows[0][2])
    sigma = math.sqrt(part_var + float(rows[0][3]) ** 2)
    add_ok = abs(whole_mc - part_sum) <= 3 * sigma
    rows.append(["sum_of_parts", repr(part_sum), repr(whole_mc), repr(sigma), "pass" if add_ok else "fail"])
    path = Path(args.out) / "validation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["assignment", "predicted", "mc_mean", "mc_stderr", "within_3sigma"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:14s} predicted={float(r[1]):.6g} mc={float(r[2]):.6g} +- {float(r[3]):.3g}  {r[4]}")
    print("validation " + ("PASS" if ok and add_ok else "FAIL"))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpq", description="Mixed-precision format planner.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_default: str = ".") -> None:
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("init-toy", help="write a seeded toy transformer (graph, weights, data, formats)")
    common(p)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--d-ff", type=int, default=32)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--loss", choices=["cross_entropy", "mse"], default="cross_entropy")
    p.set_defaults(func=cmd_init_toy)

    p = sub.add_parser("partition", help="split the graph into sequential groups")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--max-group-size", type=int, default=12)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("calibrate", help="compute per-layer sensitivities")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth-timing", help="write a synthetic per-group timing table")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--formats")
    p.add_argument("--n-tokens", type=int, default=1)
    p.add_argument("--interaction", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_synth_timing)

    for name, func in (("plan", cmd_plan), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help="solve for one tau" if name == "plan" else "solve over a list of taus")
        common(p)
        p.add_argument("--graph", required=True)
        p.add_argument("--groups", required=True)
        p.add_argument("--sens", required=True, help="sensitivity CSV from calibrate")
        p.add_argument("--formats")
        p.add_argument("--metric", choices=["et", "tt", "m"], default="et")
        p.add_argument("--timing", help="timing table JSON (metric et)")
        p.add_argument("--n-tokens", type=int, default=1)
        p.add_argument("--solver", choices=sorted(SOLVERS), default="bb")
        p.add_argument("--perf-out", action="store_true", help="also write perf_vectors.csv")
        if name == "plan":
            p.add_argument("--tau", type=float, required=True)
        else:
            p.add_argument("--taus", required=True, help="comma-separated, ascending")
            p.add_argument("--prefix", action="store_true", help="add the prefix baseline")
            p.add_argument("--random", type=int, default=0, metavar="K", help="add K random-baseline curves")
            p.add_argument("--all-quantized", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("validate", help="check a plan's predicted loss MSE by Monte Carlo")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--sens", help="sensitivity CSV (recomputed when omitted)")
    p.add_argument("--formats")
    p.add_argument("--trials", type=int, default=10_000)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MPQ_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GuardError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (MPQError, KeyError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
