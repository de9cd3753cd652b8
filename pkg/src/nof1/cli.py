"""Command-line entry point: ``nof1 <subcommand> ...``.

Every subcommand writes its files plus a ``manifest.json`` into ``--out`` and
refuses a non-empty output directory unless ``--force`` is given. Data
outputs depend only on the inputs, flags and ``--seed`` (default 0). Exit
codes: 0 success, 2 invalid input, 3 numerical failure; errors are printed to
stderr as one JSON record.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .adaptive import run_adaptive_trial
from .datamodel import attach_covariates, emit_covariates, emit_csv, ingest_csv
from .errors import NumericalError, ValidationError
from .fit_single import ModelSpec, fit_bayes, fit_gls, model_spec_to_dict
from .mcmc import McmcSettings
from .meta import PoolingSpec, SubgroupSpec, fit_hier, write_hier_report
from .power import allocation_frontier, estimate_power, frontier_csv, load_query
from .protocol import load_protocol
from .rng import child_seed, stream
from .sequences import (
    classify_sequence,
    draw_block_randomized,
    enumerate_sequences,
    format_randomization_list,
    parse_randomization_list,
    satisfies,
)
from .simulate import GenerativeParams, MissingnessSpec, simulate_series, write_sidecar


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "__float__"):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8", newline="\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise ValidationError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ValidationError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}") from None


def _read_csv(path):
    if not Path(path).is_file():
        raise ValidationError(f"no such file: {path}")
    return ingest_csv(path)


def _model_spec(args) -> ModelSpec:
    return ModelSpec(
        include_trend=args.trend,
        error_model=args.error_model,
        carryover_lag=args.carryover_lag,
        ar_chain=args.ar_chain,
        reference=args.reference or (load_protocol(args.protocol).reference_id if args.protocol else None),
        mcmc=McmcSettings(n_chains=args.chains, n_warmup=args.warmup, n_samples=args.samples, seed=args.seed),
    )


# -- subcommands ---------------------------------------------------------------


def cmd_design(args, out: Path) -> dict:
    p = load_protocol(args.protocol)
    cons = p.sequence_constraints
    if args.balanced:
        cons = replace(cons, require_balance=True)
    if args.min_crossovers is not None:
        cons = replace(cons, min_crossovers=args.min_crossovers)
    block = p.periods_per_block
    ids = p.treatment_ids
    if args.enumerate:
        seqs = enumerate_sequences(p.n_periods, ids, cons, block_size=block)
    else:
        seqs = []
        k = 0
        while len(seqs) < args.draw:
            if k > 1000 * max(args.draw, 1):
                raise ValidationError("constraints reject almost every randomised sequence")
            if cons.block_randomized:
                s = draw_block_randomized(p, child_seed(args.seed, k), args.alternating)
            else:
                rng = stream(args.seed, k)
                s = tuple(ids[i] for i in rng.integers(len(ids), size=p.n_periods))
            k += 1
            if satisfies(s, ids, cons, block):
                seqs.append(s)
    _write(out, "sequences.txt", format_randomization_list(seqs, args.seed, cons))
    lines = ["sequence,class,n_crossovers,balanced"]
    for s in seqs:
        c = classify_sequence(s, ids)
        lines.append(f"{'-'.join(getattr(s, 'assignments', s))},{c.label},{c.n_crossovers},{int(c.balanced)}")
    _write(out, "classes.csv", "\n".join(lines) + "\n")
    for s in seqs:
        print(",".join(getattr(s, "assignments", s)))
    print(f"{len(seqs)} sequences", file=sys.stderr)
    return {"protocol": args.protocol}


def cmd_simulate(args, out: Path) -> dict:
    p = load_protocol(args.protocol)
    params = GenerativeParams.from_dict(_read_json(args.params)) if args.params else GenerativeParams()
    source = "randomize"
    if args.sequences:
        seqs = parse_randomization_list(Path(args.sequences).read_text(encoding="utf-8"))
        if not seqs:
            raise ValidationError("sequence file is empty")
        source = [seqs[i % len(seqs)] for i in range(args.n_participants)]
    missing = MissingnessSpec("mcar", args.missing_p) if args.missing_p > 0 else None
    series = simulate_series(p, args.n_participants, params, source, missing, args.seed, args.ar_chain,
                             args.alternating)
    emit_csv(series, out / "data.csv")
    if any(s.covariates for s in series):
        emit_covariates(series, out / "covariates.csv")
    write_sidecar(out / "truth.json", params, args.seed, series, protocol=p.name)
    return {"protocol": args.protocol, "params": args.params, "sequences": args.sequences}


def _one_participant(series, pid):
    if pid is None:
        if len(series) != 1:
            raise ValidationError(
                f"data holds {len(series)} participants; choose one with --participant"
            )
        return series[0]
    for s in series:
        if s.participant_id == pid:
            return s
    raise ValidationError(f"participant {pid!r} not in the data")


def cmd_analyze(args, out: Path) -> dict:
    s = _one_participant(_read_csv(args.data), args.participant)
    spec = _model_spec(args)
    result = {"participant_id": s.participant_id, "model": model_spec_to_dict(spec)}
    if args.method in ("gls", "both"):
        result["gls"] = fit_gls(s, spec).to_dict()
    if args.method in ("bayes", "both"):
        post = fit_bayes(s, spec, mcid=args.mcid, direction=args.direction)
        post.to_csv(out / "posterior.csv")
        if args.draws:
            post.draws_csv(out / "draws.csv")
        result["bayes"] = post.to_dict()
    _write(out, "analysis.json", _dump_json(result))
    return {"data": args.data, "protocol": args.protocol}


def _parse_pooling(text: str) -> PoolingSpec:
    kw = {}
    for part in filter(None, (text or "").split(",")):
        if "=" not in part:
            raise ValidationError(f"pooling entries look like family=regime, got {part!r}")
        k, v = part.split("=", 1)
        if k not in PoolingSpec.__dataclass_fields__:
            raise ValidationError(f"unknown parameter family {k!r}")
        kw[k] = v
    return PoolingSpec(**kw)


def cmd_meta(args, out: Path) -> dict:
    series = _read_csv(args.data)
    if len(series) < 2:
        raise ValidationError(f"need ≥ 2 individuals for a series analysis, got {len(series)}")
    if args.covariates:
        series = attach_covariates(series, args.covariates)
    subgroup = SubgroupSpec(args.subgroup) if args.subgroup else None
    h = fit_hier(series, _model_spec(args), _parse_pooling(args.pooling), subgroup)
    write_hier_report(h, series, out)
    return {"data": args.data, "covariates": args.covariates, "protocol": args.protocol}


def cmd_power(args, out: Path) -> dict:
    q = load_query(args.query)
    if args.seed_given:
        q = replace(q, seed=args.seed)
    if args.replicates is not None:
        q = replace(q, n_replicates=args.replicates)
    res = estimate_power(q)
    res.to_csv(out / "power.csv")
    budget = args.budget if args.budget is not None else q.budget
    if budget is not None:
        frontier_csv(allocation_frontier(q, budget, args.budget_tol), out / "frontier.csv")
    return {"query": args.query}


def _parse_arms(text: str) -> dict:
    arms = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValidationError(f"arms look like id=mean, got {part!r}")
        k, v = part.split("=", 1)
        try:
            arms[k.strip()] = float(v)
        except ValueError:
            raise ValidationError(f"arm mean must be numeric, got {v!r}") from None
    return arms


def cmd_adaptive(args, out: Path) -> dict:
    arms = _parse_arms(args.arms)
    protocol = load_protocol(args.protocol) if args.protocol else None
    lines = ["replicate,fraction_best_last,cumulative_regret"]
    for r in range(args.replicates):
        tr = run_adaptive_trial(
            arms, args.epochs, args.measurements, child_seed(args.seed, r), args.sd, args.rho,
            args.prior_mean, args.prior_sd, args.round_robin, protocol,
        )
        if r == 0:
            tr.to_csv(out / "trace.csv")
        lines.append(f"{r},{tr.fraction_best(args.window)!r},{tr.records[-1].cumulative_regret!r}")
    _write(out, "replicates.csv", "\n".join(lines) + "\n")
    return {"protocol": args.protocol}


# -- parser --------------------------------------------------------------------


def _add_common(sp):
    sp.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--force", action="store_true", help="write into a non-empty output directory")


def _add_model(sp):
    sp.add_argument("--trend", action="store_true", help="include a linear time trend")
    sp.add_argument("--error-model", choices=("iid", "ar1"), default="iid")
    sp.add_argument("--ar-chain", choices=("period", "trial"), default="period")
    sp.add_argument("--carryover-lag", type=int, default=None)
    sp.add_argument("--reference", default=None, help="reference treatment id")
    sp.add_argument("--protocol", default=None,
                    help="protocol file; its reference treatment is used unless --reference is given")
    sp.add_argument("--chains", type=int, default=4)
    sp.add_argument("--warmup", type=int, default=1000)
    sp.add_argument("--samples", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nof1", description="Design, simulate and analyse N-of-1 trials.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("design", help="enumerate or draw treatment sequences for a protocol")
    sp.add_argument("--protocol", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--enumerate", action="store_true", help="list every admissible sequence")
    g.add_argument("--draw", type=int, help="draw this many randomised sequences")
    sp.add_argument("--balanced", action="store_true", help="require equal periods per treatment")
    sp.add_argument("--min-crossovers", type=int, default=None)
    sp.add_argument("--alternating", action="store_true", help="repeat the first block's order")
    _add_common(sp)
    sp.set_defaults(func=cmd_design)

    sp = sub.add_parser("simulate", help="simulate a series of trials to canonical CSV")
    sp.add_argument("--protocol", required=True)
    sp.add_argument("--params", help="JSON file of generative parameters")
    sp.add_argument("--n-participants", type=int, default=1)
    sp.add_argument("--sequences", help="randomisation list to assign instead of randomising")
    sp.add_argument("--missing-p", type=float, default=0.0, help="MCAR missingness probability")
    sp.add_argument("--ar-chain", choices=("period", "trial"), default="period")
    sp.add_argument("--alternating", action="store_true")
    _add_common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="fit one participant's trial")
    sp.add_argument("--data", required=True)
    sp.add_argument("--participant", default=None)
    sp.add_argument("--method", choices=("gls", "bayes", "both"), default="both")
    sp.add_argument("--mcid", type=float, default=0.0)
    sp.add_argument("--direction", choices=("greater", "less"), default="greater")
    sp.add_argument("--draws", action="store_true", help="also write every posterior draw")
    _add_model(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("meta", help="hierarchical analysis of a series of trials")
    sp.add_argument("--data", required=True)
    sp.add_argument("--covariates", default=None, help="CSV of participant_id plus covariate columns")
    sp.add_argument("--subgroup", default=None, help="covariate entering the treatment-effect mean")
    sp.add_argument("--pooling", default="", help="e.g. delta=random,gamma=common")
    _add_model(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_meta)

    sp = sub.add_parser("power", help="Monte Carlo power of candidate designs")
    sp.add_argument("--query", required=True, help="JSON power query")
    sp.add_argument("--replicates", type=int, default=None, help="override the query's replicate count")
    sp.add_argument("--budget", type=int, default=None, help="rank designs at this measurement budget")
    sp.add_argument("--budget-tol", type=float, default=0.05)
    _add_common(sp)
    sp.set_defaults(func=cmd_power)

    sp = sub.add_parser("adaptive", help="simulate Thompson-sampling trials")
    sp.add_argument("--arms", required=True, help="true arm means, e.g. walk=0,resistance=0.5,interval=1")
    sp.add_argument("--protocol", default=None)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--measurements", type=int, default=None, help="outcomes per epoch")
    sp.add_argument("--sd", type=float, default=1.0)
    sp.add_argument("--rho", type=float, default=0.0)
    sp.add_argument("--prior-mean", type=float, default=0.0)
    sp.add_argument("--prior-sd", type=float, default=10.0)
    sp.add_argument("--round-robin", action="store_true")
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--window", type=int, default=50, help="late-epoch window for the best-arm fraction")
    _add_common(sp)
    sp.set_defaults(func=cmd_adaptive)
    return ap


def _manifest(args, out: Path, inputs: dict, wall: float) -> dict:
    in_hashes = {}
    for k, v in sorted(inputs.items()):
        if v:
            in_hashes[k] = {"path": str(v), "sha256": _sha256(Path(v))}
    # input files enter through their content hashes, not their paths
    skip = {"func", "out", "force", *inputs}
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    config_hash = hashlib.sha256(
        json.dumps({"args": cfg, "inputs": {k: h["sha256"] for k, h in in_hashes.items()}},
                   sort_keys=True, default=str).encode()
    ).hexdigest()
    outputs = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    return {
        "subcommand": args.command,
        "inputs": in_hashes,
        "output_dir": str(out),
        "outputs": outputs,
        "seed": args.seed,
        "version": __version__,
        "wall_time": round(wall, 3),
        "config_hash": config_hash,
    }


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    t0 = time.perf_counter()
    try:
        out = _prepare_out(args.out, args.force)
        inputs = args.func(args, out)
        wall = time.perf_counter() - t0
        _write(out, "manifest.json", _dump_json(_manifest(args, out, inputs, wall)))
    except ValidationError as e:
        print(json.dumps(e.to_record(), sort_keys=True, default=str, ensure_ascii=False), file=sys.stderr)
        return 2
    except NumericalError as e:
        print(json.dumps(e.to_record(), sort_keys=True, default=str, ensure_ascii=False), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
