"""Command-line front end: ``mpsbatch <subcommand> ...``.

Exit codes: 0 success, 2 invalid configuration, 3 numeric failure, 4 I/O failure.
Every subcommand writes a JSON run report to ``--report`` (default stdout).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .mps import attenuated_chain, random_mps
from .mpsfile import MpsFileError, convert_mps, load_mps, read_header, save_mps
from .sampler import BatchPlan, sample_batch
from .tensor_core import NumericError, Precision, PrecisionPolicy, Scaling

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SCHEMES = ("serial", "data", "single-site", "double-site")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    """Validated settings of one ``sample`` run; echoed verbatim in the report."""

    mps: str
    N: int
    N1: int | None = None
    N2: int | None = None
    seed: int = 0
    compute: str = "F64"
    storage: str = "F64"
    scaling: str = "none"
    scheme: str = "serial"
    p1: int = 1
    p2: int = 1
    bandwidth_allreduce: float = math.inf
    bandwidth_reducescatter: float = math.inf
    bandwidth_broadcast: float = math.inf
    latency: float = 0.0
    output: str | None = None
    format: str = "npy"
    displace_sigma: float | None = None
    displace_cutoff: int | None = None
    trace: bool = False
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.N < 1:
            raise ConfigError("N", "must be at least 1")
        if self.N1 is not None and not 1 <= self.N1:
            raise ConfigError("N1", "must be at least 1")
        if self.N2 is not None and not 1 <= self.N2:
            raise ConfigError("N2", "must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be nonnegative")
        for name in ("compute", "storage"):
            try:
                Precision.parse(getattr(self, name))
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
        if Precision.parse(self.storage) not in (Precision.F64, Precision.F32, Precision.F16):
            raise ConfigError("storage", "must be F64, F32 or F16")
        try:
            Scaling.parse(self.scaling)
        except ValueError as exc:
            raise ConfigError("scaling", str(exc)) from None
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"must be one of {', '.join(SCHEMES)}")
        if self.p1 < 1:
            raise ConfigError("p1", "must be at least 1")
        if self.p2 < 1:
            raise ConfigError("p2", "must be at least 1")
        if self.scheme == "serial" and (self.p1 != 1 or self.p2 != 1):
            raise ConfigError("scheme", "serial runs take p1 = p2 = 1")
        if self.scheme == "data" and self.p2 != 1:
            raise ConfigError("p2", "the data-parallel scheme uses p2 = 1")
        for name in ("bandwidth_allreduce", "bandwidth_reducescatter", "bandwidth_broadcast"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.latency < 0:
            raise ConfigError("latency", "must be nonnegative")
        if self.format not in ("npy", "csv"):
            raise ConfigError("format", "must be npy or csv")
        if self.displace_sigma is not None and self.displace_sigma < 0:
            raise ConfigError("displace_sigma", "must be nonnegative")

    def policy(self) -> PrecisionPolicy:
        return PrecisionPolicy(self.compute, self.storage, self.scaling)

    def plan(self) -> BatchPlan:
        return BatchPlan.build(self.N, self.N1, self.N2)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and math.isinf(v):
                out[k] = "inf"
        return out


def _emit_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if path:
        Path(path).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_outcomes(outcomes: np.ndarray, path: str, fmt: str) -> None:
    if fmt == "npy":
        with open(path, "wb") as fh:
            np.save(fh, outcomes, allow_pickle=False)
    else:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"site{i}" for i in range(outcomes.shape[1])])
            writer.writerows(outcomes.tolist())


def cmd_gen_mps(args) -> dict:
    if args.kind == "random":
        state = random_mps(args.M, args.chi, args.d, args.seed)
    else:
        state = attenuated_chain(args.M, args.chi, args.d, args.decades, args.seed, args.mixing)
    header = save_mps(state, args.output, args.storage)
    return {
        "output": args.output,
        "M": header.M,
        "d": header.d,
        "bond_dims": list(header.bond_dims),
        "storage": Precision.parse(args.storage).value,
        "gamma_payload_bytes": header.gamma_payload_bytes,
    }


def cmd_convert(args) -> dict:
    header = convert_mps(args.input, args.output, args.storage)
    return {"input": args.input, "output": args.output, "storage": Precision.parse(args.storage).value, "gamma_payload_bytes": header.gamma_payload_bytes}


def cmd_sample(args) -> dict:
    from .parallel import (
        CommModel,
        run_data_parallel,
        run_tensor_parallel_double_site,
        run_tensor_parallel_single_site,
    )

    cfg = RunConfig(
        mps=args.mps,
        N=args.N,
        N1=args.N1,
        N2=args.N2,
        seed=args.seed,
        compute=args.compute,
        storage=args.storage,
        scaling=args.scaling,
        scheme=args.scheme,
        p1=args.p1,
        p2=args.p2,
        bandwidth_allreduce=args.bandwidth_allreduce,
        bandwidth_reducescatter=args.bandwidth_reducescatter,
        bandwidth_broadcast=args.bandwidth_broadcast,
        latency=args.latency,
        output=args.output,
        format=args.format,
        displace_sigma=args.displace_sigma,
        displace_cutoff=args.displace_cutoff,
        trace=args.trace,
    )
    cfg.validate()
    if not cfg.mps:
        raise ConfigError("mps", "an MPS file is required (--mps or MPSBATCH_MPS)")
    header = read_header(cfg.mps)
    hook = None
    if cfg.displace_sigma:
        from .gbs import displacement_hook

        hook = displacement_hook(cfg.displace_sigma, cfg.seed, cfg.displace_cutoff)
    plan, policy = cfg.plan(), cfg.policy()
    model = CommModel(cfg.bandwidth_allreduce, cfg.bandwidth_reducescatter, cfg.bandwidth_broadcast, latency=cfg.latency)
    t0 = time.perf_counter()
    comm = None
    if cfg.scheme == "serial":
        batch = sample_batch(cfg.mps, plan, policy, cfg.seed, site_hook=hook, trace=cfg.trace)
    else:
        runner = {
            "data": lambda: run_data_parallel(cfg.mps, plan, cfg.p1, policy, cfg.seed, model=model, site_hook=hook),
            "single-site": lambda: run_tensor_parallel_single_site(
                cfg.mps, plan, cfg.p1, cfg.p2, policy, cfg.seed, model=model, site_hook=hook
            ),
            "double-site": lambda: run_tensor_parallel_double_site(
                cfg.mps, plan, cfg.p1, cfg.p2, policy, cfg.seed, model=model, site_hook=hook
            ),
        }[cfg.scheme]
        result = runner()
        batch, comm = result.batch, result.comm.to_dict()
    elapsed = time.perf_counter() - t0
    if cfg.output:
        _write_outcomes(batch.outcomes, cfg.output, cfg.format)
    expected_macs = sum(plan.N * header.bond_dims[i] * header.bond_dims[i + 1] * header.d for i in range(header.M))
    return {
        "config": cfg.to_dict(),
        "plan": plan.to_dict(),
        "policy": policy.to_dict(),
        "bond_dims": list(header.bond_dims),
        "wall_seconds": elapsed,
        "stats": batch.stats.to_dict(),
        "expected_contraction_macs": expected_macs,
        "dead_samples": batch.dead_count,
        "comm": comm,
    }


def cmd_validate(args) -> dict:
    from .validation import (
        chi_square_gof,
        contract_full,
        correlations,
        empirical_distribution,
        exact_conditionals,
        exact_distribution,
        total_variation,
    )

    if args.mps:
        state = load_mps(args.mps)
        source = {"mps": args.mps}
    else:
        state = random_mps(args.M, args.chi, args.d, args.mps_seed)
        source = {"M": args.M, "chi": args.chi, "d": args.d, "mps_seed": args.mps_seed}
    t0 = time.perf_counter()
    sv = contract_full(state)
    probs = exact_distribution(sv)
    batch = sample_batch(state, BatchPlan.build(args.N, None, args.N2), seed=args.seed)
    emp = empirical_distribution(batch, state.d)
    tvd = total_variation(emp, probs)
    stat, pval, dof = chi_square_gof(batch, probs)
    corr = correlations(batch, probs)

    # conditionals along the first sample's path against marginals of the exact table
    from .sampler import outcome_weights

    worst = 0.0
    env = np.ones((1, 1), dtype=np.complex128)
    path = tuple(int(k) for k in batch.outcomes[0])
    for i, gamma, lam in state.iter_sites():
        temp = np.einsum("nl,lrk->nrk", env, gamma)
        w = outcome_weights(temp, lam)[0]
        worst = max(worst, float(np.abs(w / w.sum() - exact_conditionals(probs, path[:i])).max()))
        env = temp[:, :, path[i]]
    elapsed = time.perf_counter() - t0
    report = {
        "source": source,
        "N": args.N,
        "seed": args.seed,
        "norm": sv.norm,
        "tvd": tvd,
        "tvd_pass": tvd < args.tvd_tolerance,
        "chi_square": {"statistic": stat, "p_value": pval, "dof": dof, "pass": pval > 1e-3},
        "max_conditional_error": worst,
        "correlations": corr.to_dict(),
        "wall_seconds": elapsed,
    }
    if args.csv_dir:
        out = Path(args.csv_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "first_order.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "simulated", "reference"])
            for i, (s, r) in enumerate(zip(*corr.first_order)):
                w.writerow([i, repr(float(s)), repr(float(r))])
        with open(out / "second_order.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "simulated", "reference"])
            for i, (s, r) in enumerate(zip(*corr.second_order)):
                w.writerow([i, repr(float(s)), repr(float(r))])
        report["csv"] = [str(out / "first_order.csv"), str(out / "second_order.csv")]
    fs = corr.first_slope
    sys.stderr.write(
        f"norm {sv.norm:.12f}  TVD {tvd:.5f} ({'pass' if report['tvd_pass'] else 'FAIL'})  "
        f"chi2 p={pval:.4g}  max conditional error {worst:.2e}  first-order slope "
        f"{fs.slope if fs.slope is not None else 'undefined'}\n"
    )
    if not report["tvd_pass"]:
        report["exit_code"] = EXIT_NUMERIC
    return report


def cmd_perf_model(args) -> dict:
    from .perf import evaluate_all, load_params

    params = load_params(args.params)
    out = evaluate_all(params)
    out["params_file"] = args.params
    return out


def cmd_bench_collectives(args) -> dict:
    from .parallel import CollectiveGroup, CommModel
    from .perf import PerfParams, choose_scheme

    model = CommModel(args.bandwidth_allreduce, args.bandwidth_reducescatter, latency=args.latency)
    elements = max(1, args.bytes // 16)
    results = {}
    for op in ("all_reduce", "reduce_scatter"):
        group = CollectiveGroup(1, args.p2, model)

        def worker(rank, op=op):
            comm = group.tensor(rank)
            x = np.full(elements, rank + 1, dtype=np.complex128)
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                if op == "all_reduce":
                    comm.all_reduce_sum(x, purpose="bench")
                else:
                    comm.reduce_scatter_sum(x, purpose="bench")
            return time.perf_counter() - t0

        times = group.run(worker)
        modeled = group.stats.modeled_seconds(op) / args.repeats
        payload = elements * 16
        results[op] = {
            "payload_bytes": payload,
            "repeats": args.repeats,
            "wall_seconds_per_call": max(times) / args.repeats,
            "simulated_bandwidth": payload / (max(times) / args.repeats) if max(times) > 0 else None,
            "modeled_seconds_per_call": modeled,
            "modeled_bus_bandwidth": (payload / modeled) if modeled > 0 else None,
            "bytes_sent_per_rank": group.stats.sent,
        }
    out = {"p2": args.p2, "model": model.to_dict(), "results": results}
    if args.T_site:
        params = PerfParams(
            N2=args.N2,
            chi=args.chi,
            d=args.d,
            p2=args.p2,
            T_measure=args.T_measure,
            T_site=args.T_site,
            B_a=args.bandwidth_allreduce,
            B_r=args.bandwidth_reducescatter,
            bytes_per_element=args.bytes_per_element,
        )
        choice, both = choose_scheme(params)
        out["choose_scheme"] = {"choice": choice, "overheads": both}
    return out


def cmd_displace_test(args) -> dict:
    from .gbs import displacement_accuracy

    rep = displacement_accuracy(args.n, args.samples, args.max_mu, args.used_dim, args.seed, args.with_correction)
    out = rep.to_dict()
    out["tolerance"] = args.tolerance
    out["pass"] = rep.max_relative_error < args.tolerance
    if not out["pass"]:
        out["exit_code"] = EXIT_NUMERIC
    return out


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpsbatch", description="Batched MPS sampling toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def report_flag(sp):
        sp.add_argument("--report", help="write the JSON run report here instead of stdout")

    g = sub.add_parser("gen-mps", help="write a synthetic MPS file")
    g.add_argument("--kind", choices=("random", "attenuated"), default="random")
    g.add_argument("--M", type=_positive_int, required=True)
    g.add_argument("--chi", type=_positive_int, required=True)
    g.add_argument("--d", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--storage", default="F64", choices=("F64", "F32", "F16"))
    g.add_argument("--decades", type=float, default=1.0, help="attenuation per site (attenuated chains)")
    g.add_argument("--mixing", choices=("unitary", "identity"), default="unitary")
    g.add_argument("--output", required=True)
    report_flag(g)
    g.set_defaults(func=cmd_gen_mps)

    c = sub.add_parser("convert", help="re-encode an MPS file at another storage precision")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--storage", required=True, choices=("F64", "F32", "F16"))
    report_flag(c)
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("sample", help="draw samples from an MPS file")
    s.add_argument("--mps", default=os.environ.get("MPSBATCH_MPS"))
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--N1", type=int)
    s.add_argument("--N2", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--compute", default="F64")
    s.add_argument("--storage", default="F64")
    s.add_argument("--scaling", default="none")
    s.add_argument("--scheme", default="serial")
    s.add_argument("--p1", type=int, default=1)
    s.add_argument("--p2", type=int, default=1)
    s.add_argument("--bandwidth-allreduce", type=float, default=math.inf)
    s.add_argument("--bandwidth-reducescatter", type=float, default=math.inf)
    s.add_argument("--bandwidth-broadcast", type=float, default=math.inf)
    s.add_argument("--latency", type=float, default=0.0)
    s.add_argument("--output")
    s.add_argument("--format", default="npy")
    s.add_argument("--displace-sigma", type=float)
    s.add_argument("--displace-cutoff", type=int)
    s.add_argument("--trace", action="store_true", help="record the per-site decay trace (serial only)")
    report_flag(s)
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("validate", help="oracle equivalence and correlation checks")
    v.add_argument("--mps", help="MPS file; default is a generated random state")
    v.add_argument("--M", type=_positive_int, default=6)
    v.add_argument("--chi", type=_positive_int, default=8)
    v.add_argument("--d", type=int, default=3)
    v.add_argument("--mps-seed", type=int, default=0)
    v.add_argument("--N", type=_positive_int, default=200_000)
    v.add_argument("--N2", type=_positive_int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tvd-tolerance", type=float, default=0.01)
    v.add_argument("--csv-dir")
    report_flag(v)
    v.set_defaults(func=cmd_validate)

    pm = sub.add_parser("perf-model", help="evaluate the analytic models from a key=value file")
    pm.add_argument("--params", required=True)
    report_flag(pm)
    pm.set_defaults(func=cmd_perf_model)

    b = sub.add_parser("bench-collectives", help="time simulated AllReduce and ReduceScatter")
    b.add_argument("--p2", type=_positive_int, default=4)
    b.add_argument("--bytes", type=_positive_int, default=1 << 20)
    b.add_argument("--repeats", type=_positive_int, default=5)
    b.add_argument("--bandwidth-allreduce", type=float, default=401e9)
    b.add_argument("--bandwidth-reducescatter", type=float, default=46e9)
    b.add_argument("--latency", type=float, default=0.0)
    b.add_argument("--N2", type=_positive_int, default=5000)
    b.add_argument("--chi", type=_positive_int, default=10000)
    b.add_argument("--d", type=_positive_int, default=4)
    b.add_argument("--bytes-per-element", type=float, default=8.0)
    b.add_argument("--T-measure", type=float, default=0.015)
    b.add_argument("--T-site", type=float, default=0.31)
    report_flag(b)
    b.set_defaults(func=cmd_bench_collectives)

    dt = sub.add_parser("displace-test", help="random accuracy test of the factorized displacement")
    dt.add_argument("--n", type=_positive_int, default=10)
    dt.add_argument("--samples", type=_positive_int, default=1000)
    dt.add_argument("--max-mu", type=float, default=1.0)
    dt.add_argument("--used-dim", type=_positive_int, default=4)
    dt.add_argument("--tolerance", type=float, default=2e-3)
    dt.add_argument("--seed", type=int, default=0)
    dt.add_argument("--with-correction", action="store_true")
    report_flag(dt)
    dt.set_defaults(func=cmd_displace_test)
    return p


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "command": command}
    if isinstance(exc, ConfigError):
        err["field"] = exc.field
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    from .parallel import PlanningError, WorkerFailure

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        report = args.func(args)
        report.setdefault("command", args.command)
        _emit_report(report, args.report)
        return int(report.pop("exit_code", EXIT_OK)) if isinstance(report, dict) else EXIT_OK
    except (ConfigError, PlanningError) as exc:
        return _fail(EXIT_CONFIG, exc, args.command)
    except (NumericError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, exc, args.command)
    except (MpsFileError, OSError) as exc:
        return _fail(EXIT_IO, exc, args.command)
    except WorkerFailure as exc:
        cause = exc.__cause__
        if isinstance(cause, OSError):
            return _fail(EXIT_IO, exc, args.command)
        if isinstance(cause, ArithmeticError):
            return _fail(EXIT_NUMERIC, exc, args.command)
        return _fail(EXIT_CONFIG, exc, args.command)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc, args.command)


if __name__ == "__main__":
    sys.exit(main())
