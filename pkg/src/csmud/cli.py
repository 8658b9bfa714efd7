"""Command-line entry point: ``csmud {simulate,sweep,verify,complexity}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import verify as verify_mod
from .complexity import ANALYTIC, ComplexityParams, reconcile
from .harness import SOLVER_KINDS, SWEEP_AXES, ExperimentSpec, run_sweep, solve_raw, write_atomic
from .model import ConfigError, SystemConfig, synthesize_frame
from .solvers import ScheduleError, SolverParams, detect

log = logging.getLogger("csmud")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 1, 2, 3


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


# key -> parser; the flat config file and --set use these names
CONFIG_KEYS = {
    "K": int, "N": int, "J": int,
    "sparsity_min": int, "sparsity_max": int,
    "modulation": str, "snr_db": float, "beta": float, "seed": int,
    "snr_mode": str, "spreading": str,
    "lambda0": float, "T": int, "T_b": int, "psi": _int_list, "v_th": float,
    "frames": int, "solvers": _str_list, "snr": _float_list,
    "sweep": str, "values": _float_list,
    "threads": int, "ser_convention": str, "bcd_method": str,
    "seed_policy": str, "calibration_frames": int,
}

# flag dest -> config key
FLAG_KEYS = {
    "snr": "snr", "solvers": "solvers", "frames": "frames", "seed": "seed",
    "k": "K", "n": "N", "j": "J", "lambda0": "lambda0", "t": "T", "tb": "T_b",
    "psi": "psi", "vth": "v_th", "beta": "beta", "sweep": "sweep", "values": "values",
    "threads": "threads", "snr_mode": "snr_mode", "bcd_method": "bcd_method",
}

DEFAULTS = {
    "frames": 200,
    "solvers": ["bcd", "cr-ebcd", "oracle-cr-ebcd", "oracle-ls"],
    "snr": [-2.0, 0.0, 2.0, 4.0, 6.0],
    "threads": 1,
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return CONFIG_KEYS[key](value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def gather(args) -> dict:
    """Defaults < config file < ``--set`` < dedicated flags."""
    conf = dict(DEFAULTS)
    if getattr(args, "config", None):
        conf.update(load_config(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        conf[key.strip()] = _coerce(key.strip(), value.strip())
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            conf[key] = _coerce(key, value)
    return conf


def build_system(conf: dict) -> SystemConfig:
    kw = {k: conf[k] for k in ("K", "N", "J", "modulation", "snr_db", "beta", "seed", "snr_mode", "spreading") if k in conf}
    base = SystemConfig()
    lo = conf.get("sparsity_min", base.sparsity_range[0])
    hi = conf.get("sparsity_max", base.sparsity_range[1])
    return SystemConfig(sparsity_range=(lo, hi), **kw)


def build_params(conf: dict) -> SolverParams:
    base = SolverParams()
    T = conf.get("T", base.T)
    T_b = conf.get("T_b", min(base.T_b, T))
    psi = conf.get("psi")
    if psi is None:
        psi = [base.psi_schedule[0]] * T_b if T_b else []
    elif len(psi) == 1 and T_b != 1:
        psi = psi * T_b
    return SolverParams(
        lambda0=conf.get("lambda0", base.lambda0),
        T=T,
        T_b=T_b,
        psi_schedule=tuple(psi),
        v_th=conf.get("v_th", base.v_th),
    )


def build_spec(conf: dict, sweep: str, values) -> ExperimentSpec:
    cfg = build_system(conf)
    params = build_params(conf)
    cfg_params_check(cfg, params)
    for kind in conf["solvers"]:
        if kind not in SOLVER_KINDS:
            raise ConfigError(f"unknown solver {kind!r}; choose from {', '.join(SOLVER_KINDS)}")
    return ExperimentSpec.simple(
        cfg,
        conf["solvers"],
        params,
        sweep=sweep,
        values=tuple(values),
        n_frames=conf["frames"],
        vth=conf.get("v_th"),
        ser_convention=conf.get("ser_convention", "union"),
        bcd_method=conf.get("bcd_method", "direct"),
        seed_policy=conf.get("seed_policy", "per_point"),
        calibration_frames=conf.get("calibration_frames", 500),
    )


def cfg_params_check(cfg: SystemConfig, params: SolverParams) -> None:
    if params.final_size(cfg.K) < 0:
        raise ScheduleError(f"psi schedule {params.psi_schedule} discards more than K={cfg.K} users")


def _emit(result, out_dir) -> None:
    csv_text = result.to_csv()
    write_atomic(Path(out_dir) / "results.csv", csv_text)
    write_atomic(Path(out_dir) / "results.json", result.to_json())
    sys.stdout.write(csv_text)


def cmd_simulate(args) -> int:
    conf = gather(args)
    spec = build_spec(conf, "snr_db", conf["snr"])
    _emit(run_sweep(spec, threads=conf["threads"]), args.out)
    return 0


def cmd_sweep(args) -> int:
    conf = gather(args)
    axis = conf.get("sweep")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"--sweep must be one of {', '.join(SWEEP_AXES)}")
    if "values" not in conf:
        raise ConfigError("--values is required for sweep")
    values = conf["values"]
    if axis in ("J", "sparsity", "final_size", "T_b"):
        values = [int(v) for v in values]
    spec = build_spec(conf, axis, values)
    _emit(run_sweep(spec, threads=conf["threads"]), args.out)
    return 0


def cmd_verify(args) -> int:
    report = verify_mod.run_checks(small=args.small, inject_fault=args.inject_fault, seed=args.seed)
    sys.stdout.write(report.format() + "\n")
    if args.out:
        write_atomic(Path(args.out) / "verify.json", json.dumps(report.to_dict(), indent=2))
    return 0 if report.ok else EXIT_VERIFY


def cmd_complexity(args) -> int:
    conf = gather(args)
    K, N, J = conf.get("K", 200), conf.get("N", 100), conf.get("J", 7)
    T = conf.get("T", 12)
    s = args.s
    rows = []
    for algo in ("bcd", "ebcd", "cr-ebcd"):
        try:
            if algo == "bcd":
                p = ComplexityParams(K, N, J, T, 0, (), s)
            else:
                sp = build_params(conf)
                p = ComplexityParams(K, N, J, sp.T, sp.T_b, sp.psi_schedule, s)
            rows.append((algo, ANALYTIC[algo](p), None))
        except (ValueError, ScheduleError) as exc:
            rows.append((algo, None, str(exc)))

    measured = {}
    if args.measure:
        cfg = build_system(conf)
        params = build_params(conf)
        frame = synthesize_frame(cfg)
        for algo in ("bcd", "ebcd", "cr-ebcd"):
            raw = solve_raw(frame, algo, params)
            det = detect(frame.Y, frame.G, algo, params, cfg.constellation, raw=raw)
            measured[algo] = (det.ledger.total, reconcile(det.ledger))

    header = ["algorithm", "analytic"] + (["counted", "analytic_at_run", "deviation"] if args.measure else [])
    lines = ["\t".join(header)]
    for algo, value, err in rows:
        fields = [algo, str(value) if value is not None else f"n/a ({err})"]
        if args.measure:
            total, rep = measured[algo]
            fields += [str(total), str(rep.rows[-1][2]), f"{rep.total_deviation:.3e}"]
        lines.append("\t".join(fields))
    values = {a: v for a, v, _ in rows}
    if values.get("ebcd") and values.get("cr-ebcd"):
        lines.append(f"ratio ebcd/cr-ebcd\t{values['ebcd'] / values['cr-ebcd']:.2f}")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.measure and any(not rep.ok for _, rep in measured.values()):
        return EXIT_VERIFY
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--k", dest="k")
    p.add_argument("--n", dest="n")
    p.add_argument("--j", dest="j")
    p.add_argument("--lambda0")
    p.add_argument("--t", dest="t")
    p.add_argument("--tb", dest="tb")
    p.add_argument("--psi", help="one value for every pruning sweep, or a comma list")
    p.add_argument("--seed")
    p.add_argument("--snr-mode", dest="snr_mode", choices=["total", "per_user"])


def _experiment(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--snr", help="comma-separated SNR points in dB")
    p.add_argument("--solvers", help=f"comma list from {', '.join(SOLVER_KINDS)}")
    p.add_argument("--frames")
    p.add_argument("--vth", help="fixed energy threshold (default: anchors, else calibrated)")
    p.add_argument("--beta")
    p.add_argument("--threads", help="worker processes, 0 = all CPUs")
    p.add_argument("--bcd-method", dest="bcd_method", choices=["direct", "residual"])
    p.add_argument("--out", default="results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csmud", description="BCD-family multiuser detection for grant-free NOMA")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="SER versus SNR")
    _experiment(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="SER along one axis")
    _experiment(p)
    p.add_argument("--sweep", choices=SWEEP_AXES)
    p.add_argument("--values", help="comma-separated axis values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the solver invariant checks")
    p.add_argument("--small", action="store_true", help="K <= 10 instances only")
    p.add_argument("--inject-fault", action="store_true", help="disable the W product cache (must fail)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("complexity", help="closed-form and measured multiplication counts")
    _common(p)
    p.add_argument("--s", type=int, default=20, help="support size used in the LS term")
    p.add_argument("--measure", action="store_true", help="also count one instrumented run per solver")
    p.set_defaults(func=cmd_complexity)
    return parser


_VALUE_FLAGS = {"--snr", "--values", "--psi"}


def _glue_negative_values(argv: list[str]) -> list[str]:
    """``--snr -2,0,2`` would read ``-2,0,2`` as an option; rewrite to ``--snr=-2,0,2``."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-") and argv[i + 1][1:2].isdigit():
            out.append(f"{a}={argv[i + 1]}")
            i += 2
        else:
            out.append(a)
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
