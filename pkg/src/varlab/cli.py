"""Command-line front end: ``varlab simulate | verify | check | example``."""

from __future__ import annotations

import argparse
import csv
import os
import re
import sys
from pathlib import Path

import numpy as np

from varlab import config as cfgmod
from varlab.conditions import check_conditions, multiplier_search
from varlab.errors import InfeasibleEndpointError, VarlabError
from varlab.expansionlab import measure
from varlab.flows import adjoint_solve, integrate
from varlab.variations import LC2, LC3, BuilderParams, Goh, Needle, balanced_params

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VIOLATED = 3
EXIT_NO_MULTIPLIER = 4
EXIT_INFEASIBLE = 5

EXIT_CODES = """exit codes:
  0  success (check: no violation found)
  2  usage, config or input error
  3  necessary conditions violated for every multiplier found
  4  no PMP multiplier found at tolerance
  5  endpoint violates the target constraint
"""


class UsageError(Exception):
    pass


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _floats(text: str, what: str) -> list:
    try:
        return [float(s) for s in text.strip().strip("()[]").split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad {what}: {text!r}") from None


def parse_signal(text: str):
    """``needle:(-4,0)``, ``goh:1,2``, ``lc2:1`` or ``lc3``."""
    kind, _, rest = text.strip().partition(":")
    kind = kind.lower()
    try:
        if kind == "needle":
            vals = _floats(rest, "needle value")
            if not vals:
                raise ValueError
            return Needle(tuple(vals))
        if kind == "goh":
            m = re.fullmatch(r"\s*(\d+)\s*,\s*(\d+)\s*", rest)
            if not m:
                raise ValueError
            return Goh(int(m.group(1)), int(m.group(2)))
        if kind == "lc2":
            if not re.fullmatch(r"\s*\d+\s*", rest):
                raise ValueError
            return LC2(int(rest))
        if kind == "lc3" and not rest.strip():
            return LC3()
    except (ValueError, VarlabError, UsageError):
        pass
    raise UsageError(f"bad signal {text!r}; expected needle:(v1,..,vm), goh:i,j, lc2:i or lc3")


def _write_csv(rows, header, out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(float(v)) for v in row])


def _output(path):
    return open(path, "w", newline="", encoding="utf-8") if path else None


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    cfg = cfgmod.load(args.config)
    sys_, u = cfg.system, cfg.control
    step = args.step if args.step is not None else cfg.numerics.step
    traj = integrate(sys_, u, step=step, jacobians=args.adjoint is not None)
    cols = [traj.times[:, None], traj.states]
    header = ["t"] + [f"x{i + 1}" for i in range(sys_.n)]
    if args.adjoint is not None:
        pT = _floats(args.adjoint, "terminal covector")
        if len(pT) != sys_.n:
            raise UsageError(f"--adjoint needs {sys_.n} entries, got {len(pT)}")
        p = adjoint_solve(sys_, u, traj, pT).values
        cols.append(p)
        header += [f"p{i + 1}" for i in range(sys_.n)]
    if cfg.target is not None:
        miss = cfg.target.residual(traj.final)
        if miss > cfg.numerics.feasibility_tol * (1.0 + float(np.linalg.norm(cfg.target.d))):
            print(f"warning: endpoint misses the target by {miss:.3e}", file=sys.stderr)
    handle = _output(args.out)
    _write_csv(np.hstack(cols), header, handle or sys.stdout)
    if handle:
        handle.close()
    return EXIT_OK


def _builder_params(args, cfg, sig, tbar):
    if isinstance(sig, Needle):
        return None
    if args.alpha or args.beta:
        if not (args.alpha and args.beta):
            raise UsageError("--alpha and --beta must be given together")
        a, b = _floats(args.alpha, "--alpha"), _floats(args.beta, "--beta")
        if len(a) != len(sig.indices) or len(b) != len(sig.indices):
            raise UsageError(f"--alpha/--beta need {len(sig.indices)} entries")
        return BuilderParams(dict(zip(sig.indices, a)), dict(zip(sig.indices, b)))
    if cfg.control_set is None:
        raise UsageError("no [control_set] in config: pass --alpha and --beta")
    policy = args.policy or cfg.ladder.policy
    params = balanced_params(cfg.control, cfg.control_set, sig, tbar, policy)
    if params is None:
        raise UsageError(f"control is not balanced for {args.signal} just before t={tbar:g}")
    return params


def cmd_verify(args) -> int:
    cfg = cfgmod.load(args.config)
    sig = parse_signal(args.signal)
    tbar = args.tbar if args.tbar is not None else cfg.ladder.tbar
    if tbar is None:
        raise UsageError("--tbar is required (or set ladder.tbar in the config)")
    ladder = _floats(args.ladder, "--ladder") if args.ladder else cfg.ladder.epsilons
    params = _builder_params(args, cfg, sig, tbar)
    layout = args.layout or cfg.ladder.layout
    fit = measure(
        cfg.system, cfg.control, sig, params, tbar, ladder, args.reversed,
        cfg.control_set if args.certify else None, layout, cfg.numerics.step, args.threads,
    )
    handle = _output(args.out)
    (handle or sys.stdout).write(fit.to_csv())
    if handle:
        handle.close()
        print(fit.summary())
    else:
        print(fit.summary(), file=sys.stderr)
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = cfgmod.load(args.config)
    if cfg.control_set is None:
        raise UsageError("check needs a [control_set] section")
    target = cfg.target or cfgmod.TargetSpec.free(cfg.system.n)
    traj = integrate(cfg.system, cfg.control, step=cfg.numerics.step, jacobians=True)
    num = cfg.numerics
    try:
        found = multiplier_search(
            cfg.system, cfg.control, traj, target, cfg.control_set, num.pmp_tol, num.feasibility_tol,
            num.samples, num.seeds, args.seed, args.threads,
        )
    except InfeasibleEndpointError as exc:
        print(f"infeasible endpoint: |D x(T) - d| = {exc.residual:.6e}; x(T) = "
              f"{[float(v) for v in traj.final]}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report = check_conditions(cfg.system, cfg.control, traj, found, cfg.control_set, num.bracket_tol, found.diagnostic)
    sys.stdout.write(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    return report.exit_code


def cmd_example(args) -> int:
    if args.list:
        print("\n".join(cfgmod.BUNDLED))
        return EXIT_OK
    text = cfgmod.bundled_text(args.name)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="varlab",
        description="Simulate control-affine systems, measure control variations, check necessary conditions.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="integrate and write a trajectory CSV", epilog=EXIT_CODES,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("config")
    s.add_argument("--step", type=float, help="maximum RK4 step (default min(1e-3 T, narrowest cell / 8))")
    s.add_argument("--adjoint", metavar="PT", help="terminal covector, e.g. 0,0,-1; adds p columns")
    s.add_argument("--out", help="write CSV here instead of stdout")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="measure a variation on an epsilon ladder", epilog=EXIT_CODES,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    v.add_argument("config")
    v.add_argument("--signal", required=True, help="needle:(v1,..,vm) | goh:i,j | lc2:i | lc3")
    v.add_argument("--tbar", type=float, help="end of the variation window")
    v.add_argument("--ladder", help="comma-separated epsilons (at least four)")
    v.add_argument("--reversed", action="store_true", help="use the reversed builder")
    v.add_argument("--policy", choices=("nearest", "farthest"), help="balanced shift choice")
    v.add_argument("--layout", choices=("feasible", "antisymmetric"), help="Goh builder layout")
    v.add_argument("--alpha", help="builder alphas for the signal's indices")
    v.add_argument("--beta", help="builder betas for the signal's indices")
    v.add_argument("--certify", action="store_true", help="check perturbed controls lie in U")
    v.add_argument("--threads", type=int)
    v.add_argument("--out", help="write CSV here; summary then goes to stdout")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("check", help="search multipliers and evaluate necessary conditions", epilog=EXIT_CODES,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    c.add_argument("config")
    c.add_argument("--seed", type=int, default=0, help="sphere-sampling seed (default 0)")
    c.add_argument("--json", help="also write the machine-readable report here")
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_check)

    e = sub.add_parser("example", help="print a bundled config")
    e.add_argument("name", nargs="?", default="worked_example", choices=cfgmod.BUNDLED)
    e.add_argument("--list", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_example)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"varlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleEndpointError as exc:
        print(f"varlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except VarlabError as exc:
        print(f"varlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
