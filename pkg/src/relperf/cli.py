"""Command-line front end.

Exit codes: 0 success, 1 failed verification verdict, 2 solver non-convergence,
3 config error, 64 usage error, 66 unreadable config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .bsde_engine import ConvergenceError, NaNError
from .mfg import MfgConsistencyError
from .market import ConfigError, config_from_dict, read_config_dict, sample_paths

EX_OK, EX_VERDICT, EX_SOLVER, EX_CONFIG, EX_USAGE, EX_NOINPUT = 0, 1, 2, 3, 64, 66
COMMANDS = ("closed-form", "solve-nplayer", "solve-mfg", "verify-nash", "converge", "check-assumptions")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relperf", description="N-player and mean-field relative-performance games")
    p.add_argument("--version", action="version", version=f"relperf {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, paths=True):
        sp.add_argument("--config", required=True, help="TOML/JSON config file or preset name")
        sp.add_argument("--steps", type=int, help="override n_steps")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--tol", type=float, help="solver tolerance")
        sp.add_argument("--out-dir", default="out", help="output directory")
        if paths:
            sp.add_argument("--paths", type=int, help="total number of simulated paths")
            sp.add_argument("--blocks", type=int, help="common-noise blocks")
            sp.add_argument("--copies", type=int, help="idiosyncratic copies per block")

    common(sub.add_parser("closed-form", help="exact equilibrium for deterministic returns"), paths=False)
    sp = sub.add_parser("solve-nplayer", help="benchmark + hat system + untransform")
    common(sp)
    sp.add_argument("--R", type=float, help="benchmark ball radius")
    sp.add_argument("--warm-start", action="store_true")
    sp = sub.add_parser("solve-mfg", help="mean-field equilibrium")
    common(sp)
    sp.add_argument("--mode", choices=("common", "independent", "march"), default="common")
    sp.add_argument("--delta", type=float, help="sub-interval length for --mode march")
    sp.add_argument("--damping", type=float, default=1.0)
    sp = sub.add_parser("verify-nash", help="Monte-Carlo deviation test and martingale check")
    common(sp)
    sp.add_argument("--player", type=int, default=0)
    sp.add_argument("--threshold", type=float, default=3.0, help="stderr multiple")
    sp = sub.add_parser("converge", help="N-player to mean-field convergence study")
    common(sp)
    sp.add_argument("--schedule", help="comma-separated increasing N values")
    sp.add_argument("--method", choices=("closed_form", "bsde"), default="closed_form")
    sp = sub.add_parser("check-assumptions", help="evaluate the smallness conditions")
    common(sp, paths=False)
    sp.add_argument("--R", type=float, help="ball radius (default per condition family)")
    sp.add_argument("--norm-mode", choices=("analytic", "empirical"), default="analytic")
    return p


# ---------------------------------------------------------------------------
# output helpers

def canonical_hash(d: dict) -> str:
    """sha256 of the key-sorted compact JSON form (stable under key reordering)."""
    text = json.dumps(d, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(text.encode()).hexdigest()


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


class _Out:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def json(self, name, obj):
        path = self.dir / name
        path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
        self.files.append(name)

    def csv(self, name, header, rows):
        path = self.dir / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        self.files.append(name)


def _paths(args, config, default_blocks, default_copies):
    """Resolve (blocks, copies) from --paths/--blocks/--copies."""
    copies = args.copies or default_copies
    blocks = args.blocks
    if blocks is None:
        blocks = max(1, args.paths // copies) if args.paths else default_blocks
    if blocks < 1 or copies < 1:
        raise ConfigError("--blocks and --copies must be positive")
    return sample_paths(config, blocks, copies), blocks, copies


# ---------------------------------------------------------------------------
# commands

def cmd_closed_form(args, config, out):
    from . import closed_form

    if config.mode == "mfg":
        eq = closed_form.mfg_closed_form(config)
        out.csv("closed_form.csv", ["t", "type", "z", "z0", "pi", "pi0"],
                [(t, a, eq.z[a, k], eq.z0[a, k], eq.pi[a, k], eq.pi0[a, k])
                 for a in range(eq.alpha.size) for k, t in enumerate(eq.times)])
        out.json("closed_form.json", {"mode": "mfg", "y0": eq.y0, "value": eq.value,
                                      "fixed_point_residual": eq.fixed_point_residual()})
        return EX_OK
    eq = closed_form.nplayer_closed_form(config)
    out.csv("closed_form.csv", ["t", "player", "z_ii", "z_i0", "pi", "pi0"],
            [(t, i, eq.z_ii[i, k], eq.z_i0[i, k], eq.pi[i, k], eq.pi0[i, k])
             for i in range(eq.N) for k, t in enumerate(eq.times)])
    report = {"mode": "nplayer", "y0": eq.y0, "value": eq.value, "z_ij": eq.z_ij[:, :, 0]}
    try:
        report["explicit_formula"] = closed_form.explicit_formula_crosscheck(config)
    except closed_form.SingularSystemError as exc:
        report["explicit_formula"] = {"error": str(exc)}
    out.json("closed_form.json", report)
    return EX_OK


def cmd_solve_nplayer(args, config, out):
    from . import closed_form, nplayer

    paths, blocks, _ = _paths(args, config, 10000, config.N)
    if paths.K != config.N:
        paths = sample_paths(config, blocks, config.N)
    picard = (50, args.tol if args.tol else 1e-8)
    res = nplayer.solve_nplayer(config, paths, R=args.R, picard=picard, warm_start=args.warm_start)
    f = res.fbsde
    times = config.times
    rows = []
    for i in range(config.N):
        for k in range(config.n_steps):
            rows.append((times[k], i, f.Y[i, :, k].mean(), f.Zii[i, :, k].mean(), f.Zi0[i, :, k].mean(),
                         f.pi[i, :, k].mean(), f.pi0[i, :, k].mean()))
    out.csv("nplayer.csv", ["t", "player", "Y", "Z_ii", "Z_i0", "pi", "pi0"], rows)
    report = {
        "blocks": blocks, "y0": f.Y[:, :, 0].mean(axis=1), "y0_stderr": res.hat.y0_stderr,
        "hat_picard_iters": res.hat.picard_iters, "hat_picard_residuals": res.hat.picard_residuals,
        "benchmark_picard_iters": res.bench.picard_iters, "A": res.hat.A,
        "benchmark_bound_ok": res.bench.bound_ok, "hat_bound_ok": res.hat.bound_ok,
        "outside_proven_regime": res.bench.outside_proven_regime, "assumptions": res.bench.assumptions,
    }
    try:
        eq = closed_form.nplayer_closed_form(config)
        report["closed_form_y0"] = eq.y0
        report["max_abs_pi0_gap_vs_closed_form"] = float(np.max(np.abs(f.pi0.mean(axis=1) - eq.pi0)))
    except (ConfigError, closed_form.SingularSystemError):
        pass
    out.json("nplayer.json", report)
    return EX_OK


def cmd_solve_mfg(args, config, out):
    from . import mfg

    tol = args.tol if args.tol else (1e-6 if args.mode == "common" else 1e-8)
    if args.mode == "common":
        paths, blocks, copies = _paths(args, config, 500, 20)
        sol = mfg.solve_mfg_common_noise(config, paths, tol=tol)
    else:
        paths, blocks, copies = _paths(args, config, 10000, 1)
        if args.mode == "independent":
            sol = mfg.solve_mf_fbsde_independent(config, paths, damping=args.damping, tol=tol)
        else:
            sol = mfg.time_march_global(config, paths, args.delta or config.T, tol=tol, damping=args.damping)
    tm = sol.type_means()
    rows = []
    for a in range(sol.probs.size):
        for k in range(config.n_steps):
            rows.append((config.times[k], a, tm["y"][a, k], tm["z"][a, k], tm["z0"][a, k],
                         tm["pi"][a, k], tm["pi0"][a, k]))
    out.csv("mfg.csv", ["t", "type", "Y", "Z", "Z0", "pi", "pi0"], rows)
    out.json("mfg.json", {
        "mode": sol.mode, "blocks": blocks, "copies": copies, "mu": sol.mu, "mu_trace": sol.mu_trace,
        "ratios": sol.ratios, "ratio": sol.ratio, "gap": sol.gap, "gap_stderr": sol.gap_stderr,
        "damping": sol.damping, "y0": tm["y0"],
        **{k: v for k, v in sol.extras.items() if k != "mu_blocks"},
    })
    return EX_OK


def cmd_verify_nash(args, config, out):
    from . import closed_form, verification

    eq = closed_form.nplayer_closed_form(config)
    if not 0 <= args.player < config.N:
        raise ConfigError(f"--player must be in [0, {config.N})")
    paths, blocks, _ = _paths(args, config, 10000, config.N)
    if paths.K != config.N:
        paths = sample_paths(config, blocks, config.N)
    rep = verification.nash_deviation_test(config, eq, args.player, paths=paths, threshold=args.threshold)
    d = rep.drift
    out.csv("drift.csv", ["t", "mean_R", "stderr", "sub_mean_R"],
            zip(d.times, d.mean_R, d.stderr, d.sub_mean_R))
    out.json("nash.json", rep.to_dict())
    return EX_OK if rep.verdict else EX_VERDICT


def cmd_converge(args, config, out):
    from . import verification

    if args.schedule:
        try:
            sched = [int(s) for s in args.schedule.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad --schedule '{args.schedule}'") from None
    else:
        sched = list(config.extras.get("n_schedule", [4, 8, 16, 32]))
    try:
        rep = verification.convergence_study(config, sched, method=args.method,
                                             n_blocks=args.blocks or args.paths or 2000)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out.csv("convergence.csv", ["N", "pi_gap", "y0_gap", "b_energy"],
            zip(rep.N, rep.pi_gap, rep.y0_gap, rep.b_energy))
    out.json("convergence.json", rep.to_dict())
    return EX_OK


def cmd_check_assumptions(args, config, out):
    from . import assumptions

    rep = assumptions.check_all(config, R=args.R, norm_mode=args.norm_mode)
    out.json("assumptions.json", rep.to_dict())
    return EX_OK


HANDLERS = {
    "closed-form": cmd_closed_form, "solve-nplayer": cmd_solve_nplayer, "solve-mfg": cmd_solve_mfg,
    "verify-nash": cmd_verify_nash, "converge": cmd_converge, "check-assumptions": cmd_check_assumptions,
}


def _load(args) -> dict:
    d = read_config_dict(args.config)
    if args.steps is not None:
        d["n_steps"] = args.steps
    if args.seed is not None:
        d["seed"] = args.seed
    return d


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cmd = next((a for a in argv if not a.startswith("-")), None)
    if cmd is not None and cmd not in COMMANDS:
        print(f"relperf: unknown command '{cmd}' (expected one of {', '.join(COMMANDS)})", file=sys.stderr)
        return EX_USAGE
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(f"relperf: {exc}", file=sys.stderr)
        return EX_USAGE
    if args.command is None:
        _parser().print_usage(sys.stderr)
        return EX_USAGE
    started = datetime.now(timezone.utc).isoformat()
    try:
        d = _load(args)
        config = config_from_dict(d)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"relperf: cannot read config: {exc}", file=sys.stderr)
        return EX_NOINPUT
    except ConfigError as exc:
        print(f"relperf: config error: {exc}", file=sys.stderr)
        return EX_CONFIG
    out = _Out(args.out_dir)
    try:
        code = HANDLERS[args.command](args, config, out)
    except ConfigError as exc:
        print(f"relperf: config error: {exc}", file=sys.stderr)
        return EX_CONFIG
    except (ConvergenceError, NaNError, MfgConsistencyError) as exc:
        print(f"relperf: solver failed: {exc}", file=sys.stderr)
        return EX_SOLVER
    params = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out_dir")}
    manifest = {
        "command": args.command, "config": str(args.config), "config_hash": canonical_hash(config.to_dict()),
        "seed": config.seed, "parameters": params,
        "versions": {"relperf": __version__, "numpy": np.__version__, "python": platform.python_version(),
                     "kernel_backend": kernels.BACKEND},
        "started": started, "finished": datetime.now(timezone.utc).isoformat(),
        "exit_code": code, "outputs": sorted(out.files + ["manifest.json"]),
    }
    (out.dir / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"command": args.command, "exit_code": code, "out_dir": str(out.dir)}))
    return code


def main(argv=None):
    sys.exit(run(argv))
