"""Command-line entry point: ``bdfqed <subcommand> [flags]``.

Exit codes: 0 on success, 1 on usage errors, 2 on numerical failures.
Every run writes ``<out>.manifest.json`` next to its main output.
"""
from __future__ import annotations

import os

# pin BLAS threads before numpy loads so that --threads never changes the arithmetic
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericalError

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _fmt(x) -> str:
    return repr(float(x))


def _dump_json(path: Path, obj: dict):
    obj = {"schema_version": SCHEMA_VERSION, **obj}
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")


def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def _with_suffix(out: Path, suffix: str) -> Path:
    return out.with_suffix(suffix) if out.suffix else Path(str(out) + suffix)


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


# ------------------------------------------------------------- subcommands


def cmd_dress(args) -> dict:
    from .dressed_dirac import PhysicalParams, dress

    params = PhysicalParams(args.alpha, args.lam)
    d = dress(params, tol=args.tol, max_iter=args.max_iter, n_nodes=args.nodes)
    out = Path(args.out)
    _write_csv(out, ["p", "g0", "g1", "E_script"], zip(d.grid, d.g0, d.g1, d.e_script_nodes))
    rep = d.gstar_report()
    summary = {
        "alpha": args.alpha,
        "lambda": args.lam,
        "m": d.m,
        "g0_at_0": float(d.g0[0]),
        "iterations": d.iterations,
        "residual": d.residual,
        "gstar": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in rep.items()},
    }
    _dump_json(_with_suffix(out, ".json"), summary)
    return {"outputs": [str(out), str(_with_suffix(out, ".json"))]}


def _renorm_functions(alpha, lam, jmax, tol, seed):
    from .dressed_dirac import PhysicalParams, dress
    from .vacuum_polarization import assemble

    params = PhysicalParams(alpha, lam)
    d = dress(params)
    return assemble(d, params, J_max=jmax, tol=tol, seed=seed)


def cmd_uehling(args) -> dict:
    rf = _renorm_functions(args.alpha, args.lam, args.jmax, args.tol, args.seed)
    kmax = args.kmax if args.kmax is not None else math.inf
    sel = rf.kgrid <= kmax
    out = Path(args.out)
    _write_csv(out, ["k", "B", "f", "F"], zip(rf.kgrid[sel], rf.B[sel], rf.f[sel], rf.F[sel]))
    js = rf.as_json()
    js.update({"alpha": args.alpha, "lambda": args.lam, "jmax": args.jmax})
    _dump_json(_with_suffix(out, ".json"), js)
    return {"outputs": [str(out), str(_with_suffix(out, ".json"))]}


def cmd_renorm(args) -> dict:
    from .fixed_point import renorm_table

    pts = [(a, l) for a in _float_list(args.alpha) for l in _float_list(args.lam)]
    rows = _pmap(lambda p: renorm_table([p], args.M, args.Z, args.tol, args.jmax, args.seed)[0], pts, args.threads)
    out = Path(args.out)
    header = ["alpha", "lambda", "L", "f0", "Z3_formula", "Z3_quadrature", "tol"]
    _write_csv(
        out,
        header,
        [
            (r.alpha, r.lam, r.L, r.f0, r.Z3_formula, r.Z3_quadrature if r.Z3_quadrature is not None else r.flag, r.tol)
            for r in rows
        ],
    )
    return {"outputs": [str(out)], "all_agree": all(r.agree for r in rows if r.Z3_quadrature is not None)}


def _nu_profile(spec: str, grid):
    from .bdf_operators import Density
    from .fixed_point import gaussian_density

    if spec in ("zero", "none"):
        return Density(grid, np.zeros(grid.shape))
    parts = spec.split(":")
    if parts[0] == "gaussian":
        charge = float(parts[1]) if len(parts) > 1 else 1.0
        width = float(parts[2]) if len(parts) > 2 else 1.0
        return gaussian_density(grid, charge, width)
    raise UsageError(f"unknown --nu-profile {spec!r}; use zero or gaussian:CHARGE:WIDTH")


def cmd_scf_run(args) -> dict:
    from .bdf_operators import Grid, LatticeModel, write_orbitals
    from .dressed_dirac import PhysicalParams, dress
    from .fixed_point import electron_projector, make_context, solve

    params = PhysicalParams(args.alpha, args.lam, args.M)
    d = dress(params)
    grid = Grid(args.grid_n, args.extent, args.lam)
    lm = LatticeModel(grid, d)
    N = electron_projector(grid, args.M, d)
    nu = _nu_profile(args.nu_profile, grid)
    ctx = make_context(lm, params, N, nu, args.nquad)
    out = Path(args.out)
    lines = []
    res = solve(ctx, N, order=args.order, tol=args.tol, max_iter=args.max_iter, callback=lines.append)
    with open(out, "w") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(
            json.dumps(
                {
                    "final": True,
                    "schema_version": SCHEMA_VERSION,
                    "converged": res.converged,
                    "iterations": res.iterations,
                    "contraction_ratio": res.contraction_ratio,
                    "trace0_gamma": res.trace0_gamma,
                    "gamma_hs_norm": res.gamma_norm,
                    "sqrt_log_lambda": math.sqrt(math.log(args.lam)),
                },
                sort_keys=True,
            )
            + "\n"
        )
    gam = res.state.gamma
    orbs = np.concatenate([N.left, gam.left])
    weights = np.concatenate([N.weights, gam.weights])
    state_path = _with_suffix(out, ".orb")
    write_orbitals(state_path, grid, orbs, weights)
    return {"outputs": [str(out), str(state_path)]}


def _parse_basis(text: str):
    parts = str(text).split(",")
    if len(parts) != 3:
        raise UsageError("--basis expects alpha0,beta,n")
    return float(parts[0]), float(parts[1]), int(parts[2])


def cmd_nrhf(args) -> dict:
    from .nonrel_hf import scf_minimize

    a = args.a
    if args.from_renorm:
        js = json.loads(Path(args.from_renorm).read_text())
        f0 = float(js["f0"])
        a = f0 / (1 + f0)
    if a is None:
        raise UsageError("give --a or --from-renorm")
    st = scf_minimize(args.Z, args.M, a, _parse_basis(args.basis), damping=args.damping, tol=args.tol)
    out = Path(args.out)
    _dump_json(
        out,
        {
            "Z": args.Z,
            "M": args.M,
            "a": a,
            "energy": st.energy,
            "eps": [float(x) for x in st.eps],
            "occupations": [float(x) for x in st.occ],
            "iterations": st.iterations,
        },
    )
    r = np.linspace(0.0, 20.0, 401)
    prof = st.radial_orbitals(r)
    csv = _with_suffix(out, ".csv")
    _write_csv(csv, ["r"] + [f"orbital_{i}" for i in range(len(prof))], zip(r, *prof))
    return {"outputs": [str(out), str(csv)]}


def cmd_furry_check(args) -> dict:
    from .clifford import _random_ball, all_generator_words, calcul_identity_check, furry_trace_check, sign_array
    from .dressed_dirac import PhysicalParams, dress

    words = odd = violations = 0
    for _, word in all_generator_words(args.max_len):
        r = furry_trace_check(word, exact=True)
        words += 1
        if r.grading == "odd":
            odd += 1
            if r.trace != 0:
                violations += 1
    d = dress(PhysicalParams(args.alpha, args.lam)) if args.alpha > 0 else None
    rng = np.random.default_rng(args.seed)
    p, p1, q = (_random_ball(rng, args.trials, args.lam) for _ in range(3))
    sp, sp1, sq = (sign_array(x, d) for x in (p, p1, q))
    v = rng.normal(size=(args.trials, 2))
    worst, not_odd = 0.0, 0
    for i in range(args.trials):
        c = calcul_identity_check(sp[i], sp1[i], sq[i], v[i, 0], v[i, 1])
        worst = max(worst, c.residual)
        bad = any(abs(t) >= 1e-12 * max(1.0, abs(v[i, 0] * v[i, 1])) for t in c.traces) or any(g != "odd" for g in c.gradings)
        not_odd += int(bad)
    violations += not_odd + int(worst > 1e-12)
    out = Path(args.out)
    _dump_json(
        out,
        {
            "words_checked": words,
            "odd_words": odd,
            "max_len": args.max_len,
            "trials": args.trials,
            "identity_max_residual": worst,
            "non_odd_combinations": not_odd,
            "violations": violations,
        },
    )
    return {"outputs": [str(out)], "violations": violations}


def cmd_inequalities(args) -> dict:
    from .bdf_operators import Grid, inequality_suite

    grid = Grid(args.grid_n, args.extent)
    rep = inequality_suite(grid, args.samples, np.random.default_rng(args.seed), args.kernels)
    out = Path(args.out)
    _dump_json(out, rep.as_json())
    return {"outputs": [str(out)]}


# ------------------------------------------------------------------ parser

_COMMANDS = {
    "dress": cmd_dress,
    "uehling": cmd_uehling,
    "renorm": cmd_renorm,
    "scf-run": cmd_scf_run,
    "nrhf": cmd_nrhf,
    "furry-check": cmd_furry_check,
    "inequalities": cmd_inequalities,
}


def _common(p, out_default):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--config", default=None, help="flat key = value file; flags override it")
    p.add_argument("--out", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bdfqed", description="Mean-field vacuum polarisation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--from-manifest", metavar="PATH", help="rerun with the settings stored in a manifest (must come first)"
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("dress", help="solve for the dressed free operator")
    p.add_argument("--alpha", type=float, default=0.02)
    p.add_argument("--lambda", dest="lam", type=float, default=1e3)
    p.add_argument("--nodes", type=int, default=512)
    p.add_argument("--tol", type=float, default=1e-11)
    p.add_argument("--max-iter", type=int, default=50)
    _common(p, "dress.csv")

    p = sub.add_parser("uehling", help="vacuum polarisation multipliers B, f, F")
    p.add_argument("--alpha", type=float, default=0.02)
    p.add_argument("--lambda", dest="lam", type=float, default=1e3)
    p.add_argument("--jmax", type=int, default=1)
    p.add_argument("--kmax", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-6)
    _common(p, "uehling.csv")

    p = sub.add_parser("renorm", help="charge renormalisation table")
    p.add_argument("--alpha", default="0.02", help="comma separated list")
    p.add_argument("--lambda", dest="lam", default="1e3", help="comma separated list")
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--Z", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--jmax", type=int, default=1)
    _common(p, "renorm.csv")

    p = sub.add_parser("scf-run", help="Picard iteration of the F1 scheme")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--lambda", dest="lam", type=float, default=1e3)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--nu-profile", default="gaussian:1:1")
    p.add_argument("--order", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--grid-n", type=int, default=6)
    p.add_argument("--extent", type=float, default=6.0)
    p.add_argument("--nquad", type=int, default=64)
    _common(p, "scf.jsonl")

    p = sub.add_parser("nrhf", help="screened nonrelativistic Hartree-Fock")
    p.add_argument("--Z", type=float, default=1.0)
    p.add_argument("--M", type=float, default=1.0)
    p.add_argument("--a", type=float, default=None)
    p.add_argument("--from-renorm", default=None, help="uehling JSON providing f0")
    p.add_argument("--basis", default="0.02,2.2,14")
    p.add_argument("--damping", type=float, default=0.3)
    p.add_argument("--tol", type=float, default=1e-8)
    _common(p, "nrhf.json")

    p = sub.add_parser("furry-check", help="trace and grading checks of Dirac words")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-len", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1e3)
    _common(p, "furry.json")

    p = sub.add_parser("inequalities", help="Kato, Hardy, Sobolev and exchange inequality report")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--kernels", type=int, default=20)
    p.add_argument("--grid-n", type=int, default=48)
    p.add_argument("--extent", type=float, default=24.0)
    _common(p, "inequalities.json")
    return parser


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys use flag names without dashes."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"bad config line: {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser, sub, argv, cfg: dict):
    """Parse argv with config values as defaults so that explicit flags win."""
    actions = {a.dest: a for a in sub._actions}
    aliases = {"lambda": "lam"}
    defaults = {}
    for k, v in cfg.items():
        dest = aliases.get(k, k)
        if dest not in actions:
            raise UsageError(f"unknown config key {k!r}")
        act = actions[dest]
        defaults[dest] = act.type(v) if act.type is not None and v != "None" else (None if v == "None" else v)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    t0 = time.perf_counter()
    try:
        manifest_cfg = {}
        if argv and argv[0] == "--from-manifest":
            if len(argv) < 2:
                raise UsageError("--from-manifest needs a path")
            command, manifest_cfg = _manifest_config(argv[1])
            argv = [command] + argv[2:]
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = dict(manifest_cfg)
        if args.config:
            cfg.update(read_config(args.config))
        if cfg:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            args = _apply_config(parser, sub, argv, cfg)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be positive")
        result = _COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(str(e) + "\n")
        return 1
    except NumericalError as e:
        sys.stderr.write(f"numerical failure: {type(e).__name__}: {e}\n")
        return 2
    except (ValueError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("threads", "config", "from_manifest")}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": "bdfqed",
        "version": __version__,
        "command": args.command,
        "config": config,
        "threads": args.threads,
        "wall_time_s": time.perf_counter() - t0,
        "result": result,
    }
    Path(str(args.out) + ".manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return 0


def _manifest_config(path) -> tuple[str, dict]:
    """Command name and resolved settings recorded in a run manifest."""
    try:
        m = json.loads(Path(path).read_text())
        return m["command"], {k: str(v) for k, v in m["config"].items() if k not in ("command", "from_manifest")}
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read manifest {path}: {e}") from e


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
