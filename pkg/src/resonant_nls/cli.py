"""Command-line entry point: ``resonant-nls {solve,sweep,trace,verify}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import ContextTemplate, SweepSpec, run_sweep, trace_isoenergetic
from .fourier import cap_support, modulus_squared, star_norm
from .geometry import WindowError
from .io import (ConfigError, atomic_write, bundle_parts, context_from_config, dumps, load_json,
                 problem_parts, resolve_config, solution_to_bundle)
from .nonlinear import (Amplitude, NonContraction, apply_map, assemble_solution,
                        iterate_fixed_point, pde_residual, psi_from_projection, validate_regime)
from .operators import ModelError, op_norm_zero
from .perturbation import ContourError, SeriesDivergence

log = logging.getLogger("resonant_nls")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REGIME = 3
EXIT_NONCONVERGED = 4
EXIT_VERIFY = 5

IDEMPOTENCE_TOL = 1e-8
EIGENVALUE_RTOL = 1e-10


def _load_config(args, command: str) -> dict:
    raw = load_json(args.config)
    raw = dict(raw)
    prob = dict(raw.get("problem", {}))
    if args.branch is not None:
        prob["branch"] = args.branch
    if args.mode is not None:
        prob["mode"] = args.mode
    raw["problem"] = prob
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    return resolve_config(raw, command)


def _echo(cfg: dict, out: Path) -> None:
    text = dumps(cfg)
    atomic_write(out / "config.json", text)
    sys.stdout.write(text)


def _template(cfg: dict, point_method: str) -> ContextTemplate:
    prob = cfg["problem"]
    V, amp, sp, kw = problem_parts(prob)
    return ContextTemplate(prob["n"], prob["l"], V, amp, prob["window_radius"],
                           q=None if prob["q"] is None else tuple(prob["q"]),
                           branch=prob["branch"], mode=prob["mode"], set_params=sp,
                           extra=kw, point_method=point_method)


def cmd_solve(args) -> int:
    cfg = _load_config(args, "solve")
    ctx = context_from_config(cfg["problem"])
    out = Path(cfg["out"])
    _echo(cfg, out)
    report = validate_regime(ctx)
    if not report.passed:
        for c in report.failed():
            print(f"regime check failed: {c}", file=sys.stderr)
        if not args.force:
            return EXIT_REGIME
        print("continuing because of --force", file=sys.stderr)
    try:
        W, trace = iterate_fixed_point(ctx)
    except (NonContraction, SeriesDivergence) as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        tr = getattr(exc, "trace", None)
        if tr is not None:
            atomic_write(out / "trace.csv", tr.to_csv())
        return EXIT_NONCONVERGED
    sol = assemble_solution(W, ctx, trace)
    atomic_write(out / "solution.json", dumps(solution_to_bundle(sol, ctx)))
    atomic_write(out / "trace.csv", trace.to_csv())
    if not trace.converged:
        print(f"fixed-point iteration did not converge in {ctx.m_max} steps", file=sys.stderr)
        return EXIT_NONCONVERGED
    if not sol.residual <= ctx.residual_tol:
        print(f"residual {sol.residual:.3e} exceeds {ctx.residual_tol:.3e}", file=sys.stderr)
        return EXIT_NONCONVERGED
    print(f"lambda = {sol.lam!r}  residual = {sol.residual:.3e}  steps = {trace.m_final}",
          file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args, "sweep")
    sw = cfg["sweep"]
    out = Path(cfg["out"])
    _echo(cfg, out)
    try:
        spec = SweepSpec(sw["family"], list(sw["k_values"]), _template(cfg, sw["point_method"]),
                         seed=cfg["seed"], layer_position=sw["layer_position"], count=sw["count"],
                         h=sw["h"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    table = run_sweep(spec)
    atomic_write(out / "sweep.csv", table.to_csv())
    atomic_write(out / "sweep.json", dumps({"family": table.family, "k": table.k,
                                            "metric": table.metric, "fit_slope": table.slope,
                                            "pass": table.passed, "points": table.extra}))
    print(f"{table.family}: slope = {table.slope:.4g}  pass = {table.passed}", file=sys.stderr)
    return EXIT_OK if table.passed else EXIT_NONCONVERGED


def cmd_trace(args) -> int:
    cfg = _load_config(args, "trace")
    tr = cfg["trace"]
    out = Path(cfg["out"])
    _echo(cfg, out)
    try:
        curve = trace_isoenergetic(tr["lambda0"], _template(cfg, tr["point_method"]),
                                   step=tr["step"], max_points=tr["max_points"], seed=cfg["seed"],
                                   layer_position=tr["layer_position"], h=tr["h"],
                                   count=tr["count"], corrector_rtol=tr["corrector_rtol"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    atomic_write(out / "isocurve.csv", curve.to_csv())
    atomic_write(out / "isocurve.json", dumps({
        "lambda0": curve.lambda0, "branch": curve.branch, "boundary": curve.boundary,
        "max_model_deviation": curve.max_model_deviation,
        "points": [list(map(float, p)) for p in curve.points],
        "lambdas": curve.lambdas, "deviations": curve.deviations}))
    print(f"{len(curve.points)} points, max model deviation {curve.max_model_deviation:.3e}"
          f"{' (stopped at patch boundary)' if curve.boundary else ''}", file=sys.stderr)
    return EXIT_OK if curve.points else EXIT_NONCONVERGED


def verify_bundle(bundle: dict) -> list[tuple[str, bool, str]]:
    """Re-derive the stored invariants of a solution bundle from scratch.

    Returns ``(name, passed, detail)`` triples.
    """
    ctx, W, psi, lam, _ = bundle_parts(bundle)
    checks = []
    fresh_W, diag = apply_map(W, ctx)
    fp_tol = 10 * ctx.tol_fp

    stored = ctx.V
    if ctx.amp.sigma != 0:
        stored = ctx.V + modulus_squared(psi).scale(ctx.amp.sigma)
    stored, _ = cap_support(stored, ctx.cap)
    d_stored = star_norm(stored - W)
    d_fresh = star_norm(fresh_W - W)
    checks.append(("fixed-point defect", max(d_stored, d_fresh) <= fp_tol,
                   f"||V + sigma|psi|^2 - W||_* = {d_stored:.3e}, ||M W - W||_* = {d_fresh:.3e},"
                   f" limit {fp_tol:.3e}"))

    if len(psi):
        res = pde_residual(lam, psi, ctx)
    else:
        unit = psi_from_projection(diag["E"], ctx.j, 1.0, ctx.window)
        res = pde_residual(lam, unit, ctx.with_(amp=Amplitude(1.0, 0.0)))
    checks.append(("residual", bool(res <= ctx.residual_tol),
                   f"{res:.3e} (limit {ctx.residual_tol:.3e})"))

    gap = abs(diag["lambda"] - lam)
    checks.append(("eigenvalue", bool(gap <= EIGENVALUE_RTOL * max(abs(lam), 1.0)),
                   f"|lambda_fresh - lambda| = {gap:.3e}"))

    E = diag["E"].matrix
    idem = op_norm_zero(E @ E - E)
    checks.append(("projection idempotence", bool(idem <= IDEMPOTENCE_TOL),
                   f"||E^2 - E||_0 = {idem:.3e} (limit {IDEMPOTENCE_TOL:.1e})"))
    return checks


def cmd_verify(args) -> int:
    bundle = load_json(args.path)
    try:
        checks = verify_bundle(bundle)
    except (KeyError, TypeError, ValueError) as exc:
        print(f"verify failed: unreadable bundle ({exc})", file=sys.stderr)
        return EXIT_VERIFY
    bad = False
    for name, ok, detail in checks:
        print(f"{'ok    ' if ok else 'FAILED'} {name}: {detail}")
        bad |= not ok
    return EXIT_VERIFY if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resonant-nls",
                                description="Two-wave solutions of periodic nonlinear "
                                            "polyharmonic eigenproblems.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, metavar="PATH", help="JSON run config")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, metavar="N", help="seed (overrides config)")
        sp.add_argument("--force", action="store_true", help="run even if regime checks fail")
        sp.add_argument("--branch", choices=("plus", "minus"))
        sp.add_argument("--mode", choices=("resonant", "nonresonant"))

    common(sub.add_parser("solve", help="solve one configured problem"))
    common(sub.add_parser("sweep", help="run a parameter sweep"))
    common(sub.add_parser("trace", help="trace an isoenergetic curve"))
    v = sub.add_parser("verify", help="re-check a stored solution bundle")
    v.add_argument("path", metavar="PATH")
    return p


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "trace": cmd_trace, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ModelError, WindowError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContourError as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
