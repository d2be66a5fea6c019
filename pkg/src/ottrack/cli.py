"""Command-line front end.

Exit codes: 0 success, 2 infeasible or diagnosed domain failure, 64 usage
error, 70 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .benamou_brenier import (
    SolverParams,
    bb_solve,
    extract_velocity,
    geodesic_w_profile,
    grid_measure,
    intermediate_density,
)
from .discrete_ot import DiscreteMeasure, solve_plan, wasserstein
from .errors import NotConverged, OTTrackError
from .gaussian_ot import displacement_interpolate, gaussian_brenier_map, gaussian_wasserstein
from .liouville import (
    VectorFieldSpec,
    duffing_dataset,
    path_kinetic_energy,
    propagate,
    uniform_box_ensemble,
)
from .lti_feedback import LtiSystem, check_feasibility, synthesize
from .measures import GaussianDensity, grid_from_particles
from .refine import (
    LinearGaussianModel,
    predict_output_gaussian,
    refine_empirical,
    refine_sequence,
    refinement_path,
)

EXIT_OK = 0
EXIT_DOMAIN = 2
EXIT_USAGE = 64
EXIT_INTERNAL = 70

log = logging.getLogger("ottrack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")

    def add_argument(self, *args, **kwargs):
        # argparse only formats help for actions with text; give defaults a slot
        default = kwargs.get("default")
        if not kwargs.get("help") and default is not None and default is not False:
            kwargs["help"] = "(default: %(default)s)"
        return super().add_argument(*args, **kwargs)


def g12(x: float) -> str:
    return f"{x:.12g}"


def _dump(doc) -> str:
    return json.dumps(doc)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_wasserstein(args) -> int:
    src = DiscreteMeasure.from_particles(io.read_particles(args.src))
    tgt = DiscreteMeasure.from_particles(io.read_particles(args.tgt))
    plan = solve_plan(src, tgt)
    print(f"W={g12(math.sqrt(max(plan.cost, 0.0)))}")
    if args.plan:
        i, j = np.nonzero(plan.coupling)
        io.write_table(args.plan, ["i", "j", "mass"], zip(i.tolist(), j.tolist(), plan.coupling[i, j]))
    return EXIT_OK


def cmd_gauss_map(args) -> int:
    src, tgt = io.read_gaussian(args.src), io.read_gaussian(args.tgt)
    print(_dump(io.affine_to_dict(gaussian_brenier_map(src, tgt))))
    if args.s is not None:
        print(_dump(io.gaussian_to_dict(displacement_interpolate(src, tgt, args.s))))
    return EXIT_OK


def cmd_interpolate(args) -> int:
    src, tgt = io.read_gaussian(args.src), io.read_gaussian(args.tgt)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    out = io.ensure_dir(args.out)
    rows = []
    for i, s in enumerate(np.linspace(0.0, 1.0, args.steps + 1)):
        g = displacement_interpolate(src, tgt, float(s))
        io.write_gaussian(out / f"gauss_{i:03d}.json", g)
        rows.append((float(s), gaussian_wasserstein(src, g), gaussian_wasserstein(g, tgt)))
    io.write_table(out / "interpolation.csv", ["s", "W_from_src", "W_to_tgt"], rows)
    print(f"wrote {len(rows)} Gaussians to {out}")
    return EXIT_OK


def _read_systems(path):
    doc = io._read_json(path)
    docs = doc if isinstance(doc, list) else [doc]
    try:
        systems = [LtiSystem(d["A"], d["B"]) for d in docs]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{path}: system JSON needs 'A' and 'B' ({exc})") from None
    return systems[0] if not isinstance(doc, list) else systems


def cmd_feedback(args) -> int:
    systems = _read_systems(args.system)
    pdfs = [io.read_gaussian(p) for p in args.pdfs]
    if len(pdfs) < 2:
        raise UsageError("need at least two PDFs")
    horizons = len(pdfs) - 1
    if isinstance(systems, LtiSystem):
        systems = [systems] * horizons
    if len(systems) != horizons:
        raise UsageError(f"{len(systems)} systems for {horizons} horizons")
    free_pair = None
    if args.free_pair:
        doc = io._read_json(args.free_pair)
        free_pair = (np.asarray(doc["R"], dtype=float), np.asarray(doc["r"], dtype=float))
    table = []
    ok = True
    for j, sys_j in enumerate(systems):
        rep = check_feasibility(sys_j, pdfs[j], pdfs[j + 1])
        table.append((j, rep))
        if rep.feasible:
            law = synthesize(sys_j, pdfs[j], pdfs[j + 1], free_pair)
            print(_dump({"horizon": j, "K": law.k_mat.tolist(), "kappa": law.kappa.tolist()}))
        else:
            ok = False
    print("horizon,feasible,residual_mat,residual_vec")
    for j, rep in table:
        print(f"{j},{str(rep.feasible).lower()},{g12(rep.residual_mat)},{g12(rep.residual_vec)}")
    return EXIT_OK if ok else EXIT_DOMAIN


def _params_from(args) -> SolverParams:
    return SolverParams(
        step=args.step,
        tol=args.tol,
        max_iter=args.max_iter,
        raise_on_failure=False,
    )


def _write_bb_outputs(out: Path, sol, lo) -> None:
    T = sol.field.time_steps
    for n in range(T + 1):
        s = n / T
        io.write_grid(out / f"slice_{n:03d}.json", intermediate_density(sol, s))
        v, _ = extract_velocity(sol, s)
        shape = v.shape[:-1]
        idx = np.indices(shape).reshape(len(shape), -1).T
        header = [f"i{k + 1}" for k in range(len(shape))] + [f"v{k + 1}" for k in range(len(shape))]
        rows = (list(map(int, ix)) + [float(c) for c in vel] for ix, vel in zip(idx, v.reshape(-1, len(shape))))
        io.write_table(out / f"velocity_{n:03d}.csv", header, rows)


def _bb_summary(sol) -> dict:
    return {
        "energy": sol.energy,
        "W": math.sqrt(max(sol.energy, 0.0)),
        "iterations": sol.iterations,
        "continuity_residual": sol.continuity_residual,
        "converged": sol.converged,
    }


def cmd_bb_solve(args) -> int:
    src, tgt = io.read_grid(args.src), io.read_grid(args.tgt)
    sol = bb_solve(src, tgt, args.time_steps, _params_from(args))
    out = io.ensure_dir(args.out)
    _write_bb_outputs(out, sol, src.lo)
    io.write_json(out / "summary.json", _bb_summary(sol))
    print(f"energy={g12(sol.energy)} W={g12(math.sqrt(max(sol.energy, 0.0)))} iterations={sol.iterations} converged={sol.converged}")
    return EXIT_OK if sol.converged else EXIT_DOMAIN


def _parse_floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"not a comma separated list of numbers: {text!r}") from None


def _parse_times(text: str) -> np.ndarray:
    """``start:step:stop`` (inclusive) or a comma separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError("--times needs start:step:stop")
        a, h, b = (float(p) for p in parts)
        if h <= 0:
            raise UsageError("--times step must be positive")
        n = int(math.floor((b - a) / h + 1e-9))
        return a + h * np.arange(n + 1)
    return np.asarray(_parse_floats(text))


def _field_from(args) -> VectorFieldSpec:
    p = _parse_floats(args.params)
    if args.field == "duffing":
        if len(p) != 3:
            raise UsageError("duffing needs --params alpha,beta,delta")
        return VectorFieldSpec.duffing(*p)
    # affine: d*d matrix entries (row-major) then d offsets
    d = int(round((-1 + math.sqrt(1 + 4 * len(p))) / 2))
    if d * d + d != len(p) or d < 1:
        raise UsageError("affine needs --params with d*d matrix entries then d offsets")
    return VectorFieldSpec.affine(np.reshape(p[: d * d], (d, d)), p[d * d :])


def _init_from(args, dim):
    if args.init.startswith("uniform:"):
        lo, hi = _parse_floats(args.init.split(":", 1)[1])
        return uniform_box_ensemble(args.n, [lo] * dim, [hi] * dim, args.seed)
    if args.init.startswith("csv:"):
        return io.read_particles(args.init.split(":", 1)[1])
    raise UsageError("--init must be uniform:lo,hi or csv:path")


def cmd_propagate(args) -> int:
    f = _field_from(args)
    times = _parse_times(args.times)
    if times.size == 0 or times[0] <= args.t0 or np.any(np.diff(times) <= 0):
        raise UsageError("--times must be increasing and after --t0")
    ens = _init_from(args, f.dim)
    out = io.ensure_dir(args.out)
    snaps = {}
    prev = args.t0
    for j, t in enumerate(times, start=1):
        ens = propagate(f, ens, prev, float(t))
        io.write_particles(out / f"eta_{j:02d}.csv", ens)
        snaps[float(t)] = ens
        prev = float(t)
    print(f"wrote {times.size} snapshots to {out}")
    if args.kinetic:
        t0, t1 = args.kinetic
        start = _init_from(args, f.dim)
        if t0 > args.t0:
            start = propagate(f, start, args.t0, t0)
        print(f"kinetic={g12(path_kinetic_energy(f, start, t0, t1))}")
    return EXIT_OK


def _read_model(path) -> LinearGaussianModel:
    from .measures import GaussianDensity

    doc = io._read_json(path)
    try:
        return LinearGaussianModel(doc["A"], doc["C"], GaussianDensity(doc["mean0"], doc["P0"]))
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{path}: model JSON needs A, C, mean0, P0 ({exc})") from None


def _refine_rows(truth, model, instants, samples):
    rows = []
    for j in instants:
        pm = predict_output_gaussian(model, j)
        for s in np.linspace(0.0, 1.0, samples):
            g = refinement_path(truth, model, j, float(s))
            rows.append([j, float(s)] + g.mean.tolist() + g.cov.ravel().tolist() + [gaussian_wasserstein(pm, g)])
    return rows


def _refine_header(p):
    return (
        ["j", "s"]
        + [f"mean{k + 1}" for k in range(p)]
        + [f"cov{a + 1}{b + 1}" for a in range(p) for b in range(p)]
        + ["W_from_model"]
    )


def cmd_refine(args) -> int:
    truth, model = _read_model(args.truth), _read_model(args.model)
    out = io.ensure_dir(args.out)
    maps = refine_sequence(truth, model, args.j, chained=args.chained)
    for r in maps:
        doc = io.affine_to_dict(r.correction)
        doc["j"] = r.instant
        io.write_json(out / f"correction_j{r.instant}.json", doc)
    rows = _refine_rows(truth, model, args.j, args.path_samples)
    io.write_table(out / "refinement_path.csv", _refine_header(model.output_dim), rows)
    print(f"wrote {len(maps)} corrections and {len(rows)} path rows to {out}")
    return EXIT_OK


def cmd_refine_empirical(args) -> int:
    pred, meas = io.read_particles(args.pred), io.read_particles(args.meas)
    r = refine_empirical(pred, meas)
    moved = r.correct(pred.points)
    d = pred.dim
    rows = (list(p) + list(q) for p, q in zip(pred.points, moved))
    io.write_table(args.out, [f"x{k + 1}" for k in range(d)] + [f"y{k + 1}" for k in range(d)], rows)
    m_pred = DiscreteMeasure.from_particles(pred)
    m_meas = DiscreteMeasure.from_particles(meas)
    before = wasserstein(m_pred, m_meas)
    after = wasserstein(DiscreteMeasure(moved, m_pred.weights), m_meas)
    print(f"W_before={g12(before)} W_after={g12(after)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------


def _check(name, passed, value, tolerance) -> dict:
    return {"name": name, "pass": bool(passed), "value": value, "tolerance": tolerance}


def reproduce_refine_linear(out: Path) -> list:
    init = GaussianDensity([1.0, 3.0], [[10.0, 6.0], [6.0, 7.0]])
    truth = LinearGaussianModel([[0.4, -0.1], [2.0, 0.6]], [[-1.0, 0.03], [-0.2, 0.8]], init)
    model = LinearGaussianModel([[0.2, -0.7], [-0.7, 0.1]], np.eye(2), init)
    instants = [1, 2, 3]
    rows = _refine_rows(truth, model, instants, 11)
    io.write_table(out / "refinement_path.csv", _refine_header(2), rows)
    checks = []
    for r in refine_sequence(truth, model, instants):
        j = r.instant
        doc = io.affine_to_dict(r.correction)
        doc["j"] = j
        io.write_json(out / f"correction_j{j}.json", doc)
        pm, pt = predict_output_gaussian(model, j), predict_output_gaussian(truth, j)
        w = gaussian_wasserstein(pm, pt)
        dev = max(abs(row[-1] - row[1] * w) for row in rows if row[0] == j)
        checks.append(_check(f"W linear in s, j={j}", dev <= 1e-8 * w, dev / w, 1e-8))
        pushed = r.correction.push(pm)
        err = float(np.linalg.norm(pushed.cov - pt.cov) / np.linalg.norm(pt.cov))
        checks.append(_check(f"correction pushes prediction onto truth, j={j}", err <= 1e-8, err, 1e-8))
    return checks


def reproduce_duffing(out: Path, n: int, seed: int, grid: int, box: float, time_steps: int) -> list:
    f = VectorFieldSpec.duffing(1.0, -1.0, 0.5)
    times = 0.5 * np.arange(1, 11)
    snaps = duffing_dataset(n, seed, times)
    for j, e in enumerate(snaps, start=1):
        io.write_particles(out / f"eta_{j:02d}.csv", e)
    checks = []
    factor = snaps[0].density_values / (1.0 / 16.0)
    dev = float(np.max(np.abs(factor - math.exp(0.25))))
    checks.append(_check("Liouville factor exp(0.25) on first horizon", dev <= 1e-9, dev, 1e-9))
    lo, hi = [-box, -box], [box, box]
    rows = []
    for i, k in ((1, 2), (8, 9)):
        ga = grid_from_particles(snaps[i - 1], lo, hi, [grid, grid])
        gb = grid_from_particles(snaps[k - 1], lo, hi, [grid, grid])
        sol = bb_solve(ga, gb, time_steps, SolverParams(raise_on_failure=False))
        dt = times[k - 1] - times[i - 1]
        action = path_kinetic_energy(f, snaps[i - 1], times[i - 1], times[k - 1])
        bb_phys = sol.energy / dt
        hdir = io.ensure_dir(out / f"horizon_{i}_{k}")
        for q in range(0, time_steps + 1, max(1, time_steps // 4)):
            io.write_grid(hdir / f"slice_{q:03d}.json", intermediate_density(sol, q / time_steps))
        prof = geodesic_w_profile(sol, ga, samples=11)
        slices = [intermediate_density(sol, s) for s, _ in prof]
        pair = [0.0] + [
            wasserstein(grid_measure(slices[q - 1]), grid_measure(slices[q])) for q in range(1, len(slices))
        ]
        io.write_table(
            hdir / "w_profile.csv",
            ["s", "W_from_start", "W_step"],
            [(s, w, p) for (s, w), p in zip(prof, pair)],
        )
        io.write_json(hdir / "summary.json", _bb_summary(sol))
        rows.append((i, k, float(dt), sol.energy, bb_phys, action, bb_phys / action, sol.converged))
        checks.append(_check(f"BB converged [t{i}, t{k})", sol.converged, sol.continuity_residual, 1e-3))
        checks.append(
            _check(f"bb_energy/dt <= 0.9 duffing action [t{i}, t{k})", bb_phys <= 0.9 * action, bb_phys / action, 0.9)
        )
    io.write_table(
        out / "transport_comparison.csv",
        ["i", "k", "dt", "bb_energy", "bb_energy_per_dt", "duffing_action", "ratio", "converged"],
        [r[:7] + (str(r[7]).lower(),) for r in rows],
    )
    io.write_json(
        out / "summary.json",
        {
            "bb_energy": rows[0][3],
            "bb_energy_per_dt": rows[0][4],
            "duffing_action": rows[0][5],
            "late_bb_energy_per_dt": rows[1][4],
            "late_duffing_action": rows[1][5],
        },
    )
    return checks


def cmd_reproduce(args) -> int:
    out = io.ensure_dir(args.out)
    try:
        if args.experiment == "duffing":
            checks = reproduce_duffing(out, args.n, args.seed, args.grid, args.box, args.time_steps)
        else:
            checks = reproduce_refine_linear(out)
    except OTTrackError as exc:
        io.write_json(out / "report.json", {"experiment": args.experiment, "error": str(exc), "checks": []})
        raise
    io.write_json(out / "report.json", {"experiment": args.experiment, "checks": checks})
    for c in checks:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']} value={g12(c['value'])}")
    return EXIT_OK if all(c["pass"] for c in checks) else EXIT_DOMAIN


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _DefaultsFormatter(argparse.HelpFormatter):
    """Show the default of every option that has one, with or without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "(default" in text or action.default is None or action.default is False or action.default == argparse.SUPPRESS:
            return text
        if action.option_strings or action.nargs in (argparse.OPTIONAL, argparse.ZERO_OR_MORE):
            text += " (default: %(default)s)"
        return text.strip()


def build_parser() -> argparse.ArgumentParser:
    fmt = _DefaultsFormatter
    p = _Parser(prog="ottrack", description="Optimal transport tools for distributional tracking.", formatter_class=fmt)
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/FFT worker threads (default: all cores)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("wasserstein", help="W between two particle CSVs", formatter_class=fmt)
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--plan", help="write the optimal plan as CSV i,j,mass")
    s.set_defaults(func=cmd_wasserstein)

    s = sub.add_parser("gauss-map", help="Brenier map between two Gaussians", formatter_class=fmt)
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--s", type=float, default=None, help="also print the geodesic point at s in [0, 1]")
    s.set_defaults(func=cmd_gauss_map)

    s = sub.add_parser("interpolate", help="Gaussian displacement interpolation", formatter_class=fmt)
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--out", default="interpolation")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("feedback", help="affine feedback steering Gaussian PDFs", formatter_class=fmt)
    s.add_argument("--system", required=True, help='JSON {"A": .., "B": ..} or a list of them')
    s.add_argument("--pdfs", nargs="+", required=True)
    s.add_argument("--free-pair", help='JSON {"R": .., "r": ..}; default zero (minimum-norm gains)')
    s.set_defaults(func=cmd_feedback)

    d = SolverParams()
    s = sub.add_parser(
        "bb-solve",
        help="dynamic OT between two grid densities",
        formatter_class=fmt,
        description=(
            f"Douglas-Rachford with relaxation {d.relaxation}, step {d.step_scale} x max density, "
            f"density floor {d.floor} of max, energy window {d.energy_window} iterations with "
            f"relative tolerance {d.energy_tol}; linear-in-s density and zero momentum start; "
            "zero-flux walls."
        ),
    )
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--time-steps", type=int, default=16)
    s.add_argument("--tol", type=float, default=d.tol, help="relative continuity residual")
    s.add_argument("--max-iter", type=int, default=d.max_iter)
    s.add_argument("--step", type=float, default=None, help="splitting step (default: 0.05 x max density)")
    s.add_argument("--out", default="bb_out")
    s.set_defaults(func=cmd_bb_solve)

    s = sub.add_parser(
        "propagate",
        help="Liouville propagation along an ODE flow",
        formatter_class=fmt,
        description="Classical RK4 at 100 steps per unit time; Simpson rule for the divergence integral; PCG64 sampling.",
    )
    s.add_argument("--field", choices=["duffing", "affine"], default="duffing")
    s.add_argument("--params", default="1,-1,0.5", help="duffing: alpha,beta,delta; affine: matrix row-major then offset")
    s.add_argument("--init", default="uniform:-2,2", help="uniform:lo,hi or csv:path")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--t0", type=float, default=0.0)
    s.add_argument("--times", default="0.5:0.5:5.0", help="start:step:stop or a comma list")
    s.add_argument("--kinetic", nargs=2, type=float, metavar=("T0", "T1"), help="print the path kinetic energy")
    s.add_argument("--out", default="propagate_out")
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("refine", help="Brenier refinement of a linear Gaussian model", formatter_class=fmt)
    s.add_argument("--truth", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--j", type=int, nargs="+", default=[1, 2, 3])
    s.add_argument("--path-samples", type=int, default=11)
    s.add_argument("--chained", action="store_true", help="compose each correction with the previous one")
    s.add_argument("--out", default="refine_out")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("refine-empirical", help="sample-based output correction", formatter_class=fmt)
    s.add_argument("--pred", required=True)
    s.add_argument("--meas", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_refine_empirical)

    s = sub.add_parser("reproduce", help="rerun an experiment end to end", formatter_class=fmt)
    s.add_argument("experiment", choices=["duffing", "refine-linear"])
    s.add_argument("--out", default="reproduce_out")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--grid", type=int, default=64, help="cells per axis for the BB grids")
    s.add_argument("--box", type=float, default=4.0, help="BB grids cover [-box, box]^2")
    s.add_argument("--time-steps", type=int, default=16)
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, args.threads)):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"ottrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ottrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as exc:
        print(f"ottrack: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OTTrackError as exc:
        print(f"ottrack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"ottrack: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
