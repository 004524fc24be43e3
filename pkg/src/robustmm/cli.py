"""Command-line front end.

Commands: ``fit``, ``constants``, ``sweep``, ``influence``, ``asympt-var``,
``breakdown-bound`` and ``simulate``.  Tables go out as CSV with six
significant digits, reports as JSON with full precision.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from typing import TYPE_CHECKING, Any

import numpy as np

from robustmm.asymptotics import (
    EllipticalModel,
    InfluenceInput,
    asymptotic_covariance,
    breakdown_bound,
    compute_constants,
    influence_function,
    kappa_general_position,
    max_bdp_r0,
    ml_student_constants,
)
from robustmm.errors import (
    DegenerateResiduals,
    NoDescent,
    NonPositiveGamma1,
    PreconditionViolated,
    RobustMMError,
)
from robustmm.estimators import Dataset, MMConfig, SConfig, mm_fit
from robustmm.loss import Biweight, RadialLaw, consistency_b0, tune_c0
from robustmm.sim import (
    Contamination,
    Design,
    SimConfig,
    empirical_breakdown,
    generate_dataset,
    monte_carlo_variance,
    sensitivity_curve,
)
from robustmm.structures import structure_from_descriptor

if TYPE_CHECKING:
    from collections.abc import Sequence

log = logging.getLogger("robustmm")

EXIT_PARSE = 2
EXIT_DEGENERATE = 3
EXIT_NOT_CONVERGED = 4
EXIT_GAMMA1 = 5
EXIT_PRECONDITION = 6


class ParseError(ValueError):
    pass


def _g6(x: float) -> str:
    return f"{x:.6g}"


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text: str, output: str | None) -> None:
    if output:
        with open(output, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_g6(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def read_long_csv(path: str) -> Dataset:
    """Read ``subject,t,y,x1..xq`` rows into a balanced :class:`Dataset`."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = [r for r in reader if r and any(c.strip() for c in r)]
    except (OSError, StopIteration) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if header[:3] != ["subject", "t", "y"]:
        raise ParseError("header must start with subject,t,y")
    xcols = header[3:]
    if not xcols or xcols != [f"x{j + 1}" for j in range(len(xcols))]:
        raise ParseError("design columns must be named x1..xq")
    q = len(xcols)
    subjects: dict[str, list[tuple[int, float, list[float]]]] = {}
    order: list[str] = []
    last = None
    for line, r in enumerate(rows, start=2):
        if len(r) != 3 + q:
            raise ParseError(f"line {line}: expected {3 + q} fields, got {len(r)}")
        sid = r[0].strip()
        if sid != last:
            if sid in subjects:
                raise ParseError(f"line {line}: rows of subject {sid!r} are not contiguous")
            subjects[sid] = []
            order.append(sid)
            last = sid
        try:
            t = int(r[1])
            vals = [float(v) for v in r[2:]]
        except ValueError as exc:
            raise ParseError(f"line {line}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"line {line}: non-finite value")
        subjects[sid].append((t, vals[0], vals[1:]))
    if not order:
        raise ParseError("no data rows")
    k = len(subjects[order[0]])
    y = np.empty((len(order), k))
    X = np.empty((len(order), k, q))
    for i, sid in enumerate(order):
        recs = sorted(subjects[sid], key=lambda rec: rec[0])
        if [rec[0] for rec in recs] != list(range(1, k + 1)):
            raise ParseError(f"subject {sid!r} does not have t = 1..{k} exactly once")
        y[i] = [rec[1] for rec in recs]
        X[i] = [rec[2] for rec in recs]
    return Dataset(y, X)


def write_long_csv(data: Dataset, path: str) -> None:
    """Write ``data`` in the long format read by :func:`read_long_csv`, at full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "t", "y", *(f"x{j + 1}" for j in range(data.q))])
        for i in range(data.n):
            for t in range(data.k):
                w.writerow([i + 1, t + 1, repr(float(data.y[i, t])), *(repr(float(v)) for v in data.X[i, t])])


def _load_json(path_or_text: str) -> Any:
    try:
        if os.path.exists(path_or_text):
            with open(path_or_text) as fh:
                return json.load(fh)
        return json.loads(path_or_text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse JSON {path_or_text!r}: {exc}") from exc


def _threads(args) -> int:
    env = os.environ.get("ROBUSTMM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring ROBUSTMM_THREADS=%r", env)
    return max(1, getattr(args, "threads", 1) or 1)


def _resolve_cutoffs(c0: float | None, target_bdp: float | None, c1: float | None, k: int):
    if c0 is None:
        c0 = tune_c0(k, 0.5 if target_bdp is None else target_bdp)
    c1 = c0 if c1 is None else c1
    if c1 < c0:
        raise ParseError(f"c1={c1} must not be smaller than c0={c0}")
    return Biweight(c0), Biweight(c1)


def _add_cutoffs(p: argparse.ArgumentParser, with_c1: bool = True) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--c0", type=float, help="scale-loss cutoff")
    g.add_argument("--target-bdp", type=float, help="tune c0 to b0/sup rho0 = value (default 0.5)")
    if with_c1:
        p.add_argument("--c1", type=float, help="efficiency-loss cutoff (default c0)")


def _fast_s(args) -> SConfig:
    return SConfig(n_sub=args.n_sub, n_best=args.n_best, n_csteps=args.n_csteps, seed=args.seed)


def cmd_fit(args) -> int:
    data = read_long_csv(args.data)
    struct = structure_from_descriptor(_load_json(args.structure))
    if struct.k != data.k:
        raise ParseError(f"structure has k={struct.k}, data have k={data.k}")
    loss0, loss1 = _resolve_cutoffs(args.c0, args.target_bdp, args.c1, data.k)
    b0 = consistency_b0(loss0, data.k)
    config = MMConfig(tol=args.tol, max_iter=args.max_iter, s_config=_fast_s(args))
    try:
        fit = mm_fit(data, struct, loss0, loss1, config, b0=b0)
    except NoDescent as exc:
        _emit(_dump_json({"converged": False, "error": str(exc), "seed": args.seed}), args.output)
        return EXIT_NOT_CONVERGED
    report = fit.to_dict()
    report.update(
        {
            "n": data.n,
            "k": data.k,
            "q": data.q,
            "c0": loss0.c,
            "c1": loss1.c,
            "b0": b0,
            "structure": struct.descriptor,
            "rn_inequality": {
                "objective": fit.objective,
                "objective_initial": fit.objective_initial,
                "holds": fit.rn_check,
            },
        }
    )
    _emit(_dump_json(report), args.output)
    return 0 if fit.converged else EXIT_NOT_CONVERGED


def _constants_row(loss0, loss1, k, c_sigma, nu, weight):
    c = compute_constants(loss0, loss1, k, c_sigma)
    row = c.to_dict()
    if nu is not None:
        mm = compute_constants(loss0, loss1, k, law=RadialLaw.student(nu, k))
        lam_ml, s1_ml = ml_student_constants(nu, k, weight)
        row.update(
            {
                "nu": nu,
                "lambda_rel": mm.lam / lam_ml,
                "sigma1_rel": mm.sigma1 / s1_ml,
                "lambda_ml": lam_ml,
                "sigma1_ml": s1_ml,
            }
        )
    return row


def cmd_constants(args) -> int:
    loss0, loss1 = _resolve_cutoffs(args.c0, args.target_bdp, args.c1, args.k)
    row = _constants_row(loss0, loss1, args.k, args.c_sigma, args.nu, args.weight)
    if args.format == "json":
        _emit(_dump_json(row), args.output)
    else:
        keys = list(row)
        _emit(_csv_text(keys, [[float(row[k]) for k in keys]]), args.output)
    return 0


def cmd_sweep(args) -> int:
    loss0, _ = _resolve_cutoffs(args.c0, args.target_bdp, None, args.k)
    if args.c1_grid:
        start, stop, step = args.c1_grid
        grid = list(np.round(np.arange(start, stop + step / 2, step), 12))
    else:
        grid = args.c1 or [loss0.c]
    rows, flagged = [], False
    for c1 in grid:
        if c1 < loss0.c:
            raise ParseError(f"grid value {c1} is below c0={loss0.c:.6g}")
        try:
            row = _constants_row(loss0, Biweight(float(c1)), args.k, 1.0, args.nu, args.weight)
            row["flag"] = ""
        except NonPositiveGamma1:
            flagged = True
            row = {"c1": float(c1), "flag": "gamma1<=0"}
        rows.append(row)
    cols = ["c1", "lambda", "sigma1", "G1", "G2"]
    if args.nu is not None:
        cols += ["lambda_rel", "sigma1_rel"]
    if args.format == "json":
        minima = {}
        good = [r for r in rows if not r["flag"]]
        for name in cols[1:]:
            if good:
                best = min(good, key=lambda r: r[name])
                minima[name] = {"c1": best["c1"], "value": best[name]}
        text = _dump_json({"c0": loss0.c, "k": args.k, "nu": args.nu, "rows": rows, "minima": minima})
    else:
        table = [[float(r.get(c, math.nan)) for c in cols] + [r["flag"]] for r in rows]
        text = _csv_text([*cols, "flag"], table)
    _emit(text, args.output)
    return EXIT_GAMMA1 if flagged else 0


def _model_from_args(args):
    struct = structure_from_descriptor(_load_json(args.structure))
    theta = np.asarray(_load_json(args.theta), dtype=float)
    k = struct.k
    sigma = struct.evaluate(theta)
    if args.x0 is not None:
        X0 = np.asarray(_load_json(args.x0), dtype=float)
    else:
        X0 = np.eye(k)
    q = X0.shape[1]
    beta = np.zeros(q) if args.beta is None else np.asarray(_load_json(args.beta), dtype=float)
    if args.exx is not None:
        exx = np.asarray(_load_json(args.exx), dtype=float)
    else:
        # the contamination design doubles as a fixed design
        exx = X0.T @ np.linalg.solve(sigma, X0)
    model = EllipticalModel(struct, beta, theta, exx)
    loss0, loss1 = _resolve_cutoffs(args.c0, args.target_bdp, args.c1, k)
    consts = compute_constants(loss0, loss1, k, args.c_sigma)
    return model, consts, X0


def _matrix_out(name: str, value: np.ndarray, fmt: str, output: str | None, extra: dict) -> None:
    if fmt == "json":
        _emit(_dump_json({**extra, name: value.tolist()}), output)
        return
    mat = np.atleast_2d(value)
    cols = [f"c{j + 1}" for j in range(mat.shape[1])]
    _emit(_csv_text(cols, [[float(v) for v in row] for row in mat]), output)


def cmd_influence(args) -> int:
    model, consts, X0 = _model_from_args(args)
    z0 = np.asarray(_load_json(args.z0), dtype=float)
    out = influence_function(InfluenceInput(z0, X0, model, consts), args.target)
    _matrix_out("influence", out, args.format, args.output, {"target": args.target, "z0": z0.tolist()})
    return 0


def cmd_asympt_var(args) -> int:
    model, consts, _ = _model_from_args(args)
    out = asymptotic_covariance(model, consts, args.target)
    _matrix_out("covariance", out, args.format, args.output, {"target": args.target})
    return 0


def cmd_breakdown_bound(args) -> int:
    kappa = kappa_general_position(args.k, args.p)
    r0 = max_bdp_r0(args.n, kappa) if args.max else args.r0
    if r0 is None:
        raise ParseError("give --r0 or --max")
    bound = breakdown_bound(args.n, r0, kappa, args.eps_initial)
    report = {"n": args.n, "k": args.k, "p": args.p, "kappa": kappa, "r0": r0, "bound": bound}
    if args.format == "json":
        _emit(_dump_json(report), args.output)
    else:
        keys = list(report)
        _emit(_csv_text(keys, [[float(v) if isinstance(v, float) else v for v in report.values()]]), args.output)
    return 0


def _sim_config(spec: dict) -> tuple[SimConfig, Biweight, Biweight, MMConfig]:
    try:
        struct = structure_from_descriptor(spec["structure"])
        design_spec = spec.get("design", {"kind": "location"})
        matrix = design_spec.get("matrix")
        design = Design(
            kind=design_spec.get("kind", "location"),
            matrix=tuple(map(tuple, matrix)) if matrix is not None else None,
            q=design_spec.get("q"),
        )
        cont = spec.get("contamination")
        replications = int(spec.get("replications", 1))
        if replications < 1:
            raise ParseError("replications must be at least 1")
        cfg = SimConfig(
            struct=struct,
            beta=tuple(float(b) for b in spec["beta"]),
            theta=tuple(float(t) for t in spec["theta"]),
            n=int(spec["n"]),
            design=design,
            law=spec.get("law", "normal"),
            nu=spec.get("nu"),
            standardize=bool(spec.get("standardize", True)),
            replications=replications,
            seed=int(spec.get("seed", 0)),
            contamination=Contamination(cont["fraction"], tuple(cont["z"])) if cont else None,
        )
        loss0, loss1 = _resolve_cutoffs(spec.get("c0"), spec.get("target_bdp"), spec.get("c1"), cfg.k)
        fs = spec.get("fast_s", {})
        s_config = SConfig(
            n_sub=int(fs.get("n_sub", 500)),
            n_best=int(fs.get("n_best", 10)),
            n_csteps=int(fs.get("n_csteps", 2)),
            seed=int(fs.get("seed", cfg.seed)),
        )
        mm_config = MMConfig(tol=float(spec.get("tol", 1e-8)), s_config=s_config)
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid simulation config: {exc}") from exc
    return cfg, loss0, loss1, mm_config


def cmd_simulate(args) -> int:
    spec = _load_json(args.config)
    if not isinstance(spec, dict):
        raise ParseError("simulation config must be a JSON object")
    study = spec.get("study", "variance")
    cfg, loss0, loss1, mm_config = _sim_config(spec)
    threads = _threads(args)
    report: dict[str, Any] = {"study": study, "seed": cfg.seed, "c0": loss0.c, "c1": loss1.c}
    if study == "variance":
        if cfg.replications < 2:
            raise ParseError("a variance study needs at least two replications")
        mc = monte_carlo_variance(cfg, loss0, loss1, mm_config, threads=threads)
        report.update(mc.to_dict())
    elif study == "breakdown":
        runs = []
        for rep in range(cfg.replications):
            data = generate_dataset(cfg, rep)
            br = empirical_breakdown(
                data, cfg.struct, loss0, loss1, mm_config,
                pattern=spec.get("pattern", "explosion"), seed=cfg.seed + rep,
            )
            runs.append({"replication": rep, "fraction": br.fraction, "m": br.m, "bound": br.bound})
        report["runs"] = runs
        report["violations"] = sum(
            1 for r in runs if r["fraction"] is not None and r["fraction"] < r["bound"]
        )
    elif study == "sensitivity":
        data = generate_dataset(cfg, 0)
        try:
            y0 = spec["y0"]
            x0 = spec.get("x0", np.eye(cfg.k).tolist())
            h_grid = [float(h) for h in spec.get("h_grid", [j / cfg.n for j in (1, 2, 4, 8)])]
        except KeyError as exc:
            raise ParseError(f"sensitivity study needs {exc}") from exc
        sc = sensitivity_curve(data, cfg.struct, (y0, x0), h_grid, loss0, loss1, mm_config)
        report.update(
            {
                "h": sc.h.tolist(),
                "curves": {k: v.tolist() for k, v in sc.curves.items()},
                "extrapolated": {k: v.tolist() for k, v in sc.extrapolated.items()},
                "influence": {k: v.tolist() for k, v in sc.influence.items()},
            }
        )
    else:
        raise ParseError(f"unknown study {study!r}")
    _emit(_dump_json(report), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, fmt=True):
        p.add_argument("-o", "--output", help="write here instead of stdout")
        if fmt:
            p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("fit", help="S then MM fit of a long-format CSV")
    p.add_argument("data")
    p.add_argument("--structure", required=True, help="structure JSON file or literal")
    _add_cutoffs(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-sub", type=int, default=500)
    p.add_argument("--n-best", type=int, default=10)
    p.add_argument("--n-csteps", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--threads", type=int, default=1)
    common(p, fmt=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("constants", help="efficiency and robustness constants")
    p.add_argument("--k", type=int, required=True)
    _add_cutoffs(p)
    p.add_argument("--c-sigma", type=float, default=1.0)
    p.add_argument("--nu", type=float, help="also report Student-ML relative efficiencies")
    p.add_argument("--weight", choices=("standard", "printed"), default="standard")
    common(p)
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("sweep", help="constants over c1 values")
    p.add_argument("--k", type=int, required=True)
    _add_cutoffs(p, with_c1=False)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--c1", type=float, nargs="+")
    g.add_argument("--c1-grid", type=float, nargs=3, metavar=("START", "STOP", "STEP"))
    p.add_argument("--nu", type=float)
    p.add_argument("--weight", choices=("standard", "printed"), default="standard")
    common(p)
    p.set_defaults(func=cmd_sweep)

    for name, func, targets in (
        ("influence", cmd_influence, ("beta", "gamma", "theta", "covariance", "shape")),
        ("asympt-var", cmd_asympt_var, ("beta", "gamma", "theta", "covariance", "shape")),
    ):
        p = sub.add_parser(name)
        p.add_argument("--structure", required=True)
        p.add_argument("--theta", required=True, help="JSON list")
        p.add_argument("--beta", help="JSON list (default zeros)")
        p.add_argument("--x0", help="JSON k x q design (default identity)")
        p.add_argument("--exx", help="JSON q x q E[X'S^-1X] (default from --x0)")
        p.add_argument("--target", choices=targets, required=True)
        _add_cutoffs(p)
        p.add_argument("--c-sigma", type=float, default=1.0)
        if name == "influence":
            p.add_argument("--z0", required=True, help="JSON standardized point")
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("breakdown-bound")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--p", type=int, default=0)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--r0", type=float)
    g.add_argument("--max", action="store_true")
    p.add_argument("--eps-initial", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_breakdown_bound)

    p = sub.add_parser("simulate")
    p.add_argument("config", help="SimConfig JSON file or literal")
    p.add_argument("--threads", type=int, default=1)
    common(p, fmt=False)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ParseError as exc:
        log.error("%s", exc)
        return EXIT_PARSE
    except DegenerateResiduals as exc:
        log.error("degenerate data: %s", exc)
        return EXIT_DEGENERATE
    except PreconditionViolated as exc:
        log.error("%s", exc)
        return EXIT_PRECONDITION
    except NonPositiveGamma1 as exc:
        log.error("%s", exc)
        return EXIT_GAMMA1
    except RobustMMError as exc:
        log.error("%s", exc)
        return 1
    except (KeyError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
