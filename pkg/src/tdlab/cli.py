"""tdlab command line: solve, run, bounds, mixing, gen.

Exit status is 0 on success, 1 for invalid input and 2 when a computation
fails. Relative output paths resolve against $TDLAB_OUTPUT_DIR (default: the
working directory).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from tdlab.algos import default_radius
from tdlab.bounds import (
    c_big_forms,
    check_td_admissible,
    report,
    theorem1_constants,
    theorem2_constants,
    theorem3_constants,
)
from tdlab.chain import mixing_profile
from tdlab.errors import ComputationError, InvalidSpec, TDLabError, ValidationError
from tdlab.geometry import build_system
from tdlab.harness import (
    ExperimentSpec,
    apply_overrides,
    build_problem,
    default_output_dir,
    example_spec,
    run_experiment,
    td0_steps,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise InvalidSpec(f"{path}: {exc.strerror}") from exc


def _problem_of(data: dict):
    """Accept a full experiment spec, a bare problem block, or an MRP with inline features."""
    if "problem" in data:
        return data["problem"], float(data.get("discount", 0.9))
    if "kind" in data:
        return data, float(data.get("discount", 0.9))
    if "transition" in data:
        if "features" not in data:
            raise InvalidSpec("an inline chain needs a 'features' entry")
        mrp = {k: v for k, v in data.items() if k != "features"}
        return {"kind": "files", "mrp": mrp, "features": data["features"]}, float(data.get("discount", 0.9))
    raise InvalidSpec("spec needs a 'problem' block, a problem 'kind', or an inline 'transition'")


def _resolve_output(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else default_output_dir() / path


def _emit_json(payload: dict, output) -> None:
    text = json.dumps(payload, indent=2, allow_nan=True) + "\n"
    if output is None:
        sys.stdout.write(text)
        return
    out = _resolve_output(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


def _load(args) -> dict:
    return apply_overrides(_read_json(args.spec), args.override)


def cmd_solve(args) -> int:
    problem, beta = _problem_of(_load(args))
    mrp, features = build_problem(problem, beta)
    system = build_system(mrp, features)
    _emit_json({
        "theta_star": system.theta_star.tolist(),
        "v_pi": system.v_pi.tolist(),
        "mu": system.mu,
        "A": system.a_matrix.tolist(),
        "b": system.b_vector.tolist(),
        "psi": system.psi.tolist(),
        "fixed_point_residual": system.fixed_point_residual,
        "warnings": list(system.warnings),
    }, args.output)
    return EXIT_OK


def cmd_run(args) -> int:
    data = _load(args)
    if args.workers is not None:
        data["workers"] = args.workers
    spec = ExperimentSpec.from_dict(data)
    output = args.output or spec.output_path or (Path(args.spec).stem + ".csv")
    spec.output_path = str(_resolve_output(output))
    if spec.dump_runs:
        spec.dump_runs = str(_resolve_output(spec.dump_runs))
    Path(spec.output_path).parent.mkdir(parents=True, exist_ok=True)
    trace = run_experiment(spec)
    for name in trace.algorithms:
        if trace.diverged[name]:
            print(f"warning: {len(trace.diverged[name])}/{trace.n_runs} {name} runs diverged", file=sys.stderr)
    if any(len(trace.diverged[name]) == trace.n_runs for name in trace.algorithms):
        print("error: every run of at least one algorithm diverged", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _bounds_report(spec: ExperimentSpec) -> dict:
    mrp, features = build_problem(spec.problem, spec.discount)
    system = build_system(mrp, features)
    profile = mixing_profile(mrp, spec.truncation, features=features)
    beta, mu, d = mrp.discount, system.mu, features.d
    b_s0 = float(profile.b_prime_per_state[spec.start_state])
    star = float(np.linalg.norm(system.theta_star))
    c_thm, c_prop = c_big_forms(d, b_s0, 0.0, star, beta)
    out = {
        "mu": mu,
        "beta": beta,
        "d": d,
        "theta_star_norm": star,
        "mixing": {"rho": profile.rho, "c_geo": profile.c_geo, "b_start": b_s0,
                   "b_uniform": profile.b_prime_uniform, "start_state": spec.start_state},
        "c_big": {"theorem": c_thm, "alternate": c_prop},
        "algorithms": {},
    }
    cps = spec.resolved_checkpoints()
    for algo in spec.algorithms:
        entry: dict = {}
        if algo.name == "td0":
            c0, c = td0_steps(algo, mu, beta)
            adm = check_td_admissible(mu, beta, c0, c)
            entry.update(c0=c0, c=c, admissible=adm.admissible,
                         step_bound=adm.step_bound, step_margin=adm.step_margin,
                         rate_product=adm.rate_product, rate_margin=adm.rate_margin,
                         failures=adm.failures())
            if adm.admissible:
                consts = theorem1_constants(mu, beta, c0, c, d, b_s0, 0.0, star, spec.delta,
                                            initial_error=star, b_uniform=profile.b_prime_uniform)
                entry["constants"] = report(consts)
                entry["curve"] = [[n, float(consts.k1(n)), float(consts.expectation_bound(n)),
                                   float(consts.probability_bound(n))] for n in cps]
                entry["curve_columns"] = ["n", "k1", "expectation_bound", "probability_bound"]
        elif algo.name == "td0_avg":
            if algo.c0 is None or algo.c is None or algo.alpha is None:
                raise InvalidSpec("td0_avg needs c0, c and alpha")
            consts = theorem2_constants(mu, beta, algo.c0, algo.c, algo.alpha, d, profile.b_prime_uniform,
                                        star, c_thm, spec.delta)
            entry["constants"] = report(consts)
            grid = [n for n in cps if n > consts.n0]
            entry["curve"] = [[n, float(consts.k1_ia(n)), float(consts.expectation_bound(n)),
                               float(consts.probability_bound(n))] for n in grid]
            entry["curve_columns"] = ["n", "k1_ia", "expectation_bound", "probability_bound"]
        else:
            if algo.gamma is None or algo.epoch_length is None:
                raise InvalidSpec("ctd needs gamma and epoch_length")
            radius = default_radius(mrp, mu) if algo.radius_h is None else algo.radius_h
            consts = theorem3_constants(mu, beta, algo.gamma, algo.epoch_length, d, radius, profile.rho)
            entry["constants"] = report(consts)
            entry["admissible"] = consts.admissible
            entry["decay_factor"] = consts.decay_factor
        out["algorithms"][algo.name] = entry
    return out


def cmd_bounds(args) -> int:
    spec = ExperimentSpec.from_dict(_load(args))
    _emit_json(_bounds_report(spec), args.output)
    return EXIT_OK


def cmd_mixing(args) -> int:
    data = _load(args)
    problem, beta = _problem_of(data)
    mrp, features = build_problem(problem, beta)
    truncation = args.truncation if args.truncation is not None else int(data.get("truncation", 200))
    tabular = mixing_profile(mrp, truncation)
    featured = mixing_profile(mrp, truncation, features=features)
    _emit_json({
        "rho": tabular.rho,
        "c_geo": tabular.c_geo,
        "diagonalizable": tabular.diagonalizable,
        "truncation_horizon": truncation,
        "b_prime_per_state": tabular.b_prime_per_state.tolist(),
        "tail_bound": tabular.tail_bound,
        "features": {
            "b_prime_per_state": featured.b_prime_per_state.tolist(),
            "b_prime_uniform": featured.b_prime_uniform,
            "tail_bound": featured.tail_bound,
        },
    }, args.output)
    return EXIT_OK


def cmd_gen(args) -> int:
    _emit_json(example_spec(args.example), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tdlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, csv=False):
        p.add_argument("spec", help="JSON spec file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a spec field before validation; dotted keys reach nested fields")
        p.add_argument("--output", "-o", help="output file (default: stdout)" if not csv else "CSV output file")

    common(sub.add_parser("solve", help="exact projected fixed point theta*, V, mu, A, b"))
    p = sub.add_parser("run", help="run the experiment and write the aggregated CSV trace")
    common(p, csv=True)
    p.add_argument("--workers", type=int, help="parallel worker threads")
    common(sub.add_parser("bounds", help="bound constants and step-size admissibility"))
    p = sub.add_parser("mixing", help="mixing rate, c_geo and B'(s)")
    common(p)
    p.add_argument("--truncation", type=int, help="truncation horizon T (default 200)")
    p = sub.add_parser("gen", help="emit a ready-to-run example spec")
    p.add_argument("example", choices=["example1", "example2"])
    p.add_argument("--output", "-o")
    return parser


COMMANDS = {"solve": cmd_solve, "run": cmd_run, "bounds": cmd_bounds, "mixing": cmd_mixing, "gen": cmd_gen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ComputationError, TDLabError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
