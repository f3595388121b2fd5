"""``plastree`` command line: theorem checks and desk-scale experiments."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .harness import ExperimentSpec, default_out_dir
from .plasticity import DEFAULT_SIGMA


def _int_list(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        out.append(2 ** int(part[2:]) if part.startswith("2^") else int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(p) for p in str(text).split(",") if p.strip()]


# flag name -> converter; config files use the same keys
_CONVERTERS = {
    "theta": _float_list,
    "sigma": float,
    "seed": int,
    "n": _int_list,
    "ranks": _int_list,
    "steps": int,
    "trials": int,
    "population": str,
    "out": str,
}


def _settings(args: argparse.Namespace) -> dict:
    values = {}
    if args.config:
        raw = harness.parse_config(Path(args.config).read_text())
        unknown = set(raw) - set(_CONVERTERS)
        if unknown:
            raise SystemExit(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = {k: _CONVERTERS[k](v) for k, v in raw.items()}
    for key in _CONVERTERS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _spec(values: dict, **defaults) -> ExperimentSpec:
    merged = {**defaults, **values}
    return ExperimentSpec(
        name=merged.get("name", "experiment"),
        population_file=merged.get("population"),
        sizes=merged.get("n", [2 ** k for k in range(10, 18)]),
        seed=merged.get("seed", 1),
        thetas=merged.get("theta", [0.25]),
        sigma=merged.get("sigma", DEFAULT_SIGMA),
        steps=merged.get("steps", 1),
        ranks=merged.get("ranks", [1, 8]),
        trials=merged.get("trials", 10 ** 6),
        out=merged.get("out"),
        detail=merged.get("detail", False),
    )


def _finish(checks, out_dir: Path, paths) -> int:
    for c in checks:
        print(c.line())
    for p in paths:
        print(f"wrote {p}")
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 0 if not failed else 1


def cmd_verify_theorems(args) -> int:
    v = _settings(args)
    spec = _spec(v)
    report = harness.verify_theorems(trials=spec.trials, seed=v.get("seed", 0),
                                     child_scale=args.child_scale)
    out = spec.out_dir
    paths = [report.write_csv(out)]
    if report.counterexamples:
        path = out / "counterexamples.json"
        path.write_text(json.dumps(report.counterexamples, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return _finish(report.checks, out, paths)


def cmd_scaling(args) -> int:
    spec = _spec(_settings(args), detail=args.detail)
    sink = [] if args.detail else None
    report = harness.scaling_experiment(spec, detail_sink=sink)
    paths = report.write_csv(spec.out_dir)
    if sink:
        paths.append(harness.write_detail_csv(sink, spec.out_dir))
    return _finish(report.checks, spec.out_dir, paths)


def cmd_distributed(args) -> int:
    spec = _spec(_settings(args), n=[2 ** 12])
    report = harness.distributed_experiment(spec, n=spec.sizes[0])
    checks = report.checks + harness.halving_checks(report)
    paths = report.write_csv(spec.out_dir)
    if report.diffs:
        path = spec.out_dir / "multiset_diff.json"
        path.write_text(json.dumps({str(k): v for k, v in report.diffs.items()}, indent=2,
                                   sort_keys=True) + "\n")
        paths.append(path)
    return _finish(checks, spec.out_dir, paths)


def cmd_compare_oracle(args) -> int:
    v = _settings(args)
    spec = _spec(v, n=[1000], theta=[0.25, 0.5])
    report = harness.compare_oracle(n=spec.sizes[0], seeds=[spec.seed], thetas=spec.thetas,
                                    draws=args.draws, sigma=spec.sigma,
                                    exact_populations=args.populations)
    return _finish(report.checks, spec.out_dir, [report.write_csv(spec.out_dir)])


def cmd_simulate(args) -> int:
    spec = _spec(_settings(args), n=[1000], detail=args.detail)
    result = harness.simulate(spec, args.grow_axons, args.grow_dendrites)
    for s in result.steps:
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in s.items()))
    return _finish([], spec.out_dir, harness.write_simulation_csv(result, spec.out_dir))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plastree",
        description="Barnes-Hut synapse formation: theorem checks and scaling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="key=value file; command-line flags take precedence")
        p.add_argument("--theta", type=_float_list, help="comma-separated acceptance thresholds")
        p.add_argument("--sigma", type=float, help=f"kernel width (default {DEFAULT_SIGMA:g})")
        p.add_argument("--seed", type=int)
        p.add_argument("--n", type=_int_list, help="population sizes, e.g. 1024,2^12")
        p.add_argument("--ranks", type=_int_list, help="rank counts (powers of two)")
        p.add_argument("--steps", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--population", help="population file: id x y z axons dendrites")
        p.add_argument("--out", help=f"output directory (default ${harness.OUT_ENV} "
                                     f"or ./{default_out_dir().name})")

    p = sub.add_parser("verify-theorems", help="randomized checks of the descent guarantees")
    common(p)
    p.add_argument("--child-scale", type=float, default=0.5,
                   help="child side ratio; anything but 0.5 is a fault injection")
    p.set_defaults(func=cmd_verify_theorems)

    p = sub.add_parser("scaling", help="search work over a sweep of population sizes")
    common(p)
    p.add_argument("--detail", action="store_true", help="also write per-descent rows")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("distributed", help="simulated ranks versus a single process")
    common(p)
    p.set_defaults(func=cmd_distributed)

    p = sub.add_parser("compare-oracle", help="tree search versus naive all-pairs selection")
    common(p)
    p.add_argument("--draws", type=int, default=10 ** 5)
    p.add_argument("--populations", type=int, default=100,
                   help="random populations for the exactness check")
    p.set_defaults(func=cmd_compare_oracle)

    p = sub.add_parser("simulate", help="multi-step run with proposal resolution")
    common(p)
    p.add_argument("--grow-axons", type=int, default=0, help="vacant axons added per step")
    p.add_argument("--grow-dendrites", type=int, default=0)
    p.add_argument("--detail", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"plastree: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
