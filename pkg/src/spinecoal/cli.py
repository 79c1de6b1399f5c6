"""Command line entry point.

Exit status: 0 on success, 2 on invalid input (bad model, flag or config),
3 when ``--strict`` is given and a statistical check fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .model import ModelError, is_irreducible, load_model, mean_matrix, spectral

EXIT_OK, EXIT_INVALID, EXIT_STATISTICAL = 0, 2, 3


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _vec(x) -> str:
    return "(" + ",".join(f"{v:.6f}" for v in np.atleast_1d(x)) + ")"


def _add_common(p, mode=None):
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--k", type=int, default=2, help="sample size")
    p.add_argument("--T", type=_floats, default=(100.0,), help="horizons, comma separated")
    p.add_argument("--theta", type=_floats, default=None,
                   help="discount direction, comma separated (one value is broadcast)")
    p.add_argument("--replicates", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--root-type", type=int, default=1, help="1-based type of the ancestor")
    p.add_argument("--cap", type=int, default=10_000_000, help="population cap per tree")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="JSON file of ExperimentConfig fields")
    p.add_argument("--strict", action="store_true", help="exit 3 if a statistical check fails")
    if mode is not None:
        p.add_argument("--mode", choices=harness.MODES, default=mode)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinecoal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model-check", help="validate a model and print its spectral constants")
    p.add_argument("model_file", nargs="?", help="model JSON file")
    p.add_argument("--model", dest="model_flag", default=None)

    p = sub.add_parser("simulate", help="population statistics of forward simulations")
    _add_common(p)

    p = sub.add_parser("genealogy", help="uniform samples by rejection and their split records")
    _add_common(p, "forward-rejection")

    p = sub.add_parser("spine", help="marked-measure simulation with importance reweighting")
    _add_common(p, "spine")

    p = sub.add_parser("martingale", help="Monte Carlo checks of the marked-measure identities")
    _add_common(p)

    p = sub.add_parser("compare", help="rejection and spine estimates side by side")
    _add_common(p, "spine")

    p = sub.add_parser("limit", help="density table of the rescaled first split time")
    p.add_argument("--model", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--theta", type=_floats, default=None)
    p.add_argument("--out", default=None, help="output directory (default: print the table)")
    return parser


def _config(args, mode="forward-rejection") -> harness.ExperimentConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    doc.setdefault("model", args.model)
    fields = {"mode": getattr(args, "mode", mode) or mode, "k": args.k, "T": args.T,
              "theta": args.theta, "replicates": args.replicates, "seed": args.seed,
              "root_type": args.root_type, "cap": args.cap, "out": args.out}
    for key, value in fields.items():
        doc.setdefault(key, value)
    return harness.ExperimentConfig.from_dict(doc)


def _model_check(args) -> int:
    path = args.model_file or args.model_flag
    if path is None:
        raise ValueError("model-check needs a model file")
    model = load_model(Path(path).read_text())
    M = mean_matrix(model)
    irreducible = is_irreducible(M)
    print(f"model: {model.name or Path(path).stem}  d={model.d}")
    print("M=" + json.dumps(np.round(M, 12).tolist()))
    print(f"irreducible={str(irreducible).lower()}")
    if not irreducible:
        return EXIT_INVALID
    spec = spectral(model)
    print(f"rho={spec.rho:.6f}")
    print(f"xi={_vec(spec.xi)}")
    print(f"eta={_vec(spec.eta)}")
    print(f"zeta={spec.zeta:.6f}")
    print(f"zeta_i={_vec(spec.zeta_i)}")
    print(f"critical={str(bool(spec.critical)).lower()}")
    return EXIT_OK


def _simulate(args) -> int:
    from .forest import final_populations

    cfg = _config(args)
    spec = spectral(cfg.model)
    report = harness.Report("simulate", cfg.describe())
    report.references = {"survival_times_T": (2 * spec.xi / spec.zeta).tolist(),
                         "yaglom_mean_over_T": (spec.zeta / 2 * spec.eta).tolist()}
    for T in cfg.T:
        Z = final_populations(cfg.model, T, cfg.replicates, cfg.root_type, cfg.seed, cap=cfg.cap)
        Z = Z[Z[:, 0] >= 0]
        N = Z.sum(axis=1)
        alive = N > 0
        report.results.append({
            "T": T, "replicates": int(N.size), "mean_Z": Z.mean(axis=0).tolist(),
            "mean_N": float(N.mean()), "survival_rate": float(alive.mean()),
            "survival_times_T": float(T * alive.mean()),
            "conditional_mean_Z_over_T": (Z[alive].mean(axis=0) / T).tolist() if alive.any() else None})
    _emit(report, cfg.out)
    return EXIT_OK


def _emit(report: harness.Report, out):
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "report.json").write_text(report.to_json() + "\n")
    else:
        print(report.to_json())


def _finish(report: harness.Report, args) -> int:
    if not args.out:
        print(report.to_json())
    for t in report.failures():
        print(f"FAILED {t['name']} T={t.get('T')} statistic={t['statistic']:.6g} "
              f"threshold={t['threshold']}", file=sys.stderr)
    if args.strict and not report.passed:
        return EXIT_STATISTICAL
    return EXIT_OK


def _limit(args) -> int:
    model = load_model(Path(args.model).read_text())
    header, rows = harness.density_rows(model, args.k, args.grid, args.theta)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        fh = open(Path(args.out) / f"density_k{args.k}.csv", "w", newline="")
    else:
        fh = sys.stdout
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    if fh is not sys.stdout:
        fh.close()
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "model-check":
            return _model_check(args)
        if args.command == "limit":
            return _limit(args)
        if args.command == "simulate":
            return _simulate(args)
        if args.command == "genealogy":
            report = harness.run_unif_experiment(_config(args, "forward-rejection"))
        elif args.command == "spine":
            report = harness.run_spine_experiment(_config(args, "spine"))
        elif args.command == "martingale":
            report = harness.martingale_checks(_config(args))
        else:
            report = harness.compare(_config(args, "spine"))
    except (ModelError, ValueError, FileNotFoundError, json.JSONDecodeError,
            harness.LowAcceptanceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return _finish(report, args)


if __name__ == "__main__":
    sys.exit(main())
