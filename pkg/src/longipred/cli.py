"""Command-line interface: simulate, fit, predict, evaluate, kernel-dump, pipeline.

Exit codes: 0 success, 2 invalid input or model error, 3 fit did not converge
(unless ``--allow-unconverged``). Every command writes a
``manifest-<command>.json`` into its output directory with the version, seed
and SHA-256 of every input and output file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import deformation as dfm
from . import kernels, metrics, predictor
from . import simulator as sim
from .cohort import Cohort, load_cohort_dir
from .errors import InvalidRequest, LongipredError, NotConverged
from .mixedmodel import FitOptions, FittedModel, check_design, fit, load_model, save_model

log = logging.getLogger("longipred")

EXIT_OK, EXIT_INVALID, EXIT_UNCONVERGED = 0, 2, 3


# --- helpers -------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _rel(path: Path, base: Path) -> str:
    try:
        return Path(path).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(path)


def _write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: list[Path], outputs: list[Path]) -> None:
    skip = {"func", "config", "out", "verbose"}
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    doc = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "settings": {k: (str(v) if isinstance(v, Path) else v) for k, v in settings.items()},
        "inputs": {_rel(p, out): _sha256(Path(p)) for p in inputs},
        "outputs": {_rel(p, out): _sha256(Path(p)) for p in outputs},
    }
    (out / f"manifest-{command}.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise InvalidRequest(f"expected a comma-separated list of numbers, got {text!r}") from None


def _methods(text: str | None, default: str = "full,pop,carry") -> list[str]:
    out = [m.strip() for m in str(text or default).split(",") if m.strip()]
    for m in out:
        if m not in predictor.METHODS:
            raise InvalidRequest(f"unknown method {m!r}; choose from full,pop,carry")
    return out


def _cohort_files(d: Path) -> list[Path]:
    return [p for p in (d / "subjects.csv", d / "observations.csv") if p.exists()]


def _load(d: Path, stratum: str | None) -> Cohort:
    if not (d / "subjects.csv").exists():
        raise InvalidRequest(f"{d}: no subjects.csv")
    cohort = load_cohort_dir(d)
    return cohort.stratum(stratum) if stratum else cohort


def _scenario(args) -> sim.SimScenario:
    if args.scenario and args.preset:
        raise InvalidRequest("give either --scenario or --preset, not both")
    if args.scenario:
        doc = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
    elif args.preset:
        doc = dict(sim.PRESETS.get(args.preset) or sim.preset(args.preset).to_dict())
    else:
        raise InvalidRequest("a scenario is required (--scenario FILE or --preset NAME)")
    if args.seed is None and "seed" not in doc:
        raise InvalidRequest("a seed is required (--seed or a 'seed' field in the scenario)")
    if args.seed is not None:
        doc["seed"] = int(args.seed)
    return sim.SimScenario.from_dict(doc)


# --- stages --------------------------------------------------------------------

def _do_simulate(args, out: Path) -> tuple[list[Path], list[Path], sim.SimScenario]:
    scenario = _scenario(args)
    cohort, truth = sim.simulate(scenario)
    outputs = sim.write_simulation(cohort, truth, out)
    inputs = [Path(args.scenario)] if args.scenario else []
    log.info("simulated %r into %s", cohort, out)
    return inputs, outputs, scenario


def _do_fit(args, train_dir: Path, model_path: Path, deformation: dict | None = None) -> FittedModel:
    train = _load(train_dir, args.stratum_train)
    check_design(train)
    params = kernels.estimate_kernel_params(train, bandwidth=args.bandwidth)
    grams = kernels.gram_set(train, params)
    opts = FitOptions(tol_rel_ll=args.tol, max_iter=args.max_iter, reml=args.reml)
    model = fit(train, grams, opts)
    if deformation is not None:
        model.extras["deformation"] = deformation
    save_model(model, model_path)
    log.info("fitted %d dimension(s) on %r; converged=%s", model.n_pheno, train, model.converged)
    return model


def _requests(cohort: Cohort, ages, horizons) -> list[predictor.PredictionRequest]:
    reqs = []
    by_subject: dict[str, list[float]] = {}
    for o in cohort.observations:
        by_subject.setdefault(o.subject_id, []).append(o.age)
    for s in cohort.subjects:
        if ages is not None:
            target = ages
        elif horizons is not None:
            target = [s.baseline_age + h for h in horizons]
        else:
            target = by_subject.get(s.id)
            if not target:
                raise InvalidRequest(f"no target ages for subject {s.id!r}: give --ages or --horizons")
        reqs.append(predictor.PredictionRequest(s, target))
    return reqs


def _do_predict(args, model: FittedModel, test: Cohort, out_path: Path, methods: list[str]) -> None:
    preds = []
    flagged = set()
    for req in _requests(test, _floats(args.ages), _floats(args.horizons)):
        for m in methods:
            p = predictor.run_method(m, model, req, args.allow_unconverged)
            for w in p.warnings:
                log.info("%s: %s", req.subject.id, w)
                flagged.add(req.subject.id)
            preds.append(p)
    if flagged:
        lo, hi = model.dx_range
        log.warning("%d subject(s) have horizons outside the training range [%g, %g]; use -v for details",
                    len(flagged), lo, hi)
    if len(methods) == 1:
        out_path.write_text(predictor.predictions_csv(preds), encoding="utf-8")
    else:
        # one table per method keeps the documented column layout
        for m in methods:
            sub = [p for p in preds if p.method == m]
            target = out_path if m == methods[0] else out_path.with_name(f"{out_path.stem}-{m}{out_path.suffix}")
            target.write_text(predictor.predictions_csv(sub), encoding="utf-8")


def _anatomy_dice(model: FittedModel, test: Cohort, truth_doc: dict, methods: list[str],
                  allow_unconverged: bool) -> dict[str, dict[str, float]]:
    """Mean per-label Dice of baseline labels propagated to the last follow-up."""
    scenario = sim.SimScenario.from_dict(truth_doc["scenario"])
    atlas, modes = sim.make_anatomy_atlas(scenario)
    dmodel = dfm.DeformationModel.from_dict(truth_doc["deformation"])
    zb = truth_doc["latent_baseline"]
    obs_truth = {(o["id"], o["x_t"]): o for o in truth_doc["observations"]}
    scores: dict[str, dict[int, list[float]]] = {m: {} for m in methods + ["observed"]}
    last = test.last_followups()
    for sid in sorted(last):
        o = test.observations[last[sid]]
        u_b = sim.latent_field(np.array(zb[sid]), modes)
        u_t = sim.latent_field(np.array(zb[sid]) + np.array(obs_truth[(sid, o.age)]["dlatent"]), modes)
        lab_b = dfm.warp_labels(atlas.labels, u_b)
        lab_t = dfm.warp_labels(atlas.labels, u_t)
        req = predictor.PredictionRequest(test.subject(sid), [o.age])
        ys = {m: predictor.run_method(m, model, req, allow_unconverged).rows[0].y_hat for m in methods}
        ys["observed"] = o.phenotype  # warp of the actual follow-up: the upper bound
        for m, y in ys.items():
            pred = dfm.propagate_labels(lab_b, u_b, y, dmodel)
            for lab in range(1, atlas.n_labels + 1):
                scores[m].setdefault(lab, []).append(metrics.dice(pred, lab_t, lab))
    return {m: {sim.LABEL_NAMES.get(lab, str(lab)): float(np.mean(v)) for lab, v in per.items()}
            for m, per in scores.items()}


def _do_evaluate(args, model: FittedModel, test: Cohort, out: Path, truth_doc: dict | None) -> list[Path]:
    methods = _methods(args.methods)
    report = metrics.compare_methods(model, test, methods, args.allow_unconverged)
    if truth_doc is not None and "deformation" in truth_doc:
        report.dice = _anatomy_dice(model, test, truth_doc, methods, args.allow_unconverged)
    paths = [out / "report.json", out / "plotdata.csv"]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    paths[1].write_text(report.plotdata_csv(), encoding="utf-8")
    return paths


def _check_converged(args, model: FittedModel) -> None:
    if not model.converged and not args.allow_unconverged:
        bad = [m + 1 for m, d in enumerate(model.dims) if not d.converged]
        raise NotConverged(f"NotConverged: dimension(s) {bad} hit --max-iter; rerun with --allow-unconverged")


# --- commands ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    inputs, outputs, _ = _do_simulate(args, out)
    _write_manifest(out, "simulate", args, inputs, outputs)
    return EXIT_OK


def cmd_fit(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_dir = Path(args.train)
    model = _do_fit(args, train_dir, out / "model.json")
    _write_manifest(out, "fit", args, _cohort_files(train_dir), [out / "model.json"])
    _check_converged(args, model)
    return EXIT_OK


def cmd_predict(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    test = _load(Path(args.test), args.stratum_test)
    target = out / "predictions.csv"
    _do_predict(args, model, test, target, _methods(args.methods, "full"))
    outputs = sorted(out.glob("predictions*.csv"))
    _write_manifest(out, "predict", args, [Path(args.model)] + _cohort_files(Path(args.test)), outputs)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.model)
    test = _load(Path(args.test), args.stratum_test)
    truth_doc = json.loads(Path(args.truth).read_text(encoding="utf-8")) if args.truth else None
    outputs = _do_evaluate(args, model, test, out, truth_doc)
    inputs = [Path(args.model)] + _cohort_files(Path(args.test)) + ([Path(args.truth)] if args.truth else [])
    _write_manifest(out, "evaluate", args, inputs, outputs)
    return EXIT_OK


def cmd_kernel_dump(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_dir = Path(args.train)
    cohort = _load(train_dir, args.stratum_train)
    inputs = _cohort_files(train_dir)
    if args.model:
        params = load_model(args.model).kernel_params
        inputs.append(Path(args.model))
    else:
        params = kernels.estimate_kernel_params(cohort, bandwidth=args.bandwidth)
    grams = kernels.gram_set(cohort, params)
    outputs = []
    for name in kernels.KERNEL_NAMES:
        path = out / f"K_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + list(cohort.ids))
            for sid, row in zip(cohort.ids, grams[name]):
                w.writerow([sid] + [repr(float(v)) for v in row])
        outputs.append(path)
    params_path = out / "kernel_params.json"
    params_path.write_text(json.dumps(params.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    outputs.append(params_path)
    _write_manifest(out, "kernel-dump", args, inputs, outputs)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort_dir = out / "cohort"
    inputs, sim_outputs, scenario = _do_simulate(args, cohort_dir)
    truth_doc = json.loads((cohort_dir / "truth.json").read_text(encoding="utf-8"))

    train_dir = cohort_dir / "train"
    test_dir = cohort_dir / "test" if scenario.n_test > 0 else cohort_dir
    model = _do_fit(args, train_dir, out / "model.json", truth_doc.get("deformation"))
    _check_converged(args, model)
    test = _load(test_dir, args.stratum_test)
    _do_predict(args, model, test, out / "predictions.csv", ["full"])
    outputs = sim_outputs + [out / "model.json"] + sorted(out.glob("predictions*.csv"))
    outputs += _do_evaluate(args, model, test, out, truth_doc)
    _write_manifest(out, "pipeline", args, inputs, outputs)
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longipred", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"longipred {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; command-line flags win")
    common.add_argument("-v", "--verbose", action="count", default=0)

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--scenario", help="scenario JSON file")
    scen.add_argument("--preset", help=f"built-in scenario: {', '.join(sorted(sim.PRESETS))}")
    scen.add_argument("--seed", type=int)

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--tol", type=float, default=1e-10, help="relative log-likelihood tolerance")
    fitting.add_argument("--max-iter", type=int, default=200)
    fitting.add_argument("--reml", action="store_true", help="restricted ML (extension; default is ML)")
    fitting.add_argument("--bandwidth", choices=("mean", "median"), default="mean",
                         help="pairwise-distance statistic used for the RBF kernel variances")
    fitting.add_argument("--stratum-train", help="fit only on subjects of this stratum")

    pred = argparse.ArgumentParser(add_help=False)
    pred.add_argument("--methods", help="comma list of full,pop,carry (predict: full; otherwise all three)")
    pred.add_argument("--stratum-test", help="predict only subjects of this stratum")
    pred.add_argument("--allow-unconverged", action="store_true")

    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common, scen], help="draw a synthetic cohort")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", parents=[common, fitting], help="fit a model to a training cohort")
    s.add_argument("--train", required=True, help="directory with subjects.csv and observations.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--allow-unconverged", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common, pred], help="predict follow-up phenotypes")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True, help="directory with subjects.csv [and observations.csv]")
    s.add_argument("--out", required=True)
    s.add_argument("--ages", help="comma list of absolute target ages")
    s.add_argument("--horizons", help="comma list of years after each subject's baseline")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common, pred], help="compare methods on held-out subjects")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="truth.json of an anatomy simulation, enables Dice scores")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("kernel-dump", parents=[common], help="write the Gram matrices as CSV")
    s.add_argument("--train", required=True)
    s.add_argument("--model", help="use the kernel parameters frozen in this model")
    s.add_argument("--out", required=True)
    s.add_argument("--bandwidth", choices=("mean", "median"), default="mean")
    s.add_argument("--stratum-train")
    s.set_defaults(func=cmd_kernel_dump)

    s = sub.add_parser("pipeline", parents=[common, scen, fitting, pred], help="simulate, fit, predict, evaluate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline, ages=None, horizons=None)
    return p


def _parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except LongipredError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())
