"""Command line entry point: ``visfit {synth,pseudo-gt,fit,eval,export-obj}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.  Errors are
reported on stderr as one JSON line carrying an ``error_code`` field.
Configuration precedence is command-line flag > ``--config`` file > defaults;
the resolved values are echoed into every output bundle.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .body_model import forward, load_model, save_model
from .evaluation import evaluate_examples
from .fitter import FitConfig, FitProblem, NumericalError, fit
from .mini_model import make_mini_model
from .objio import export_obj
from .observations import load_observations
from .prior import load_prior, make_synthetic_prior, save_prior
from .synth import GroundTruth, SyntheticProblemSpec, make_problem
from .visibility import occlusion_labels_from_uv, pixel_to_vertex, read_iuv, visibility_labels, write_iuv

log = logging.getLogger("visfit")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _write_json(path: Path, data) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(data, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError("invalid_json", f"{path}: {exc}") from None


def _require(path, flag: str) -> Path:
    if path is None:
        raise CliError("missing_argument", f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{flag}: no such file: {p}")
    return p


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    cfg = _read_json(_require(args.config, "--config"))
    if not isinstance(cfg, dict):
        raise CliError("invalid_config", f"{args.config}: top level must be an object")
    return cfg


def _model(args):
    if args.model is None:
        return make_mini_model()
    return load_model(_require(args.model, "--model"))


def _seed(args, cfg: dict, default: int | None = 0) -> int | None:
    if args.seed is not None:
        return args.seed
    return cfg.get("seed", default)


def _out_dir(args) -> Path:
    if args.out is None:
        raise CliError("missing_argument", "--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_parallel(fn, jobs_args, n_jobs: int):
    if n_jobs <= 1 or len(jobs_args) <= 1:
        return [fn(*a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, *zip(*jobs_args)))


# --------------------------------------------------------------------------
# synth


def _synth_one(model, prior, spec: SyntheticProblemSpec, out: Path, resolved: dict) -> str:
    out.mkdir(parents=True, exist_ok=True)
    problem = make_problem(model, spec, prior)
    _write_json(out / "obs.json", problem.observations.to_dict())
    _write_json(out / "gt.json", problem.truth.to_dict())
    write_iuv(out / "iuv.png", problem.iuv)
    _write_json(out / "run_config.json", {"command": "synth", **resolved, "synth": spec.to_dict()})
    return str(out)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg, None)
    if seed is None:
        raise CliError("missing_seed", "synth requires --seed (or 'seed' in the config file)")
    out = _out_dir(args)
    model = _model(args)
    prior = load_prior(_require(args.prior, "--prior")) if args.prior else make_synthetic_prior(3 * (model.n_kin - 1))
    synth_cfg = dict(cfg.get("synth", {}))
    count = int(args.count if args.count is not None else cfg.get("count", 1))
    if count < 1:
        raise CliError("invalid_config", "count must be >= 1")
    save_model(model, out / "model.json")
    save_prior(prior, out / "prior.json")
    resolved = {"seed": seed, "count": count}
    jobs = []
    for i in range(count):
        spec = SyntheticProblemSpec.from_dict({**synth_cfg, "seed": seed + i})
        target = out if count == 1 else out / f"problem_{i:03d}"
        jobs.append((model, prior, spec, target, resolved))
    done = _run_parallel(_synth_one, jobs, args.jobs)
    log.info("wrote %d synthetic problem(s) to %s", len(done), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# pseudo-gt


def cmd_pseudo_gt(args) -> int:
    iuv_path = _require(args.iuv, "--iuv")
    obs_path = _require(args.obs, "--obs")
    model = _model(args)
    out = _out_dir(args)
    obs = load_observations(obs_path)
    obs.check_model(model)
    iuv = read_iuv(iuv_path, use_sidecar=False)
    corr = pixel_to_vertex(iuv, model)
    sz = occlusion_labels_from_uv(corr, model.n_vertices)
    labels = visibility_labels(model, obs.vertices, obs.joints, sz, obs.grid.D)
    _write_json(out / "correspondence.json", corr.to_dict())
    _write_json(out / "labels.json", labels.to_dict())
    # the UV map speaks for the surface; joint visibility stays as observed (labels.json carries the derived one)
    relabelled = obs.replace(vertex_visibility=labels.vertices.astype(float))
    _write_json(out / "obs.json", relabelled.to_dict())
    _write_json(out / "run_config.json", {"command": "pseudo-gt", "iuv": iuv_path.name, "obs": obs_path.name})
    return EXIT_OK


# --------------------------------------------------------------------------
# fit


def _fit_one(model, prior, obs_path: Path, config: FitConfig, out: Path, resolved: dict) -> str:
    out.mkdir(parents=True, exist_ok=True)
    obs = load_observations(obs_path)
    result = fit(FitProblem(model, obs, prior), config)
    body = forward(model, result.theta, result.beta)
    data = result.to_dict()
    data["joints"] = body.joints_out.tolist()
    data["vertices"] = body.vertices.tolist()
    data["config"] = {**resolved, "fit": config.to_dict(), "obs": obs_path.name}
    _write_json(out / "fit_result.json", data)
    export_obj(out / "fitted.obj", body.vertices + result.transl, model.faces)
    return str(out)


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    obs_paths = [_require(p, "--obs") for p in (args.obs or [None])]
    model = _model(args)
    prior = load_prior(_require(args.prior, "--prior")) if args.prior else None
    out = _out_dir(args)
    fit_cfg = dict(cfg.get("fit", {}))
    seed = _seed(args, cfg, fit_cfg.get("seed", 0))
    fit_cfg["seed"] = seed
    if args.max_iters is not None:
        fit_cfg["max_iters"] = args.max_iters
    config = FitConfig.from_dict(fit_cfg)
    resolved = {"seed": seed, "prior": None if args.prior is None else Path(args.prior).name}
    jobs = []
    for i, p in enumerate(obs_paths):
        target = out if len(obs_paths) == 1 else out / f"{i:03d}_{p.parent.name or p.stem}"
        jobs.append((model, prior, p, config, target, resolved))
    _run_parallel(_fit_one, jobs, args.jobs)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    preds = [_require(p, "--pred") for p in (args.pred or [None])]
    gts = [_require(p, "--gt") for p in (args.gt or [None])]
    if len(preds) != len(gts):
        raise CliError("invalid_argument", f"{len(preds)} predictions but {len(gts)} ground truths")
    out = _out_dir(args)
    examples = []
    for p, g in zip(preds, gts):
        pd, gd = _read_json(p), _read_json(g)
        truth = GroundTruth.from_dict(gd)
        ex = {"name": f"{p.parent.name}/{p.name}", "pred_joints": pd["joints"], "gt_joints": truth.joints,
              "pred_vertices": pd.get("vertices"), "gt_vertices": truth.vertices}
        examples.append(ex)
    report = evaluate_examples(examples)
    _write_json(out / "metrics.json", report.to_dict())
    if args.csv:
        report.write_csv(out / "metrics.csv")
    return EXIT_OK


# --------------------------------------------------------------------------
# export-obj


def cmd_export_obj(args) -> int:
    params = _read_json(_require(args.params, "--params"))
    model = _model(args)
    try:
        theta, beta = np.asarray(params["theta"], dtype=float), np.asarray(params["beta"], dtype=float)
    except KeyError as exc:
        raise CliError("invalid_params", f"{args.params}: missing key {exc}") from None
    transl = np.asarray(params.get("transl", [0.0, 0.0, 0.0]), dtype=float)
    body = forward(model, theta, beta)
    if args.out is None:
        raise CliError("missing_argument", "--out is required")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_obj(args.out, body.vertices + transl, model.faces)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visfit", description="Visibility-aware dense body fitting tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--model", help="body model JSON (default: built-in mini model)")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1, help="parallel workers across independent problems")

    p = sub.add_parser("synth", help="generate synthetic fitting problems with ground truth")
    common(p)
    p.add_argument("--prior", help="GMM prior JSON (default: bundled synthetic prior)")
    p.add_argument("--count", type=int, help="number of problems (seeds seed..seed+count-1)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudo-gt", help="visibility pseudo labels from an IUV map; also writes obs.json with "
                                          "the vertex labels replaced")
    common(p)
    p.add_argument("--iuv", help="IUV PNG")
    p.add_argument("--obs", help="observation JSON giving the projected body")
    p.set_defaults(func=cmd_pseudo_gt)

    p = sub.add_parser("fit", help="fit pose, shape and translation to observations")
    common(p)
    p.add_argument("--obs", nargs="+", help="observation JSON file(s)")
    p.add_argument("--prior", help="GMM prior JSON")
    p.add_argument("--iuv", help=argparse.SUPPRESS)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="metrics of fit results against ground truth")
    common(p)
    p.add_argument("--pred", nargs="+", help="fit_result JSON file(s)")
    p.add_argument("--gt", nargs="+", help="ground-truth JSON file(s)")
    p.add_argument("--csv", action="store_true", help="also write per-example metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-obj", help="write the posed mesh of a parameter file as OBJ")
    common(p, out_help="output OBJ path")
    p.add_argument("--params", help="JSON with theta, beta and optional transl (e.g. fit_result.json)")
    p.set_defaults(func=cmd_export_obj)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("VISFIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _report(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error_code": code, "message": message}) + "\n")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _report(exc.code, str(exc))
        return exc.exit_code
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _report("numerical_failure", str(exc))
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError, OSError) as exc:
        _report(type(exc).__name__, str(exc) or repr(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
