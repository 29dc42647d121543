"""Command-line interface: one subcommand per pipeline stage.

Every invocation validates its inputs before computing, writes outputs
only under ``--out``, and records a ``run.json`` provenance file (config
hash, seed, library versions) sufficient to reproduce the result
byte-for-byte. Errors print a machine-readable JSON object on stderr and
exit with a distinct code: 2 usage, 3 missing file, 4 invalid
configuration or data, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import scipy

from . import __version__
from . import analysis as an
from . import data as da
from . import prior as pr
from . import trainer as tr

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4


class CliError(Exception):
    def __init__(self, message, code=1, path=None):
        super().__init__(message)
        self.code = code
        self.path = path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, code=EXIT_USAGE)


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_provenance(out_dir, command, config_payload, seed):
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": command,
        "config_hash": hashlib.sha256(_canonical(config_payload).encode()).hexdigest(),
        "config": config_payload,
        "seed": seed,
        "versions": {
            "brainfuse": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
    }
    _write_json(os.path.join(out_dir, "run.json"), record)


def _load_json(path):
    if not os.path.isfile(path):
        raise CliError(f"missing file: {path}", code=EXIT_MISSING, path=path)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"invalid JSON in {path}: {exc}", code=EXIT_INVALID, path=path)


def _load_dataset(path) -> da.Dataset:
    try:
        return da.load_dataset(path)
    except da.MissingFileError as exc:
        raise CliError(str(exc), code=EXIT_MISSING, path=exc.path)
    except da.DataError as exc:
        raise CliError(str(exc), code=EXIT_INVALID, path=str(path))


def _train_config(path) -> tr.TrainConfig:
    payload = _load_json(path)
    try:
        return tr.TrainConfig.from_dict(payload)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid train config {path}: {exc}", code=EXIT_INVALID, path=str(path))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    payload = _load_json(args.config)
    try:
        cfg = da.SynthConfig(**payload)
        cfg.validate()
    except (TypeError, da.InvalidConfigError) as exc:
        raise CliError(f"invalid synth config: {exc}", code=EXIT_INVALID, path=args.config)
    ds = da.synthesize_cohort(cfg)
    manifest = da.save_dataset(ds, args.out)
    _write_provenance(args.out, "synth", payload, cfg.seed)
    print(manifest)
    return 0


def cmd_estimate_prior(args):
    ds = _load_dataset(args.data)
    seeds = tuple(int(t) for t in args.seeds_roi.split(",")) if args.seeds_roi else ()
    try:
        model = pr.fit_prior(ds, args.m, ds.latent_dim, seeds)
    except pr.PriorError as exc:
        raise CliError(str(exc), code=EXIT_INVALID)
    os.makedirs(args.out, exist_ok=True)
    path = pr.save_prior(model, args.out)
    _write_provenance(args.out, "estimate-prior",
                      {"data": os.path.abspath(args.data), "m": args.m,
                       "seeds_roi": list(seeds)}, seed=None)
    print(path)
    return 0


def _run_training(cfg: tr.TrainConfig, ds: da.Dataset, prior, out_dir, jobs):
    cv = tr.run_cv(cfg, ds, prior=prior, jobs=jobs)
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), cfg.to_dict())
    _write_json(os.path.join(out_dir, "folds.json"),
                [{"train": tr_ids, "test": te_ids} for tr_ids, te_ids in cv.splits])
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for fold, state in enumerate(cv.states):
            for step, report in enumerate(state.history):
                row = {"fold": fold, "step": step, **report.to_dict()}
                fh.write(_canonical(row))
                fh.write("\n")
    for fold, state in enumerate(cv.states):
        tr.save_state(state, os.path.join(out_dir, f"fold{fold}"))
    return cv


def cmd_train(args):
    ds = _load_dataset(args.data)
    cfg = _train_config(args.config)
    prior = None
    if args.prior:
        try:
            prior = pr.load_prior(args.prior)
        except FileNotFoundError as exc:
            raise CliError(f"missing prior: {exc}", code=EXIT_MISSING, path=str(exc))
    _run_training(cfg, ds, prior, args.out, args.jobs)
    _write_provenance(args.out, "train",
                      {"data": os.path.abspath(args.data), "config": cfg.to_dict(),
                       "prior": os.path.abspath(args.prior) if args.prior else None},
                      seed=cfg.seed)
    print(args.out)
    return 0


def _load_run(run_dir, ds):
    folds_path = os.path.join(run_dir, "folds.json")
    if not os.path.isfile(folds_path):
        raise CliError(f"missing checkpoint: {folds_path}", code=EXIT_MISSING, path=folds_path)
    folds = _load_json(folds_path)
    states = []
    for fold in range(len(folds)):
        fold_dir = os.path.join(run_dir, f"fold{fold}")
        try:
            states.append(tr.load_state(fold_dir))
        except FileNotFoundError as exc:
            raise CliError(f"missing checkpoint: {exc}", code=EXIT_MISSING, path=str(exc))
    splits = [(f["train"], f["test"]) for f in folds]
    return tr.CvResult(states=states, splits=splits)


def cmd_evaluate(args):
    ds = _load_dataset(args.data)
    cv = _load_run(args.run, ds)
    per_fold, mean = an.evaluate_cv(cv, ds)
    payload = {"per_fold": [m.to_dict() for m in per_fold], "mean": mean}
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_json(args.out, payload)
    _write_provenance(out_dir, "evaluate",
                      {"run": os.path.abspath(args.run), "data": os.path.abspath(args.data)},
                      seed=None)
    print(args.out)
    return 0


def _parse_param(spec: str):
    if "=" not in spec:
        raise CliError(f"bad --param {spec!r}, expected name=v1,v2,...", code=EXIT_USAGE)
    name, _, values = spec.partition("=")
    name = name.strip()
    if name not in ("k", "lambda"):
        raise CliError(f"unknown sweep parameter {name!r} (use k or lambda)", code=EXIT_USAGE)
    try:
        if name == "k":
            parsed = [int(v) for v in values.split(",")]
        else:
            parsed = [float(v) for v in values.split(",")]
    except ValueError as exc:
        raise CliError(f"bad --param {spec!r}: {exc}", code=EXIT_USAGE)
    return name, parsed


def cmd_sweep(args):
    ds = _load_dataset(args.data)
    base = _train_config(args.config)
    grid = {"k": [base.k], "lambda": [base.sparse_lambda]}
    for spec in args.param or []:
        name, values = _parse_param(spec)
        grid[name] = values
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for k in grid["k"]:
        for lam in grid["lambda"]:
            cfg = tr.TrainConfig.from_dict({**base.to_dict(), "k": k, "sparse_lambda": lam})
            cv = tr.run_cv(cfg, ds, jobs=args.jobs)
            _, mean = an.evaluate_cv(cv, ds)
            rows.append({"k": k, "lambda": lam, **mean})
    _write_json(os.path.join(args.out, "sweep.json"), rows)
    with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
        fh.write("k,lambda,acc,sen,spe,auc\n")
        for r in rows:
            fh.write(f"{r['k']},{r['lambda']!r},{r['acc']!r},{r['sen']!r},"
                     f"{r['spe']!r},{r['auc']!r}\n")
    _write_provenance(args.out, "sweep",
                      {"data": os.path.abspath(args.data), "config": base.to_dict(),
                       "grid": grid}, seed=base.seed)
    print(os.path.join(args.out, "sweep.json"))
    return 0


def _group_ucs(cv, ds):
    ucs = an.uc_per_subject(cv, ds)
    patients = [ucs[i] for i, s in enumerate(ds.subjects) if s.label == 1 and i in ucs]
    controls = [ucs[i] for i, s in enumerate(ds.subjects) if s.label == 0 and i in ucs]
    return ucs, patients, controls


def cmd_analyze(args):
    ds = _load_dataset(args.data)
    cv = _load_run(args.run, ds)
    os.makedirs(args.out, exist_ok=True)

    if args.what == "importance":
        cfg = tr.TrainConfig.from_dict(_load_json(os.path.join(args.run, "config.json")))
        scores, top = an.roi_importance_all(cv, ds, retrain=args.retrain, cfg=cfg)
        with open(os.path.join(args.out, "importance.csv"), "w") as fh:
            fh.write("roi,name,importance\n")
            for r, val in enumerate(scores):
                fh.write(f"{r},{ds.roi_names[r]},{val!r}\n")
        _write_json(os.path.join(args.out, "top10.json"),
                    [{"roi": r, "name": ds.roi_names[r], "importance": float(scores[r])}
                     for r in top])
    else:
        _, patients, controls = _group_ucs(cv, ds)
        stats = an.edge_ttest(patients, controls)
        if args.what == "ttest":
            da.write_matrix(os.path.join(args.out, "p_values.csv"), stats.p_values)
            an.export_edges(stats, 0.05, os.path.join(args.out, "edges_p005.csv"))
            an.export_edges(stats, 0.001, os.path.join(args.out, "edges_p0001.csv"))
            with open(os.path.join(args.out, "roi_frequency.csv"), "w") as fh:
                fh.write("roi,name,significant_edges\n")
                for r, cnt in enumerate(stats.roi_frequency):
                    fh.write(f"{r},{ds.roi_names[r]},{cnt}\n")
        else:  # altered
            altered, strength = an.altered_connections(
                patients, controls, stats, ds.network_partition)
            da.write_matrix(os.path.join(args.out, "altered.csv"), altered)
            _write_json(os.path.join(args.out, "network_strength.json"), {
                "raw": {f"{d}_{l}": v for (d, l), v in strength.raw.items()},
                "normalized": {f"{d}_{l}": v for (d, l), v in strength.normalized.items()},
            })

    _write_provenance(args.out, f"analyze-{args.what}",
                      {"run": os.path.abspath(args.run), "data": os.path.abspath(args.data),
                       "what": args.what}, seed=None)
    print(args.out)
    return 0


def cmd_export_uc(args):
    ds = _load_dataset(args.data)
    cv = _load_run(args.run, ds)
    os.makedirs(args.out, exist_ok=True)
    ucs = an.uc_per_subject(cv, ds)
    for i, m in sorted(ucs.items()):
        da.write_matrix(os.path.join(args.out, f"{ds.subjects[i].id}_uc.csv"), m)
    _write_provenance(args.out, "export-uc",
                      {"run": os.path.abspath(args.run), "data": os.path.abspath(args.data)},
                      seed=None)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="brainfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate-prior", help="fit and serialize the latent prior")
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--seeds-roi", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_prior)

    p = sub.add_parser("train", help="run cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--prior", default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute test metrics for a training run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid over k and lambda")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--param", action="append")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="group statistics on united connectivity")
    p.add_argument("what", choices=("ttest", "importance", "altered"))
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retrain", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-uc", help="write per-subject united connectivity CSVs")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_uc)

    return parser


def _emit_error(exc: CliError):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if exc.path:
        payload["path"] = exc.path
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        _emit_error(exc)
        return exc.code
    except (da.MissingFileError, FileNotFoundError) as exc:
        _emit_error(CliError(str(exc), code=EXIT_MISSING))
        return EXIT_MISSING
    except (da.DataError, pr.PriorError, ValueError) as exc:
        _emit_error(CliError(str(exc), code=EXIT_INVALID))
        return EXIT_INVALID
    except tr.TrainingDivergedError as exc:
        _emit_error(CliError(str(exc), code=1))
        return 1


if __name__ == "__main__":
    sys.exit(main())
