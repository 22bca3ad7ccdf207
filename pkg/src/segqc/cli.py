"""``segqc`` command-line entry point.

Exit codes: 0 success, 2 usage error, 3 config error, 4 data error,
5 numeric failure. ``predict`` and ``bench`` print one JSON line on
stdout; progress and logging go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import CLASS_NAMES, __version__
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("segqc")

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4, 5


def _progress(msg) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_cfg(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    # flags override config keys
    overrides = {
        ("gen", "n_cases"): getattr(args, "n_cases", None),
        ("gen", "seed"): getattr(args, "seed", None),
        ("experiment", "id"): getattr(args, "experiment", None),
        ("experiment", "manifest"): getattr(args, "manifest", None),
        ("experiment", "rca_manifest"): getattr(args, "rca_manifest", None),
        ("experiment", "threshold"): getattr(args, "threshold", None),
        ("experiment", "label_source"): getattr(args, "label_source", None),
        ("experiment", "timing_cases"): getattr(args, "timing_cases", None),
        ("seeds", "balance"): getattr(args, "seed_balance", None),
        ("seeds", "split"): getattr(args, "seed_split", None),
        ("seeds", "init"): getattr(args, "seed_init", None),
        ("seeds", "train"): getattr(args, "seed_train", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("rca", "k"): getattr(args, "k", None),
        ("rca", "seed"): getattr(args, "rca_seed", None),
    }
    d = cfg.to_dict()
    for (section, key), value in overrides.items():
        if value is not None:
            d[section][key] = value
    if getattr(args, "inject_oracle", False):
        d["experiment"]["inject_oracle"] = True
    return config_from_dict(d)


def _add_config(p, seeds: bool = False) -> None:
    p.add_argument("--config", metavar="JSON", help="experiment config file (unknown keys are rejected)")
    if seeds:
        g = p.add_argument_group("seed overrides")
        g.add_argument("--seed-balance", type=int, help="override seeds.balance")
        g.add_argument("--seed-split", type=int, help="override seeds.split")
        g.add_argument("--seed-init", type=int, help="override seeds.init")
        g.add_argument("--seed-train", type=int, help="override seeds.train")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .datagen import build_dataset
    cfg = _load_cfg(args)
    g = cfg.gen
    manifest = build_dataset(args.out, g.n_cases, g.ladder, g.seed, tuple(g.dims), g.require_coverage)
    _progress(f"wrote {manifest}")
    return 0


def cmd_rca_label(args) -> int:
    from .datagen import read_manifest
    from .pipeline import rca_label_parallel, reference_db
    cfg = _load_cfg(args)
    manifest = Path(cfg.experiment.manifest)
    records = read_manifest(manifest)
    if args.balanced:
        from .metrics import balanced_subsample
        idx = balanced_subsample([r.dsc.wh for r in records], cfg.seeds.balance)
        records = [records[i] for i in idx]
    db = reference_db(cfg)
    _progress(f"RCA labelling {len(records)} cases against {len(db)} references")
    rca_label_parallel(records, manifest.parent, db, args.out, args.jobs)
    _progress(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import run_experiment
    cfg = _load_cfg(args)
    result = run_experiment(cfg, args.out, jobs=args.jobs, progress=_progress)
    wh = result.report.classes["wh"]["all"]
    _progress(f"test WH MAE {wh.mae:.4f} (SD {wh.sd:.4f}), accuracy "
              f"{result.report.classification.accuracy:.4f}; artifacts in {args.out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np
    from .datagen import read_manifest
    from .metrics import mae_report
    from .nnet.model import load_model
    from .nnet.train import load_inputs, predict_batch
    from .pipeline import write_predictions
    model = load_model(args.model)
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    if not records:
        raise DataError(f"{manifest}: manifest is empty")
    x = load_inputs(records, manifest.parent, model.spec.input_dims, args.norm_mode)
    preds = predict_batch(model, x)
    truths = np.array([tuple(r.dsc) for r in records])
    report = mae_report(preds, truths, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    write_predictions(out / "predictions.csv", [r.case_id for r in records], preds, truths)
    _progress(f"WH MAE {report.classes['wh']['all'].mae:.4f}; wrote {out}")
    return 0


def cmd_predict(args) -> int:
    from .nnet.model import load_model
    from .nnet.train import predict_case
    model = load_model(args.model)
    score, ms = predict_case(model, args.image, args.seg, args.norm_mode)
    doc = dict(zip(CLASS_NAMES, (float(v) for v in score)))
    doc["latency_ms"] = ms
    print(json.dumps(doc))
    return 0


def cmd_bench(args) -> int:
    from .datagen import read_manifest
    from .nnet.model import load_model
    from .pipeline import benchmark_timing, reference_db
    cfg = _load_cfg(args)
    model = load_model(args.model)
    manifest = Path(cfg.experiment.manifest)
    records = read_manifest(manifest)
    n = args.n_cases if args.n_cases is not None else cfg.experiment.timing_cases
    summary = benchmark_timing(model, records, manifest.parent, reference_db(cfg), n,
                               cfg.experiment.norm_mode)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_plot_data(args) -> int:
    import numpy as np
    from .metrics import bin_scores
    from .pipeline import ExperimentResult, emit_figures, read_predictions
    run = Path(args.run)
    ids, preds, truths = read_predictions(run / "predictions.csv")
    hist = bin_scores(truths[:, 4]).counts if len(ids) else np.zeros(10, int)
    # rebuild from a run directory; the pre-balancing counts are not stored there
    result = ExperimentResult(None, ids, preds, truths, {}, {}, None, hist, hist)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    emit_figures(result, out)
    _progress(f"wrote {out / 'errors_by_class.csv'} and {out / 'histogram.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segqc", description="Segmentation quality control: per-class "
                                "Dice prediction for cardiac labelmaps.")
    p.add_argument("--version", action="version", version=f"segqc {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-case work (default 1)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("gen", help="generate the synthetic phantom dataset and manifest")
    _add_config(s)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-cases", type=int, help="override gen.n_cases (phantoms)")
    s.add_argument("--seed", type=int, help="override gen.seed")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("rca-label", help="attach RCA scores to a manifest")
    _add_config(s, seeds=True)
    s.add_argument("--manifest", help="input manifest (overrides experiment.manifest)")
    s.add_argument("--out", required=True, help="output manifest CSV with rca_* columns")
    s.add_argument("--balanced", action="store_true",
                   help="label only the WH-balanced subsample used by experiment 1")
    s.add_argument("--k", type=int, help="override rca.k (reference database size)")
    s.add_argument("--rca-seed", type=int, help="override rca.seed")
    s.set_defaults(func=cmd_rca_label)

    s = sub.add_parser("train", help="run experiment 1 or 2 and write a run directory")
    _add_config(s, seeds=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--experiment", type=int, choices=(1, 2), help="override experiment.id")
    s.add_argument("--manifest", help="override experiment.manifest")
    s.add_argument("--rca-manifest", help="pre-labelled manifest for experiment 2")
    s.add_argument("--label-source", choices=("auto", "true", "rca"), help="override experiment.label_source")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--threshold", type=float, help="override experiment.threshold")
    s.add_argument("--timing-cases", type=int, help="override experiment.timing_cases (0 disables)")
    s.add_argument("--k", type=int, help="override rca.k")
    s.add_argument("--rca-seed", type=int, help="override rca.seed")
    s.add_argument("--inject-oracle", action="store_true",
                   help="harness self-test: evaluate true scores as predictions")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on every case of a manifest")
    s.add_argument("--model", required=True, help="checkpoint stem (or .arch.json path)")
    s.add_argument("--manifest", required=True, help="manifest with true DSC columns")
    s.add_argument("--out", required=True, help="output directory for report.json/.csv")
    s.add_argument("--threshold", type=float, default=0.7, help="WH classification threshold (default 0.7)")
    s.add_argument("--norm-mode", default="per_volume", choices=("per_volume",), help="intensity normalization")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict per-class DSC for one image/segmentation pair")
    s.add_argument("--model", required=True, help="checkpoint stem (or .arch.json path)")
    s.add_argument("--image", required=True, help="image volume (.hdr.json/.raw stem)")
    s.add_argument("--seg", required=True, help="segmentation labelmap (.hdr.json/.raw stem)")
    s.add_argument("--norm-mode", default="per_volume", choices=("per_volume",), help="intensity normalization")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("bench", help="median regressor vs RCA latency on the same cases")
    _add_config(s)
    s.add_argument("--model", required=True, help="checkpoint stem")
    s.add_argument("--manifest", help="override experiment.manifest")
    s.add_argument("--n-cases", type=int, help="timed cases (one extra warm-up case is excluded)")
    s.add_argument("--k", type=int, help="override rca.k")
    s.add_argument("--rca-seed", type=int, help="override rca.seed")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plot-data", help="write box-plot and histogram CSVs from a run directory")
    s.add_argument("--run", required=True, help="run directory containing predictions.csv")
    s.add_argument("--out", help="output directory (default: the run directory)")
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("segqc: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"segqc: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"segqc: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"segqc: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
