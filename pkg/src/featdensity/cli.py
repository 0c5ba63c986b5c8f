"""Command-line driver.

Every subcommand rebuilds what it needs from the config and seed, so each
one runs standalone from a single config file. Exit codes: 0 success,
1 invalid usage/config/input, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from featdensity import attacks, classifier, data, metrics, pipeline
from featdensity.errors import NumericError

EXPERIMENTS = ("gen-data", "train", "fit-gmm", "detect-mistakes", "attack", "detect-adv",
               "detect-ood", "calibrate", "purify", "report")

TIMING_FIELDS = ("wall_clock_seconds",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON experiment config")
    common.add_argument("--out", type=Path, help="output directory (overrides config out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides config seed)")
    common.add_argument("--threads", type=int, help="data-parallel partitions (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="featdensity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "write train/val/test and OOD CSV files",
        "train": "train the classifier and save model.json",
        "fit-gmm": "fit the feature-space GMM and save gmm.json",
        "detect-mistakes": "score test samples and separate correct from misclassified",
        "attack": "write FGSM/BIM adversarial test inputs and attack statistics",
        "detect-adv": "separate clean from adversarial test inputs",
        "detect-ood": "separate in-distribution from OOD inputs",
        "calibrate": "fit a temperature and report ECE before/after",
        "purify": "run the purification grid and report accuracies",
        "report": "merge the JSON reports in the output directory",
    }
    for name in EXPERIMENTS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "report":
            p.add_argument("inputs", nargs="*", type=Path, help="report files (default: *_report.json in --out)")
    return parser


def _load_config(args) -> pipeline.ExperimentConfig:
    doc = {}
    if args.config is not None:
        doc = json.loads(args.config.read_text())
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
    if args.out is not None:
        doc["out_dir"] = str(args.out)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    return pipeline.ExperimentConfig.from_dict(doc)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _write_scores(path: Path, scores: np.ndarray) -> None:
    with path.open("w") as fh:
        fh.write("index,score\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},{float(s)!r}\n")


def _envelope(cfg: pipeline.ExperimentConfig, experiment: str, started: float, **body) -> dict:
    config = cfg.to_dict()
    config.pop("out_dir")
    doc = {"schema_version": pipeline.SCHEMA_VERSION, "experiment": experiment, "seed": cfg.seed}
    doc.update(body)
    doc["config"] = config
    doc["wall_clock_seconds"] = time.perf_counter() - started
    return doc


def _save_models(out: Path, prep_model, density=None) -> dict:
    paths = {"model_path": "model.json"}
    prep_model.save(out / "model.json")
    if density is not None:
        density.save(out / "gmm.json")
        paths["gmm_path"] = "gmm.json"
    return paths


def _score_files(out: Path, prefix: str, scores: dict, groups: dict) -> dict:
    """Write score CSVs (and ROC/PR curves) and return their relative paths."""
    (out / "scores").mkdir(exist_ok=True)
    files = {}
    for key, s in scores.items():
        rel = f"scores/{prefix}_{key}.csv"
        _write_scores(out / rel, s)
        files[key] = rel
        if key in groups:
            pos, neg = groups[key]
            if len(pos) and len(neg):
                metrics.roc_auc(pos, neg).to_csv(out / f"scores/{prefix}_{key}_roc.csv", "roc ")
                metrics.pr_auc(pos, neg).to_csv(out / f"scores/{prefix}_{key}_pr_in.csv", "pr-in ")
    return files


def cmd_gen_data(cfg, out, started):
    ds = pipeline.load_dataset(cfg)
    train_ds, val_ds, test_ds = data.split(ds, cfg.split_spec())
    for name, part in (("train", train_ds), ("val", val_ds), ("test", test_ds)):
        data.save_csv(part, out / f"{name}.csv")
    files = {"train": "train.csv", "val": "val.csv", "test": "test.csv"}
    if not cfg.data_csv:
        prep_stub = pipeline.Prepared(train_ds, val_ds, test_ds, None, None, None, None, 1.0, None)
        for kind, (ood_test, _) in pipeline.ood_sets(cfg, prep_stub).items():
            data.save_inputs_csv(ood_test, out / f"ood_{kind}.csv")
            files[f"ood_{kind}"] = f"ood_{kind}.csv"
    return "data", _envelope(cfg, "gen-data", started, files=files,
                             sizes={"train": len(train_ds), "val": len(val_ds), "test": len(test_ds)},
                             class_count=ds.class_count, dim=ds.dim)


def cmd_train(cfg, out, started):
    train_ds, val_ds, test_ds, model, report = pipeline.prepare_model(cfg)
    paths = _save_models(out, model)
    return "train", _envelope(cfg, "train", started, **paths,
                              train_loss=report.train_loss, train_accuracy=report.train_accuracy,
                              val_accuracy=report.val_accuracy,
                              test_accuracy=classifier.accuracy(model, test_ds))


def cmd_fit_gmm(cfg, out, started):
    prep = pipeline.prepare(cfg)
    paths = _save_models(out, prep.model, prep.density)
    r = prep.em_report
    return "gmm", _envelope(cfg, "fit-gmm", started, **paths, components=prep.density.component_count,
                            iterations=r.iterations, converged=r.converged, floor_active=r.floor_active,
                            reseeded=r.reseeded, log_likelihood=r.log_likelihood)


def cmd_detect_mistakes(cfg, out, started):
    prep = pipeline.prepare(cfg)
    section, scores = pipeline.mistake_detection(cfg, prep)
    ok = classifier.predict_batch(prep.model, prep.test.inputs) == prep.test.labels
    files = _score_files(out, "mistakes", scores, {k: (s[ok], s[~ok]) for k, s in scores.items()})
    for kind, path in files.items():
        section["methods"][kind]["scores_csv"] = path
    return "mistakes", _envelope(cfg, "detect-mistakes", started,
                                 **_save_models(out, prep.model, prep.density), **section)


def cmd_attack(cfg, out, started):
    train_ds, val_ds, test_ds, model, _ = pipeline.prepare_model(cfg)
    stats = {}
    for method in cfg.attack_methods:
        res = attacks.attack_batch(model, test_ds, method, cfg.attack_config(method))
        data.save_inputs_csv(res.adversarial.inputs, out / f"adv_{method}.csv")
        stats[method] = dict(res.stats(), inputs_csv=f"adv_{method}.csv")
    return "attack", _envelope(cfg, "attack", started, **_save_models(out, model), attacks=stats)


def cmd_detect_adv(cfg, out, started):
    prep = pipeline.prepare(cfg)
    section, scores = pipeline.adversarial_detection(cfg, prep)
    n = len(prep.test)
    files = _score_files(out, "adv", scores, {k: (s[:n], s[n:]) for k, s in scores.items()})
    for key, path in files.items():
        method, kind = key.split("_", 1)
        section[method]["methods"][kind]["scores_csv"] = path
    return "adversarial", _envelope(cfg, "detect-adv", started,
                                    **_save_models(out, prep.model, prep.density), attacks=section)


def cmd_detect_ood(cfg, out, started):
    prep = pipeline.prepare(cfg)
    section, scores = pipeline.ood_detection(cfg, prep)
    n = len(prep.test)
    files = _score_files(out, "ood", scores, {k: (s[:n], s[n:]) for k, s in scores.items()})
    for kind in section:
        for score_kind in section[kind]["methods"]:
            section[kind]["methods"][score_kind]["scores_csv"] = files[f"{kind}_{score_kind}"]
    return "ood", _envelope(cfg, "detect-ood", started,
                            **_save_models(out, prep.model, prep.density), ood=section)


def cmd_calibrate(cfg, out, started):
    prep = pipeline.prepare(cfg)
    return "calibration", _envelope(cfg, "calibrate", started, **_save_models(out, prep.model),
                                    **pipeline.calibration(cfg, prep))


def cmd_purify(cfg, out, started):
    prep = pipeline.prepare(cfg)
    result = pipeline.purification(cfg, prep)
    result["grid"] = {f"step_size={c['step_size']!r},nu={c['nu']!r}": c for c in result["grid"]}
    return "purify", _envelope(cfg, "purify", started,
                               **_save_models(out, prep.model, prep.density), **result)


def cmd_report(cfg, out, started, inputs):
    paths = inputs or sorted(p for p in out.glob("*_report.json"))
    merged = {}
    for path in paths:
        doc = json.loads(Path(path).read_text())
        merged[doc.get("experiment", Path(path).stem)] = doc
    return "merged", {"schema_version": pipeline.SCHEMA_VERSION, "seed": cfg.seed,
                      "reports": merged, "wall_clock_seconds": time.perf_counter() - started}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fit-gmm": cmd_fit_gmm,
    "detect-mistakes": cmd_detect_mistakes,
    "attack": cmd_attack,
    "detect-adv": cmd_detect_adv,
    "detect-ood": cmd_detect_ood,
    "calibrate": cmd_calibrate,
    "purify": cmd_purify,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = _load_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "report":
            name, doc = cmd_report(cfg, out, started, args.inputs)
            target = out / "report.json"
        else:
            name, doc = COMMANDS[args.command](cfg, out, started)
            target = out / f"{name}_report.json"
        _write_json(target, doc)
    except (ValueError, FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        print(f"featdensity: invalid input: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"featdensity: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    print(target)
    return 0


def main() -> None:
    sys.exit(run())
