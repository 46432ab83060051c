"""Command-line front end: ``ctphase <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cv import load_ensemble, ensemble_predict, save_ensemble, stratified_group_kfold, train_cv
from .errors import CTPhaseError
from .features import FeatureTable, build_table, format_float, read_manifest
from .gbdt import Hyperparams, save_model, train
from .labels import CLASS_NAMES, MERGED_CLASS_NAMES, ORGANS, PhaseLabel, read_coding
from .metrics import (
    evaluation_report,
    mcnemar_per_class,
    merge_arterial_venous_labels,
    pseudo_pi_time,
    roc_points,
)
from .phantom import PhantomSpec, generate_corpus

log = logging.getLogger("ctphase")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
PROB_COLUMNS = [f"p_{name}" for name in CLASS_NAMES]
MARGIN_COLUMNS = [f"logit_{name}" for name in CLASS_NAMES]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    command: str
    inputs: dict[str, Path] = field(default_factory=dict)
    out: Path | None = None
    coding: Path | None = None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 42
    threads: int = 1
    options: dict = field(default_factory=dict)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctphase", description="CT contrast-phase classification toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("extract", parents=[common], help="median-HU features from a scan manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--coding", type=Path, required=True, help="organ label mapping file")
    p.add_argument("--out", type=Path, required=True, help="feature CSV to write")

    p = sub.add_parser("train", parents=[common], help="train one model, or a CV ensemble with --cv")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output model directory")
    p.add_argument("--cv", type=int, default=None, metavar="K", help="K-fold patient-grouped ensemble")
    p.add_argument("--eval-features", type=Path, default=None, help="held-out table for the mlogloss curve")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--rounds", type=int, default=200)
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--min-child-weight", type=float, default=1.0)

    p = sub.add_parser("predict", parents=[common], help="phase probabilities for a feature table")
    p.add_argument("--model", type=Path, required=True, help="model file or directory")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pi-time", action="store_true", help="append a pseudo_pi_time column")

    p = sub.add_parser("evaluate", parents=[common], help="metrics report for a prediction file")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True, help="CSV with scan_id and phase columns")
    p.add_argument("--out", type=Path, default=None, help="JSON report (default: stdout)")
    p.add_argument("--dataset", default=None)
    p.add_argument("--merge-arterial-venous", action="store_true")
    p.add_argument("--roc-out", type=Path, default=None, help="ROC points CSV for plotting")

    p = sub.add_parser("compare", parents=[common], help="per-class McNemar grid over prediction files")
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--pred", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--merge-arterial-venous", action="store_true")

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic phantom corpus")
    p.add_argument("--n-per-phase", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--abdomen-only-frac", type=float, default=0.2)
    p.add_argument("--no-pelvis-frac", type=float, default=0.0)
    p.add_argument("--noise-sd", type=float, default=10.0)
    p.add_argument("--jitter", type=float, default=8.0, help="phase timing jitter, seconds")
    p.add_argument("--id-prefix", default="")

    p = sub.add_parser("pi-time", parents=[common], help="pseudo pi_time from a prediction file")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    return parser


def parse_args(argv: Sequence[str] | None) -> RunConfig:
    ns = _build_parser().parse_args(argv)
    if ns.command is None:
        raise UsageError("ctphase: a command is required (see --help)")
    threads = ns.threads if ns.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    cfg = RunConfig(command=ns.command, seed=ns.seed, threads=threads)
    cfg.options["verbose"] = ns.verbose
    cmd = ns.command

    if cmd == "extract":
        cfg.inputs["manifest"] = ns.manifest
        cfg.coding = ns.coding
        cfg.out = ns.out
    elif cmd == "train":
        if ns.cv is not None and ns.eval_features is not None:
            raise UsageError("train: --cv and --eval-features are mutually exclusive (CV evaluates on held-out folds)")
        if ns.cv is not None and ns.cv < 2:
            raise UsageError("train: --cv needs at least 2 folds")
        try:
            cfg.hyperparams = Hyperparams(
                learning_rate=ns.lr,
                max_depth=ns.depth,
                n_rounds=ns.rounds,
                reg_lambda=ns.reg_lambda,
                gamma=ns.gamma,
                min_child_weight=ns.min_child_weight,
            )
        except ValueError as exc:
            raise UsageError(f"train: {exc}") from None
        cfg.inputs["features"] = ns.features
        if ns.eval_features is not None:
            cfg.inputs["eval_features"] = ns.eval_features
        cfg.options["cv"] = ns.cv
        cfg.out = ns.out
    elif cmd == "predict":
        cfg.inputs.update(model=ns.model, features=ns.features)
        cfg.options["pi_time"] = ns.pi_time
        cfg.out = ns.out
    elif cmd == "evaluate":
        cfg.inputs.update(pred=ns.pred, truth=ns.truth)
        cfg.options.update(
            merge=ns.merge_arterial_venous,
            dataset=ns.dataset if ns.dataset is not None else ns.pred.stem,
            roc_out=ns.roc_out,
        )
        cfg.out = ns.out
    elif cmd == "compare":
        if len(ns.pred) < 2:
            raise UsageError("compare: give at least two --pred NAME=PATH entries")
        preds = {}
        for spec in ns.pred:
            name, sep, path = spec.partition("=")
            if not sep or not name or not path:
                raise UsageError(f"compare: --pred expects NAME=PATH, got {spec!r}")
            if name in preds:
                raise UsageError(f"compare: duplicate model name {name!r}")
            preds[name] = Path(path)
        cfg.inputs["truth"] = ns.truth
        cfg.options.update(preds=preds, merge=ns.merge_arterial_venous)
        cfg.out = ns.out
    elif cmd == "simulate":
        if ns.n_per_phase < 1:
            raise UsageError("simulate: --n-per-phase must be >= 1")
        fracs = (ns.abdomen_only_frac, ns.no_pelvis_frac)
        if min(fracs) < 0 or sum(fracs) > 1:
            raise UsageError("simulate: coverage fractions must be non-negative and sum to at most 1")
        if ns.noise_sd < 0 or ns.jitter < 0:
            raise UsageError("simulate: --noise-sd and --jitter must be non-negative")
        cfg.options.update(
            n_per_phase=ns.n_per_phase,
            abdomen_only_frac=ns.abdomen_only_frac,
            no_pelvis_frac=ns.no_pelvis_frac,
            noise_sd=ns.noise_sd,
            jitter=ns.jitter,
            id_prefix=ns.id_prefix,
        )
        cfg.out = ns.out
    elif cmd == "pi-time":
        cfg.inputs["pred"] = ns.pred
        cfg.out = ns.out
    return cfg


# ---------------------------------------------------------------------------
# file helpers


def _read_truth(path: Path) -> dict[str, int]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"scan_id", "phase"} <= set(reader.fieldnames):
            raise CTPhaseError(f"{path}: truth file needs scan_id and phase columns")
        try:
            return {row["scan_id"]: int(PhaseLabel.parse(row["phase"])) for row in reader}
        except ValueError as exc:
            raise CTPhaseError(f"{path}: {exc}") from None


def _read_predictions(path: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """scan ids, predicted class codes and (n, 4) probabilities from a prediction CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"scan_id", "predicted", *PROB_COLUMNS}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise CTPhaseError(f"{path}: prediction file needs columns {sorted(needed)}")
        ids, pred, probs = [], [], []
        for row in reader:
            ids.append(row["scan_id"])
            try:
                pred.append(int(PhaseLabel.parse(row["predicted"])))
                probs.append([float(row[c]) for c in PROB_COLUMNS])
            except ValueError as exc:
                raise CTPhaseError(f"{path}: scan {row['scan_id']}: {exc}") from None
    if len(set(ids)) != len(ids):
        raise CTPhaseError(f"{path}: duplicate scan_id values")
    return ids, np.array(pred, dtype=np.int64), np.array(probs, dtype=np.float64).reshape(-1, len(CLASS_NAMES))


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands


def _cmd_extract(cfg: RunConfig) -> None:
    manifest = read_manifest(cfg.inputs["manifest"])
    coding = read_coding(cfg.coding)
    table = build_table(manifest, ORGANS, coding, threads=cfg.threads)
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(cfg.out)
    n_missing = int(np.isnan(table.X).sum())
    log.info("extracted %d scans (%d missing organ entries) -> %s", len(table), n_missing, cfg.out)


def _cmd_train(cfg: RunConfig) -> None:
    table = FeatureTable.from_csv(cfg.inputs["features"])
    hp = cfg.hyperparams
    cfg.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    k = cfg.options["cv"]
    if k:
        assignment = stratified_group_kfold(table, k, cfg.seed)
        ensemble = train_cv(table, hp, assignment, threads=cfg.threads)
        save_ensemble(ensemble, cfg.out, assignment)
        for i, m in enumerate(ensemble.members):
            log.info("fold %d: held-out mlogloss %.5f", i, m.history["eval_mlogloss"][-1])
    else:
        eval_table = None
        if "eval_features" in cfg.inputs:
            eval_table = FeatureTable.from_csv(cfg.inputs["eval_features"])
        model = train(table, hp, eval_table)
        save_model(model, cfg.out / "model.json")
    log.info("training finished in %.1f s", time.perf_counter() - start)


def _cmd_predict(cfg: RunConfig) -> None:
    ensemble = load_ensemble(cfg.inputs["model"])
    table = FeatureTable.from_csv(cfg.inputs["features"])
    if list(ensemble.organ_order) != list(ORGANS):
        raise CTPhaseError("model organ order does not match the feature file columns")
    margins, probs, pred = ensemble_predict(ensemble, table.X)
    margins = margins.reshape(len(table), -1)
    probs = probs.reshape(len(table), -1)
    header = ["scan_id", "predicted", *PROB_COLUMNS, *MARGIN_COLUMNS]
    pi = None
    if cfg.options["pi_time"]:
        header.append("pseudo_pi_time")
        pi = pseudo_pi_time(probs)
    lines = [",".join(header)]
    for i, scan_id in enumerate(table.scan_ids):
        row = [scan_id, CLASS_NAMES[int(np.atleast_1d(pred)[i])]]
        row += [format_float(v) for v in probs[i]]
        row += [format_float(v) for v in margins[i]]
        if pi is not None:
            row.append(format_float(pi[i]))
        lines.append(",".join(row))
    _write_text(cfg.out, "\n".join(lines) + "\n")


def _cmd_evaluate(cfg: RunConfig) -> None:
    ids, _, probs = _read_predictions(cfg.inputs["pred"])
    truth_map = _read_truth(cfg.inputs["truth"])
    absent = [s for s in ids if s not in truth_map]
    if absent:
        raise CTPhaseError(f"{len(absent)} predicted scans have no truth label (first: {absent[0]})")
    if not ids:
        raise CTPhaseError("prediction file is empty")
    truth = np.array([truth_map[s] for s in ids])
    merge = cfg.options["merge"]
    report = evaluation_report(truth, probs, cfg.options["dataset"], merge_arterial_venous=merge)
    _write_text(cfg.out, json.dumps(report, indent=2) + "\n")
    if cfg.options["roc_out"] is not None:
        names = MERGED_CLASS_NAMES if merge else CLASS_NAMES
        t = merge_arterial_venous_labels(truth) if merge else truth
        p = np.stack([probs[:, 0], probs[:, 1] + probs[:, 2], probs[:, 3]], axis=1) if merge else probs
        lines = ["class,threshold,fpr,tpr"]
        for k, name in enumerate(names):
            for thr, fpr, tpr in roc_points(p[:, k], t == k):
                lines.append(f"{name},{format_float(thr)},{format_float(fpr)},{format_float(tpr)}")
        _write_text(cfg.options["roc_out"], "\n".join(lines) + "\n")


def _cmd_compare(cfg: RunConfig) -> None:
    truth_map = _read_truth(cfg.inputs["truth"])
    preds = {}
    for name, path in cfg.options["preds"].items():
        ids, pred, _ = _read_predictions(path)
        preds[name] = dict(zip(ids, pred))
    names = list(preds)
    scan_set = set(preds[names[0]])
    for name in names[1:]:
        if set(preds[name]) != scan_set:
            raise CTPhaseError(f"prediction files {names[0]!r} and {name!r} do not cover the same scans")
    if not scan_set:
        raise CTPhaseError("prediction files are empty")
    absent = scan_set - set(truth_map)
    if absent:
        raise CTPhaseError(f"{len(absent)} compared scans have no truth label")
    scans = sorted(scan_set)
    truth = np.array([truth_map[s] for s in scans])
    vectors = {n: np.array([preds[n][s] for s in scans]) for n in names}
    classes = CLASS_NAMES
    if cfg.options["merge"]:
        truth = merge_arterial_venous_labels(truth)
        vectors = {n: merge_arterial_venous_labels(v) for n, v in vectors.items()}
        classes = MERGED_CLASS_NAMES
    lines = ["model_1,model_2,class,b,c,statistic,p_value"]
    for i, m1 in enumerate(names):
        for m2 in names[i + 1 :]:
            for k, cls in enumerate(classes):
                r = mcnemar_per_class(truth, vectors[m1], vectors[m2], k)
                lines.append(f"{m1},{m2},{cls},{r.b},{r.c},{format_float(r.statistic)},{format_float(r.p_value)}")
    _write_text(cfg.out, "\n".join(lines) + "\n")


def _cmd_simulate(cfg: RunConfig) -> None:
    o = cfg.options
    spec = PhantomSpec(noise_sd=o["noise_sd"], jitter_s=o["jitter"])
    manifest = generate_corpus(
        cfg.out,
        o["n_per_phase"],
        abdomen_only_frac=o["abdomen_only_frac"],
        no_pelvis_frac=o["no_pelvis_frac"],
        seed=cfg.seed,
        base_spec=spec,
        id_prefix=o["id_prefix"],
        threads=cfg.threads,
    )
    log.info("wrote %d scans -> %s", 4 * o["n_per_phase"], manifest)


def _cmd_pi_time(cfg: RunConfig) -> None:
    ids, _, probs = _read_predictions(cfg.inputs["pred"])
    pi = pseudo_pi_time(probs) if ids else []
    lines = ["scan_id,pseudo_pi_time"] + [f"{s},{format_float(t)}" for s, t in zip(ids, pi)]
    _write_text(cfg.out, "\n".join(lines) + "\n")


COMMANDS = {
    "extract": _cmd_extract,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "simulate": _cmd_simulate,
    "pi-time": _cmd_pi_time,
}


def run(cfg: RunConfig) -> int:
    try:
        COMMANDS[cfg.command](cfg)
    except (CTPhaseError, OSError, ValueError, csv.Error) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if cfg.options.get("verbose") else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
