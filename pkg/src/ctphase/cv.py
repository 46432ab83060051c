"""Stratified patient-grouped k-fold splitting and fold-averaged ensembles."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, TrainingError
from .features import FeatureTable
from .gbdt import BoostedModel, Hyperparams, load_model, save_model, softmax, train


@dataclass(frozen=True)
class FoldAssignment:
    n_splits: int
    fold_of_scan: dict[str, int]
    seed: int

    def folds_for(self, scan_ids) -> np.ndarray:
        try:
            return np.array([self.fold_of_scan[s] for s in scan_ids], dtype=np.int64)
        except KeyError as exc:
            raise TrainingError(f"scan {exc.args[0]} has no fold assignment") from None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scan_id", "fold"])
            for scan_id, fold in self.fold_of_scan.items():
                writer.writerow([scan_id, fold])

    @classmethod
    def from_csv(cls, path: str | Path, seed: int = -1) -> "FoldAssignment":
        with open(path, newline="") as fh:
            fold_of_scan = {row["scan_id"]: int(row["fold"]) for row in csv.DictReader(fh)}
        n_splits = max(fold_of_scan.values()) + 1 if fold_of_scan else 0
        return cls(n_splits, fold_of_scan, seed)


def stratified_group_kfold(table: FeatureTable, n_splits: int = 5, seed: int = 42) -> FoldAssignment:
    """Assign whole patients to folds while balancing per-class counts.

    Patients (sorted by id, then shuffled with ``seed``) are taken one at a
    time and placed in the fold whose per-class counts (plus its total scan
    count) would end up with the smallest squared deviation from the
    proportional target ``total / n_splits``; ties go to the lowest fold index.
    The total term keeps fold sizes balanced when a class is rare.
    """
    if n_splits < 2:
        raise ValueError("n_splits must be >= 2")
    patients = sorted(set(table.patient_ids))
    if len(patients) < n_splits:
        raise ValueError(f"{len(patients)} patients cannot fill {n_splits} folds")

    n_classes = int(table.phases.max()) + 1 if len(table) else 1
    pos = {p: i for i, p in enumerate(patients)}
    group_counts = np.zeros((len(patients), n_classes))
    group_rows = [[] for _ in patients]
    for row, (patient, phase) in enumerate(zip(table.patient_ids, table.phases)):
        group_counts[pos[patient], phase] += 1
        group_rows[pos[patient]].append(row)

    # last column tracks the fold total alongside the per-class counts
    group_counts = np.hstack([group_counts, group_counts.sum(axis=1, keepdims=True)])
    target = group_counts.sum(axis=0) / n_splits
    counts = np.zeros((n_splits, n_classes + 1))
    rng = np.random.default_rng(seed)
    fold_of_group = np.empty(len(patients), dtype=np.int64)
    for gi in rng.permutation(len(patients)):
        c = group_counts[gi]
        # change in squared deviation if this patient joins each fold
        delta = ((counts + c - target) ** 2).sum(axis=1) - ((counts - target) ** 2).sum(axis=1)
        fold = int(np.argmin(delta))
        counts[fold] += c
        fold_of_group[gi] = fold

    fold_of_scan = {}
    for row, patient in enumerate(table.patient_ids):
        fold_of_scan[table.scan_ids[row]] = int(fold_of_group[pos[patient]])
    return FoldAssignment(n_splits, fold_of_scan, seed)


@dataclass
class EnsembleModel:
    members: list[BoostedModel]

    def __post_init__(self):
        if self.members:
            first = self.members[0]
            for m in self.members[1:]:
                if m.organ_order != first.organ_order or m.class_order != first.class_order:
                    raise ModelFormatError("ensemble members disagree on organ or class order")

    @property
    def organ_order(self):
        return self.members[0].organ_order

    @property
    def class_order(self):
        return self.members[0].class_order


def _train_fold(args):
    table, hp, train_idx, eval_idx = args
    return train(table.subset(train_idx), hp, eval_table=table.subset(eval_idx))


def train_cv(table: FeatureTable, hp: Hyperparams | None, assignment: FoldAssignment, threads: int = 1) -> EnsembleModel:
    """One model per fold, each trained on the other folds with its own fold held out."""
    hp = hp or Hyperparams()
    folds = assignment.folds_for(table.scan_ids)
    jobs = []
    for f in range(assignment.n_splits):
        train_idx = np.flatnonzero(folds != f)
        eval_idx = np.flatnonzero(folds == f)
        if len(np.unique(table.phases[train_idx])) < 2:
            raise TrainingError(f"fold {f}: training partition has fewer than two classes")
        jobs.append((table, hp, train_idx, eval_idx))
    if threads > 1:
        with ProcessPoolExecutor(min(threads, len(jobs))) as pool:
            members = list(pool.map(_train_fold, jobs))
    else:
        members = [_train_fold(job) for job in jobs]
    return EnsembleModel(members)


def ensemble_predict(ensemble: EnsembleModel, x):
    """Mean member margins, their softmax, and the argmax (lowest class on ties)."""
    if not ensemble.members:
        raise ValueError("ensemble has no members")
    margins = np.mean([m.predict_margins(x) for m in ensemble.members], axis=0)
    return margins, softmax(margins), np.argmax(margins, axis=-1)


def save_ensemble(ensemble: EnsembleModel, directory: str | Path, assignment: FoldAssignment | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, member in enumerate(ensemble.members):
        name = f"fold_{i}.json"
        save_model(member, directory / name)
        files.append(name)
    manifest = {
        "kind": "ensemble",
        "members": files,
        "class_order": list(ensemble.class_order),
        "organ_order": list(ensemble.organ_order),
    }
    if assignment is not None:
        assignment.to_csv(directory / "folds.csv")
        manifest["folds"] = "folds.csv"
        manifest["seed"] = assignment.seed
    (directory / "ensemble.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_ensemble(path: str | Path) -> EnsembleModel:
    """Load an ensemble directory, or wrap a single model file as a one-member ensemble."""
    path = Path(path)
    if path.is_dir():
        if (path / "ensemble.json").is_file():
            try:
                manifest = json.loads((path / "ensemble.json").read_text())
                files = manifest["members"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ModelFormatError(f"{path}: bad ensemble manifest ({exc})") from None
            return EnsembleModel([load_model(path / f) for f in files])
        if (path / "model.json").is_file():
            return EnsembleModel([load_model(path / "model.json")])
        raise ModelFormatError(f"{path}: no ensemble.json or model.json")
    return EnsembleModel([load_model(path)])
