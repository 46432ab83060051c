"""Per-organ median-HU features and the feature table container."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FeatureError
from .labels import ORGANS, PhaseLabel
from .volume_io import LabelMap, Volume3D, check_grid, load_labelmap, load_volume

MISSING = float("nan")


def masked_median(volume: Volume3D, mask: LabelMap, organ_label: int) -> float:
    """Exact median HU over voxels labelled ``organ_label``; NaN if there are none."""
    values = volume.values[mask.labels == organ_label]
    if values.size == 0:
        return MISSING
    # float64 so the mean of the two middle values is not rounded to float32
    return float(np.median(values.astype(np.float64)))


@dataclass(frozen=True)
class FeatureVector:
    """Organ medians in organ-set order (16 entries for the canonical set)."""

    values: np.ndarray
    scan_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise FeatureError(f"feature vector must be 1D, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


def extract_features(
    volume: Volume3D,
    mask: LabelMap,
    organ_set: Sequence[str] = ORGANS,
    coding: Mapping[str, int] | None = None,
    scan_id: str = "",
) -> FeatureVector:
    check_grid(volume, mask)
    coding = mask.organ_coding if coding is None else coding
    absent = [organ for organ in organ_set if organ not in coding]
    if absent:
        raise FeatureError(f"organ coding has no label for {', '.join(absent)}")
    values = [masked_median(volume, mask, coding[organ]) for organ in organ_set]
    return FeatureVector(np.array(values), scan_id)


@dataclass(frozen=True)
class ManifestEntry:
    scan_id: str
    patient_id: str
    phase: PhaseLabel
    volume_path: Path
    mask_path: Path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read ``scan_id,patient_id,phase,volume_path,mask_path``; relative paths
    resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"scan_id", "patient_id", "phase", "volume_path", "mask_path"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise FeatureError(f"{path}: manifest needs columns {sorted(required)}")
        for row in reader:
            entries.append(
                ManifestEntry(
                    scan_id=row["scan_id"],
                    patient_id=row["patient_id"],
                    phase=PhaseLabel.parse(row["phase"]),
                    volume_path=base / row["volume_path"],
                    mask_path=base / row["mask_path"],
                )
            )
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scan_id", "patient_id", "phase", "volume_path", "mask_path"])
        for e in entries:
            writer.writerow([e.scan_id, e.patient_id, e.phase.label, e.volume_path.as_posix(), e.mask_path.as_posix()])


class FeatureTable:
    """Rows of (scan_id, patient_id, phase, 16 organ medians).

    Features are held as an ``(n, 16)`` float array with NaN for missing organs.
    """

    def __init__(self, scan_ids, patient_ids, phases, X):
        self.scan_ids = [str(s) for s in scan_ids]
        self.patient_ids = [str(p) for p in patient_ids]
        self.phases = np.asarray([int(PhaseLabel.parse(p)) for p in phases], dtype=np.int64)
        X = np.asarray(X, dtype=np.float64)
        if X.size == 0:
            X = X.reshape(0, len(ORGANS))
        n = len(self.scan_ids)
        if X.shape != (n, len(ORGANS)):
            raise FeatureError(f"feature matrix shape {X.shape} does not match {n} rows x {len(ORGANS)} organs")
        if len(self.patient_ids) != n or len(self.phases) != n:
            raise FeatureError("scan_ids, patient_ids and phases must have equal length")
        if len(set(self.scan_ids)) != n:
            raise FeatureError("scan_id values must be unique")
        if any(not p for p in self.patient_ids):
            raise FeatureError("every row needs a non-empty patient_id")
        self.X = X

    def __len__(self) -> int:
        return len(self.scan_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (
            self.scan_ids == other.scan_ids
            and self.patient_ids == other.patient_ids
            and np.array_equal(self.phases, other.phases)
            and np.array_equal(self.X, other.X, equal_nan=True)
        )

    def rows(self):
        for i, scan_id in enumerate(self.scan_ids):
            yield scan_id, self.patient_ids[i], PhaseLabel(self.phases[i]), FeatureVector(self.X[i], scan_id)

    def subset(self, indices) -> "FeatureTable":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureTable(
            [self.scan_ids[i] for i in indices],
            [self.patient_ids[i] for i in indices],
            self.phases[indices],
            self.X[indices],
        )

    @classmethod
    def from_rows(cls, rows) -> "FeatureTable":
        rows = list(rows)
        return cls(
            [r[0] for r in rows],
            [r[1] for r in rows],
            [r[2] for r in rows],
            [np.asarray(getattr(r[3], "values", r[3])) for r in rows],
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scan_id", "patient_id", "phase", *ORGANS])
            for i, scan_id in enumerate(self.scan_ids):
                writer.writerow(
                    [scan_id, self.patient_ids[i], PhaseLabel(self.phases[i]).label]
                    + [format_float(v) for v in self.X[i]]
                )

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise FeatureError(f"{path}: empty feature file") from None
            expected = ["scan_id", "patient_id", "phase", *ORGANS]
            if header != expected:
                raise FeatureError(f"{path}: header must be {','.join(expected)}")
            scan_ids, patients, phases, X = [], [], [], []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(expected):
                    raise FeatureError(f"{path}:{lineno}: expected {len(expected)} fields")
                scan_ids.append(row[0])
                patients.append(row[1])
                try:
                    phases.append(PhaseLabel.parse(row[2]))
                    X.append([float(v) for v in row[3:]])
                except ValueError as exc:
                    raise FeatureError(f"{path}:{lineno}: {exc}") from None
        return cls(scan_ids, patients, phases, X)


def format_float(value: float) -> str:
    """Shortest round-trip repr; NaN is written as the literal token ``NaN``."""
    value = float(value)
    return "NaN" if math.isnan(value) else repr(value)


def _extract_entry(entry: ManifestEntry, organ_set, coding) -> np.ndarray:
    try:
        volume = load_volume(entry.volume_path)
        mask = load_labelmap(entry.mask_path, coding)
        return extract_features(volume, mask, organ_set, coding, entry.scan_id).values
    except Exception as exc:
        raise FeatureError(f"scan {entry.scan_id}: {exc}") from exc


def build_table(
    manifest: Sequence[ManifestEntry],
    organ_set: Sequence[str] = ORGANS,
    coding: Mapping[str, int] | None = None,
    threads: int = 1,
) -> FeatureTable:
    if coding is None:
        raise FeatureError("an organ coding is required")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            X = list(pool.map(lambda e: _extract_entry(e, organ_set, coding), manifest))
    else:
        X = [_extract_entry(e, organ_set, coding) for e in manifest]
    return FeatureTable(
        [e.scan_id for e in manifest],
        [e.patient_id for e in manifest],
        [e.phase for e in manifest],
        X,
    )
