"""Synthetic CT phantoms with organ-specific contrast enhancement curves.

Each organ is an axis-aligned ellipsoid whose intensity follows a
piecewise-linear enhancement curve sampled at a phase-dependent time after
injection, plus Gaussian noise.  The curves live in a versioned data file
(``data/enhancement_profile_v1.csv``) and are synthetic: they encode the
timing order of organ enhancement, not measured HU values.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .features import ManifestEntry, write_manifest
from .labels import ORGANS, PhaseLabel, default_coding, write_coding
from .volume_io import LabelMap, Volume3D, save_labelmap, save_volume

PROFILE_FILE = "enhancement_profile_v1.csv"
PHASE_ANCHORS_S = {
    PhaseLabel.NON_CONTRAST: 0.0,
    PhaseLabel.ARTERIAL: 30.0,
    PhaseLabel.VENOUS: 70.0,
    PhaseLabel.DELAYED: 180.0,
}
BACKGROUND_HU = 40.0

FULL = frozenset(ORGANS)
ABDOMEN_ONLY = FULL - {"brain", "heart", "pulmonary_vein"}
NO_PELVIS = FULL - {"urinary_bladder", "iliac_vena_left", "iliac_vena_right", "iliac_artery_left", "iliac_artery_right"}
COVERAGES = {"full": FULL, "abdomen_only": ABDOMEN_ONLY, "no_pelvis": NO_PELVIS}


@dataclass(frozen=True)
class EnhancementProfile:
    baseline_hu: float
    peak_hu: float
    onset_s: float
    peak_s: float
    washout_s: float

    def __post_init__(self):
        if not self.onset_s < self.peak_s < self.washout_s:
            raise ValueError("profile times must satisfy onset < peak < washout")


def enhancement_at(profile: EnhancementProfile, t: float) -> float:
    if t < 0:
        raise ValueError("time must be non-negative")
    p = profile
    if t <= p.onset_s or t >= p.washout_s:
        return p.baseline_hu
    if t <= p.peak_s:
        frac = (t - p.onset_s) / (p.peak_s - p.onset_s)
    else:
        frac = (p.washout_s - t) / (p.washout_s - p.peak_s)
    return p.baseline_hu + frac * (p.peak_hu - p.baseline_hu)


def load_profiles(path: str | Path | None = None) -> dict[str, EnhancementProfile]:
    if path is None:
        text = resources.files("ctphase.data").joinpath(PROFILE_FILE).read_text()
    else:
        text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    profiles = {}
    for row in csv.DictReader(io.StringIO("\n".join(lines))):
        profiles[row["organ"]] = EnhancementProfile(
            *(float(row[k]) for k in ("baseline_hu", "peak_hu", "onset_s", "peak_s", "washout_s"))
        )
    missing = set(ORGANS) - set(profiles)
    if missing:
        raise ValueError(f"profile table lacks {sorted(missing)}")
    return profiles


def _default_placements() -> dict[str, tuple[tuple[float, float, float], tuple[float, float, float]]]:
    # 4x4 grid of 10-voxel cells in x/y; vessels are thinner and longer
    placements = {}
    for i, organ in enumerate(ORGANS):
        cx, cy = 5.0 + 10.0 * (i % 4), 5.0 + 10.0 * (i // 4)
        if "iliac" in organ or organ in ("aorta", "inferior_vena_cava", "portal_splenic_vein", "pulmonary_vein"):
            radii = (2.5, 2.5, 6.0)
        else:
            radii = (4.0, 4.0, 5.0)
        placements[organ] = ((cx, cy, 7.5), radii)
    return placements


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (40, 40, 16)
    spacing: tuple[float, float, float] = (1.5, 1.5, 3.0)
    placements: Mapping[str, tuple] = field(default_factory=_default_placements)
    noise_sd: float = 10.0
    coverage: frozenset = FULL
    seed: int = 0
    jitter_s: float = 8.0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"bad dims {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError(f"bad spacing {self.spacing}")
        if self.noise_sd < 0 or self.jitter_s < 0:
            raise ValueError("noise_sd and jitter_s must be non-negative")
        unknown = set(self.coverage) - set(ORGANS)
        if unknown:
            raise ValueError(f"unknown organs in coverage: {sorted(unknown)}")
        for organ in self.coverage:
            if organ not in self.placements:
                raise ValueError(f"no placement for {organ}")
            center, radii = self.placements[organ]
            for c, r, d in zip(center, radii, self.dims):
                if r <= 0 or c - r < 0 or c + r > d - 1:
                    raise ValueError(f"{organ} ellipsoid does not fit inside dims {self.dims}")


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    grid = np.ogrid[tuple(slice(0, d) for d in dims)]
    dist = sum(((axis - c) / r) ** 2 for axis, c, r in zip(grid, center, radii))
    return dist <= 1.0


def sample_time(phase: PhaseLabel, rng: np.random.Generator, jitter_s: float) -> float:
    anchor = PHASE_ANCHORS_S[PhaseLabel(phase)]
    return float(rng.uniform(max(0.0, anchor - jitter_s), anchor + jitter_s))


def generate_phantom(spec: PhantomSpec, phase, profiles: Mapping[str, EnhancementProfile] | None = None):
    """Volume, label map and phase for one synthetic scan; deterministic in ``spec.seed``."""
    spec.validate()
    phase = PhaseLabel.parse(phase)
    profiles = profiles or load_profiles()
    coding = default_coding()
    rng = np.random.default_rng(spec.seed)
    t = sample_time(phase, rng, spec.jitter_s)

    clean = np.full(spec.dims, BACKGROUND_HU)
    labels = np.zeros(spec.dims, dtype=np.int32)
    for organ in ORGANS:
        if organ not in spec.coverage:
            continue
        center, radii = spec.placements[organ]
        inside = ellipsoid_mask(spec.dims, center, radii)
        labels[inside] = coding[organ]
        clean[inside] = enhancement_at(profiles[organ], t)
    noisy = clean + rng.normal(0.0, spec.noise_sd, size=spec.dims) if spec.noise_sd else clean
    # integer HU, as stored by scanners; "+ 0.0" turns -0.0 into 0.0
    volume = Volume3D((np.round(noisy) + 0.0).astype(np.float32), spec.spacing)
    return volume, LabelMap(labels, coding), phase


def scan_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_corpus(
    out_dir: str | Path,
    n_per_phase: int,
    abdomen_only_frac: float = 0.2,
    no_pelvis_frac: float = 0.0,
    seed: int = 42,
    base_spec: PhantomSpec | None = None,
    id_prefix: str = "",
    threads: int = 1,
) -> Path:
    """Write ``n_per_phase`` patients with one scan per phase; returns the manifest path.

    Coverage is assigned per patient: exactly ``round(frac * n_per_phase)``
    patients are abdomen-only and as many again no-pelvis, so the missing-organ
    fractions are exact.
    """
    if n_per_phase < 1:
        raise ValueError("n_per_phase must be >= 1")
    if abdomen_only_frac < 0 or no_pelvis_frac < 0 or abdomen_only_frac + no_pelvis_frac > 1:
        raise ValueError("coverage fractions must be non-negative and sum to at most 1")
    base_spec = base_spec or PhantomSpec()
    base_spec.validate()
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    n_abd = round(abdomen_only_frac * n_per_phase)
    n_nop = round(no_pelvis_frac * n_per_phase)
    order = np.random.default_rng(seed).permutation(n_per_phase)
    coverage_of = {}
    for rank, patient in enumerate(order):
        coverage_of[int(patient)] = ABDOMEN_ONLY if rank < n_abd else NO_PELVIS if rank < n_abd + n_nop else FULL

    profiles = load_profiles()
    jobs = []
    for patient in range(n_per_phase):
        for phase in PhaseLabel:
            index = len(jobs)
            scan_id = f"{id_prefix}S{index:05d}"
            spec = replace(base_spec, coverage=coverage_of[patient], seed=scan_seed(seed, index))
            entry = ManifestEntry(
                scan_id=scan_id,
                patient_id=f"{id_prefix}P{patient:04d}",
                phase=phase,
                volume_path=Path("volumes") / f"{scan_id}.nii.gz",
                mask_path=Path("masks") / f"{scan_id}.nii.gz",
            )
            jobs.append((entry, spec))

    def write(job):
        entry, spec = job
        volume, mask, _ = generate_phantom(spec, entry.phase, profiles)
        save_volume(volume, out / entry.volume_path)
        save_labelmap(mask, out / entry.mask_path, spec.spacing)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(write, jobs))
    else:
        for job in jobs:
            write(job)

    manifest = out / "manifest.csv"
    write_manifest([entry for entry, _ in jobs], manifest)
    write_coding(default_coding(), out / "organ_coding.txt")
    return manifest
