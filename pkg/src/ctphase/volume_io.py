"""NIfTI-1 loading and saving for CT volumes and segmentation label maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import nibabel as nib
import numpy as np

from .errors import GridMismatchError, VolumeIOError

_INT16_RANGE = (np.iinfo(np.int16).min, np.iinfo(np.int16).max)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Volume3D:
    """CT intensities in HU on a 3D grid; ``values`` has shape ``dims``."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise VolumeIOError(f"volume must be a non-empty 3D grid, got shape {values.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeIOError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "values", _frozen(values.copy() if values is self.values else values))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)


@dataclass(frozen=True)
class LabelMap:
    """Integer organ labels on a 3D grid; 0 is background."""

    labels: np.ndarray
    organ_coding: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise VolumeIOError(f"label map must be a non-empty 3D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise VolumeIOError(f"label map must hold integers, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise VolumeIOError("label map holds negative labels")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int32)))
        object.__setattr__(self, "organ_coding", dict(self.organ_coding))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def organ_mask(self, organ: str) -> np.ndarray:
        return self.labels == self.organ_coding[organ]


def _open(path: str | Path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.is_file():
        raise VolumeIOError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeIOError(f"{path}: unreadable NIfTI file ({exc})") from exc
    # Nifti2Image subclasses Nifti1Image, so test the exact type.
    if type(img) is not nib.Nifti1Image:
        raise VolumeIOError(f"{path}: not a NIfTI-1 file ({type(img).__name__})")
    if len(img.shape) != 3:
        raise VolumeIOError(f"{path}: expected a 3D image, got shape {img.shape}")
    return img


def _read(img: nib.Nifti1Image, path) -> np.ndarray:
    try:
        # asanyarray(dataobj) applies scl_slope/scl_inter when they are set
        return np.asanyarray(img.dataobj)
    except Exception as exc:
        raise VolumeIOError(f"{path}: truncated or corrupt image data ({exc})") from exc


def load_volume(path: str | Path) -> Volume3D:
    img = _open(path)
    dtype = img.get_data_dtype()
    if dtype.kind not in "iuf" or dtype.names is not None:
        raise VolumeIOError(f"{path}: unsupported datatype {dtype}")
    data = _read(img, path)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume3D(np.asarray(data, dtype=np.float32), spacing)


def load_labelmap(path: str | Path, organ_coding: Mapping[str, int]) -> LabelMap:
    img = _open(path)
    dtype = img.get_data_dtype()
    if dtype.kind not in "iuf" or dtype.names is not None:
        raise VolumeIOError(f"{path}: unsupported datatype {dtype}")
    data = _read(img, path)
    if data.dtype.kind == "f":
        # some segmentation tools store labels as floats; accept exact integers only
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise VolumeIOError(f"{path}: label map holds non-integer values")
        data = data.astype(np.int64)
    if data.size and data.min() < 0:
        raise VolumeIOError(f"{path}: label map holds negative labels")
    return LabelMap(data, organ_coding)


def check_grid(volume: Volume3D, mask: LabelMap) -> None:
    if volume.dims != mask.dims:
        raise GridMismatchError(
            f"volume grid {volume.dims} does not match label map grid {mask.dims}"
        )


def _affine(spacing) -> np.ndarray:
    return np.diag([*spacing, 1.0])


def save_volume(volume: Volume3D, path: str | Path) -> None:
    """Write a volume; integral values in int16 range are stored as int16."""
    values = volume.values
    lo, hi = _INT16_RANGE
    if values.size and np.all(values == np.round(values)) and values.min() >= lo and values.max() <= hi:
        data = values.astype(np.int16)
    else:
        data = values.astype(np.float32)
    img = nib.Nifti1Image(data, _affine(volume.spacing))
    img.header.set_zooms(volume.spacing)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


def save_labelmap(mask: LabelMap, path: str | Path, spacing=(1.0, 1.0, 1.0)) -> None:
    labels = mask.labels
    dtype = np.uint8 if labels.max(initial=0) <= np.iinfo(np.uint8).max else np.int32
    img = nib.Nifti1Image(labels.astype(dtype), _affine(spacing))
    img.header.set_zooms(tuple(float(s) for s in spacing))
    nib.save(img, str(path))
