"""Phase labels, the organ feature order, and organ-coding files."""

from __future__ import annotations

from enum import IntEnum
from pathlib import Path
from typing import Mapping

ORGANS: tuple[str, ...] = (
    "liver",
    "pancreas",
    "urinary_bladder",
    "gallbladder",
    "heart",
    "aorta",
    "inferior_vena_cava",
    "portal_splenic_vein",
    "iliac_vena_left",
    "iliac_vena_right",
    "iliac_artery_left",
    "iliac_artery_right",
    "pulmonary_vein",
    "brain",
    "colon",
    "small_bowel",
)
N_FEATURES = len(ORGANS)

# Head/neck vessels are deliberately not part of the feature set.
EXCLUDED_ORGANS = frozenset(
    {
        "internal_carotid_artery_left",
        "internal_carotid_artery_right",
        "internal_jugular_vein_left",
        "internal_jugular_vein_right",
    }
)


class PhaseLabel(IntEnum):
    NON_CONTRAST = 0
    ARTERIAL = 1
    VENOUS = 2
    DELAYED = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | PhaseLabel") -> "PhaseLabel":
        if isinstance(value, str):
            token = value.strip()
            if token.isdigit():
                return cls(int(token))
            try:
                return cls[token.upper()]
            except KeyError:
                raise ValueError(f"unknown phase label {value!r}") from None
        return cls(int(value))


N_CLASSES = len(PhaseLabel)
CLASS_NAMES: tuple[str, ...] = tuple(p.label for p in PhaseLabel)
MERGED_CLASS_NAMES: tuple[str, ...] = ("non_contrast", "arterial_venous", "delayed")


def default_coding() -> dict[str, int]:
    """Label value i+1 for the i-th organ; what the phantom generator writes."""
    return {organ: i + 1 for i, organ in enumerate(ORGANS)}


def read_coding(path: str | Path) -> dict[str, int]:
    """Read an organ coding file.

    One ``organ label`` pair per line (whitespace, ``=`` or ``,`` separated);
    blank lines and ``#`` comments are ignored.
    """
    coding: dict[str, int] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'organ label', got {raw!r}")
        organ, value = parts
        try:
            label = int(value)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: label must be an integer") from None
        if label <= 0:
            raise ValueError(f"{path}:{lineno}: label must be positive (0 is background)")
        if organ in coding:
            raise ValueError(f"{path}:{lineno}: duplicate organ {organ!r}")
        coding[organ] = label
    return coding


def write_coding(coding: Mapping[str, int], path: str | Path) -> None:
    lines = ["# organ label"]
    lines += [f"{organ} {coding[organ]}" for organ in coding]
    Path(path).write_text("\n".join(lines) + "\n")
