"""Label vocabularies shared by every stage: glomerulus phenotypes and LN classes."""

from __future__ import annotations

import enum
import re
from typing import Iterable, Mapping

import numpy as np

N_GLOM_CLASSES = 9
N_LN_CLASSES = 6


class GlomerulusClass(enum.IntEnum):
    """Glomerulus phenotypes; the integer value is the fixed vector index."""

    Normal = 0
    Sclerosed = 1
    EndocapillaryHypercellularity = 2
    MesangialHypercellularity = 3
    ThickGBM = 4
    Wireloops = 5
    HyalineThrombi = 6
    Crescent = 7
    SegmentalAdhesion = 8


class LNClass(enum.IntEnum):
    """ISN/RPS lupus nephritis classes I-VI (index 0-5)."""

    I = 0  # noqa: E741
    II = 1
    III = 2
    IV = 3
    V = 4
    VI = 5

    @classmethod
    def parse(cls, value: "str | int | LNClass") -> "LNClass":
        if isinstance(value, LNClass):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        text = str(value).strip().upper()
        if text.startswith("CLASS"):
            text = text[5:].strip()
        try:
            return cls[text]
        except KeyError:
            raise ValueError(f"unknown LN class {value!r}") from None


def _norm_key(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


# canonical names plus spelling variants seen in annotation files
DEFAULT_ALIASES: dict[str, GlomerulusClass] = {
    "normal": GlomerulusClass.Normal,
    "sclerosed": GlomerulusClass.Sclerosed,
    "sclerotic": GlomerulusClass.Sclerosed,
    "globalsclerosis": GlomerulusClass.Sclerosed,
    "endocapillaryhypercellularity": GlomerulusClass.EndocapillaryHypercellularity,
    "endocapillary": GlomerulusClass.EndocapillaryHypercellularity,
    "mesangialhypercellularity": GlomerulusClass.MesangialHypercellularity,
    "messangialhypercellularity": GlomerulusClass.MesangialHypercellularity,
    "mesangial": GlomerulusClass.MesangialHypercellularity,
    "messangial": GlomerulusClass.MesangialHypercellularity,
    "thickgbm": GlomerulusClass.ThickGBM,
    "thickenedgbm": GlomerulusClass.ThickGBM,
    "wireloops": GlomerulusClass.Wireloops,
    "wireloop": GlomerulusClass.Wireloops,
    "hyalinethrombi": GlomerulusClass.HyalineThrombi,
    "hyalinetrombi": GlomerulusClass.HyalineThrombi,
    "hyalinethrombus": GlomerulusClass.HyalineThrombi,
    "crescent": GlomerulusClass.Crescent,
    "cresent": GlomerulusClass.Crescent,
    "segmentaladhesion": GlomerulusClass.SegmentalAdhesion,
    "adhesion": GlomerulusClass.SegmentalAdhesion,
}

LABEL_SEPARATORS = re.compile(r"[;,+|/]")


class UnknownLabelError(ValueError):
    def __init__(self, label: str, known: Iterable[str]):
        self.label = label
        self.known = sorted(known)
        super().__init__(f"unknown glomerulus label {label!r}; known aliases: {', '.join(self.known)}")


def parse_label(name: str, aliases: Mapping[str, GlomerulusClass] | None = None) -> GlomerulusClass:
    """Map one label string to a class through the (normalized) alias table."""
    table = DEFAULT_ALIASES if aliases is None else {_norm_key(k): GlomerulusClass(v) for k, v in aliases.items()}
    try:
        return table[_norm_key(name)]
    except KeyError:
        raise UnknownLabelError(name, table) from None


def parse_label_set(text: str, aliases: Mapping[str, GlomerulusClass] | None = None) -> frozenset[GlomerulusClass]:
    """Parse ``"Normal;ThickGBM"``-style multi-label strings."""
    parts = [p for p in (s.strip() for s in LABEL_SEPARATORS.split(text)) if p]
    if not parts:
        raise UnknownLabelError(text, DEFAULT_ALIASES if aliases is None else aliases)
    return frozenset(parse_label(p, aliases) for p in parts)


def format_label_set(labels: Iterable[GlomerulusClass]) -> str:
    return ";".join(c.name for c in sorted(GlomerulusClass(x) for x in labels))


def to_vector(labels: Iterable[int]) -> np.ndarray:
    """Binary 9-dim vector for a label set."""
    vec = np.zeros(N_GLOM_CLASSES, dtype=np.float64)
    for c in labels:
        vec[int(c)] = 1.0
    return vec


def from_vector(vec, threshold: float = 0.5) -> frozenset[GlomerulusClass]:
    """Label set of entries ``>= threshold`` (used to binarize mixed targets)."""
    vec = np.asarray(vec)
    return frozenset(GlomerulusClass(i) for i in np.flatnonzero(vec >= threshold))
