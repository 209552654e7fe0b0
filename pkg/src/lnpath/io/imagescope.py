"""Aperio ImageScope XML annotations: Annotations/Annotation/Regions/Region/Vertices."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

from ..classes import GlomerulusClass, UnknownLabelError, format_label_set, parse_label_set
from ..geometry import BoundingBox


class AnnotationParseError(ValueError):
    """Malformed or structurally invalid annotation file."""

    def __init__(self, message: str, source: str = "", line: int | None = None):
        where = source + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}" if where else message)
        self.source = source
        self.line = line
        self.reason = message


class Region(NamedTuple):
    box: BoundingBox
    label: str
    classes: frozenset


def parse_imagescope_string(text: str | bytes, aliases: Mapping[str, GlomerulusClass] | None = None,
                            source: str = "<string>") -> list[Region]:
    """Regions of an ImageScope document, each reduced to its vertex envelope.

    The label is the Region's ``Text`` attribute, falling back to the
    enclosing Annotation's ``Name``. Multi-label strings use ``;``, ``,``,
    ``+``, ``|`` or ``/`` separators.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line = exc.position[0] if getattr(exc, "position", None) else None
        raise AnnotationParseError(f"malformed XML ({exc.msg if hasattr(exc, 'msg') else exc})", source, line) \
            from None
    if root.tag != "Annotations":
        raise AnnotationParseError(f"root element must be <Annotations>, got <{root.tag}>", source)
    out = []
    for ann in root.findall("Annotation"):
        ann_name = (ann.get("Name") or "").strip()
        for regions in ann.findall("Regions"):
            for reg in regions.findall("Region"):
                rid = reg.get("Id", "?")
                label = (reg.get("Text") or "").strip() or ann_name
                if not label:
                    raise AnnotationParseError(f"region {rid} has no label", source)
                pts = []
                for v in reg.iter("Vertex"):
                    try:
                        pts.append((float(v.get("X")), float(v.get("Y"))))
                    except (TypeError, ValueError):
                        raise AnnotationParseError(f"region {rid} has a vertex without numeric X/Y", source) from None
                if len(pts) < 3:
                    raise AnnotationParseError(f"region {rid} has {len(pts)} vertices, need at least 3", source)
                xs, ys = [p[0] for p in pts], [p[1] for p in pts]
                try:
                    box = BoundingBox(min(xs), min(ys), max(xs), max(ys))
                except ValueError as exc:
                    raise AnnotationParseError(f"region {rid}: {exc}", source) from None
                classes = parse_label_set(label, aliases)
                out.append(Region(box, label, classes))
    return out


def parse_imagescope_xml(path, aliases: Mapping[str, GlomerulusClass] | None = None) -> list[Region]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise AnnotationParseError(f"cannot read file ({exc.strerror})", str(path)) from None
    return parse_imagescope_string(data, aliases, source=str(path))


def imagescope_document(regions: Iterable[tuple[BoundingBox, Iterable]]) -> str:
    """Rectangular 4-vertex regions, one Annotation layer, labels as ``;``-joined class names."""
    root = ET.Element("Annotations", MicronsPerPixel="0.5")
    ann = ET.SubElement(root, "Annotation", Id="1", Name="Glomeruli", LineColor="65280")
    regs = ET.SubElement(ann, "Regions")
    for i, (box, labels) in enumerate(regions, start=1):
        text = labels if isinstance(labels, str) else format_label_set(labels)
        reg = ET.SubElement(regs, "Region", Id=str(i), Type="1", Text=text)
        verts = ET.SubElement(reg, "Vertices")
        for x, y in ((box.x_min, box.y_min), (box.x_max, box.y_min), (box.x_max, box.y_max), (box.x_min, box.y_max)):
            ET.SubElement(verts, "Vertex", X=repr(float(x)), Y=repr(float(y)), Z="0")
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def write_imagescope_xml(path, regions) -> None:
    Path(path).write_text(imagescope_document(regions))


__all__ = ["AnnotationParseError", "Region", "UnknownLabelError", "imagescope_document", "parse_imagescope_string",
           "parse_imagescope_xml", "write_imagescope_xml"]
