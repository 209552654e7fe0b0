"""ImageScope parsing, manifests, artifacts and run configs."""

import json
import zipfile

import numpy as np
import pytest
import torch

from lnpath.aggregation import LNConfig, PatientRecord, ln_probabilities, train_ln_classifier
from lnpath.classes import GlomerulusClass as G, LNClass, UnknownLabelError
from lnpath.classifier import ClassifierConfig, finetune, predict_proba, pretrain
from lnpath.detector import DetectorConfig, detect, train_detector
from lnpath.geometry import BoundingBox
from lnpath.io.artifacts import (
    FORMAT_VERSION, ArtifactKindError, ArtifactVersionError, CorruptArtifactError, MissingArtifactError,
    ModelArtifact, load_artifact, load_model, save_artifact, save_model,
)
from lnpath.io.config import ConfigError, RunConfig, dump_config, from_dict, load_config, to_dict
from lnpath.io.imagescope import (
    AnnotationParseError, imagescope_document, parse_imagescope_string, parse_imagescope_xml, write_imagescope_xml,
)
from lnpath.io.manifest import (
    DatasetManifest, ManifestError, PatientEntry, SlideEntry, load_annotations, save_annotations,
)
from lnpath.stain import compute_stain_stats, normalize
from lnpath.synth import SynthSpec, binary_crop_dataset, crop_dataset, generate_cohort, generate_slide, CohortSpec


def _doc(regions_xml: str, name: str = "Glomeruli") -> str:
    return (f'<Annotations MicronsPerPixel="0.5">\n<Annotation Id="1" Name="{name}">\n<Regions>\n'
            f"{regions_xml}</Regions>\n</Annotation>\n</Annotations>\n")


def _region(text, pts, rid=1):
    verts = "".join(f'<Vertex X="{x}" Y="{y}" Z="0"/>' for x, y in pts)
    return f'<Region Id="{rid}" Text="{text}"><Vertices>{verts}</Vertices></Region>\n'


RECT = [(10, 20), (110, 20), (110, 220), (10, 220)]


# ---------------------------------------------------------------- ImageScope fixtures

def test_rectangle_region():
    regs = parse_imagescope_string(_doc(_region("Normal", RECT)))
    assert len(regs) == 1
    assert regs[0].box.as_tuple() == (10.0, 20.0, 110.0, 220.0)
    assert regs[0].classes == frozenset({G.Normal})
    assert regs[0].label == "Normal"


def test_polygon_envelope():
    pts = [(50, 10), (80, 20), (95, 45), (90, 80), (55, 99), (20, 85), (12, 50), (25, 18)]
    (r,) = parse_imagescope_string(_doc(_region("Crescent", pts)))
    assert r.box.as_tuple() == (12.0, 10.0, 95.0, 99.0)


def test_empty_regions():
    assert parse_imagescope_string(_doc("")) == []
    assert parse_imagescope_string("<Annotations/>") == []


def test_malformed_xml_reports_line():
    text = _doc(_region("Normal", RECT)).replace("</Regions>", "</Regionz>")
    with pytest.raises(AnnotationParseError) as ei:
        parse_imagescope_string(text, source="bad.xml")
    assert ei.value.line == 5
    assert "bad.xml:5" in str(ei.value)


def test_unknown_label_lists_aliases():
    with pytest.raises(UnknownLabelError) as ei:
        parse_imagescope_string(_doc(_region("Fibrous Thing", RECT)))
    msg = str(ei.value)
    assert "Fibrous Thing" in msg
    for known in ("Normal", "Crescent", "Messangial"):
        assert known.lower() in msg.lower()


def test_too_few_vertices():
    with pytest.raises(AnnotationParseError, match="2 vertices"):
        parse_imagescope_string(_doc(_region("Normal", RECT[:2])))


def test_annotation_name_fallback():
    (r,) = parse_imagescope_string(_doc(_region("", RECT), name="Sclerosed"))
    assert r.classes == frozenset({G.Sclerosed})


def test_multi_label_region():
    (r,) = parse_imagescope_string(_doc(_region("Mesangial; Wireloops", RECT)))
    assert r.classes == frozenset({G.MesangialHypercellularity, G.Wireloops})


def test_misspelled_aliases():
    regs = parse_imagescope_string(_doc(_region("Messangial", RECT) + _region("Cresent", RECT, 2)))
    assert [r.classes for r in regs] == [frozenset({G.MesangialHypercellularity}), frozenset({G.Crescent})]


def test_custom_alias_table():
    (r,) = parse_imagescope_string(_doc(_region("GS", RECT)), aliases={"gs": G.Sclerosed})
    assert r.classes == frozenset({G.Sclerosed})


def test_non_numeric_vertex():
    with pytest.raises(AnnotationParseError, match="numeric"):
        parse_imagescope_string(_doc(_region("Normal", [(10, 20), ("abc", 5), (3, 4)])))


def test_wrong_root_and_unlabeled():
    with pytest.raises(AnnotationParseError):
        parse_imagescope_string("<Foo/>")
    with pytest.raises(AnnotationParseError, match="no label"):
        parse_imagescope_string(_doc(_region("", RECT), name=""))


def test_degenerate_region_is_structured_error():
    with pytest.raises(AnnotationParseError):
        parse_imagescope_string(_doc(_region("Normal", [(5, 5), (5, 9), (5, 20)])))


def test_parser_totality(tmp_path):
    fixtures = [
        _doc(_region("Normal", RECT)), _doc(""), "<Annotations>", "", "<<<", _doc(_region("??", RECT)),
        _doc(_region("Normal", RECT[:1])), _doc('<Region Id="1" Text="Normal"/>\n'),
        _doc(_region("Normal", [(1, 2), (3, "x"), (5, 6)])), "<Annotations><Annotation/></Annotations>",
    ]
    for i, text in enumerate(fixtures):
        p = tmp_path / f"f{i}.xml"
        p.write_text(text)
        try:
            out = parse_imagescope_xml(p)
            assert isinstance(out, list)
        except (AnnotationParseError, UnknownLabelError):
            pass


def test_missing_file(tmp_path):
    with pytest.raises(AnnotationParseError, match="cannot read"):
        parse_imagescope_xml(tmp_path / "nope.xml")


def test_writer_roundtrip(tmp_path):
    regions = [(BoundingBox(1.5, 2, 30, 40), frozenset({G.Normal})),
               (BoundingBox(50, 60, 90, 99.25), frozenset({G.Crescent, G.ThickGBM}))]
    write_imagescope_xml(tmp_path / "a.xml", regions)
    back = parse_imagescope_xml(tmp_path / "a.xml")
    assert [(r.box, r.classes) for r in back] == regions
    assert imagescope_document(regions) == (tmp_path / "a.xml").read_text()


# ---------------------------------------------------------------- manifests and annotations

def _manifest(tmp_path):
    (tmp_path / "a.png").write_bytes(b"")
    slides = [SlideEntry("S1", "P1", "20x", "a.png"), SlideEntry("S2", "P2", "10x", "a.png")]
    return DatasetManifest(slides, [PatientEntry("P1", LNClass.IV), PatientEntry("P2")], tmp_path)


def test_manifest_roundtrip(tmp_path):
    m = _manifest(tmp_path)
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.slides == m.slides and back.patients == m.patients
    assert back.patient("P1").ln_class is LNClass.IV
    assert [s.slide_id for s in back.subset({"S2"}).slides] == ["S2"]


def test_manifest_invariants(tmp_path):
    s = SlideEntry("S1", "P1", "20x", "a.png")
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest([s, s], [PatientEntry("P1")])
    with pytest.raises(ManifestError, match="unknown patients"):
        DatasetManifest([s], [])
    with pytest.raises(ManifestError, match="not found"):
        DatasetManifest([s], [PatientEntry("P1")], tmp_path).check_paths()


def test_manifest_bad_files(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(ManifestError):
        DatasetManifest.load(p)
    p.write_text(json.dumps({"version": 99, "slides": []}))
    with pytest.raises(ManifestError, match="version"):
        DatasetManifest.load(p)
    p.write_text(json.dumps({"version": 1, "slides": [{"slide_id": "x"}], "patients": []}))
    with pytest.raises(ManifestError, match="malformed"):
        DatasetManifest.load(p)


def test_json_annotations_roundtrip(tmp_path):
    ann = [(BoundingBox(0, 0, 10, 10), frozenset({G.Normal})),
           (BoundingBox(5, 5, 20, 30.5), frozenset({G.MesangialHypercellularity, G.Crescent}))]
    save_annotations(tmp_path / "a.json", ann)
    assert load_annotations(tmp_path / "a.json") == ann
    write_imagescope_xml(tmp_path / "a.xml", ann)
    assert load_annotations(tmp_path / "a.xml") == ann


# ---------------------------------------------------------------- artifacts

@pytest.fixture(scope="module")
def models():
    spec = SynthSpec((256, 160), (1, 2), (24, 30))
    slides = [generate_slide(spec, seed=i) for i in range(2)]
    det = train_detector([(s.image, [a.box for a in s.annotations]) for s in slides],
                         DetectorConfig(epochs=2, batch_size=2, max_side=256, score_threshold=0.0, seed=3))
    ccfg = ClassifierConfig(input_side=16, channels=(4, 8), pretrain_epochs=1, finetune_epochs=1, seed=2)
    base = pretrain(binary_crop_dataset(6, 16, seed=0), ccfg)
    cohort = generate_cohort(CohortSpec(patients_per_ln_class=1, glomeruli_per_patient=(2, 3),
                                        synth=SynthSpec((320, 160), (1, 2), (24, 30)), seed=4))
    cls = finetune(base, crop_dataset(cohort, 16, seed=0), ccfg)
    ln = train_ln_classifier(cohort.patients, LNConfig(hidden=(4, 4), epochs=5))
    stats = compute_stain_stats(slides[0].image)
    return {"detector": det, "classifier": cls, "ln": ln, "stain-stats": stats, "slides": slides}


def _predict(kind, model, slides):
    rng = np.random.default_rng(0)
    if kind == "detector":
        return [(d.box.as_tuple(), d.score) for s in slides for d in detect(s.image, model)]
    if kind == "classifier":
        return predict_proba([rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(8)], model).tolist()
    if kind == "ln":
        return ln_probabilities(rng.random((8, 9)), model).tolist()
    return normalize(slides[1].image, model).tobytes()


@pytest.mark.parametrize("kind", ["detector", "classifier", "ln", "stain-stats"])
def test_artifact_prediction_identity(models, tmp_path, kind):
    model = models[kind]
    save_model(model, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz", kind)
    before, after = _predict(kind, model, models["slides"]), _predict(kind, back, models["slides"])
    assert before == after
    if kind == "detector":
        assert len(before) > 0


def test_artifact_state_and_meta(models, tmp_path):
    save_model(models["detector"], tmp_path / "d.npz")
    art = load_artifact(tmp_path / "d.npz")
    assert art.kind == "detector" and art.version == FORMAT_VERSION
    assert art.config["seed"] == 3 and art.meta["trained"] is True
    ref = models["detector"].net.state_dict()
    for name, arr in art.params.items():
        assert np.array_equal(arr, ref[name].numpy())


def test_truncated_artifact(models, tmp_path):
    p = tmp_path / "c.npz"
    save_model(models["classifier"], p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptArtifactError, match="corrupt artifact"):
        load_model(p)
    p.write_bytes(b"")
    with pytest.raises(CorruptArtifactError, match="corrupt artifact"):
        load_model(p)


def test_kind_mismatch(models, tmp_path):
    p = tmp_path / "d.npz"
    save_model(models["detector"], p)
    with pytest.raises(ArtifactKindError, match="kind mismatch"):
        load_model(p, "classifier")


def test_version_mismatch(tmp_path):
    p = tmp_path / "v.npz"
    save_artifact(ModelArtifact("ln", {}, version=FORMAT_VERSION + 1), p)
    with pytest.raises(ArtifactVersionError, match="version mismatch"):
        load_artifact(p)


def test_missing_and_headerless(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_artifact(tmp_path / "none.npz")
    np.savez(tmp_path / "h.npz", x=np.zeros(3))
    with pytest.raises(CorruptArtifactError):
        load_artifact(tmp_path / "h.npz")


def test_params_inconsistent_with_config(models, tmp_path):
    art = load_artifact(save_model(models["ln"], tmp_path / "l.npz"))
    art.config["hidden"] = [5, 5]
    save_artifact(art, tmp_path / "l2.npz")
    with pytest.raises(ArtifactKindError):
        load_model(tmp_path / "l2.npz")


def test_error_codes_distinct():
    codes = {e.code for e in (CorruptArtifactError, ArtifactVersionError, ArtifactKindError, MissingArtifactError)}
    assert len(codes) == 4


# ---------------------------------------------------------------- run config

def test_config_roundtrip(tmp_path):
    cfg = RunConfig().with_seed(7)
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.yaml") == cfg
    assert cfg.detector.seed == 7003 and cfg.ln.seed == 7005


def test_config_overrides():
    cfg = from_dict({"detector": {"epochs": 3}, "split": [0.5, 0.25, 0.25], "seed": 4})
    assert cfg.detector.epochs == 3 and cfg.split == (0.5, 0.25, 0.25)
    assert cfg.classifier == ClassifierConfig()
    assert to_dict(cfg)["detector"]["epochs"] == 3


@pytest.mark.parametrize("doc", [
    {"detector": {"epochz": 3}},
    {"wat": 1},
    {"split": [0.5, 0.5, 0.5]},
    {"classifier": {"threshold": 2.0}},
    {"ln": {"epochs": 0}},
])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_config_unreadable(tmp_path):
    (tmp_path / "c.yaml").write_text("detector: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
