"""``lnpath`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, manifest=True):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="master seed (re-derives every stage seed)")
    p.add_argument("--artifacts-dir", help="directory holding stage artifacts")
    p.add_argument("--out", help="output path")
    if manifest:
        p.add_argument("manifest", help="manifest.json")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lnpath", description="Glomerulus detection, phenotyping and LN-class grading.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("synth", help="write a synthetic cohort (PNG + ImageScope XML + manifest)")
    _common(p, manifest=False)
    p.add_argument("--json-annotations", action="store_true", help="write canonical JSON instead of XML")
    p = sub.add_parser("ingest", help="convert annotations to canonical JSON and write a new manifest")
    _common(p)
    p = sub.add_parser("normalize", help="fit target stain statistics (optionally write normalized slides)")
    _common(p)
    p.add_argument("--target-slide", help="reference slide id (default: first training slide)")
    for name, h in (("train-detector", "train the glomerulus detector"),
                    ("eval-detector", "AP/AR of the detector on the test split"),
                    ("train-classifier", "pretrain and fine-tune the glomerulus classifier"),
                    ("eval-classifier", "multi-label metrics on test-split true-positive crops"),
                    ("train-ln", "train the patient LN-class network"),
                    ("predict", "run the full pipeline and write a report")):
        p = sub.add_parser(name, help=h)
        _common(p)
        if name in ("train-classifier", "eval-classifier"):
            p.add_argument("--crop-source", choices=("detector", "annotations"), default="detector",
                           help="crop detector true positives or the annotated boxes themselves")
        if name == "predict":
            p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
            p.add_argument("--overlays", help="directory for overlay PNGs")
    p = sub.add_parser("report", help="print the plain-text summary of a report JSON")
    p.add_argument("report", help="report JSON written by predict")
    p.add_argument("--out", help="write the table here instead of stdout")
    return ap


def _config(args):
    from .io.config import RunConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "artifacts_dir", None):
        cfg.artifacts_dir = args.artifacts_dir
    return cfg


def _split(manifest, cfg):
    from . import pipeline as P

    path = Path(cfg.artifacts_dir) / "split.json"
    if path.exists():
        return P.load_split(path)
    split = P.patient_split(manifest, cfg.split, cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    P.save_split(path, split)
    return split


def _emit(text: str, out=None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _log(msg):
    print(msg, file=sys.stderr)


def _load(cfg, kind):
    from .io.artifacts import load_model

    return load_model(cfg.artifact_path(kind), kind)


def _crop_detector(args, cfg):
    return None if args.crop_source == "annotations" else _load(cfg, "detector")


def _run(args) -> int:
    from . import pipeline as P
    from .io.artifacts import save_model
    from .io.manifest import DatasetManifest, save_image

    if args.command == "report":
        report = json.loads(Path(args.report).read_text())
        _emit(P.summary_table(report), args.out)
        return EXIT_OK
    cfg = _config(args)
    if args.command == "synth":
        out = Path(args.out or "cohort")
        from .synth import generate_cohort

        m = P.write_cohort(generate_cohort(cfg.synth.cohort_spec()), out, xml=not args.json_annotations)
        _log(f"wrote {len(m.slides)} slides for {len(m.patients)} patients to {out}")
        return EXIT_OK
    manifest = DatasetManifest.load(args.manifest)
    if args.command == "ingest":
        m = P.ingest(manifest, args.out or Path(args.manifest).parent / "ingested")
        _log(f"ingested {len(m.slides)} slides")
        return EXIT_OK
    train, val, test = _split(manifest, cfg)
    adir = Path(cfg.artifacts_dir)
    adir.mkdir(parents=True, exist_ok=True)
    if args.command == "normalize":
        stats = P.fit_stain_target(manifest, train, cfg, args.target_slide)
        save_model(stats, cfg.artifact_path("stain-stats"))
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            for e, img in P.normalized_slides(manifest, P._entries(manifest, [s.slide_id for s in manifest.slides]),
                                              stats, cfg):
                save_image(Path(args.out) / f"{e.slide_id}.png", img)
        _log(f"stain target from slide {stats.meta['reference_slide']}")
        return EXIT_OK
    if args.command == "train-ln":
        save_model(P.train_ln_stage(manifest, train, cfg, _log), cfg.artifact_path("ln"))
        return EXIT_OK
    stats = _load(cfg, "stain-stats")
    if args.command == "train-detector":
        save_model(P.train_detector_stage(manifest, train, stats, cfg, _log), cfg.artifact_path("detector"))
        return EXIT_OK
    if args.command == "eval-detector":
        res = P.evaluate_detector_stage(manifest, test, stats, _load(cfg, "detector"), cfg)
        _emit(json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n", args.out)
        return EXIT_OK
    if args.command == "train-classifier":
        model = P.train_classifier_stage(manifest, train, stats, _crop_detector(args, cfg), cfg, _log)
        save_model(model, cfg.artifact_path("classifier"))
        return EXIT_OK
    if args.command == "eval-classifier":
        res = P.evaluate_classifier_stage(manifest, test, stats, _crop_detector(args, cfg),
                                          _load(cfg, "classifier"), cfg)
        _emit(json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n", args.out)
        return EXIT_OK
    if args.command == "predict":
        arts = P.PipelineArtifacts.load(adir)
        ids = {"train": train, "val": val, "test": test}.get(args.split)
        report = P.run_pipeline(manifest, arts, cfg, slide_ids=ids, overlay_dir=args.overlays)
        text = P.report_json(report)
        if args.out:
            _emit(text, args.out)
            _emit(P.summary_table(report), str(Path(args.out).with_suffix(".txt")))
        else:
            _emit(text)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    from .aggregation import NoGlomeruliError
    from .classes import UnknownLabelError
    from .io.artifacts import ArtifactError
    from .io.config import ConfigError
    from .io.imagescope import AnnotationParseError
    from .io.manifest import ManifestError
    from .nn_common import TrainingError
    from .pipeline import DataError

    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        _log(f"lnpath: config error: {exc}")
        return EXIT_USAGE
    except TrainingError as exc:
        _log(f"lnpath: training failed: {exc}")
        return EXIT_TRAIN
    except (DataError, ManifestError, AnnotationParseError, UnknownLabelError, ArtifactError, NoGlomeruliError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        _log(f"lnpath: data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
