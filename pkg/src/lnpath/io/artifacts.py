"""Model artifacts: one ``.npz`` holding parameter arrays plus a JSON header.

The header (stored under ``__artifact__``) records kind, format version,
config snapshot and training metadata. Loading validates all of them and
raises a distinct error class per failure mode.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
KINDS = ("detector", "classifier", "ln", "stain-stats")
_HEADER = "__artifact__"


class ArtifactError(Exception):
    code = "artifact error"


class CorruptArtifactError(ArtifactError):
    code = "corrupt artifact"


class ArtifactVersionError(ArtifactError):
    code = "version mismatch"


class ArtifactKindError(ArtifactError):
    code = "kind mismatch"


class MissingArtifactError(ArtifactError):
    code = "missing artifact"


@dataclass
class ModelArtifact:
    kind: str
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArtifactKindError(f"{ArtifactKindError.code}: unknown artifact kind {self.kind!r}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_artifact(obj, path) -> Path:
    """Save a model (detector, classifier, LN, stain stats) or a :class:`ModelArtifact`."""
    art = obj if isinstance(obj, ModelArtifact) else to_artifact(obj)
    path = Path(path)
    header = {"kind": art.kind, "version": art.version, "config": _jsonable(art.config), "meta": _jsonable(art.meta),
              "params": sorted(art.params)}
    arrays = {f"p/{k}": np.asarray(v) for k, v in art.params.items()}
    arrays[_HEADER] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_artifact(path, expected_kind: str | None = None) -> ModelArtifact:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{MissingArtifactError.code}: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            files = set(z.files)
            if _HEADER not in files:
                raise CorruptArtifactError(f"{CorruptArtifactError.code}: {path} has no header")
            header = json.loads(bytes(z[_HEADER]).decode())
            params = {name[2:]: z[name] for name in files if name.startswith("p/")}
    except ArtifactError:
        raise
    except (zipfile.BadZipFile, OSError, ValueError, EOFError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptArtifactError(f"{CorruptArtifactError.code}: {path} ({type(exc).__name__})") from None
    if not isinstance(header, dict) or "kind" not in header or "version" not in header:
        raise CorruptArtifactError(f"{CorruptArtifactError.code}: {path} header incomplete")
    if header["version"] != FORMAT_VERSION:
        raise ArtifactVersionError(f"{ArtifactVersionError.code}: {path} has format version {header['version']}, "
                                   f"expected {FORMAT_VERSION}")
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ArtifactKindError(f"{ArtifactKindError.code}: {path} holds a {header['kind']!r} artifact, "
                                f"expected {expected_kind!r}")
    if sorted(params) != header.get("params"):
        raise CorruptArtifactError(f"{CorruptArtifactError.code}: {path} parameter list does not match header")
    return ModelArtifact(header["kind"], params, header.get("config", {}), header.get("meta", {}), header["version"])


def to_artifact(model) -> ModelArtifact:
    from ..aggregation import LNModel
    from ..classifier import ClassifierModel
    from ..detector import DetectorModel
    from ..nn_common import state_to_numpy
    from ..stain import StainStats

    if isinstance(model, DetectorModel):
        return ModelArtifact("detector", state_to_numpy(model.net), model.config.to_dict(),
                             {**model.meta, "trained": model.trained})
    if isinstance(model, ClassifierModel):
        return ModelArtifact("classifier", state_to_numpy(model.net), model.config.to_dict(),
                             {**model.meta, "trained": model.trained, "arity": model.arity})
    if isinstance(model, LNModel):
        return ModelArtifact("ln", state_to_numpy(model.net), model.config.to_dict(),
                             {**model.meta, "trained": model.trained})
    if isinstance(model, StainStats):
        return ModelArtifact("stain-stats", {"stain_matrix": model.stain_matrix.matrix,
                                            "conc_percentile_99": np.asarray(model.conc_percentile_99)},
                             {}, {**model.meta, "converged": model.stain_matrix.converged,
                                  "objective": model.stain_matrix.objective})
    raise TypeError(f"cannot build an artifact from {type(model).__name__}")


def from_artifact(art: ModelArtifact):
    """Rebuild the model object; parameter names and shapes must match the config."""
    from ..aggregation import LNConfig, LNModel
    from ..classifier import ClassifierConfig, ClassifierModel
    from ..detector import DetectorConfig, DetectorModel
    from ..nn_common import load_numpy_state
    from ..stain import StainMatrix, StainStats

    meta = dict(art.meta)
    try:
        if art.kind == "stain-stats":
            obj = meta.pop("objective", None)
            obj = float("nan") if obj is None else float(obj)
            W = StainMatrix(art.params["stain_matrix"], converged=bool(meta.pop("converged", True)), objective=obj)
            return StainStats(W, art.params["conc_percentile_99"], meta)
        trained = bool(meta.pop("trained", True))
        if art.kind == "detector":
            from ..detector import _Net

            cfg = DetectorConfig.from_dict(art.config)
            model = DetectorModel(cfg, net=_Net(cfg), trained=trained)
        elif art.kind == "classifier":
            arity = int(meta.pop("arity"))
            model = ClassifierModel(ClassifierConfig.from_dict(art.config), arity=arity, trained=trained)
        else:
            model = LNModel(LNConfig.from_dict(art.config), trained=trained)
        load_numpy_state(model.net, art.params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactKindError(f"{ArtifactKindError.code}: {art.kind} parameters inconsistent with config "
                                f"({exc})") from None
    model.meta = meta
    model.net.eval()
    return model


def save_model(model, path) -> Path:
    return save_artifact(model, path)


def load_model(path, expected_kind: str | None = None):
    return from_artifact(load_artifact(path, expected_kind))
