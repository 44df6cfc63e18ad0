"""Data model, run-directory layout and artifact serialization

Run directories are laid out as::

    runs/<model_slug>/
        meta.json                  model record and run manifest
        sweep.json                 per-layer curves, best layer
        descriptors.json
        layers/<L>/vectors.f32     21 x d_model, little-endian float32
        layers/<L>/meta.json
        layers/<L>/rdm.json
        conditions/<B-D>/          generation conditions: a layer directory
                                   plus samples.json and activations.f32
        steering/<emotion>.json    steering trace
        equivalence_report.json
        decomposition_report.json

Condition A of the decomposition is the best-layer comprehension RDM.
Every JSON artifact carries the ``manifest_id`` of the run that wrote it.
"""
from __future__ import annotations

import datetime
import functools
import json
import logging
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from numbers import Integral

import numpy as np
import pandas as pd
from dask.base import tokenize
from fsspec.utils import stringify_path

from emotion_geometry.errors import ValidationError
from emotion_geometry.stimuli import EMOTIONS, is_ordered_subset

logger = logging.getLogger(__name__)

VARIANTS = ("base", "instruct")
BACKENDS = ("named_hook", "hidden_state_sequence")
PRECISIONS = ("fp16", "bf16", "fp32", "int8")

# Short spellings found in published tables
_VARIANT_ALIASES = {"b": "base", "i": "instruct"}
_BACKEND_ALIASES = {
    "tl": "named_hook",
    "transformerlens": "named_hook",
    "hf": "hidden_state_sequence",
    "huggingface": "hidden_state_sequence",
}

TABLE_COLUMNS = [
    "model_id",
    "family",
    "variant",
    "size_b",
    "n_layers",
    "d_model",
    "backend_kind",
]
PUBLISHED_COLUMNS = ["best_layer", "best_layer_pct", "anisotropy", "rdm_std"]

VECTOR_FILE = "vectors.f32"
META_FILE = "meta.json"
RDM_FILE = "rdm.json"
SWEEP_FILE = "sweep.json"
DESCRIPTORS_FILE = "descriptors.json"


def model_slug(model_id: str) -> str:
    """Directory name for a model

    >>> model_slug("mistralai/Mistral-7B-v0.1")
    'mistralai_Mistral-7B-v0.1'
    """
    return model_id.replace("/", "_").replace("\\", "_")


@dataclass(frozen=True)
class ModelRecord:
    model_id: str
    family: str
    variant: str
    size_b: float
    n_layers: int
    d_model: int
    backend_kind: str
    precision: str = "fp16"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"Unknown variant {self.variant!r}")
        if self.backend_kind not in BACKENDS:
            raise ValidationError(f"Unknown backend_kind {self.backend_kind!r}")
        if self.precision not in PRECISIONS:
            raise ValidationError(f"Unknown precision {self.precision!r}")
        if not isinstance(self.n_layers, Integral) or self.n_layers < 1:
            raise ValidationError(f"n_layers must be >= 1, got {self.n_layers}")
        if not isinstance(self.d_model, Integral) or self.d_model < 1:
            raise ValidationError(f"d_model must be >= 1, got {self.d_model}")
        if not self.size_b > 0:
            raise ValidationError(f"size_b must be positive, got {self.size_b}")

    @property
    def slug(self) -> str:
        return model_slug(self.model_id)

    def replace(self, **kwargs) -> ModelRecord:
        return type(self)(**{**asdict(self), **kwargs})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelRecord:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def check_layer(record: ModelRecord, layer) -> int:
    if not isinstance(layer, Integral) or isinstance(layer, bool):
        raise TypeError(f"Layer index must be an integer, got {layer!r}")
    if not 0 <= layer < record.n_layers:
        raise IndexError(
            f"Layer {layer} out of range for {record.model_id} "
            f"with {record.n_layers} layers"
        )
    return int(layer)


@dataclass
class EmotionVectorSet:
    """Centered per-emotion vectors at one layer of one model

    Vectors are held as little-endian float32, the persisted precision.
    """

    model: ModelRecord
    layer: int
    vectors: np.ndarray
    emotion_order: tuple = EMOTIONS
    centered: bool = True

    def __post_init__(self):
        self.emotion_order = tuple(self.emotion_order)
        self.vectors = np.ascontiguousarray(self.vectors, dtype="<f4")
        self.validate()

    def validate(self):
        if self.emotion_order != EMOTIONS:
            raise ValidationError(
                "Emotion order must be the canonical alphabetical vocabulary"
            )
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(EMOTIONS):
            raise ValidationError(
                f"Expected {len(EMOTIONS)} emotion vectors, got array of shape "
                f"{self.vectors.shape}"
            )
        if self.vectors.shape[1] != self.model.d_model:
            raise ValidationError(
                f"Vector width {self.vectors.shape[1]} does not match "
                f"d_model={self.model.d_model} of {self.model.model_id}"
            )
        check_layer(self.model, self.layer)
        if self.centered and np.isfinite(self.vectors).all():
            vecs = self.vectors.astype(np.float64)
            mean_norm = np.linalg.norm(vecs, axis=1).mean()
            if np.abs(vecs.sum(axis=0)).max() > 1e-3 * mean_norm:
                raise ValidationError("Vector set is marked centered but is not")

    @property
    def d_model(self) -> int:
        return self.vectors.shape[1]

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.vectors).all())

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)

    def restrict(self, labels) -> VectorSubset:
        return restrict_vectors(self, labels)


@dataclass
class GenerationVectorSet:
    """Unit-normalized generation-protocol vectors over the 20 non-neutral labels"""

    model: ModelRecord
    layer: int
    vectors: np.ndarray
    emotion_order: tuple
    protocol: dict = field(default_factory=dict)

    def __post_init__(self):
        self.emotion_order = tuple(self.emotion_order)
        self.vectors = np.ascontiguousarray(self.vectors, dtype="<f4")
        if "neutral" in self.emotion_order or not is_ordered_subset(
            self.emotion_order
        ):
            raise ValidationError(
                f"Not a generation label order: {list(self.emotion_order)}"
            )
        if self.vectors.shape != (len(self.emotion_order), self.model.d_model):
            raise ValidationError(
                f"Expected a {len(self.emotion_order)} x {self.model.d_model} "
                f"matrix, got {self.vectors.shape}"
            )
        check_layer(self.model, self.layer)

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)

    def restrict(self, labels) -> VectorSubset:
        return restrict_vectors(self, labels)


@dataclass
class VectorSubset:
    """Rows of a vector set for an ordered subset of its labels"""

    model: ModelRecord
    layer: int
    vectors: np.ndarray
    emotion_order: tuple

    def as_float64(self) -> np.ndarray:
        return np.asarray(self.vectors, dtype=np.float64)

    def restrict(self, labels) -> VectorSubset:
        return restrict_vectors(self, labels)


def restrict_vectors(vectors, labels) -> VectorSubset:
    labels = tuple(labels)
    order = tuple(vectors.emotion_order)
    missing = [label for label in labels if label not in order]
    if missing:
        raise ValidationError(f"Labels not present in vector set: {missing}")
    if not is_ordered_subset(labels):
        raise ValidationError(f"Labels are not in canonical order: {list(labels)}")
    idx = [order.index(label) for label in labels]
    return VectorSubset(vectors.model, vectors.layer, vectors.vectors[idx], labels)


@dataclass
class RDM:
    """Cosine-similarity matrix over an ordered set of emotion labels"""

    matrix: np.ndarray
    emotion_order: tuple = EMOTIONS
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.emotion_order = tuple(self.emotion_order)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        n = len(self.emotion_order)
        if self.matrix.shape != (n, n):
            raise ValidationError(
                f"RDM of shape {self.matrix.shape} does not match {n} labels"
            )
        if not is_ordered_subset(self.emotion_order):
            raise ValidationError(
                f"RDM labels are not in canonical order: {list(self.emotion_order)}"
            )
        if not self.contains_nan and not np.allclose(
            self.matrix, self.matrix.T, rtol=0, atol=1e-6
        ):
            raise ValidationError("RDM is not symmetric")

    @property
    def contains_nan(self) -> bool:
        return bool(np.isnan(self.matrix).any())

    @property
    def upper(self) -> np.ndarray:
        """Entries strictly above the diagonal, row-major"""
        i, j = np.triu_indices(len(self.emotion_order), k=1)
        return self.matrix[i, j]

    @property
    def off_diag_std(self) -> float:
        return float(np.std(self.upper))

    @property
    def layer(self):
        return self.source.get("layer")

    @property
    def model_id(self):
        return self.source.get("model_id")

    def __len__(self):
        return len(self.emotion_order)

    def restrict(self, labels) -> RDM:
        """Sub-matrix over an ordered subset of the labels"""
        labels = tuple(labels)
        missing = [label for label in labels if label not in self.emotion_order]
        if missing:
            raise ValidationError(f"Labels not present in RDM: {missing}")
        if not is_ordered_subset(labels):
            raise ValidationError(f"Labels are not in canonical order: {list(labels)}")
        idx = [self.emotion_order.index(label) for label in labels]
        return RDM(self.matrix[np.ix_(idx, idx)], labels, dict(self.source))

    def to_json(self) -> dict:
        return {
            "emotion_order": list(self.emotion_order),
            "matrix": self.matrix.tolist(),
            "off_diag_std": self.off_diag_std,
            "contains_nan": self.contains_nan,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, d: dict) -> RDM:
        matrix = np.array(
            [[np.nan if v is None else v for v in row] for row in d["matrix"]],
            dtype=np.float64,
        )
        return cls(matrix, d["emotion_order"], d.get("source", {}))


@dataclass(frozen=True)
class RunManifest:
    started_at: str
    precision: str
    corpus_hash: str
    software: dict = field(default_factory=dict)
    hardware: str = ""
    seeds: dict = field(default_factory=dict)
    quantization: str | None = None
    finished_at: str | None = None

    @functools.cached_property
    def manifest_id(self) -> str:
        return "manifest-" + tokenize(
            self.started_at, self.precision, self.corpus_hash, sorted(self.seeds.items())
        )

    @classmethod
    def collect(
        cls, precision, corpus_hash, seeds=None, quantization=None
    ) -> RunManifest:
        """Snapshot the running environment"""
        return cls(
            started_at=_now(),
            precision=precision,
            corpus_hash=corpus_hash,
            software=software_versions(),
            hardware=hardware_description(),
            seeds=dict(seeds or {}),
            quantization=quantization,
        )

    def finish(self) -> RunManifest:
        d = asdict(self)
        d["finished_at"] = _now()
        out = type(self)(**d)
        # the id names the run, not its end time
        out.__dict__["manifest_id"] = self.manifest_id
        return out

    def to_dict(self) -> dict:
        return {"manifest_id": self.manifest_id, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        out = cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})
        if "manifest_id" in d:
            out.__dict__["manifest_id"] = d["manifest_id"]
        return out


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def software_versions() -> dict:
    versions = {"python": sys.version.split()[0]}
    for name in [
        "numpy",
        "scipy",
        "pandas",
        "dask",
        "torch",
        "transformers",
        "transformer_lens",
        "bitsandbytes",
    ]:
        module = sys.modules.get(name)
        if module is None:
            try:
                module = __import__(name)
            except ImportError:
                continue
        versions[name] = getattr(module, "__version__", "unknown")
    return versions


def hardware_description() -> str:
    desc = f"{platform.platform()} {platform.machine()}"
    torch = sys.modules.get("torch")
    if torch is not None and torch.cuda.is_available():
        desc += f" {torch.cuda.get_device_name(0)}"
    return desc


#
# JSON helpers
#


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    return obj


def write_json(obj, path) -> str:
    path = stringify_path(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    logger.debug("Wrote %s", path)
    return path


def read_json(path):
    with open(stringify_path(path), encoding="utf-8") as f:
        return json.load(f)


#
# Run directories
#


def run_dir_for(root, model_id: str) -> str:
    return os.path.join(stringify_path(root), model_slug(model_id))


def layer_dir(run_dir, layer: int) -> str:
    return os.path.join(stringify_path(run_dir), "layers", str(int(layer)))


def condition_dir(run_dir, condition: str) -> str:
    return os.path.join(stringify_path(run_dir), "conditions", condition)


def write_run_meta(run_dir, record: ModelRecord, manifest: RunManifest) -> str:
    return write_json(
        {
            "manifest_id": manifest.manifest_id,
            "model": record.to_dict(),
            "manifest": manifest.to_dict(),
        },
        os.path.join(stringify_path(run_dir), META_FILE),
    )


def read_run_meta(run_dir) -> tuple[ModelRecord, RunManifest]:
    path = os.path.join(stringify_path(run_dir), META_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"No run metadata at {path}")
    meta = read_json(path)
    return ModelRecord.from_dict(meta["model"]), RunManifest.from_dict(meta["manifest"])


def manifest_id_for(run_dir, record: ModelRecord, manifest=None) -> str:
    """Id of ``manifest``, else of the run directory's manifest, recording one if absent"""
    if manifest is not None:
        return manifest.manifest_id
    try:
        return read_run_meta(run_dir)[1].manifest_id
    except FileNotFoundError:
        manifest = RunManifest.collect(record.precision, corpus_hash=None)
        write_run_meta(run_dir, record, manifest)
        return manifest.manifest_id


def persist_vector_set(
    vectors: EmotionVectorSet | GenerationVectorSet, run_dir, manifest=None
) -> str:
    """Write a vector set as raw float32 plus a ``meta.json`` sidecar

    Parameters
    ----------
    vectors:
        The vector set to write.  Its invariants are re-checked before
        anything touches the disk.
    run_dir:
        The model's run directory; created if needed.
    manifest:
        The run manifest.  Defaults to the one recorded in the run
        directory's ``meta.json``.

    Returns
    -------
    path: str
        Path of the written ``vectors.f32`` file.
    """
    if isinstance(vectors, EmotionVectorSet):
        vectors.validate()
    arr = np.ascontiguousarray(vectors.vectors, dtype="<f4")
    if arr.shape[1] != vectors.model.d_model:
        raise ValidationError(
            f"Matrix width {arr.shape[1]} does not match d_model={vectors.model.d_model}"
        )

    run_dir = stringify_path(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    manifest_id = manifest_id_for(run_dir, vectors.model, manifest)
    out_dir = layer_dir(run_dir, vectors.layer)
    return write_vectors(vectors, out_dir, manifest_id)


def write_vectors(vectors, out_dir, manifest_id: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, VECTOR_FILE)
    arr = np.ascontiguousarray(vectors.vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(arr.tobytes(order="C"))
    meta = {
        "manifest_id": manifest_id,
        "model": vectors.model.to_dict(),
        "layer": vectors.layer,
        "emotion_order": list(vectors.emotion_order),
        "shape": list(arr.shape),
        "dtype": "<f4",
        "kind": "generation" if isinstance(vectors, GenerationVectorSet) else "comprehension",
    }
    if isinstance(vectors, EmotionVectorSet):
        meta["centered"] = vectors.centered
    else:
        meta["protocol"] = vectors.protocol
    write_json(meta, os.path.join(out_dir, META_FILE))
    logger.info("Wrote %s vectors to %s", "x".join(map(str, arr.shape)), path)
    return path


def load_vector_set(path) -> EmotionVectorSet | GenerationVectorSet:
    """Load a vector set from its ``vectors.f32`` file or its directory"""
    path = stringify_path(path)
    if os.path.isdir(path):
        path = os.path.join(path, VECTOR_FILE)
    meta = read_json(os.path.join(os.path.dirname(path), META_FILE))
    shape = tuple(meta["shape"])
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != math.prod(shape):
        raise ValidationError(
            f"{path} holds {arr.size} floats, sidecar declares shape {shape}"
        )
    arr = arr.reshape(shape)
    record = ModelRecord.from_dict(meta["model"])
    if meta.get("kind") == "generation":
        return GenerationVectorSet(
            record, meta["layer"], arr, meta["emotion_order"], meta.get("protocol", {})
        )
    return EmotionVectorSet(
        record, meta["layer"], arr, meta["emotion_order"], meta.get("centered", True)
    )


def persist_rdm(rdm: RDM, path, manifest_id: str) -> str:
    return write_json({"manifest_id": manifest_id, **rdm.to_json()}, path)


def load_rdm(path) -> RDM:
    path = stringify_path(path)
    if os.path.isdir(path):
        path = os.path.join(path, RDM_FILE)
    return RDM.from_json(read_json(path))


#
# Model tables
#


def _normalize(value, aliases):
    value = str(value).strip()
    return aliases.get(value.lower().replace(" ", ""), value)


def load_model_table(path, precision: str = "fp16") -> list[ModelRecord]:
    """Read a model table (CSV or JSON) into records

    Columns follow the published model table: ``model_id, family, variant,
    size_b, n_layers, d_model, backend_kind`` and optionally ``precision``.
    Additional descriptor columns are allowed and ignored here; see
    :func:`load_published_descriptors`.

    Parameters
    ----------
    path:
        ``.csv`` or ``.json`` (a list of row objects).
    precision:
        Default precision for rows without a ``precision`` column.
    """
    df = read_model_table(path)
    if df.empty:
        return []
    missing = [c for c in TABLE_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"Model table is missing columns {missing}")

    records = []
    seen = set()
    for row, values in enumerate(df.to_dict(orient="records"), start=1):
        model_id = str(values["model_id"]).strip()
        if model_id in seen:
            raise ValidationError(f"Duplicate model_id {model_id!r} at row {row}")
        seen.add(model_id)
        try:
            record = ModelRecord(
                model_id=model_id,
                family=str(values["family"]).strip(),
                variant=_normalize(values["variant"], _VARIANT_ALIASES),
                size_b=float(values["size_b"]),
                n_layers=_as_int(values["n_layers"]),
                d_model=_as_int(values["d_model"]),
                backend_kind=_normalize(values["backend_kind"], _BACKEND_ALIASES),
                precision=_precision(values.get("precision"), precision),
            )
        except (ValidationError, TypeError, ValueError) as e:
            raise ValidationError(f"Model table row {row}: {e}") from e
        records.append(record)
    logger.debug("Loaded %d model records from %s", len(records), path)
    return records


def _precision(value, default: str) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return default
    return str(value).strip() or default


def _as_int(value) -> int:
    f = float(value)
    if not f.is_integer():
        raise ValueError(f"Expected an integer, got {value!r}")
    return int(f)


def read_model_table(path) -> pd.DataFrame:
    path = stringify_path(path)
    if os.path.getsize(path) == 0:
        return pd.DataFrame()
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as f:
            text = f.read().strip()
        rows = json.loads(text) if text else []
        return pd.DataFrame(rows)
    try:
        return pd.read_csv(path, dtype={"model_id": str, "family": str})
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def load_published_descriptors(path) -> pd.DataFrame:
    """Model table joined with any published descriptor columns

    Returns one row per model indexed by ``model_id`` with the record
    fields plus whichever of ``best_layer, best_layer_pct, anisotropy,
    rdm_std`` the file carries.  ``best_layer_pct`` is returned as a
    fraction of depth.
    """
    records = load_model_table(path)
    df = pd.DataFrame([r.to_dict() for r in records]).set_index("model_id")
    raw = read_model_table(path).set_index("model_id")
    for col in PUBLISHED_COLUMNS:
        if col in raw.columns:
            df[col] = raw[col].astype(float)
    if "best_layer_pct" in df.columns and (df["best_layer_pct"] > 1).any():
        df["best_layer_pct"] = df["best_layer_pct"] / 100.0
    return df


def default_model_table() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "model_table.csv")
