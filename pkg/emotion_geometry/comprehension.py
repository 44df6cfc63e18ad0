from __future__ import annotations

import logging
import math
import os
from collections.abc import Mapping
from dataclasses import dataclass, field

import dask
import numpy as np
from dask.delayed import delayed
from fsspec.utils import stringify_path

from emotion_geometry import geometry
from emotion_geometry.capture import capture_texts
from emotion_geometry.errors import ExtractionError
from emotion_geometry.registry import (
    RDM_FILE,
    SWEEP_FILE,
    EmotionVectorSet,
    ModelRecord,
    RunManifest,
    layer_dir,
    persist_rdm,
    persist_vector_set,
    read_json,
    run_dir_for,
    write_json,
    write_run_meta,
)
from emotion_geometry.stimuli import EMOTIONS

logger = logging.getLogger(__name__)


def _is_null(value) -> bool:
    return value is None or not math.isfinite(value)


@dataclass
class LayerSweep:
    """Per-layer mean pairwise cosine among the centered vectors

    ``best_layer_pct`` is the 0-based best layer over the layer count, so
    layer 11 of 28 gives 0.393.
    """

    model: ModelRecord
    per_layer_mean_cosine: list
    best_layer: int
    per_layer_anisotropy: list = field(default_factory=list)

    def __post_init__(self):
        self.per_layer_mean_cosine = [
            None if _is_null(v) else float(v) for v in self.per_layer_mean_cosine
        ]
        self.per_layer_anisotropy = [
            None if _is_null(v) else float(v) for v in self.per_layer_anisotropy
        ]
        if self.per_layer_mean_cosine[self.best_layer] is None:
            raise ValueError(f"Best layer {self.best_layer} has no value")

    @property
    def model_id(self) -> str:
        return self.model.model_id

    @property
    def n_layers(self) -> int:
        return self.model.n_layers

    @property
    def best_layer_pct(self) -> float:
        return self.best_layer / self.model.n_layers

    @property
    def null_layers(self) -> list:
        return [i for i, v in enumerate(self.per_layer_mean_cosine) if v is None]

    def anisotropy_at(self, layer: int):
        if layer < len(self.per_layer_anisotropy):
            return self.per_layer_anisotropy[layer]
        return None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "model_id": self.model_id,
            "n_layers": self.n_layers,
            "per_layer_mean_cosine": self.per_layer_mean_cosine,
            "per_layer_anisotropy": self.per_layer_anisotropy,
            "null_layers": self.null_layers,
            "best_layer": self.best_layer,
            "best_layer_pct": self.best_layer_pct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LayerSweep:
        return cls(
            ModelRecord.from_dict(d["model"]),
            d["per_layer_mean_cosine"],
            d["best_layer"],
            d.get("per_layer_anisotropy", []),
        )


def select_best_layer(per_layer_mean_cosine) -> int:
    """Layer with the smallest mean cosine; ties go to the smaller index

    >>> select_best_layer([0.4, None, 0.4])
    0
    >>> select_best_layer([None, 0.7, 0.3, None])
    2
    """
    candidates = [
        (v, i) for i, v in enumerate(per_layer_mean_cosine) if not _is_null(v)
    ]
    if not candidates:
        raise ValueError("No layer has a finite mean cosine")
    return min(candidates)[1]


def build_emotion_vectors(
    activations: Mapping, layer: int, model: ModelRecord
) -> EmotionVectorSet:
    """Centered per-emotion vectors from per-passage activations

    Parameters
    ----------
    activations:
        ``{emotion: (n_passages, d_model) array}`` for all 21 emotions.
        Non-finite rows are dropped before averaging.
    layer:
        Layer the activations were read at.
    model:
        The model they came from.

    Returns
    -------
    vectors: EmotionVectorSet
        The mean of each emotion's passages, minus the unweighted mean of
        the 21 per-emotion means.
    """
    means = []
    for emotion in EMOTIONS:
        if emotion not in activations:
            raise ExtractionError(f"No activations for {emotion!r} at layer {layer}")
        rows = np.asarray(activations[emotion], dtype=np.float64)
        rows = rows.reshape(-1, rows.shape[-1])
        rows = rows[np.isfinite(rows).all(axis=1)]
        if not len(rows):
            raise ExtractionError(
                f"No finite passage activations for {emotion!r} at layer {layer}"
            )
        means.append(rows.mean(axis=0))
    means = np.stack(means)
    return EmotionVectorSet(model, layer, means - means.mean(axis=0), EMOTIONS, True)


def _layer_summary(activations, neutral, layer, model):
    """(vector set or None, mean cosine or None, anisotropy or None)"""
    try:
        vectors = build_emotion_vectors(activations, layer, model)
    except ExtractionError:
        vectors = None
    mean_cos = None
    if vectors is not None and vectors.finite:
        try:
            mean_cos = geometry.mean_pairwise_cosine(vectors)
        except ValueError:
            mean_cos = None
    aniso = None
    if neutral is not None and np.isfinite(neutral).all():
        try:
            aniso = geometry.anisotropy(neutral)
        except ValueError:
            aniso = None
    return vectors, mean_cos, aniso


def group_by_emotion(acts, labels) -> dict:
    grouped = {}
    for label, row in zip(labels, acts.rows):
        grouped.setdefault(label, []).append(row)
    return {k: np.stack(v) for k, v in grouped.items()}


def sweep_layers(handle, corpus, layers=None) -> tuple[LayerSweep, dict]:
    """Build vectors at every layer and pick the best one

    Passages are captured one at a time without a chat template.  The
    neutral sentences are captured alongside for the per-layer anisotropy
    curve.

    Returns
    -------
    sweep: LayerSweep
    vectors: dict
        ``{layer: EmotionVectorSet}`` for every layer where all 21
        emotions had at least one finite passage.
    """
    record = handle.record
    layers = list(range(record.n_layers)) if layers is None else sorted(layers)
    labels, texts = zip(*corpus.passage_items())
    passages = capture_texts(handle, texts, layers, desc="passages")
    neutral = capture_texts(handle, corpus.neutral_sentences, layers, desc="neutral")

    parts = [
        delayed(_layer_summary, pure=True)(
            group_by_emotion(passages[layer], labels),
            neutral[layer].as_float64(),
            layer,
            record,
        )
        for layer in layers
    ]
    results = dask.compute(*parts, scheduler="threads")

    mean_cos = [None] * record.n_layers
    aniso = [None] * record.n_layers
    vector_sets = {}
    for layer, (vectors, cos, a) in zip(layers, results):
        mean_cos[layer] = cos
        aniso[layer] = a
        if vectors is not None:
            vector_sets[layer] = vectors
        logger.debug("%s layer %d: mean cosine %s, anisotropy %s", record.model_id, layer, cos, a)

    if all(v is None for v in mean_cos):
        raise ExtractionError(
            f"Every layer of {record.model_id} is non-finite at {record.precision}"
        )
    null = [layer for layer in layers if mean_cos[layer] is None]
    if null:
        logger.warning(
            "%s: layers %s are non-finite and recorded as null", record.model_id, null
        )
    sweep = LayerSweep(record, mean_cos, select_best_layer(mean_cos), aniso)
    logger.info(
        "%s: best layer %d of %d (%.1f%%)",
        record.model_id,
        sweep.best_layer,
        record.n_layers,
        100 * sweep.best_layer_pct,
    )
    return sweep, vector_sets


def persist_sweep(sweep: LayerSweep, run_dir, manifest_id: str) -> str:
    return write_json(
        {"manifest_id": manifest_id, **sweep.to_dict()},
        os.path.join(stringify_path(run_dir), SWEEP_FILE),
    )


def load_sweep(run_dir) -> LayerSweep:
    return LayerSweep.from_dict(
        read_json(os.path.join(stringify_path(run_dir), SWEEP_FILE))
    )


def extract_run(
    handle, corpus, run_root, manifest: RunManifest | None = None, layers=None
) -> str:
    """Full comprehension extraction for one model into its run directory

    Writes ``meta.json``, ``sweep.json`` and per-layer ``vectors.f32`` and
    ``rdm.json`` files.

    Returns
    -------
    run_dir: str
    """
    record = handle.record
    if manifest is None:
        manifest = RunManifest.collect(record.precision, corpus.digest)
    run_dir = run_dir_for(run_root, record.model_id)
    os.makedirs(run_dir, exist_ok=True)
    write_run_meta(run_dir, record, manifest)

    sweep, vector_sets = sweep_layers(handle, corpus, layers)
    for layer, vectors in sorted(vector_sets.items()):
        persist_vector_set(vectors, run_dir, manifest)
        if vectors.finite:
            try:
                rdm = geometry.compute_rdm(vectors)
            except ValueError as e:
                logger.warning("%s layer %d: no RDM (%s)", record.model_id, layer, e)
                continue
            persist_rdm(rdm, os.path.join(layer_dir(run_dir, layer), RDM_FILE), manifest.manifest_id)
    persist_sweep(sweep, run_dir, manifest.manifest_id)
    write_run_meta(run_dir, record, manifest.finish())
    return run_dir
