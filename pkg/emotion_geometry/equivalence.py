from __future__ import annotations

import gc
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
from fsspec.utils import stringify_path

from emotion_geometry import config
from emotion_geometry.capture import capture_texts, load_model, record_from_hub
from emotion_geometry.collection import from_vectors
from emotion_geometry.comprehension import build_emotion_vectors, group_by_emotion
from emotion_geometry.registry import (
    ModelRecord,
    RunManifest,
    check_layer,
    run_dir_for,
    write_json,
)
from emotion_geometry.stimuli import EMOTIONS, load_default_corpus

logger = logging.getLogger(__name__)

REPORT_FILE = "equivalence_report.json"


def relative_frobenius(a, b) -> float:
    """``||a - b||_F / ||a||_F``; ``a`` is the reference

    >>> relative_frobenius([[1.0, 2.0]], [[2.0, 4.0]])
    1.0
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a)
    if denom == 0:
        raise ValueError("Reference matrix has zero norm")
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class EquivalenceReport:
    model_id: str
    layer: int
    per_emotion_cosine: list
    cosine_mean: float
    cosine_min: float
    cosine_max: float
    rdm_spearman: float
    relative_frobenius: float
    reference_backend: str = "named_hook"
    other_backend: str = "hidden_state_sequence"
    precision: str = "fp32"

    def to_dict(self) -> dict:
        return asdict(self)


def _row_cosines(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(axis=1)
    return num / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def compare_vector_sets(reference, other) -> EquivalenceReport:
    """Agreement between two extractions of the same model and layer"""
    if reference.model.model_id != other.model.model_id:
        raise ValueError(
            f"Different models: {reference.model.model_id} vs {other.model.model_id}"
        )
    if reference.layer != other.layer:
        raise ValueError(f"Different layers: {reference.layer} vs {other.layer}")
    cos = _row_cosines(reference.vectors, other.vectors)
    return EquivalenceReport(
        model_id=reference.model.model_id,
        layer=reference.layer,
        per_emotion_cosine=cos.tolist(),
        cosine_mean=float(cos.mean()),
        cosine_min=float(cos.min()),
        cosine_max=float(cos.max()),
        rdm_spearman=float(
            from_vectors(reference).rdm().similarity(from_vectors(other).rdm()).compute()
        ),
        relative_frobenius=relative_frobenius(reference.vectors, other.vectors),
        reference_backend=reference.model.backend_kind,
        other_backend=other.model.backend_kind,
        precision=reference.model.precision,
    )


def extract_layer(handle, corpus, layer: int):
    """Comprehension vectors at a single layer"""
    labels, texts = zip(*corpus.passage_items())
    acts = capture_texts(handle, texts, [layer], desc=handle.backend_kind)[layer]
    return build_emotion_vectors(group_by_emotion(acts, labels), layer, handle.record)


def run_equivalence(
    model,
    layer: int,
    corpus=None,
    precision: str | None = None,
    run_root=None,
    device: str | None = None,
    loader=load_model,
) -> EquivalenceReport:
    """Extract one layer through both backends and compare

    Parameters
    ----------
    model: ModelRecord or str
        The model.  A bare hub id is resolved through its configuration.
    layer:
        0-based block index, read at the matched locus on each backend.
    corpus:
        Defaults to the bundled corpus.
    precision:
        Defaults to ``equivalence.precision`` (fp32).
    run_root:
        If given, the report is written to
        ``<run_root>/<slug>/equivalence_report.json``.
    loader:
        Callable ``(record, precision=, backend=, device=)`` returning a
        model handle.
    """
    if not isinstance(model, ModelRecord):
        model = record_from_hub(model)
    check_layer(model, layer)
    corpus = corpus if corpus is not None else load_default_corpus()
    precision = precision or config.get("equivalence.precision")

    sets = []
    for backend in ["named_hook", "hidden_state_sequence"]:
        handle = loader(model, precision=precision, backend=backend, device=device)
        sets.append(extract_layer(handle, corpus, layer))
        del handle
        gc.collect()

    report = compare_vector_sets(*sets)
    logger.info(
        "%s layer %d: cosine mean %.6f min %.6f, RDM spearman %.5f, rel. Frobenius %.2e",
        report.model_id,
        layer,
        report.cosine_mean,
        report.cosine_min,
        report.rdm_spearman,
        report.relative_frobenius,
    )
    if run_root is not None:
        manifest = RunManifest.collect(precision, corpus.digest)
        run_dir = run_dir_for(stringify_path(run_root), model.model_id)
        path = os.path.join(run_dir, REPORT_FILE)
        write_json(
            {
                "manifest_id": manifest.manifest_id,
                "manifest": manifest.to_dict(),
                "emotion_order": list(EMOTIONS),
                **report.to_dict(),
            },
            path,
        )
    return report
