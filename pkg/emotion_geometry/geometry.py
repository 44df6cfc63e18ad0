from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np
from fsspec.utils import stringify_path

from emotion_geometry.errors import ConsistencyError
from emotion_geometry.registry import (
    DESCRIPTORS_FILE,
    RDM,
    read_json,
    write_json,
)

REGIMES = ("surgical", "repetitive_collapse", "explosive", "not_available")


def _rows(x) -> np.ndarray:
    if hasattr(x, "as_float64"):
        return x.as_float64()
    if hasattr(x, "rows"):
        return np.asarray(x.rows, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def cosine_matrix(vectors, labels=None) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``vectors``

    Non-finite rows propagate NaN.  A finite zero row has no direction and
    raises.
    """
    v = _rows(vectors)
    norms = np.linalg.norm(v, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        name = labels[zero[0]] if labels is not None else f"row {zero[0]}"
        raise ValueError(f"Zero-norm vector for {name!r}; cosine is undefined")
    unit = v / norms[:, None]
    out = unit @ unit.T
    return (out + out.T) / 2


def mean_pairwise_cosine(vectors) -> float:
    """Mean cosine over unordered pairs of distinct rows"""
    m = cosine_matrix(vectors)
    i, j = np.triu_indices(len(m), k=1)
    return float(m[i, j].mean())


def compute_rdm(vectors) -> RDM:
    """Cosine RDM of a vector set

    Accepts an ``EmotionVectorSet``, a generation vector set or a label
    restriction of either.

    Examples
    --------
    >>> rdm = compute_rdm(vector_set)  # doctest: +SKIP
    >>> rdm.matrix.shape
    (21, 21)
    """
    labels = tuple(vectors.emotion_order)
    matrix = cosine_matrix(vectors, labels)
    finite = np.isfinite(_rows(vectors)).all(axis=1)
    diag = np.diag(matrix)[finite]
    if not np.allclose(diag, 1.0, rtol=0, atol=1e-5):
        raise ValueError("Cosine RDM diagonal deviates from 1")
    source = {}
    model = getattr(vectors, "model", None)
    if model is not None:
        source = {"model_id": model.model_id, "layer": vectors.layer}
    return RDM(matrix, labels, source)


def rdm_std(rdm: RDM) -> float:
    """Population standard deviation of the off-diagonal entries

    The upper triangle is used; symmetry makes it equal to the full
    off-diagonal.
    """
    return float(np.std(rdm.upper))


def anisotropy(neutral_activations) -> float:
    """Mean pairwise cosine among neutral-sentence activations

    Parameters
    ----------
    neutral_activations: ActivationMatrix or array
        One row per neutral sentence at a single layer.

    Returns
    -------
    anisotropy: float
        Near 1 when every activation points the same way.
    """
    rows = _rows(neutral_activations)
    if rows.ndim != 2 or len(rows) < 2:
        raise ValueError(f"Need at least two activation rows, got {rows.shape}")
    if not np.isfinite(rows).all():
        layer = getattr(neutral_activations, "layer", None)
        raise ValueError(f"Anisotropy unavailable at layer {layer}: non-finite rows")
    return mean_pairwise_cosine(rows)


def reference_layer(n_layers: int, depth: float) -> int:
    """Layer index at a fractional depth

    >>> reference_layer(28, 0.5), reference_layer(28, 0.75)
    (14, 21)
    """
    if not 0 <= depth <= 1:
        raise ValueError(f"Depth must lie in [0, 1], got {depth}")
    return min(int(depth * n_layers), n_layers - 1)


def reference_depth_descriptors(
    neutral_by_layer: dict, vectors_by_layer: dict, n_layers: int, depths=(0.5, 0.75)
) -> dict:
    """Anisotropy and RDM std at fixed fractional depths, null where non-finite"""
    out = {}
    for depth in depths:
        layer = reference_layer(n_layers, depth)
        entry = {"layer": layer, "anisotropy": None, "rdm_std": None}
        neutral = neutral_by_layer.get(layer)
        if neutral is not None and np.isfinite(_rows(neutral)).all():
            entry["anisotropy"] = anisotropy(neutral)
        vectors = vectors_by_layer.get(layer)
        if vectors is not None and np.isfinite(_rows(vectors)).all():
            try:
                entry["rdm_std"] = rdm_std(compute_rdm(vectors))
            except ValueError:
                pass
        out[str(depth)] = entry
    return out


@dataclass
class GeometryDescriptors:
    model_id: str
    backend_kind: str
    anisotropy: float
    rdm_std: float
    best_layer: int
    best_layer_pct: float
    steering_regime: str = "not_available"
    reference_depths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.steering_regime not in REGIMES:
            raise ValueError(f"Unknown steering regime {self.steering_regime!r}")
        if (
            self.backend_kind == "hidden_state_sequence"
            and self.steering_regime != "not_available"
        ):
            raise ConsistencyError(
                "Steering is unavailable on the hidden_state_sequence backend"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GeometryDescriptors:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def descriptors(
    sweep,
    rdm: RDM,
    anisotropy: float,
    regime: str | None = None,
    anisotropy_layer: int | None = None,
    reference_depths: dict | None = None,
) -> GeometryDescriptors:
    """Assemble the per-model descriptor record

    Parameters
    ----------
    sweep: LayerSweep
        Provides the model, best layer and its depth fraction.
    rdm:
        RDM at the best layer.
    anisotropy:
        Neutral-sentence anisotropy at the best layer.
    regime:
        Steering regime.  Omitted, or on the hidden-state backend, it is
        ``"not_available"``.
    anisotropy_layer:
        Layer the anisotropy was measured at, checked against the sweep.
    """
    layer = sweep.best_layer
    if rdm.layer is not None and rdm.layer != layer:
        raise ConsistencyError(
            f"RDM is from layer {rdm.layer}, best layer is {layer}"
        )
    if anisotropy_layer is not None and anisotropy_layer != layer:
        raise ConsistencyError(
            f"Anisotropy is from layer {anisotropy_layer}, best layer is {layer}"
        )
    if rdm.model_id is not None and rdm.model_id != sweep.model.model_id:
        raise ConsistencyError(
            f"RDM is from {rdm.model_id}, sweep is from {sweep.model.model_id}"
        )
    backend = sweep.model.backend_kind
    if regime is None or backend == "hidden_state_sequence":
        regime = "not_available"
    return GeometryDescriptors(
        model_id=sweep.model.model_id,
        backend_kind=backend,
        anisotropy=float(anisotropy),
        rdm_std=rdm_std(rdm),
        best_layer=layer,
        best_layer_pct=sweep.best_layer_pct,
        steering_regime=regime,
        reference_depths=dict(reference_depths or {}),
    )


def persist_descriptors(desc: GeometryDescriptors, run_dir, manifest_id: str) -> str:
    path = os.path.join(stringify_path(run_dir), DESCRIPTORS_FILE)
    return write_json({"manifest_id": manifest_id, **desc.to_dict()}, path)


def load_descriptors(run_dir) -> GeometryDescriptors:
    return GeometryDescriptors.from_dict(
        read_json(os.path.join(stringify_path(run_dir), DESCRIPTORS_FILE))
    )
