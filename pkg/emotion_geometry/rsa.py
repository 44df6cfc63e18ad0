"""Cross-model representational similarity

Rank correlation uses average ranks for ties.  RDMs are compared over
their upper-triangle entries only; on symmetric matrices this gives the
same rank correlation as the full off-diagonal.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from emotion_geometry import config
from emotion_geometry.errors import AlignmentError
from emotion_geometry.geometry import rdm_std
from emotion_geometry.registry import RDM

METHODS = ("spearman", "pearson")
PREDICTORS = ("size_b", "d_model")
OUTCOMES = ("anisotropy", "rdm_std", "best_layer_pct")

logger = logging.getLogger(__name__)


def _check_pair(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"Inputs must be equal-length vectors, got {x.shape}, {y.shape}")
    if len(x) < 3:
        raise ValueError(f"Need at least 3 observations, got {len(x)}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("Correlation inputs must be finite")
    return x, y


def _pearson(x, y) -> float:
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("Correlation is undefined for a constant input")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = xc @ xc
    syy = yc @ yc
    return float(np.clip((xc @ yc) / np.sqrt(sxx * syy), -1.0, 1.0))


def pearson(xs, ys) -> float:
    x, y = _check_pair(xs, ys)
    return _pearson(x, y)


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties

    Examples
    --------
    >>> spearman([1, 2, 3, 4], [10, 20, 30, 40])
    1.0
    >>> spearman([1, 2, 3, 4], [4, 3, 2, 1])
    -1.0
    """
    x, y = _check_pair(xs, ys)
    return _pearson(
        stats.rankdata(x, method="average"), stats.rankdata(y, method="average")
    )


_correlations = {"spearman": spearman, "pearson": pearson}


def correlate(xs, ys, method: str = "spearman") -> float:
    try:
        func = _correlations[method]
    except KeyError:
        raise ValueError(f"{method} not supported") from None
    return func(xs, ys)


def check_aligned(a: RDM, b: RDM):
    if tuple(a.emotion_order) != tuple(b.emotion_order):
        raise AlignmentError(
            "RDMs are labelled with different emotion orders: "
            f"{list(a.emotion_order)} vs {list(b.emotion_order)}"
        )


def rdm_similarity(a: RDM, b: RDM, method: str = "spearman") -> float:
    """Correlation between the upper-triangle entries of two RDMs

    Emotion orders must match exactly; nothing is re-ordered.
    """
    check_aligned(a, b)
    return correlate(a.upper, b.upper, method)


def linear_normalize_rdm(rdm: RDM, anisotropy: float) -> RDM:
    """Shift an RDM by its anisotropy and scale by its off-diagonal std

    ``(RDM - (1 - anisotropy)) / std``, entrywise.  Rank and Pearson
    similarities to any other RDM are unchanged by this map.
    """
    std = rdm_std(rdm)
    if not std > 0:
        raise ValueError("Cannot normalize an RDM with zero off-diagonal spread")
    matrix = (rdm.matrix - (1.0 - anisotropy)) / std
    return RDM(matrix, rdm.emotion_order, {**rdm.source, "normalized": True})


def reliability_flag(anisotropy, reference=(), unreliable=None, borderline=None) -> str:
    """``ok``, ``borderline`` or ``unreliable`` from best-layer anisotropy

    A model is unreliable only when the best layer and every finite
    ``reference`` layer lie above ``unreliable``; above it at the best
    layer alone is borderline, as is anything in ``(borderline,
    unreliable]``.

    >>> reliability_flag(0.997, [0.999, 0.996]), reliability_flag(0.982, [0.93, 0.97])
    ('unreliable', 'borderline')
    >>> reliability_flag(0.93), reliability_flag(0.83)
    ('borderline', 'ok')
    """
    if unreliable is None:
        unreliable = config.get("reliability.unreliable")
    if borderline is None:
        borderline = config.get("reliability.borderline")
    if anisotropy is None or not np.isfinite(anisotropy):
        raise ValueError(f"Cannot flag a non-finite anisotropy {anisotropy!r}")
    if anisotropy > unreliable:
        others = [v for v in reference if v is not None and np.isfinite(v)]
        if all(v > unreliable for v in others):
            return "unreliable"
        return "borderline"
    if anisotropy > borderline:
        return "borderline"
    return "ok"


@dataclass
class RdmOfRdms:
    model_order: list
    matrix: np.ndarray
    reliability: dict
    method: str = "spearman"
    anisotropy: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        k = len(self.model_order)
        if self.matrix.shape != (k, k):
            raise ValueError(
                f"Matrix of shape {self.matrix.shape} does not match {k} models"
            )

    def __getitem__(self, pair) -> float:
        a, b = pair
        return float(
            self.matrix[self.model_order.index(a), self.model_order.index(b)]
        )

    def pairs(self):
        """``(model_a, model_b, rho)`` over unordered pairs"""
        for i, j in itertools.combinations(range(len(self.model_order)), 2):
            yield self.model_order[i], self.model_order[j], float(self.matrix[i, j])

    def reorder(self, model_order) -> RdmOfRdms:
        idx = [self.model_order.index(m) for m in model_order]
        return RdmOfRdms(
            list(model_order),
            self.matrix[np.ix_(idx, idx)],
            self.reliability,
            self.method,
            self.anisotropy,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["matrix"] = self.matrix.tolist()
        return out


def rdm_of_rdms(entries, method: str = "spearman", reference=None) -> RdmOfRdms:
    """Pairwise RDM similarity across models with reliability flags

    Parameters
    ----------
    entries: list of (ModelRecord, RDM, anisotropy)
        At least two, all labelled with the same emotion order.
    method:
        ``"spearman"`` or ``"pearson"``.
    reference: dict, optional
        Anisotropy at the reference layers, by model id. See
        ``reliability_flag``.
    """
    reference = reference or {}
    from emotion_geometry.collection import from_rdm, similarity_matrix

    entries = list(entries)
    if len(entries) < 2:
        raise ValueError(f"Need at least two models, got {len(entries)}")
    first = entries[0][1]
    for _, rdm, _ in entries[1:]:
        check_aligned(first, rdm)

    matrix = similarity_matrix([from_rdm(rdm) for _, rdm, _ in entries], method)
    model_order = [record.model_id for record, _, _ in entries]
    return RdmOfRdms(
        model_order=model_order,
        matrix=matrix.compute(),
        reliability={
            record.model_id: reliability_flag(aniso, reference.get(record.model_id, ()))
            for record, _, aniso in entries
        },
        method=method,
        anisotropy={record.model_id: aniso for record, _, aniso in entries},
    )


def normalization_change(entries, method: str = "spearman") -> float:
    """Largest change in pairwise similarity after per-RDM linear normalization

    Each RDM is normalized by its own anisotropy before comparing, so the
    result is zero up to rounding for any set of entries.
    """
    from emotion_geometry.collection import from_rdm, similarity_matrix

    entries = list(entries)
    raw = similarity_matrix([from_rdm(rdm) for _, rdm, _ in entries], method)
    normalized = [
        from_rdm(from_rdm(rdm).normalize(aniso).compute()) for _, rdm, aniso in entries
    ]
    change = np.abs(similarity_matrix(normalized, method).compute() - raw.compute())
    return float(np.nanmax(change))


@dataclass(frozen=True)
class SizeCorrelationRow:
    predictor: str
    outcome: str
    rho: float
    p_uncorrected: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def t_test_p(rho: float, n: int) -> float:
    """Two-sided p-value of a correlation through the t approximation"""
    if abs(rho) >= 1:
        return 0.0
    t = rho * np.sqrt((n - 2) / (1 - rho**2))
    return float(min(1.0, 2 * stats.t.sf(abs(t), df=n - 2)))


def _descriptor_frame(rows) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        return rows
    data = []
    for record, desc in rows:
        desc = desc.to_dict() if hasattr(desc, "to_dict") else dict(desc)
        data.append(
            {
                "model_id": record.model_id,
                "size_b": record.size_b,
                "d_model": record.d_model,
                **{k: desc.get(k) for k in OUTCOMES},
            }
        )
    return pd.DataFrame(data)


def size_correlations(rows) -> list[SizeCorrelationRow]:
    """Rank correlations of model size and width against the descriptors

    Parameters
    ----------
    rows: DataFrame or iterable of (ModelRecord, descriptors)
        One row per model with ``size_b``, ``d_model``, ``anisotropy``,
        ``rdm_std`` and ``best_layer_pct``.

    Returns
    -------
    rows: list of SizeCorrelationRow
        One per (predictor, outcome) pair, p-values uncorrected.
    """
    df = _descriptor_frame(rows)
    out = []
    for predictor, outcome in itertools.product(PREDICTORS, OUTCOMES):
        sub = df[[predictor, outcome]].astype(float).dropna()
        if len(sub) < 4:
            raise ValueError(
                f"Need at least 4 models with finite {outcome}, got {len(sub)}"
            )
        if sub[predictor].nunique() == 1:
            raise ValueError(f"Predictor {predictor} is constant across models")
        if sub[outcome].nunique() == 1:
            logger.warning("%s is constant across models; no correlation with %s", outcome, predictor)
            out.append(SizeCorrelationRow(predictor, outcome, float("nan"), float("nan"), len(sub)))
            continue
        rho = spearman(sub[predictor], sub[outcome])
        out.append(
            SizeCorrelationRow(predictor, outcome, rho, t_test_p(rho, len(sub)), len(sub))
        )
    return out
