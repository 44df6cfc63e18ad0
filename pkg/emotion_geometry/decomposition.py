"""Four-condition comparison of extraction method, protocol and precision

====  ===================================================  =========
name  extraction                                           precision
====  ===================================================  =========
A     comprehension, best layer, neutral label dropped     fp16
B     generation, alternative sub-parameters               fp16
C     generation, matched sub-parameters                   fp16
D     generation, matched sub-parameters                   int8
====  ===================================================  =========

A vs C isolates the method, B vs C the sub-parameters, C vs D the
precision, and A vs D is the conflated cross-experiment value.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from emotion_geometry.collection import from_rdm, read_rdm, similarity_matrix
from emotion_geometry.comprehension import load_sweep
from emotion_geometry.errors import AlignmentError, ValidationError
from emotion_geometry.genprotocol import SAMPLES_FILE
from emotion_geometry.registry import (
    RDM,
    RDM_FILE,
    condition_dir,
    layer_dir,
    read_json,
    run_dir_for,
    write_json,
)
from emotion_geometry.rsa import check_aligned
from emotion_geometry.stimuli import generation_subset

logger = logging.getLogger(__name__)

CONDITION_NAMES = ("A", "B", "C", "D")
REPORT_FILE = "decomposition_report.json"


@dataclass
class ConditionSet:
    A: RDM
    B: RDM
    C: RDM
    D: RDM
    model_id: str
    degenerate: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in CONDITION_NAMES[1:]:
            try:
                check_aligned(self.A, getattr(self, name))
            except AlignmentError as e:
                raise AlignmentError(f"Conditions A and {name}: {e}") from e

    @property
    def emotion_order(self) -> tuple:
        return self.A.emotion_order

    def rdms(self) -> list:
        return [getattr(self, name) for name in CONDITION_NAMES]


def _absent(name, model_id, path):
    return ValidationError(f"condition {name} absent for {model_id} (looked for {path})")


def _load_condition(run_dir, name, model_id, labels) -> tuple[RDM, dict]:
    path = os.path.join(condition_dir(run_dir, name), RDM_FILE)
    if not os.path.exists(path):
        raise _absent(name, model_id, path)
    raw = read_json(path)
    if tuple(raw["emotion_order"]) != labels:
        raise AlignmentError(
            f"Condition {name} is labelled {raw['emotion_order']}, expected {list(labels)}"
        )
    degenerate = {}
    samples = os.path.join(condition_dir(run_dir, name), SAMPLES_FILE)
    if os.path.exists(samples):
        degenerate = read_json(samples).get("degenerate", {})
    return RDM.from_json(raw), degenerate


def _load_comprehension(run_dir, model_id, labels) -> RDM:
    try:
        best = load_sweep(run_dir).best_layer
    except FileNotFoundError:
        raise _absent("A", model_id, run_dir)
    path = os.path.join(layer_dir(run_dir, best), RDM_FILE)
    if not os.path.exists(path):
        raise _absent("A", model_id, path)
    # generation RDMs have no neutral row; drop it from A explicitly
    return read_rdm(path).restrict(labels).compute()


def assemble_conditions(run_root, model_id: str) -> ConditionSet:
    """Load the four condition RDMs of one model

    Parameters
    ----------
    run_root:
        Directory holding one run directory per model.
    model_id:
        The model.  Its comprehension sweep supplies A; ``conditions/B``,
        ``conditions/C`` and ``conditions/D`` supply the rest.
    """
    run_dir = run_dir_for(run_root, model_id)
    labels = tuple(generation_subset())
    A = _load_comprehension(run_dir, model_id, labels)
    rdms = {"A": A}
    degenerate = {}
    for name in CONDITION_NAMES[1:]:
        rdms[name], bad = _load_condition(run_dir, name, model_id, labels)
        if bad:
            degenerate[name] = bad
    return ConditionSet(model_id=model_id, degenerate=degenerate, **rdms)


@dataclass
class ContrastReport:
    model_id: str
    rho_AC: float
    rho_BC: float
    rho_CD: float
    rho_AD: float
    distortion_factor: float | None
    full_matrix: np.ndarray
    method: str = "spearman"

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "method": self.method,
            "conditions": list(CONDITION_NAMES),
            "rho_AC": self.rho_AC,
            "rho_BC": self.rho_BC,
            "rho_CD": self.rho_CD,
            "rho_AD": self.rho_AD,
            "distortion_factor": self.distortion_factor,
            "full_matrix": np.asarray(self.full_matrix).tolist(),
        }


def contrast_table(conditions: ConditionSet, method: str = "spearman") -> ContrastReport:
    """The four headline contrasts and the full 4 x 4 similarity matrix

    ``distortion_factor`` is ``rho_AD / rho_CD``: how far the conflated
    comparison misstates the precision-only one.  It is ``None`` when
    ``rho_CD`` is zero.
    """
    matrix = similarity_matrix(
        [from_rdm(rdm) for rdm in conditions.rdms()], method
    ).compute()
    idx = {name: i for i, name in enumerate(CONDITION_NAMES)}

    def rho(a, b):
        return float(matrix[idx[a], idx[b]])

    rho_CD = rho("C", "D")
    rho_AD = rho("A", "D")
    return ContrastReport(
        model_id=conditions.model_id,
        rho_AC=rho("A", "C"),
        rho_BC=rho("B", "C"),
        rho_CD=rho_CD,
        rho_AD=rho_AD,
        distortion_factor=rho_AD / rho_CD if rho_CD != 0 else None,
        full_matrix=matrix,
        method=method,
    )


def run_decomposition(run_root, model_id: str, method: str = "spearman") -> ContrastReport:
    """Assemble, contrast and write ``decomposition_report.json``"""
    conditions = assemble_conditions(run_root, model_id)
    report = contrast_table(conditions, method)
    out = {
        **report.to_dict(),
        "emotion_order": list(conditions.emotion_order),
        # empty generations are excluded, never imputed
        "degenerate": conditions.degenerate,
    }
    write_json(out, os.path.join(run_dir_for(run_root, model_id), REPORT_FILE))
    logger.info(
        "%s: A-C %.3f, B-C %.3f, C-D %.3f, A-D %.3f, distortion %s",
        model_id,
        report.rho_AC,
        report.rho_BC,
        report.rho_CD,
        report.rho_AD,
        report.distortion_factor,
    )
    return report
