import json
import os

import numpy as np
import pytest

from emotion_geometry.comprehension import LayerSweep, persist_sweep
from emotion_geometry.decomposition import (
    REPORT_FILE,
    ConditionSet,
    assemble_conditions,
    contrast_table,
    run_decomposition,
)
from emotion_geometry.errors import AlignmentError, ValidationError
from emotion_geometry.geometry import compute_rdm
from emotion_geometry.registry import (
    RDM_FILE,
    condition_dir,
    layer_dir,
    persist_rdm,
    run_dir_for,
    write_json,
)
from emotion_geometry.rsa import rdm_similarity
from emotion_geometry.stimuli import generation_subset
from emotion_geometry.tests.conftest import random_vectors

LABELS = tuple(generation_subset())


def _generation_rdm(record, seed):
    return compute_rdm(random_vectors(record, 2, seed).restrict(LABELS))


def _make_run(root, record, seeds=(0, 1, 2, 3), skip=()):
    """A run directory holding a sweep, the best-layer RDM and conditions B-D"""
    run_dir = run_dir_for(root, record.model_id)
    persist_sweep(LayerSweep(record, [0.4, 0.3, 0.1, 0.2], 2), run_dir, "manifest-x")
    full = compute_rdm(random_vectors(record, 2, seeds[0]))
    persist_rdm(full, os.path.join(layer_dir(run_dir, 2), RDM_FILE), "manifest-x")
    for name, seed in zip("BCD", seeds[1:]):
        if name in skip:
            continue
        out = condition_dir(run_dir, name)
        persist_rdm(_generation_rdm(record, seed), os.path.join(out, RDM_FILE), "manifest-x")
    return run_dir


def test_identical_conditions(tmpdir, record):
    _make_run(str(tmpdir), record, seeds=(0, 0, 0, 0))
    report = run_decomposition(str(tmpdir), record.model_id)
    np.testing.assert_allclose(report.full_matrix, np.ones((4, 4)))
    assert report.rho_AC == pytest.approx(1.0)
    assert report.distortion_factor == pytest.approx(1.0)


def test_headlines_match_matrix(tmpdir, record):
    _make_run(str(tmpdir), record)
    conditions = assemble_conditions(str(tmpdir), record.model_id)
    assert conditions.emotion_order == LABELS
    report = contrast_table(conditions)
    m = report.full_matrix
    assert report.rho_AC == m[0, 2]
    assert report.rho_BC == m[1, 2]
    assert report.rho_CD == m[2, 3]
    assert report.rho_AD == m[0, 3]
    assert report.rho_AC == pytest.approx(rdm_similarity(conditions.A, conditions.C))
    assert report.distortion_factor == pytest.approx(report.rho_AD / report.rho_CD)
    np.testing.assert_array_equal(m, m.T)


def test_a_is_best_layer_without_neutral(tmpdir, record):
    run_dir = _make_run(str(tmpdir), record)
    conditions = assemble_conditions(str(tmpdir), record.model_id)
    full = compute_rdm(random_vectors(record, 2, 0))
    np.testing.assert_allclose(conditions.A.matrix, full.restrict(LABELS).matrix)
    assert "neutral" not in conditions.A.emotion_order
    assert os.path.exists(os.path.join(run_dir, "sweep.json"))


def test_missing_condition(tmpdir, record):
    _make_run(str(tmpdir), record, skip="D")
    with pytest.raises(ValidationError, match="condition D absent"):
        assemble_conditions(str(tmpdir), record.model_id)


def test_missing_comprehension(tmpdir, record):
    with pytest.raises(ValidationError, match="condition A absent"):
        assemble_conditions(str(tmpdir), record.model_id)


def test_permuted_condition(tmpdir, record):
    run_dir = _make_run(str(tmpdir), record)
    path = os.path.join(condition_dir(run_dir, "C"), RDM_FILE)
    with open(path) as f:
        raw = json.load(f)
    raw["emotion_order"] = raw["emotion_order"][::-1]
    write_json(raw, path)
    with pytest.raises(AlignmentError, match="Condition C"):
        assemble_conditions(str(tmpdir), record.model_id)


def test_condition_set_alignment(record):
    a = _generation_rdm(record, 0)
    short = a.restrict(LABELS[:10])
    with pytest.raises(AlignmentError, match="A and D"):
        ConditionSet(a, a, a, short, record.model_id)


def test_zero_cd_has_no_distortion(monkeypatch, record):
    matrix = np.eye(4)
    matrix[0, 3] = matrix[3, 0] = 0.4

    class _Fixed:
        def compute(self):
            return matrix

    monkeypatch.setattr(
        "emotion_geometry.decomposition.similarity_matrix", lambda items, method: _Fixed()
    )
    a = _generation_rdm(record, 0)
    report = contrast_table(ConditionSet(a, a, a, a, record.model_id))
    assert report.rho_CD == 0
    assert report.rho_AD == 0.4
    assert report.distortion_factor is None


def test_report_written(tmpdir, record):
    run_dir = _make_run(str(tmpdir), record)
    samples = os.path.join(condition_dir(run_dir, "B"), "samples.json")
    write_json({"degenerate": {"calm": 1}}, samples)
    run_decomposition(str(tmpdir), record.model_id, method="pearson")
    with open(os.path.join(run_dir, REPORT_FILE)) as f:
        saved = json.load(f)
    assert saved["conditions"] == ["A", "B", "C", "D"]
    assert saved["method"] == "pearson"
    assert saved["emotion_order"] == list(LABELS)
    assert saved["degenerate"] == {"B": {"calm": 1}}
    assert len(saved["full_matrix"]) == 4
