import json
import os

import numpy as np
import pytest

from emotion_geometry.comprehension import (
    LayerSweep,
    build_emotion_vectors,
    extract_run,
    load_sweep,
    select_best_layer,
    sweep_layers,
)
from emotion_geometry.errors import ExtractionError
from emotion_geometry.geometry import mean_pairwise_cosine
from emotion_geometry.registry import (
    ModelRecord,
    RDM_FILE,
    layer_dir,
    load_rdm,
    load_vector_set,
    read_run_meta,
)
from emotion_geometry.stimuli import EMOTIONS
from emotion_geometry.tests.conftest import StubHandle


def test_select_best_layer():
    assert select_best_layer([0.5, 0.2, 0.2, 0.9]) == 1
    assert select_best_layer([None, float("nan"), 0.4]) == 2
    with pytest.raises(ValueError):
        select_best_layer([None, float("nan")])


@pytest.mark.parametrize("seed", range(20))
def test_best_layer_ignores_appended_null_layers(seed):
    rng = np.random.default_rng(seed)
    values = list(rng.choice([0.1, 0.2, 0.3, 0.4], size=int(rng.integers(1, 12))))
    best = select_best_layer(values)
    assert values[best] == min(values)
    assert best == values.index(min(values))
    for _ in range(int(rng.integers(1, 4))):
        values.append(None if rng.uniform() < 0.5 else float("nan"))
        assert select_best_layer(values) == best


def test_best_layer_pct():
    record = ModelRecord("meta-llama/Llama-3.2-3B", "Llama 3.2", "base", 3.0, 28, 3072, "named_hook")
    values = [0.5] * 28
    values[11] = 0.1
    sweep = LayerSweep(record, values, select_best_layer(values))
    assert sweep.best_layer == 11
    assert round(100 * sweep.best_layer_pct, 1) == 39.3


def test_build_emotion_vectors(record):
    rng = np.random.default_rng(0)
    acts = {e: rng.normal(size=(3, record.d_model)) for e in EMOTIONS}
    acts["calm"][1] = np.nan
    vs = build_emotion_vectors(acts, 1, record)

    means = np.stack(
        [acts[e][np.isfinite(acts[e]).all(axis=1)].mean(axis=0) for e in EMOTIONS]
    )
    expected = means - means.mean(axis=0)
    np.testing.assert_allclose(vs.as_float64(), expected, atol=1e-6)


def _oracle_vectors(acts):
    means = []
    for e in EMOTIONS:
        rows = [row for row in acts[e] if all(np.isfinite(row))]
        means.append(sum(rows) / len(rows))
    grand = sum(means) / len(means)
    return np.stack([m - grand for m in means])


@pytest.mark.parametrize("seed", range(100))
def test_build_emotion_vectors_random(record, seed):
    rng = np.random.default_rng(seed)
    acts = {}
    for e in EMOTIONS:
        rows = rng.normal(loc=rng.normal(), size=(int(rng.integers(1, 6)), record.d_model))
        if len(rows) > 1 and rng.uniform() < 0.3:
            rows[rng.integers(len(rows))] = np.nan
        acts[e] = rows
    vs = build_emotion_vectors(acts, 2, record)
    assert vs.emotion_order == EMOTIONS
    np.testing.assert_allclose(vs.as_float64(), _oracle_vectors(acts), atol=1e-5)


def test_build_emotion_vectors_missing(record):
    acts = {e: np.ones((2, record.d_model)) for e in EMOTIONS if e != "sad"}
    with pytest.raises(ExtractionError, match="sad"):
        build_emotion_vectors(acts, 0, record)
    acts["sad"] = np.full((2, record.d_model), np.nan)
    with pytest.raises(ExtractionError, match="finite"):
        build_emotion_vectors(acts, 0, record)


def test_sweep(handle, corpus):
    sweep, vectors = sweep_layers(handle, corpus)
    assert len(sweep.per_layer_mean_cosine) == handle.record.n_layers
    assert sorted(vectors) == list(range(handle.record.n_layers))
    for layer, vs in vectors.items():
        assert sweep.per_layer_mean_cosine[layer] == pytest.approx(mean_pairwise_cosine(vs))
    finite = [v for v in sweep.per_layer_mean_cosine if v is not None]
    assert sweep.per_layer_mean_cosine[sweep.best_layer] == min(finite)
    assert all(a is not None for a in sweep.per_layer_anisotropy)


def test_sweep_deterministic(corpus):
    a, va = sweep_layers(StubHandle(), corpus)
    b, vb = sweep_layers(StubHandle(), corpus)
    assert a.to_dict() == b.to_dict()
    for layer in va:
        assert va[layer].vectors.tobytes() == vb[layer].vectors.tobytes()


def test_sweep_null_layers(corpus, caplog):
    sweep, vectors = sweep_layers(StubHandle(nan_layers=(0, 2)), corpus)
    assert sweep.null_layers == [0, 2]
    assert sweep.best_layer in (1, 3)
    assert sweep.per_layer_anisotropy[0] is None
    assert "recorded as null" in caplog.text
    assert json.loads(json.dumps(sweep.to_dict()))["per_layer_mean_cosine"][0] is None


def test_sweep_all_null(corpus):
    with pytest.raises(ExtractionError, match="non-finite"):
        sweep_layers(StubHandle(nan_layers=range(4)), corpus)


def test_sweep_subset_of_layers(handle, corpus):
    sweep, vectors = sweep_layers(handle, corpus, layers=[3, 1])
    assert sorted(vectors) == [1, 3]
    assert sweep.null_layers == [0, 2]


def test_extract_run(tmpdir, handle, corpus):
    run_dir = extract_run(handle, corpus, str(tmpdir))
    assert os.path.basename(run_dir) == "stub_tiny-instruct"

    record, manifest = read_run_meta(run_dir)
    assert record == handle.record
    assert manifest.finished_at is not None
    assert manifest.corpus_hash == corpus.digest

    sweep = load_sweep(run_dir)
    for layer in range(handle.record.n_layers):
        vs = load_vector_set(layer_dir(run_dir, layer))
        assert vs.layer == layer
        rdm = load_rdm(os.path.join(layer_dir(run_dir, layer), RDM_FILE))
        assert rdm.emotion_order == EMOTIONS
        assert rdm.layer == layer
    assert 0 <= sweep.best_layer < handle.record.n_layers


def test_extract_run_null_layer_has_no_rdm(tmpdir, corpus):
    run_dir = extract_run(StubHandle(nan_layers=(1,)), corpus, str(tmpdir))
    assert not os.path.exists(os.path.join(layer_dir(run_dir, 1), "vectors.f32"))
    assert not os.path.exists(os.path.join(layer_dir(run_dir, 1), RDM_FILE))
    assert load_sweep(run_dir).null_layers == [1]
