import numpy as np
import pytest

from emotion_geometry.comprehension import LayerSweep
from emotion_geometry.errors import ConsistencyError
from emotion_geometry.geometry import (
    GeometryDescriptors,
    anisotropy,
    compute_rdm,
    cosine_matrix,
    descriptors,
    load_descriptors,
    mean_pairwise_cosine,
    persist_descriptors,
    rdm_std,
    reference_depth_descriptors,
    reference_layer,
)
from emotion_geometry.registry import RDM, EmotionVectorSet
from emotion_geometry.stimuli import EMOTIONS, generation_subset
from emotion_geometry.tests.conftest import random_vectors


def test_cosine_matrix():
    m = cosine_matrix([[1, 0], [0, 2], [-3, 0]])
    np.testing.assert_allclose(m, [[1, 0, -1], [0, 1, 0], [-1, 0, 1]], atol=1e-12)
    np.testing.assert_array_equal(m, m.T)


def test_cosine_zero_row_named():
    with pytest.raises(ValueError, match="calm"):
        cosine_matrix([[1, 0], [0, 0]], labels=["afraid", "calm"])


def test_mean_pairwise_cosine():
    assert mean_pairwise_cosine([[1, 0], [1, 0], [1, 0]]) == pytest.approx(1.0)
    assert mean_pairwise_cosine([[1, 0], [0, 1]]) == pytest.approx(0.0)


def test_compute_rdm(vectors):
    rdm = compute_rdm(vectors)
    assert rdm.matrix.shape == (21, 21)
    assert rdm.emotion_order == EMOTIONS
    np.testing.assert_allclose(np.diag(rdm.matrix), 1.0, atol=1e-6)
    np.testing.assert_array_equal(rdm.matrix, rdm.matrix.T)
    assert rdm.model_id == vectors.model.model_id
    assert rdm.layer == vectors.layer


def test_compute_rdm_subset(vectors):
    full = compute_rdm(vectors)
    sub = compute_rdm(vectors.restrict(generation_subset()))
    np.testing.assert_allclose(sub.matrix, full.restrict(generation_subset()).matrix)


def test_compute_rdm_scale_invariant(record, vectors):
    scaled = type(vectors)(record, vectors.layer, vectors.vectors * 7.5)
    np.testing.assert_allclose(
        compute_rdm(scaled).matrix, compute_rdm(vectors).matrix, atol=1e-6
    )


@pytest.mark.parametrize("seed", range(100))
def test_rdm_properties_random_sets(record, seed):
    rng = np.random.default_rng(seed)
    # raw means with a shared offset, centered the way extraction does it
    means = rng.normal(size=(21, record.d_model)) + rng.normal(scale=5, size=record.d_model)
    vectors = EmotionVectorSet(record, 1, means - means.mean(axis=0))
    sums = np.abs(vectors.as_float64().sum(axis=0))
    assert sums.max() < 1e-5 * np.linalg.norm(vectors.as_float64(), axis=1).mean() * 21

    rdm = compute_rdm(vectors)
    assert np.abs(rdm.matrix - rdm.matrix.T).max() <= 1e-6
    assert np.abs(np.diag(rdm.matrix) - 1).max() <= 1e-5

    scales = rng.uniform(0.01, 100, size=(21, 1))
    rescaled = EmotionVectorSet(record, 1, vectors.as_float64() * scales, centered=False)
    assert np.abs(compute_rdm(rescaled).matrix - rdm.matrix).max() <= 1e-6


def test_rdm_std_population():
    m = np.array([[1.0, 0.2, 0.4], [0.2, 1.0, 0.6], [0.4, 0.6, 1.0]])
    rdm = RDM(m, EMOTIONS[:3])
    assert rdm_std(rdm) == pytest.approx(np.std([0.2, 0.4, 0.6]))
    i, j = np.where(~np.eye(3, dtype=bool))
    assert rdm_std(rdm) == pytest.approx(np.std(m[i, j]))


def test_anisotropy():
    assert anisotropy(np.ones((5, 4))) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 512))
    assert abs(anisotropy(x)) < 0.05
    assert anisotropy(x + 50) > 0.95


def test_anisotropy_errors():
    with pytest.raises(ValueError, match="two"):
        anisotropy(np.ones((1, 4)))
    x = np.ones((3, 4))
    x[1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        anisotropy(x)


@pytest.mark.parametrize("n,depth,layer", [(28, 0.5, 14), (28, 0.75, 21), (26, 1.0, 25), (4, 0.0, 0)])
def test_reference_layer(n, depth, layer):
    assert reference_layer(n, depth) == layer


def test_reference_depth_descriptors(record):
    rng = np.random.default_rng(3)
    neutral = {2: rng.normal(size=(20, record.d_model)), 3: np.full((20, record.d_model), np.nan)}
    vectors = {2: random_vectors(record, 2)}
    out = reference_depth_descriptors(neutral, vectors, record.n_layers)
    assert out["0.5"]["layer"] == 2
    assert out["0.5"]["anisotropy"] is not None
    assert out["0.5"]["rdm_std"] is not None
    assert out["0.75"] == {"layer": 3, "anisotropy": None, "rdm_std": None}


def _sweep(record, best=2):
    return LayerSweep(record, [0.5, 0.4, 0.1, 0.3], best)


def test_descriptors(tmpdir, record):
    vs = random_vectors(record, 2)
    rdm = compute_rdm(vs)
    desc = descriptors(_sweep(record), rdm, 0.83, regime="surgical", anisotropy_layer=2)
    assert desc.best_layer == 2
    assert desc.best_layer_pct == 0.5
    assert desc.rdm_std == pytest.approx(rdm_std(rdm))
    assert desc.steering_regime == "surgical"

    persist_descriptors(desc, str(tmpdir), "manifest-x")
    assert load_descriptors(str(tmpdir)) == desc


def test_descriptors_default_regime(record):
    rdm = compute_rdm(random_vectors(record, 2))
    assert descriptors(_sweep(record), rdm, 0.5).steering_regime == "not_available"
    hidden = record.replace(backend_kind="hidden_state_sequence")
    desc = descriptors(_sweep(hidden), RDM(rdm.matrix, rdm.emotion_order), 0.5, regime="explosive")
    assert desc.steering_regime == "not_available"


def test_descriptors_consistency(record):
    rdm = compute_rdm(random_vectors(record, 1))
    with pytest.raises(ConsistencyError, match="layer 1"):
        descriptors(_sweep(record), rdm, 0.5)
    rdm = compute_rdm(random_vectors(record, 2))
    with pytest.raises(ConsistencyError, match="Anisotropy"):
        descriptors(_sweep(record), rdm, 0.5, anisotropy_layer=3)


def test_hidden_state_regime_rejected():
    with pytest.raises(ConsistencyError):
        GeometryDescriptors("m", "hidden_state_sequence", 0.5, 0.1, 3, 0.3, "surgical")
    with pytest.raises(ValueError):
        GeometryDescriptors("m", "named_hook", 0.5, 0.1, 3, 0.3, "calm")
