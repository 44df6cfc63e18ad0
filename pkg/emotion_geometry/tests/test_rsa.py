import itertools

import dask
import numpy as np
import pytest

from emotion_geometry.errors import AlignmentError
from emotion_geometry.geometry import compute_rdm
from emotion_geometry.registry import RDM, default_model_table, load_published_descriptors
from emotion_geometry.rsa import (
    correlate,
    linear_normalize_rdm,
    normalization_change,
    pearson,
    rdm_of_rdms,
    rdm_similarity,
    reliability_flag,
    size_correlations,
    spearman,
    t_test_p,
)
from emotion_geometry.stimuli import EMOTIONS, generation_subset
from emotion_geometry.tests.conftest import random_vectors


def _brute_spearman(x, y):
    """Average-rank Spearman by counting, no library ranking"""

    def ranks(v):
        return [
            1 + sum(w < a for w in v) + (sum(w == a for w in v) - 1) / 2 for a in v
        ]

    rx, ry = np.array(ranks(x)), np.array(ranks(y))
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return (rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry))


@pytest.mark.parametrize("perm", list(itertools.permutations([1.0, 2.0, 3.0, 4.0])))
def test_spearman_permutations(perm):
    x = [1.0, 2.0, 3.0, 4.0]
    assert spearman(x, perm) == pytest.approx(_brute_spearman(x, perm))


def test_spearman_ties():
    x = [1, 2, 2, 3, 5, 5, 5]
    y = [3, 1, 4, 1, 5, 9, 2]
    assert spearman(x, y) == pytest.approx(_brute_spearman(x, y))


def _tied_draw(rng, n):
    # small integer range so most draws carry ties
    while True:
        v = rng.integers(0, 4, size=n)
        if np.ptp(v):
            return v


@pytest.mark.parametrize("seed", range(10))
def test_spearman_random_ties(seed):
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        n = int(rng.integers(3, 12))
        x, y = _tied_draw(rng, n), _tied_draw(rng, n)
        assert spearman(x, y) == pytest.approx(_brute_spearman(x, y), abs=1e-12)


def test_spearman_monotone():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    assert spearman(x, np.exp(x)) == pytest.approx(1.0)
    assert spearman(x, -(x**3)) == pytest.approx(-1.0)


@pytest.mark.parametrize(
    "x,y,match",
    [
        ([1, 2], [1, 2], "3"),
        ([1, 2, 3], [1, 2], "equal-length"),
        ([1, 2, np.nan], [1, 2, 3], "finite"),
        ([1, 1, 1], [1, 2, 3], "constant"),
    ],
)
def test_correlation_errors(x, y, match):
    with pytest.raises(ValueError, match=match):
        spearman(x, y)


def test_correlate_method():
    x = [1.0, 2.0, 3.0, 10.0]
    y = [2.0, 4.0, 6.0, 8.0]
    assert correlate(x, y, "pearson") == pytest.approx(pearson(x, y))
    assert correlate(x, y) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="kendall"):
        correlate(x, y, "kendall")


def _rdm(record, seed, layer=0):
    return compute_rdm(random_vectors(record, layer, seed))


def test_rdm_similarity_self(record):
    a = _rdm(record, 0)
    assert rdm_similarity(a, a) == pytest.approx(1.0)


def test_upper_triangle_matches_full_off_diagonal(record):
    a, b = _rdm(record, 0), _rdm(record, 1)
    mask = ~np.eye(21, dtype=bool)
    full = spearman(a.matrix[mask], b.matrix[mask])
    assert rdm_similarity(a, b) == pytest.approx(full)


def test_sign_flip(record):
    a, b = _rdm(record, 0), _rdm(record, 1)
    flipped = RDM(-b.matrix, b.emotion_order)
    assert rdm_similarity(a, flipped) == pytest.approx(-rdm_similarity(a, b))


def test_alignment_checked(record):
    a = _rdm(record, 0)
    b = a.restrict(generation_subset())
    with pytest.raises(AlignmentError):
        rdm_similarity(a, b)


@pytest.mark.parametrize("method", ["spearman", "pearson"])
def test_normalization_invariance(record, method):
    a, b = _rdm(record, 0), _rdm(record, 1)
    na = linear_normalize_rdm(a, 0.93)
    nb = linear_normalize_rdm(b, 0.41)
    assert na.source["normalized"]
    assert rdm_similarity(na, nb, method) == pytest.approx(
        rdm_similarity(a, b, method), abs=1e-12
    )


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("method", ["spearman", "pearson"])
def test_positive_linear_maps_keep_similarity(record, seed, method):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        a, b = (_rdm(record, int(s)) for s in rng.integers(2**31, size=2))
        before = rdm_similarity(a, b, method)

        na = linear_normalize_rdm(a, rng.uniform())
        nb = linear_normalize_rdm(b, rng.uniform())
        assert rdm_similarity(na, nb, method) == pytest.approx(before, abs=1e-12)

        # any independent positive scale and shift per matrix
        (sa, sb), (ta, tb) = rng.uniform(0.1, 10, size=2), rng.uniform(-1, 1, size=2)
        ma = RDM(sa * a.matrix + ta, a.emotion_order)
        mb = RDM(sb * b.matrix + tb, b.emotion_order)
        assert rdm_similarity(ma, mb, method) == pytest.approx(before, abs=1e-12)


def test_linear_normalize_matches_formula(record):
    a = _rdm(record, 3)
    out = linear_normalize_rdm(a, 0.8)
    expected = (a.matrix - 0.2) / np.std(a.upper)
    np.testing.assert_allclose(out.matrix, expected, rtol=1e-12, atol=1e-12)


def test_normalization_change(record):
    records = [record.replace(model_id=f"stub/m{i}") for i in range(3)]
    entries = [
        (r, _rdm(r, i), aniso) for i, (r, aniso) in enumerate(zip(records, [0.5, 0.9, 0.99]))
    ]
    assert normalization_change(entries) < 1e-12
    assert normalization_change(entries, "pearson") < 1e-12


def test_normalize_constant_rdm():
    m = np.full((3, 3), 0.5)
    with pytest.raises(ValueError, match="spread"):
        linear_normalize_rdm(RDM(m, EMOTIONS[:3]), 0.9)


@pytest.mark.parametrize(
    "value,reference,flag",
    [
        (0.997, [], "unreliable"),
        (0.997, [0.999, 0.996], "unreliable"),
        (0.982, [0.93, 0.97], "borderline"),
        (0.982, [None, 0.97], "unreliable"),
        (0.96, [], "unreliable"),
        (0.95, [0.99], "borderline"),
        (0.93, [], "borderline"),
        (0.90, [0.99], "ok"),
        (0.5, [], "ok"),
    ],
)
def test_reliability_flag(value, reference, flag):
    assert reliability_flag(value, reference) == flag


@pytest.mark.parametrize("value", [None, float("nan"), float("inf")])
def test_reliability_flag_needs_finite_anisotropy(value):
    with pytest.raises(ValueError, match="non-finite"):
        reliability_flag(value)


def test_reliability_thresholds_from_config():
    with dask.config.set(
        {
            "emotion-geometry.reliability.unreliable": 0.99,
            "emotion-geometry.reliability.borderline": 0.98,
        }
    ):
        assert reliability_flag(0.982) == "borderline"
        assert reliability_flag(0.97) == "ok"
    assert reliability_flag(0.97, unreliable=0.96, borderline=0.5) == "unreliable"


def test_rdm_of_rdms(record):
    records = [record.replace(model_id=f"stub/m{i}") for i in range(3)]
    rdms = [_rdm(r, i) for i, r in enumerate(records)]
    result = rdm_of_rdms(zip(records, rdms, [0.5, 0.93, 0.99]))

    assert result.model_order == ["stub/m0", "stub/m1", "stub/m2"]
    np.testing.assert_allclose(np.diag(result.matrix), 1.0)
    np.testing.assert_allclose(result.matrix, result.matrix.T)
    assert result["stub/m0", "stub/m2"] == pytest.approx(rdm_similarity(rdms[0], rdms[2]))
    assert result.reliability == {
        "stub/m0": "ok",
        "stub/m1": "borderline",
        "stub/m2": "unreliable",
    }
    assert len(list(result.pairs())) == 3

    flipped = result.reorder(["stub/m2", "stub/m0", "stub/m1"])
    assert flipped["stub/m0", "stub/m2"] == result["stub/m0", "stub/m2"]
    assert result.to_dict()["matrix"][0][0] == pytest.approx(1.0)


def test_rdm_of_rdms_reference_layers(record):
    records = [record.replace(model_id=f"stub/m{i}") for i in range(3)]
    rdms = [_rdm(r, i) for i, r in enumerate(records)]
    result = rdm_of_rdms(
        zip(records, rdms, [0.997, 0.982, 0.6]),
        reference={"stub/m0": [0.999, 0.996], "stub/m1": [0.93, 0.97], "stub/m2": [0.99]},
    )
    assert result.reliability == {
        "stub/m0": "unreliable",
        "stub/m1": "borderline",
        "stub/m2": "ok",
    }
    assert result.anisotropy["stub/m1"] == 0.982


def test_rdm_of_rdms_errors(record):
    rdm = _rdm(record, 0)
    with pytest.raises(ValueError, match="two"):
        rdm_of_rdms([(record, rdm, 0.5)])
    other = record.replace(model_id="stub/other")
    with pytest.raises(AlignmentError):
        rdm_of_rdms([(record, rdm, 0.5), (other, rdm.restrict(generation_subset()), 0.5)])


def test_published_size_correlations():
    df = load_published_descriptors(default_model_table())
    rows = {(r.predictor, r.outcome): r for r in size_correlations(df)}
    assert len(rows) == 6
    assert rows["d_model", "anisotropy"].rho == pytest.approx(-0.882, abs=0.01)
    assert rows["size_b", "rdm_std"].rho == pytest.approx(-0.891, abs=0.01)
    assert rows["size_b", "best_layer_pct"].rho == pytest.approx(-0.484, abs=0.02)
    assert all(r.n == 12 for r in rows.values())
    assert rows["d_model", "anisotropy"].p_uncorrected < 0.001
    assert rows["size_b", "best_layer_pct"].p_uncorrected > 0.05


def test_size_correlations_need_four(record):
    rows = [
        (record.replace(model_id=f"m{i}", size_b=float(i + 1)), {"anisotropy": 0.5, "rdm_std": 0.1, "best_layer_pct": 0.4})
        for i in range(3)
    ]
    with pytest.raises(ValueError, match="at least 4"):
        size_correlations(rows)


def test_t_test_p():
    assert t_test_p(0.0, 12) == pytest.approx(1.0)
    assert t_test_p(1.0, 12) == 0.0
    assert t_test_p(-0.5, 12) == pytest.approx(t_test_p(0.5, 12))


def test_size_correlations_constant_outcome(record):
    rows = [
        (
            record.replace(model_id=f"m{i}", size_b=float(i + 1), d_model=16 * (i + 1)),
            {"anisotropy": 0.1 * i, "rdm_std": 0.1, "best_layer_pct": 0.4 - 0.01 * i},
        )
        for i in range(5)
    ]
    out = {(r.predictor, r.outcome): r for r in size_correlations(rows)}
    assert np.isnan(out["size_b", "rdm_std"].rho)
    assert out["size_b", "anisotropy"].rho == pytest.approx(1.0)
    assert out["d_model", "best_layer_pct"].rho == pytest.approx(-1.0)
