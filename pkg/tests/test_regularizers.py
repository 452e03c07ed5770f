import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedoa.errors import DegenerateInputError, ShapeError
from fedoa.regularizers import KINDS, RegSpec, dist, dist_grad_rows, dist_grad_zp, dist_rows

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def vec(n=6):
    return arrays(np.float64, n, elements=finite)


def _well_posed(*vs):
    # keep away from zero norms and zero spreads
    return all(np.linalg.norm(v) > 1e-3 and np.std(v) > 1e-3 for v in vs)


@given(vec())
def test_self_distance_is_zero(a):
    if not _well_posed(a):
        return
    for kind in KINDS:
        assert dist(a, a, kind) <= 1e-12


@given(vec(), vec())
def test_l2_symmetry_and_nonnegativity(a, b):
    assert dist(a, b, "l2sq") == dist(b, a, "l2sq")
    assert dist(a, b, "l2sq") >= 0.0


@given(vec(), st.floats(0.01, 100))
def test_cosine_positive_scale_invariance(a, c):
    if not _well_posed(a):
        return
    assert abs(dist(c * a, a, "cosine")) <= 1e-12


@given(vec(), st.floats(0.01, 100), st.floats(-50, 50))
def test_pearson_affine_invariance(a, c, m):
    if not _well_posed(a):
        return
    assert abs(dist(c * a + m, a, "pearson")) <= 1e-12


def test_known_values():
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([0.0, 1.0, 0.0])
    assert dist(a, b, "l2sq") == 2.0
    assert dist(a, b, "cosine") == pytest.approx(1.0)
    assert dist(a, -a, "cosine") == pytest.approx(2.0)
    # centred a = (2, -1, -1)/3, centred b = (-1, 2, -1)/3, corr = -3/6
    assert dist(a, b, "pearson") == pytest.approx(1.5)


@settings(max_examples=40, deadline=None)
@given(vec(5), vec(5), st.sampled_from(KINDS))
def test_gradient_matches_central_differences(p, g, kind):
    if not _well_posed(p, g):
        return
    grad = dist_grad_zp(p, g, kind)
    h = 1e-6
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        num = (dist(p + e, g, kind) - dist(p - e, g, kind)) / (2 * h)
        assert abs(grad[i] - num) <= 1e-5 * max(1.0, abs(num))


def test_row_forms_match_vector_forms():
    rng = np.random.default_rng(0)
    P, G = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    for kind in KINDS:
        rows = dist_rows(P, G, kind)
        grads = dist_grad_rows(P, G, kind)
        for i in range(4):
            assert rows[i] == pytest.approx(dist(P[i], G[i], kind), abs=1e-15)
            np.testing.assert_allclose(grads[i], dist_grad_zp(P[i], G[i], kind), atol=1e-15)


def test_degenerate_inputs_raise():
    z = np.zeros(4)
    one = np.ones(4)
    with pytest.raises(DegenerateInputError):
        dist(z, one, "cosine")
    with pytest.raises(DegenerateInputError):
        dist(one, np.arange(4.0), "pearson")  # constant first argument
    assert dist(z, one, "l2sq") == 4.0


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        dist(np.ones(3), np.ones(4))


def test_regspec_validation():
    assert not RegSpec("l2sq", 0.0).active
    assert RegSpec("cosine", 0.1).active
    with pytest.raises(ValueError):
        RegSpec("l1", 0.1)
    with pytest.raises(ValueError):
        RegSpec("l2sq", -1.0)
    with pytest.raises(ValueError):
        RegSpec("l2sq", float("nan"))
