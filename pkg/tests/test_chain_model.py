from __future__ import annotations

import json
import math

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, strategies as st

from conftest import instance, seeds
from loop_perturb.chain_model import (
    TransientChain,
    chain_from_json,
    chain_to_json,
    dual_chain,
    green_kernel,
    semigroup,
    sqrt_kernel,
    time_change_check,
    transition_density,
    validate_chain,
)
from loop_perturb.errors import (
    ChainError,
    NegativeOffDiagonal,
    NonPositiveA,
    NonPositiveReference,
    NonTransient,
    NotDualAdmissible,
    NotSymmetric,
    PositiveRowSum,
)

Q2 = np.array([[-3.0, 1.0], [2.0, -4.0]])
Q3 = np.array([[-3.0, 1.0, 1.5], [0.5, -2.0, 1.0], [1.0, 1.0, -2.5]])
M3 = np.array([1.0, 2.0, 0.5])
# m-symmetric: conductances [[0,1,.5],[1,0,2],[.5,2,0]], killing (.5, 0, 1)
QS = np.array([[-2.0, 1.0, 0.5], [0.5, -1.5, 1.0], [1.0, 4.0, -6.0]])
MS = np.array([1.0, 2.0, 0.5])


class TestValidation:
    def test_one_state(self):
        c = validate_chain([[-2.0]], [1.0])
        assert c.abscissa == pytest.approx(-2.0)
        assert c.n == 1

    def test_two_state(self):
        c = validate_chain(Q2, [1, 1])
        np.testing.assert_allclose(c.killing, [2.0, 2.0])

    def test_zero_matrix_not_transient(self):
        with pytest.raises(NonTransient):
            validate_chain(np.zeros((2, 2)), [1, 1])

    def test_conservative_chain_not_transient(self):
        with pytest.raises(NonTransient):
            validate_chain([[-1.0, 1.0], [1.0, -1.0]], [1, 1])

    def test_negative_off_diagonal(self):
        with pytest.raises(NegativeOffDiagonal):
            validate_chain([[-3.0, -1.0], [2.0, -4.0]], [1, 1])

    @pytest.mark.parametrize("m", [[0.0, 1.0], [-1.0, 1.0]])
    def test_nonpositive_reference(self, m):
        with pytest.raises(NonPositiveReference):
            validate_chain(Q2, m)

    def test_positive_row_sum(self):
        with pytest.raises(PositiveRowSum):
            validate_chain([[-1.0, 2.0], [0.0, -1.0]], [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ChainError):
            validate_chain(Q2, [1.0])

    def test_frozen(self):
        c = validate_chain(Q2, [1, 1])
        with pytest.raises(ValueError):
            c.Q[0, 0] = 1.0


class TestTransitionDensity:
    def test_scalar(self):
        c = validate_chain([[-2.0]], [1.0])
        assert transition_density(c, 1.0)[0, 0] == pytest.approx(0.1353352832366127, rel=1e-14)

    def test_time_zero(self):
        c = validate_chain(Q3, M3)
        np.testing.assert_allclose(transition_density(c, 0.0), np.diag(1 / M3), atol=1e-15)

    def test_against_mpmath_2x2(self):
        # frozen from mpmath expm at 40 digits, t = 0.7
        expected = np.array([
            [0.17446377043517715154, 0.0721331935064293254],
            [0.1442663870128586508, 0.10233057692874782614],
        ])
        c = validate_chain(Q2, [1, 1])
        np.testing.assert_allclose(transition_density(c, 0.7), expected, rtol=1e-12)

    def test_against_mpmath_weighted(self):
        # frozen from mpmath expm(1.3 Q) / m_y at 40 digits
        expected = np.array([
            [0.12652545378925641574, 0.10036077306304233188, 0.38959755369134993678],
            [0.11364621585597383529, 0.11048172878594452612, 0.37487220666630632072],
            [0.12100888936849564332, 0.10036077306304233188, 0.40063068253287148161],
        ])
        c = validate_chain(Q3, M3)
        np.testing.assert_allclose(transition_density(c, 1.3), expected, rtol=1e-12)

    def test_symmetric_path_matches_pade(self):
        c = validate_chain(QS, MS)
        assert c.is_symmetric()
        np.testing.assert_allclose(semigroup(c, 0.9), scipy.linalg.expm(0.9 * QS), rtol=1e-12, atol=1e-15)

    @given(seeds, st.floats(0.01, 5.0), st.floats(0.01, 5.0))
    def test_semigroup_property(self, seed, t, s):
        c = instance(seed).chain
        p_ts = transition_density(c, t + s)
        conv = transition_density(c, t) @ np.diag(c.m) @ transition_density(c, s)
        assert np.abs(p_ts - conv).max() <= 1e-10 * max(1.0, np.abs(p_ts).max())


class TestGreenKernel:
    def test_scalar(self):
        assert green_kernel(validate_chain([[-2.0]], [1.0])).u[0, 0] == pytest.approx(0.5)

    def test_decoupled(self):
        np.testing.assert_allclose(green_kernel(validate_chain(-np.eye(2), [1, 1])).u, np.eye(2))

    def test_against_time_quadrature(self):
        # frozen from adaptive quadrature of p_t over [0, 200]
        expected = np.array([
            [0.6666666666666685, 0.33333333333333315, 1.3333333333333306],
            [0.375, 0.5000000000000003, 1.2499999999999991],
            [0.41666666666666563, 0.33333333333333315, 1.8333333333333357],
        ])
        u = green_kernel(validate_chain(Q3, M3)).u
        np.testing.assert_allclose(u, expected, rtol=1e-8)
        np.testing.assert_allclose(u, [[2 / 3, 1 / 3, 4 / 3], [3 / 8, 1 / 2, 5 / 4], [5 / 12, 1 / 3, 11 / 6]], rtol=1e-13)

    def test_random_n8_against_quadrature(self):
        c = instance(3, n=8).chain
        f = lambda x: transition_density(c, math.exp(x)) * math.exp(x)
        head, _ = scipy.integrate.quad_vec(lambda t: transition_density(c, t), 0.0, 1.0, epsrel=1e-12)
        tail, _ = scipy.integrate.quad_vec(f, 0.0, math.log(60.0 / abs(c.abscissa)), epsrel=1e-12)
        u = green_kernel(c).u
        assert np.abs(head + tail - u).max() / np.abs(u).max() <= 1e-8

    @given(seeds)
    def test_positive_and_consistent(self, seed):
        c = instance(seed).chain
        u = green_kernel(c).u
        assert np.all(u > 0)
        np.testing.assert_allclose(-c.Q @ (u * c.m[None, :]), np.eye(c.n), atol=1e-10)


class TestDuality:
    def test_counting_measure(self):
        d = dual_chain(validate_chain(Q2, [1, 1]))
        np.testing.assert_allclose(d.Q, Q2.T)

    def test_symmetric_is_self_dual(self):
        Q = np.array([[-3.0, 1.0], [1.0, -2.0]])
        np.testing.assert_allclose(dual_chain(validate_chain(Q, [1, 1])).Q, Q)

    def test_not_admissible(self):
        # Qhat row 0 = (-3, 4) sums to +1
        with pytest.raises(NotDualAdmissible):
            dual_chain(validate_chain(Q2, [1, 2]))

    @given(seeds, st.lists(st.floats(0.05, 6.0), min_size=5, max_size=5))
    def test_kernel_transpose(self, seed, ts):
        c = instance(seed, dual_admissible=True).chain
        d = dual_chain(c)
        for t in ts:
            p, ph = transition_density(c, t), transition_density(d, t)
            assert np.abs(ph - p.T).max() <= 1e-10 * np.abs(p).max()


class TestSqrtKernel:
    def test_quarter(self):
        sq = sqrt_kernel(validate_chain([[-4.0]], [1.0]))
        assert sq.w[0, 0] == pytest.approx(0.5)

    def test_gamma_half_integral(self):
        sq = sqrt_kernel(validate_chain([[-2.0]], [1.0]))
        val, _ = scipy.integrate.quad(lambda s: math.exp(-2 * s) / math.sqrt(math.pi * s), 0, math.inf)
        assert sq.w[0, 0] == pytest.approx(1 / math.sqrt(2), rel=1e-14)
        assert val == pytest.approx(1 / math.sqrt(2), rel=1e-10)

    def test_against_subordinated_quadrature(self):
        # frozen from quadrature of int p_s / sqrt(pi s) ds
        expected = np.array([
            [0.9313048851251173, 0.35624218317346196, 0.33264038550061087],
            [0.35624218317346196, 0.7492857510510433, 0.45425633719771447],
            [0.33264038550061087, 0.4542563371977145, 1.1429114772376143],
        ])
        np.testing.assert_allclose(sqrt_kernel(validate_chain(QS, MS)).w, expected, rtol=1e-9)

    def test_not_symmetric(self):
        with pytest.raises(NotSymmetric):
            sqrt_kernel(validate_chain(Q3, M3))

    @given(seeds)
    def test_w_squared_is_u(self, seed):
        c = instance(seed, symmetric=True).chain
        w = sqrt_kernel(c).w
        u = green_kernel(c).u
        assert np.abs((w * c.m[None, :]) @ w - u).max() <= 1e-8 * np.abs(u).max()


class TestTimeChange:
    def test_scalar(self):
        r = time_change_check(validate_chain([[-2.0]], [1.0]), [2.0])
        assert r.u_y[0, 0] == pytest.approx(0.25)
        assert r.convention == "m"

    def test_identity_speed(self):
        c = validate_chain(Q3, M3)
        r = time_change_check(c, np.ones(3))
        np.testing.assert_allclose(r.u_y, r.u_x, rtol=1e-13)

    def test_am_convention_fails_for_nonconstant_speed(self):
        r = time_change_check(validate_chain(Q3, M3), [0.5, 1.0, 2.0])
        assert r.convention == "m"
        assert r.rel_error_am > 0.1

    def test_nonpositive_speed(self):
        with pytest.raises(NonPositiveA):
            time_change_check(validate_chain(Q3, M3), [1.0, 0.0, 1.0])

    @pytest.mark.parametrize("seed", range(100))
    def test_seeded(self, seed):
        c = instance(seed).chain
        a = np.random.default_rng(seed).uniform(0.5, 2.0, c.n)
        r = time_change_check(c, a)
        assert r.rel_error_m <= 1e-10


class TestJson:
    def test_roundtrip(self, tmp_path):
        c = validate_chain(Q3, M3)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(chain_to_json(c)))
        c2 = chain_from_json(p)
        np.testing.assert_array_equal(c2.Q, c.Q)
        np.testing.assert_array_equal(c2.m, c.m)

    @pytest.mark.parametrize("bad", ['{"Q": [[NaN]], "m": [1]}', '{"Q": [[-1]], "m": [Infinity]}'])
    def test_rejects_nonfinite(self, bad):
        with pytest.raises(ChainError):
            chain_from_json(bad)

    def test_missing_key(self):
        with pytest.raises(ChainError):
            chain_from_json({"Q": [[-1.0]]})
