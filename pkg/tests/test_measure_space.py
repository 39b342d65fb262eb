from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given

from conftest import instance, seeds
from loop_perturb.chain_model import green_kernel, sqrt_kernel, validate_chain
from loop_perturb.errors import NotSymmetric
from loop_perturb.measure_space import (
    FiniteMeasure,
    NormTag,
    RevuzMeasure,
    cyclic_integral,
    proper_norm_certificate,
    u2inf_norm,
    w_norm,
    w_operator_kernel,
)

ONE = validate_chain([[-2.0]], [1.0])


class TestMeasures:
    def test_total_variation(self):
        assert FiniteMeasure([1.0, -2.0, 0.5]).total_variation == 3.5

    def test_parts(self):
        nu = FiniteMeasure([1.0, -2.0])
        np.testing.assert_array_equal((nu.positive_part() + (-1.0) * nu.negative_part()).weights, nu.weights)

    def test_revuz_density(self):
        nu = RevuzMeasure([2.0, 3.0], [1.0, 2.0])
        np.testing.assert_allclose(nu.density, [2.0, 1.5])
        np.testing.assert_allclose(RevuzMeasure.from_density([2.0, 1.5], [1.0, 2.0]).weights, [2.0, 3.0])

    def test_revuz_rejects_negative(self):
        with pytest.raises(ValueError):
            RevuzMeasure([1.0, -1.0])

    def test_json(self):
        nu = FiniteMeasure([1.0, 2.0])
        assert FiniteMeasure.from_json(nu.to_json()).weights.tolist() == [1.0, 2.0]


class TestWNorm:
    def test_scalar(self):
        c = validate_chain([[-4.0]], [1.0])
        assert w_norm(c, sqrt_kernel(c), [2.0]) == pytest.approx(0.5)

    def test_zero(self):
        c = instance(1, symmetric=True).chain
        assert w_norm(c, None, np.zeros(c.n)) == 0.0

    def test_not_symmetric(self):
        c = validate_chain([[-3.0, 1.0], [2.0, -4.0]], [1, 1])
        with pytest.raises(NotSymmetric):
            w_norm(c, None, [1.0, 1.0])

    @given(seeds)
    def test_kernel_linear(self, seed):
        c = instance(seed, symmetric=True).chain
        sq = sqrt_kernel(c)
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(c.n), rng.standard_normal(c.n)
        lhs = w_operator_kernel(sq, a + b)
        rhs = w_operator_kernel(sq, a) + w_operator_kernel(sq, b)
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(lhs).max())

    @given(seeds)
    def test_norm_axioms(self, seed):
        c = instance(seed, symmetric=True).chain
        sq = sqrt_kernel(c)
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(c.n), rng.standard_normal(c.n)
        s = rng.uniform(-3, 3)
        assert w_norm(c, sq, a) >= 0
        assert w_norm(c, sq, s * a) == pytest.approx(abs(s) * w_norm(c, sq, a), rel=1e-12)
        assert w_norm(c, sq, a + b) <= w_norm(c, sq, a) + w_norm(c, sq, b) + 1e-12


class TestU2Inf:
    def test_scalar(self):
        assert u2inf_norm(green_kernel(ONE), [3.0]) == 3.0

    def test_zero(self):
        assert u2inf_norm(green_kernel(ONE), [0.0]) == 0.0

    def test_triangle_100_pairs(self):
        for seed in range(100):
            inst = instance(seed)
            g = green_kernel(inst.chain)
            rng = np.random.default_rng(seed)
            a, b = rng.standard_normal(inst.chain.n), rng.standard_normal(inst.chain.n)
            assert u2inf_norm(g, a + b) <= u2inf_norm(g, a) + u2inf_norm(g, b) + 1e-12

    @given(seeds)
    def test_homogeneous(self, seed):
        g = green_kernel(instance(seed).chain)
        a = np.random.default_rng(seed).standard_normal(g.n)
        assert u2inf_norm(g, -2.5 * a) == pytest.approx(2.5 * u2inf_norm(g, a), rel=1e-13)


def brute_cyclic(u, measures):
    n, k = u.shape[0], len(measures)
    total = 0.0
    for ys in itertools.product(range(n), repeat=k):
        term = 1.0
        for j in range(k):
            term *= u[ys[j], ys[(j + 1) % k]] * measures[j][ys[j]]
        total += term
    return total


class TestCertificate:
    def test_one_state_saturates(self):
        sq = sqrt_kernel(ONE)
        lhs = cyclic_integral(green_kernel(ONE).u, [[3.0], [4.0]])
        rhs = w_norm(ONE, sq, [3.0]) * w_norm(ONE, sq, [4.0])
        assert lhs == pytest.approx(3.0)
        assert rhs == pytest.approx(3.0)

    def test_zero_measure(self):
        g = green_kernel(instance(2).chain)
        z = np.zeros(g.n)
        assert cyclic_integral(g.u, [z, np.ones(g.n)]) == 0.0
        assert u2inf_norm(g, z) == 0.0

    def test_cyclic_integral_brute_force(self):
        u = green_kernel(instance(5, n=5).chain).u
        rng = np.random.default_rng(0)
        ms = [rng.standard_normal(5) for _ in range(4)]
        assert cyclic_integral(u, ms) == pytest.approx(brute_cyclic(u, ms), rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_w_norm_constant_one(self, seed):
        c = instance(seed, n=6, symmetric=True).chain
        r = proper_norm_certificate(green_kernel(c), NormTag.W_NORM, 200, 6, seed, chain=c, signed=True)
        assert 0 < r.C_observed <= 1 + 1e-8

    @pytest.mark.parametrize("seed", range(10))
    def test_u2inf_constant_one(self, seed):
        c = instance(seed, n=6).chain
        r = proper_norm_certificate(green_kernel(c), NormTag.U2INF_NORM, 200, 6, seed, chain=c, signed=True)
        # Hilbert-Schmidt bound on |nu_j|^(1/2) u |nu_j+1|^(1/2) gives C = 1
        assert 0 < r.C_observed <= 1 + 1e-8

    def test_reproducible(self):
        c = instance(4, symmetric=True).chain
        a = proper_norm_certificate(green_kernel(c), NormTag.W_NORM, 30, 5, 9, chain=c)
        b = proper_norm_certificate(green_kernel(c), NormTag.W_NORM, 30, 5, 9, chain=c)
        assert a == b
        assert a.to_json()["worst_tuple_seed"][0] == 9
