"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line in ``RESULTS``; the lines are printed
at the end of the pytest run (see ``conftest.py``) and when this file is run
directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np
import pytest

from loop_perturb.chain_model import dual_chain, green_kernel, sqrt_kernel, time_change_check, transition_density
from loop_perturb.experiment import InstanceParams, generate_random_instance, mc_rotation_test, random_levy_pair
from loop_perturb.loop_moments import CafProductSpec, insertion_identity_check
from loop_perturb.loop_sampler import (
    LoopSampler,
    RestrictedLoopMeasureSpec,
    estimate_restricted_moment,
    restricted_moment_oracle,
)
from loop_perturb.measure_space import NormTag, proper_norm_certificate
from loop_perturb.perturbation import (
    jump_derivative,
    jump_dual_check,
    jump_perturbed_potential,
    jump_semigroup_check,
    killing_derivative,
    killing_remainder_check,
    levy_derivative,
)

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])


def inst(seed, **kw):
    kw.setdefault("n", [1, 8])
    return generate_random_instance(InstanceParams(**kw), seed)


def spec(instance, k):
    ms = instance.measures
    return CafProductSpec(tuple(ms[i % len(ms)] for i in range(k)))


def test_criterion_1_insertion_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        x = inst(seed)
        g = green_kernel(x.chain)
        for k in (1, 2, 3):
            worst = max(worst, insertion_identity_check(g, spec(x, k), x.measures[-1]).rel_error)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 30
    report(1, ok, f"insertion identity worst rel err {worst:.2e} (tol 1e-10), {elapsed:.1f}s (limit 30s)")
    assert ok


def test_criterion_2_killing_derivative():
    worst, orders = 0.0, []
    for seed in range(100):
        x = inst(seed)
        for k in (1, 2, 3):
            r = killing_derivative(x.chain, x.measures[-1], spec(x, k))
            worst = max(worst, r.rel_error)
            orders.append(r.observed_order)
    measured = [o for o in orders if o is not None]
    dev = max(abs(o - 2.0) for o in measured)
    ok = worst <= 1e-6 and dev <= 0.2 and len(measured) == len(orders)
    report(2, ok, f"killing FD worst rel err {worst:.2e} (tol 1e-6), order in "
                  f"[{min(measured):.3f}, {max(measured):.3f}] on {len(measured)}/{len(orders)} cases")
    assert ok


def test_criterion_3_levy_derivative():
    worst_forms = worst_fd = 0.0
    count = 0
    for d, N in [(1, 4), (1, 8), (1, 16), (2, 8)]:
        for seed in range(20):
            model = random_levy_pair(d, N, seed)
            rng = np.random.default_rng([seed, d, N, 1])
            r = levy_derivative(model, CafProductSpec.of(*[rng.exponential(size=N**d) for _ in range(2)]))
            worst_forms = max(worst_forms, r.forms_rel_error)
            worst_fd = max(worst_fd, r.rel_error)
            count += 1
    ok = worst_forms <= 1e-10 and worst_fd <= 1e-6
    report(3, ok, f"Levy forms worst {worst_forms:.2e} (tol 1e-10), FD worst {worst_fd:.2e} (tol 1e-6), {count} pairs")
    assert ok


def test_criterion_4_jump_derivative():
    worst_forms = worst_fd = 0.0
    for seed in range(50):
        x = inst(seed)
        for k in (1, 2, 3):
            r = jump_derivative(x.chain, x.jump, spec(x, k))
            worst_forms = max(worst_forms, r.forms_rel_error)
            worst_fd = max(worst_fd, r.rel_error)
    ok = worst_forms <= 1e-10 and worst_fd <= 1e-6
    report(4, ok, f"jump forms worst {worst_forms:.2e} (tol 1e-10), one-sided FD worst {worst_fd:.2e} (tol 1e-6)")
    assert ok


def test_criterion_5_neumann_and_semigroup():
    worst_series = worst_ratio = worst_semi = 0.0
    for seed in range(50):
        x = inst(seed, n=[2, 8])
        eps = abs(x.chain.abscissa) / float(x.jump.c.max())
        r = jump_perturbed_potential(x.chain, x.jump, eps)
        worst_series = max(worst_series, r.rel_error)
        worst_ratio = max(worst_ratio, abs(r.observed_ratio - r.spectral_ratio) / r.spectral_ratio)
        if seed < 10:
            s = jump_semigroup_check(x.chain, x.jump, eps, 1.0 / abs(x.chain.abscissa))
            worst_semi = max(worst_semi, s.rel_error)
    ok = worst_series <= 1e-10 and worst_ratio <= 0.1 and worst_semi <= 1e-6
    report(5, ok, f"Neumann worst {worst_series:.2e} (tol 1e-10), ratio dev {worst_ratio:.2e} (tol 0.1), "
                  f"semigroup worst {worst_semi:.2e} (tol 1e-6)")
    assert ok


def test_criterion_6_sqrt_kernel_and_w_norm():
    worst_w2 = worst_c = 0.0
    for seed in range(100):
        c = inst(seed, symmetric=True).chain
        w = sqrt_kernel(c).w
        u = green_kernel(c).u
        worst_w2 = max(worst_w2, float(np.abs((w * c.m[None, :]) @ w - u).max() / np.abs(u).max()))
        r = proper_norm_certificate(green_kernel(c), NormTag.W_NORM, 200, 6, seed, chain=c, signed=True)
        worst_c = max(worst_c, r.C_observed)
    ok = worst_w2 <= 1e-8 and worst_c <= 1 + 1e-8
    report(6, ok, f"W^2=U worst {worst_w2:.2e} (tol 1e-8), w-norm C_observed max {worst_c:.12f} (limit 1+1e-8)")
    assert ok


def test_criterion_7_duality_and_time_change():
    worst_dual = worst_chain = worst_tc = 0.0
    for seed in range(100):
        x = inst(seed, dual_admissible=True)
        d = dual_chain(x.chain)
        for t in np.random.default_rng(seed).uniform(0.05, 5.0, 5):
            p, ph = transition_density(x.chain, t), transition_density(d, t)
            worst_chain = max(worst_chain, float(np.abs(ph - p.T).max() / np.abs(p).max()))
        worst_dual = max(worst_dual, jump_dual_check(x.chain, x.jump, 0.5).rel_error)
        a = np.random.default_rng([seed, 1]).uniform(0.5, 2.0, x.chain.n)
        worst_tc = max(worst_tc, time_change_check(inst(seed).chain, a).rel_error_m)
    ok = max(worst_dual, worst_chain, worst_tc) <= 1e-10
    report(7, ok, f"jump dual kernel worst {worst_dual:.2e}, chain dual worst {worst_chain:.2e}, "
                  f"time change worst {worst_tc:.2e} (tol 1e-10)")
    assert ok


def test_criterion_8_monte_carlo():
    t0 = time.perf_counter()
    x = inst(0, n=4)
    sp = RestrictedLoopMeasureSpec.default(x.chain)
    sampler = LoopSampler(sp)
    lines, ok = [], True
    for k, ms in ((1, [x.measures[0]]), (2, [x.measures[0], x.measures[1]])):
        est, se = estimate_restricted_moment(sp, ms, 100_000, 2024 + k, sampler)
        exact = restricted_moment_oracle(sp, ms)
        z = abs(est - exact) / se
        ok &= z <= 3 and se / abs(exact) < 0.02
        lines.append(f"k={k} |z|={z:.2f} stderr/mean={se / abs(exact):.2%}")
    _, p = mc_rotation_test(sampler, 100_000, 77)
    elapsed = time.perf_counter() - t0
    ok &= p > 0.01 and elapsed < 300
    report(8, ok, f"{'; '.join(lines)}; rotation chi2 p={p:.3f}; {elapsed:.0f}s (limit 300s)")
    assert ok


def test_criterion_9_remainder_bound():
    worst = 0.0
    for seed in range(50):
        x = inst(seed)
        for k in (1, 2, 3):
            for eps in (1e-1, 1e-2):
                r = killing_remainder_check(x.chain, x.measures[-1], spec(x, k), eps)
                worst = max(worst, r.remainder / r.bound if r.bound > 0 else (0.0 if r.remainder == 0 else math.inf))
    ok = worst <= 1.0
    report(9, ok, f"max remainder / (eps^2 mu(L^2 A)) = {worst:.3f} (must be <= 1)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
