"""Perturbations of the generator and their loop-measure derivatives.

Three families are covered:

* killing: the chain is killed at extra rate ``eps * nu / m``;
* Levy: the exponent ``psi`` becomes ``psi + eps * kappa`` on the torus;
* jump: jumps at rate ``eps * c(x)`` with target law ``G(x, .)`` are added.

For each family the derivative at ``eps = 0`` of ``I(eps)``, the cyclic moment
computed from the perturbed potential, is evaluated in two analytic forms and
compared with a finite-difference estimate built by :func:`fd_derivative`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.integrate
import scipy.interpolate
import scipy.linalg

from .chain_model import GreenKernel, TransientChain, _solve, dual_chain, green_kernel
from .errors import (
    Condition38Violated,
    EvaluatorFailed,
    LoopPerturbError,
    MarginalAsymmetry,
    SeriesDiverged,
)
from .levy_lattice import (
    LevyTorusModel,
    levy_derivative_kernel,
    levy_potential,
    perturbed_potential,
    torus_kernel_matrix,
)
from .loop_moments import (
    CafProductSpec,
    bridge_matrix,
    caf_moment,
    double_insertion_sum,
    insertion_sum,
)
from .measure_space import as_weights

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_EPS_GRID",
    "PerturbationReport",
    "InsertionKernel",
    "JumpPerturbation",
    "JumpPotential",
    "DualJumpReport",
    "SemigroupReport",
    "RemainderReport",
    "fd_derivative",
    "killing_perturbed_chain",
    "killing_insertion_kernel",
    "killing_derivative",
    "killing_remainder_check",
    "levy_derivative",
    "jump_insertion_kernel",
    "jump_perturbed_potential",
    "jump_derivative",
    "jump_dual_check",
    "jump_semigroup_check",
]

DEFAULT_EPS_GRID = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)


@dataclass
class PerturbationReport:
    family: str
    analytic: complex | float
    analytic_alt: complex | float
    forms_rel_error: float
    fd_table: list[tuple[float, complex | float]]
    richardson: complex | float
    rel_error: float
    tolerance: float = 1e-6
    forms_tolerance: float = 1e-10
    observed_order: float | None = None
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.rel_error <= self.tolerance)

    @property
    def forms_agree(self) -> bool:
        return self.forms_rel_error <= self.forms_tolerance

    def to_json(self) -> dict:
        def num(z):
            z = complex(z)
            return z.real if z.imag == 0 else [z.real, z.imag]

        return {
            "family": self.family,
            "analytic": num(self.analytic),
            "analytic_alt": num(self.analytic_alt),
            "forms_rel_error": self.forms_rel_error,
            "fd_table": [[e, num(v)] for e, v in self.fd_table],
            "richardson": num(self.richardson),
            "rel_error": self.rel_error,
            "tolerance": self.tolerance,
            "observed_order": self.observed_order,
            "pass": self.passed,
        }


# -- finite differences -------------------------------------------------------

# forward stencil for f'(0) with O(h^3) error
_FORWARD4 = np.array([-11.0, 18.0, -9.0, 2.0]) / 6.0


def fd_derivative(
    evaluator: Callable[[float], complex | float],
    eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
    one_sided: bool = False,
) -> tuple[list[tuple[float, complex | float]], complex | float]:
    """Finite-difference table and Richardson-extrapolated derivative at 0.

    Central differences ``(f(h) - f(-h)) / 2h`` by default (error ``O(h^2)``);
    ``one_sided=True`` uses a 4-point forward stencil (error ``O(h^3)``) for
    families that are only defined for ``eps >= 0``.  The extrapolation
    combines the two finest grid points.
    """
    grid = sorted((float(h) for h in eps_grid), reverse=True)
    if len(grid) < 2 or grid[-1] <= 0:
        raise ValueError("eps_grid needs at least two positive step sizes")

    def f(e):
        try:
            v = evaluator(e)
        except LoopPerturbError as exc:
            raise EvaluatorFailed(f"evaluator failed at eps={e}: {exc}") from exc
        if not np.isfinite(v):
            raise EvaluatorFailed(f"evaluator returned {v} at eps={e}")
        return v

    table = []
    if one_sided:
        f0 = f(0.0)
        for h in grid:
            vals = [f0, f(h), f(2 * h), f(3 * h)]
            table.append((h, sum(c * v for c, v in zip(_FORWARD4, vals)) / h))
        order = 3
    else:
        for h in grid:
            table.append((h, (f(h) - f(-h)) / (2 * h)))
        order = 2
    (h1, d1), (h2, d2) = table[-2], table[-1]
    r = (h1 / h2) ** order
    return table, (r * d2 - d1) / (r - 1)


def _observed_order(table, exact) -> float | None:
    """Convergence order from the first and third grid points."""
    if len(table) < 3:
        return None
    (h1, d1), (h3, d3) = table[0], table[2]
    e1, e3 = abs(d1 - exact), abs(d3 - exact)
    if e1 == 0 or e3 == 0:
        return None
    return math.log(e1 / e3) / math.log(h1 / h3)


def _error(exact, approx, floor: float) -> float:
    """Relative error, or absolute error when ``|exact|`` is below ``floor``."""
    d = abs(exact - approx)
    return d / abs(exact) if abs(exact) > floor else d


def _report(family, analytic, alt, table, rich, tol, floor) -> PerturbationReport:
    return PerturbationReport(
        family=family,
        analytic=analytic,
        analytic_alt=alt,
        forms_rel_error=_error(analytic, alt, floor),
        fd_table=table,
        richardson=rich,
        rel_error=_error(analytic, rich, floor),
        tolerance=tol,
        observed_order=_observed_order(table, analytic),
    )


def _scaled_grid(eps_grid, scale: float):
    return [g * scale for g in (eps_grid or DEFAULT_EPS_GRID)]


# -- insertion kernels --------------------------------------------------------


@dataclass
class InsertionKernel:
    """Distribution ``F`` (against ``m x m``) and ``u' = U F U`` it produces.

    ``kernelF[x, y]`` is the density of ``F`` with respect to ``m(dx) m(dy)``;
    ``derivative_kernel`` is ``sum_{x,y} u(., x) F(x, y) u(y, .) m_x m_y``.
    The sign of the derivative is carried by ``F``.
    """

    kernelF: np.ndarray
    derivative_kernel: np.ndarray

    @classmethod
    def from_F(cls, u: np.ndarray, F: np.ndarray, m: np.ndarray) -> InsertionKernel:
        return cls(F, u @ (m[:, None] * F * m[None, :]) @ u)


# -- killing ------------------------------------------------------------------


def killing_perturbed_chain(chain: TransientChain, nu, eps: float) -> TransientChain:
    """Chain killed at the extra rate ``eps * nu / m``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    rate = as_weights(nu) / chain.m
    return TransientChain(chain.Q - eps * np.diag(rate), chain.m)


def _killed_green(chain: TransientChain, rate: np.ndarray, eps: float) -> np.ndarray:
    # analytic continuation to eps < 0 for central differences
    return _solve(-chain.Q + eps * np.diag(rate), np.diag(1.0 / chain.m))


def killing_insertion_kernel(green: GreenKernel, nu) -> InsertionKernel:
    """``F = -delta(x - y) nu(dx)``, giving ``u' = -u diag(nu) u``."""
    m = green.chain.m
    F = -np.diag(as_weights(nu) / m**2)
    return InsertionKernel.from_F(green.u, F, m)


def killing_derivative(
    chain: TransientChain,
    nu,
    spec: CafProductSpec,
    eps_grid: Sequence[float] | None = None,
    tol: float = 1e-6,
) -> PerturbationReport:
    """``d/d eps mu_eps(M)`` at 0 for extra killing by ``nu``.

    ``analytic`` is ``-mu(L^nu M)`` via the slot-insertion sum; ``analytic_alt``
    is ``-sum_x Q^{x,x}(M) nu(x)`` via bridge moments.
    """
    g = green_kernel(chain)
    w = as_weights(nu)
    analytic = -insertion_sum(g, spec, w)
    B = bridge_matrix(g, spec)
    alt = -complex(np.sum(np.diag(B) * w)).real
    rate = w / chain.m
    peak = float(np.max(np.abs(rate)))
    scale = abs(chain.abscissa) / peak if peak > 0 else 1.0

    def evaluate(e):
        return caf_moment(_killed_green(chain, rate, e), spec)

    table, rich = fd_derivative(evaluate, _scaled_grid(eps_grid, scale))
    floor = 1e-13 * max(abs(caf_moment(g, spec)), np.finfo(float).tiny)
    return _report("killing", analytic, alt, table, rich, tol, floor)


@dataclass
class RemainderReport:
    eps: float
    remainder: float  # |I(eps) - I(0) + eps mu(L M)|
    bound: float  # eps^2 mu(L^2 M)

    @property
    def passed(self) -> bool:
        return self.remainder <= self.bound


def killing_remainder_check(chain: TransientChain, nu, spec: CafProductSpec, eps: float) -> RemainderReport:
    """Second-order remainder of the killing expansion against ``eps^2 mu(L^2 M)``."""
    g = green_kernel(chain)
    w = as_weights(nu)
    I0 = caf_moment(g, spec)
    Ie = caf_moment(_killed_green(chain, w / chain.m, eps), spec)
    first = insertion_sum(g, spec, w)
    second = double_insertion_sum(g, spec, w)
    return RemainderReport(eps, abs(Ie - I0 + eps * first), eps**2 * second)


# -- Levy -----------------------------------------------------------------------


def levy_derivative(
    model: LevyTorusModel,
    spec: CafProductSpec,
    eps_grid: Sequence[float] | None = None,
    tol: float = 1e-6,
) -> PerturbationReport:
    """Derivative for ``psi -> psi + eps * kappa``.

    ``analytic``: slot-insertion sum with ``u'`` from
    :func:`levy_derivative_kernel`.  ``analytic_alt``:
    ``-N**-d sum_lam Qhat(lam, -lam) kappa(lam)`` where
    ``Qhat(l1, l2) = sum_{x,y} exp(2 pi i (l1.x + l2.y) / N) Q^{x,y}(M)``.
    """
    kappa = model.require_kappa()
    if model.C is None or not np.isfinite(model.C):
        raise Condition38Violated("no finite domination constant for kappa")
    U = torus_kernel_matrix(model, levy_potential(model))
    dU = torus_kernel_matrix(model, levy_derivative_kernel(model))
    analytic = insertion_sum(U, spec, None, derivative_kernel=dU)

    B = bridge_matrix(U, spec).reshape(model.shape * 2)
    Qhat = (np.fft.ifftn(B) * model.n**2).reshape(model.n, model.n)
    diag = Qhat[np.arange(model.n), model._neg_index]
    alt = complex(-np.sum(diag * kappa.reshape(-1)) / model.n)
    if model.conj_symmetric:
        alt = alt.real

    scale = 1.0 / model.C if model.C > 0 else 1.0

    def evaluate(e):
        return caf_moment(torus_kernel_matrix(model, perturbed_potential(model, e)), spec)

    table, rich = fd_derivative(evaluate, _scaled_grid(eps_grid, scale))
    floor = 1e-13 * max(abs(caf_moment(U, spec)), np.finfo(float).tiny)
    return _report("levy", analytic, alt, table, rich, tol, floor)


# -- jumps --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JumpPerturbation:
    """Jump intensity density ``j`` against ``m x m``.

    ``c(x) = sum_y j(x, y) m_y`` is the jump rate and
    ``G(x, y) = j(x, y) m_y / c(x)`` the jump law; the marginal condition
    ``sum_y j(x, y) m_y = sum_y j(y, x) m_y`` makes ``G_hat`` (built from
    ``j^T``) a probability kernel as well.
    """

    j: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        j = np.array(self.j, dtype=float, copy=True)
        m = np.array(self.m, dtype=float, copy=True)
        n = m.shape[0]
        if j.shape != (n, n):
            raise ValueError(f"j must be {n}x{n}")
        if not np.all(np.isfinite(j)) or np.any(j < 0):
            raise ValueError("j must be finite and nonnegative")
        out_rate = j @ m
        in_rate = j.T @ m
        if np.abs(out_rate - in_rate).max() > 1e-12 * max(1.0, out_rate.max()):
            raise MarginalAsymmetry("sum_y j(x,y) m_y != sum_y j(y,x) m_y")
        if np.any(out_rate <= 0):
            raise ValueError("jump rate c must be strictly positive")
        for a in (j, m):
            a.setflags(write=False)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "m", m)

    @property
    def c(self) -> np.ndarray:
        return self.j @ self.m

    @property
    def G(self) -> np.ndarray:
        return self.j * self.m[None, :] / self.c[:, None]

    @property
    def G_hat(self) -> np.ndarray:
        return self.j.T * self.m[None, :] / self.c[:, None]

    def dual(self) -> JumpPerturbation:
        return JumpPerturbation(self.j.T, self.m)


def _jump_generator(chain: TransientChain, jp: JumpPerturbation, eps: float) -> np.ndarray:
    c = jp.c
    return chain.Q - eps * np.diag(c) + eps * c[:, None] * jp.G


@dataclass
class JumpPotential:
    direct: GreenKernel
    series: GreenKernel
    terms_used: int
    term_norms: list[float]
    observed_ratio: float
    spectral_ratio: float  # spectral radius of eps c G V_{eps c}
    tail_bound: float
    rel_error: float


def jump_perturbed_potential(
    chain: TransientChain,
    jp: JumpPerturbation,
    eps: float,
    tail_terms: int = 80,
) -> JumpPotential:
    """Green kernel with added jumps, directly and as a Neumann series.

    The series is ``sum_n eps^n V (c G V)^n`` with ``V`` the resolvent of the
    chain killed at rate ``eps * c``.  Terms are summed until they stop
    contributing; ``tail_terms`` further terms are generated only to estimate
    the geometric ratio of the term norms.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    m = chain.m
    Qy = _jump_generator(chain, jp, eps)
    direct = GreenKernel(_solve(-Qy, np.diag(1.0 / m)), TransientChain(Qy, m))

    c = jp.c
    V = _solve(-chain.Q + eps * np.diag(c), np.eye(chain.n))
    step = eps * (c[:, None] * jp.G) @ V
    rho = float(np.max(np.abs(np.linalg.eigvals(step)))) if eps > 0 else 0.0
    if rho >= 1.0:
        raise SeriesDiverged(f"spectral radius {rho:.6g} >= 1 at eps={eps}")

    term = V
    total = V.copy()
    norms = [float(np.abs(V).max())]
    terms_used = 1
    converged = eps == 0
    for _ in range(10_000):
        if converged:
            break
        term = term @ step
        norms.append(float(np.abs(term).max()))
        if norms[-1] <= 1e-17 * np.abs(total).max():
            converged = True
            break
        total = total + term
        terms_used += 1
    else:
        raise SeriesDiverged("Neumann series did not converge within 10000 terms")

    # extra terms only feed the ratio estimate
    for _ in range(tail_terms if eps > 0 else 0):
        if norms[-1] < 1e-250:
            break
        term = term @ step
        norms.append(float(np.abs(term).max()))
    ratios = [b / a for a, b in zip(norms, norms[1:]) if a > 0]
    observed = ratios[-1] if ratios else 0.0
    tail = norms[terms_used] * rho / (1 - rho) if len(norms) > terms_used else 0.0
    logger.debug("jump series: %d terms, tail bound %.3g, ratio %.6g (rho %.6g)", terms_used, tail, observed, rho)
    series = GreenKernel(total / m[None, :], None)
    err = float(np.abs(series.u - direct.u).max() / np.abs(direct.u).max())
    return JumpPotential(direct, series, terms_used, norms, observed, rho, tail, err)


def jump_insertion_kernel(green: GreenKernel, jp: JumpPerturbation) -> InsertionKernel:
    """``F(x, y) m_x m_y = c(x) m_x (G(x, y) - delta_xy)``."""
    m = jp.m
    c = jp.c
    F = c[:, None] * (jp.G - np.eye(len(m))) / m[None, :]
    return InsertionKernel.from_F(green.u, F, m)


def jump_derivative(
    chain: TransientChain,
    jp: JumpPerturbation,
    spec: CafProductSpec,
    eps_grid: Sequence[float] | None = None,
    tol: float = 1e-6,
) -> PerturbationReport:
    """Derivative for added jumps.

    ``analytic``: insertion sum with
    ``u' = -u diag(c m) u + u diag(c m) G u``.  ``analytic_alt``:
    ``sum_{x,y} (Q^{y,x}(M) - Q^{x,x}(M)) c(x) G(x, y) m(x)``.
    The finite differences are one-sided since rates must stay nonnegative.
    """
    g = green_kernel(chain)
    u = g.u
    cm = jp.c * jp.m
    du = -(u * cm[None, :]) @ u + (u * cm[None, :]) @ jp.G @ u
    analytic = insertion_sum(u, spec, None, derivative_kernel=du)
    B = bridge_matrix(u, spec)
    alt = float(np.sum(B.T * cm[:, None] * jp.G) - np.sum(np.diag(B) * cm))

    scale = 1.0 / float(np.max(jp.c))

    def evaluate(e):
        Qy = _jump_generator(chain, jp, e)
        return caf_moment(_solve(-Qy, np.diag(1.0 / chain.m)), spec)

    table, rich = fd_derivative(evaluate, _scaled_grid(eps_grid, scale), one_sided=True)
    floor = 1e-13 * max(abs(caf_moment(g, spec)), np.finfo(float).tiny)
    return _report("jump", analytic, alt, table, rich, tol, floor)


@dataclass
class DualJumpReport:
    u: np.ndarray
    u_hat: np.ndarray
    max_abs_error: float
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


def jump_dual_check(chain: TransientChain, jp: JumpPerturbation, eps: float, tol: float = 1e-10) -> DualJumpReport:
    """Add jumps with law ``G_hat`` to the dual chain; its potential must be
    the transpose of the primal one."""
    dchain = dual_chain(chain)
    u = jump_perturbed_potential(chain, jp, eps).direct.u
    u_hat = jump_perturbed_potential(dchain, jp.dual(), eps).direct.u
    diff = float(np.abs(u_hat - u.T).max())
    return DualJumpReport(u, u_hat, diff, diff / float(np.abs(u).max()), tol)


@dataclass
class SemigroupReport:
    t: float
    eps: float
    series: np.ndarray  # transition operator from the time-ordered expansion
    exact: np.ndarray  # expm(t Q_Y)
    terms_used: int
    term_norms: list[float]
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


def _killed_semigroup(A: np.ndarray) -> Callable[[float], np.ndarray]:
    lam, V = np.linalg.eig(A)
    if np.linalg.cond(V) < 1e6:
        Vinv = np.linalg.inv(V)

        def q(s):
            return ((V * np.exp(s * lam)) @ Vinv).real

        return q
    return lambda s: scipy.linalg.expm(s * A)


def jump_semigroup_check(
    chain: TransientChain,
    jp: JumpPerturbation,
    eps: float,
    t: float,
    tol: float = 1e-6,
    max_terms: int = 30,
    nodes: int | None = None,
) -> SemigroupReport:
    """Time-ordered expansion of the jump-perturbed semigroup.

    ``S_0(tau) = q_tau`` and ``S_n(tau) = int_0^tau q_s (eps c G) S_{n-1}(tau - s) ds``
    where ``q`` is the semigroup killed at rate ``eps * c``.  Each ``S_n`` is
    tabulated at Chebyshev-Lobatto points of ``[0, t]``, interpolated
    barycentrically, and the convolution is done by adaptive quadrature.
    The sum of ``S_n(t)`` is compared with ``expm(t Q_Y)``; terms are added
    until one falls below ``1e-4 * tol`` relative to the partial sum.

    ``nodes`` defaults to ``4 sqrt(t max|lambda(Q)|)`` clipped to ``[24, 96]``:
    stiff chains need a finer interpolation grid.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    limit = 10.0 / abs(chain.abscissa)
    if t > limit:
        raise ValueError(f"t={t} exceeds 10/|abscissa| = {limit:.6g}")
    n = chain.n
    exact = scipy.linalg.expm(t * _jump_generator(chain, jp, eps))
    if t == 0:
        return SemigroupReport(0.0, eps, np.eye(n), exact, 1, [1.0], float(np.abs(exact - np.eye(n)).max()), tol)

    if nodes is None:
        stiffness = t * float(np.abs(np.linalg.eigvals(chain.Q)).max())
        nodes = int(np.clip(np.ceil(4 * np.sqrt(stiffness)), 24, 96))
    c = jp.c
    q = _killed_semigroup(chain.Q - eps * np.diag(c))
    jump = eps * c[:, None] * jp.G
    taus = t * (1 - np.cos(np.pi * np.arange(nodes + 1) / nodes)) / 2
    # closed-form Lobatto weights; scipy would otherwise draw from the global RNG
    wi = (-1.0) ** np.arange(nodes + 1)
    wi[[0, -1]] *= 0.5
    current = np.stack([q(s) for s in taus])
    total = current[-1].copy()
    norms = [float(np.abs(current[-1]).max())]
    terms = 1
    while terms < max_terms and eps > 0:
        interp = scipy.interpolate.BarycentricInterpolator(taus, current.reshape(len(taus), -1), wi=wi)

        def convolve(tau):
            if tau == 0:
                return np.zeros((n, n))
            integrand = lambda s: q(s) @ jump @ interp(tau - s).reshape(n, n)
            val, _ = scipy.integrate.quad_vec(integrand, 0.0, tau, epsabs=1e-15, epsrel=1e-12)
            return val

        current = np.stack([convolve(tau) for tau in taus])
        norms.append(float(np.abs(current[-1]).max()))
        total += current[-1]
        terms += 1
        if norms[-1] <= 1e-4 * tol * np.abs(total).max():
            break
    err = float(np.abs(total - exact).max() / np.abs(exact).max())
    return SemigroupReport(t, eps, total, exact, terms, norms, err, tol)
