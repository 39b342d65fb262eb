"""Exact moments of multiple additive functionals under loop and bridge measures.

All tuple sums are evaluated as products of ``diag(nu_j) @ u`` blocks, so a
k-fold cyclic integral costs ``k`` matrix products instead of ``n**k`` terms.
Kernels may be complex (non-symmetric lattice models); nothing here assumes
``u`` is real or symmetric.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .chain_model import GreenKernel
from .errors import KTooLarge
from .measure_space import as_weights

__all__ = [
    "K_MAX",
    "CafProductSpec",
    "CyclicKind",
    "CyclicClass",
    "InsertionReport",
    "enumerate_cyclic",
    "kernel_matrix",
    "caf_moment",
    "phi_moment",
    "bridge_matrix",
    "bridge_moment",
    "insertion_sum",
    "double_insertion_sum",
    "insertion_identity_check",
]

K_MAX = 8


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("need at least one measure")
    if k > K_MAX:
        raise KTooLarge(f"k={k} exceeds K_MAX={K_MAX}")


@dataclass(frozen=True)
class CafProductSpec:
    """Ordered measures ``(nu_1, ..., nu_k)`` defining a multiple functional."""

    measures: tuple

    def __post_init__(self):
        ms = tuple(self.measures)
        _check_k(len(ms))
        object.__setattr__(self, "measures", ms)

    @property
    def k(self) -> int:
        return len(self.measures)

    def weights(self) -> list[np.ndarray]:
        return [as_weights(nu) for nu in self.measures]

    @classmethod
    def of(cls, *measures) -> CafProductSpec:
        return cls(tuple(measures))


def _as_spec(spec) -> CafProductSpec:
    return spec if isinstance(spec, CafProductSpec) else CafProductSpec(tuple(spec))


class CyclicKind(Enum):
    PERMUTATIONS_ON_CIRCLE = "permutations_on_circle"
    CYCLIC_TRANSLATIONS = "cyclic_translations"


@dataclass(frozen=True)
class CyclicClass:
    kind: CyclicKind
    k: int
    members: tuple  # 1-based index tuples


def enumerate_cyclic(kind: CyclicKind, k: int) -> CyclicClass:
    """Permutations up to rotation ((k-1)! of them, first entry pinned to 1),
    or the k cyclic shifts ``j -> j + i mod k``."""
    _check_k(k)
    if kind is CyclicKind.PERMUTATIONS_ON_CIRCLE:
        members = tuple((1,) + p for p in itertools.permutations(range(2, k + 1)))
    elif kind is CyclicKind.CYCLIC_TRANSLATIONS:
        members = tuple(tuple((j + i) % k + 1 for j in range(k)) for i in range(k))
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return CyclicClass(kind, k, members)


def kernel_matrix(kernel) -> np.ndarray:
    if isinstance(kernel, GreenKernel):
        return kernel.u
    return np.asarray(kernel)


def _chain_product(u: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
    """``diag(w_1) u diag(w_2) u ... diag(w_k) u``."""
    P = None
    for w in weights:
        block = w[:, None] * u
        P = block if P is None else P @ block
    return P


def _scalar(z):
    z = complex(z)
    return z.real if z.imag == 0.0 else z


def caf_moment(kernel, spec) -> float | complex:
    """Loop-measure moment ``sum u(y1,y2)...u(yk,y1) prod nu_j(y_j)``.

    ``k = 1`` gives the diagonal term ``sum_y u(y, y) nu(y)``, finite here
    because the state space is finite.
    """
    spec = _as_spec(spec)
    u = kernel_matrix(kernel)
    return _scalar(np.trace(_chain_product(u, spec.weights())))


def phi_moment(kernel, f_list, m=None) -> float | complex:
    """Moment of a product of occupation integrals ``int f_j(X_t) dt``.

    Sums the cyclic integral over permutations of the circle; each density is
    turned into a measure ``f_j * m``.
    """
    k = len(f_list)
    if k < 2:
        raise ValueError("phi_moment needs k >= 2")
    _check_k(k)
    u = kernel_matrix(kernel)
    if m is None:
        m = kernel.chain.m if isinstance(kernel, GreenKernel) and kernel.chain is not None else np.ones(u.shape[0])
    weights = [np.asarray(f, dtype=float) * m for f in f_list]
    terms = [
        np.trace(_chain_product(u, [weights[i - 1] for i in perm]))
        for perm in enumerate_cyclic(CyclicKind.PERMUTATIONS_ON_CIRCLE, k).members
    ]
    return _scalar(math.fsum(np.real(terms)) + 1j * math.fsum(np.imag(terms)))


def bridge_matrix(kernel, spec) -> np.ndarray:
    """Matrix of ``Q^{x,y}(M)`` over all endpoint pairs.

    ``sum_{shifts pi} u diag(nu_pi(1)) u ... diag(nu_pi(k)) u``.
    """
    spec = _as_spec(spec)
    u = kernel_matrix(kernel)
    w = spec.weights()
    k = spec.k
    total = None
    for perm in enumerate_cyclic(CyclicKind.CYCLIC_TRANSLATIONS, k).members:
        term = u @ _chain_product(u, [w[i - 1] for i in perm])
        total = term if total is None else total + term
    return total


def bridge_moment(kernel, x: int, y: int, spec) -> float | complex:
    spec = _as_spec(spec)
    u = kernel_matrix(kernel)
    w = spec.weights()
    total = 0.0
    row = u[x]
    for perm in enumerate_cyclic(CyclicKind.CYCLIC_TRANSLATIONS, spec.k).members:
        v = row
        for i in perm:
            v = (v * w[i - 1]) @ u
        total = total + v[y]
    return _scalar(total)


def insertion_sum(kernel, spec, nu, derivative_kernel=None) -> float | complex:
    """Sum over the k slots of the cyclic integral with one extra insertion.

    With ``derivative_kernel=None`` the measure ``nu`` is inserted as a new
    point between ``y_i`` and ``y_{i+1}``; otherwise the factor
    ``u(y_i, y_{i+1})`` is replaced by ``derivative_kernel(y_i, y_{i+1})`` and
    ``nu`` is ignored.
    """
    spec = _as_spec(spec)
    u = kernel_matrix(kernel)
    w = spec.weights()
    k = spec.k
    if derivative_kernel is None:
        mid = u @ (as_weights(nu)[:, None] * u)
    else:
        mid = kernel_matrix(derivative_kernel)
    terms = []
    for i in range(k):
        P = None
        for j in range(k):
            block = w[j][:, None] * (mid if j == i else u)
            P = block if P is None else P @ block
        terms.append(np.trace(P))
    return _scalar(math.fsum(np.real(terms)) + 1j * math.fsum(np.imag(terms)))


def double_insertion_sum(kernel, spec, nu) -> float | complex:
    """``mu((L^nu)^2 M)``: the insertion expansion applied twice."""
    spec = _as_spec(spec)
    k = spec.k
    u = kernel_matrix(kernel)
    total = 0.0
    for i in range(k):
        once = spec.measures[: i + 1] + (nu,) + spec.measures[i + 1 :]
        for i2 in range(k + 1):
            twice = once[: i2 + 1] + (nu,) + once[i2 + 1 :]
            total = total + np.trace(_chain_product(u, [as_weights(v) for v in twice]))
    return _scalar(total)


@dataclass
class InsertionReport:
    insertion: float | complex
    bridge: float | complex
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


def rel_diff(a, b, floor: float = 0.0) -> float:
    d = abs(a - b)
    scale = max(abs(a), abs(b), floor)
    return 0.0 if d == 0 else d / scale if scale > 0 else float("inf")


def insertion_identity_check(kernel, spec, nu, tol: float = 1e-10) -> InsertionReport:
    """Compare the k-slot insertion sum with ``sum_x Q^{x,x}(M) nu(x)``."""
    spec = _as_spec(spec)
    a = insertion_sum(kernel, spec, nu)
    B = bridge_matrix(kernel, spec)
    b = _scalar(np.sum(np.diag(B) * as_weights(nu)))
    return InsertionReport(a, b, rel_diff(a, b), tol)
