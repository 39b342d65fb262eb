"""Finite-state transient continuous-time Markov chains.

A chain is a killed rate matrix ``Q`` together with strictly positive reference
weights ``m``.  Kernels are stored as densities with respect to ``m``: the
transition density is ``p_t(x, y) = expm(tQ)[x, y] / m[y]`` and the Green
kernel is ``u = (-Q)^{-1} diag(m)^{-1}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg

from .errors import (
    ChainError,
    NegativeOffDiagonal,
    NonPositiveA,
    NonPositiveReference,
    NonTransient,
    NotDualAdmissible,
    NotSymmetric,
    PositiveRowSum,
    SingularSolve,
)

__all__ = [
    "TransientChain",
    "GreenKernel",
    "SqrtKernel",
    "TimeChangeReport",
    "validate_chain",
    "transition_density",
    "semigroup",
    "green_kernel",
    "dual_chain",
    "sqrt_kernel",
    "time_change_check",
    "chain_from_json",
    "chain_to_json",
]

TRANSIENCE_TOL = 1e-12
ROW_SUM_TOL = 1e-12
SYMMETRY_TOL = 1e-12
MAX_CONDITION = 1e13


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TransientChain:
    """Killed rate matrix ``Q`` with reference weights ``m``.

    Construction validates the chain; use :func:`validate_chain` for the
    functional form.  Instances are immutable.
    """

    Q: np.ndarray
    m: np.ndarray
    abscissa: float = field(init=False)

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        m = np.asarray(self.m, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ChainError(f"Q must be square, got shape {Q.shape}")
        if m.shape != (Q.shape[0],):
            raise ChainError(f"m must have length {Q.shape[0]}, got shape {m.shape}")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(m))):
            raise ChainError("Q and m must be finite")
        if np.any(m <= 0):
            raise NonPositiveReference(f"reference weights must be > 0, got min {m.min()}")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < 0):
            i, j = np.argwhere(off < 0)[0]
            raise NegativeOffDiagonal(f"Q[{i}][{j}] = {Q[i, j]} < 0")
        rows = Q.sum(axis=1)
        scale = max(1.0, float(np.abs(Q).max()))
        if np.any(rows > ROW_SUM_TOL * scale):
            i = int(np.argmax(rows))
            raise PositiveRowSum(f"row {i} of Q sums to {rows[i]} > 0")
        abscissa = float(np.max(np.linalg.eigvals(Q).real))
        if not abscissa < -TRANSIENCE_TOL:
            raise NonTransient(f"spectral abscissa {abscissa} is not < 0")
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "abscissa", abscissa)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def killing(self) -> np.ndarray:
        return -self.Q.sum(axis=1)

    def is_symmetric(self, tol: float = SYMMETRY_TOL) -> bool:
        """True when ``m_x Q[x, y] == m_y Q[y, x]`` for all pairs."""
        F = self.m[:, None] * self.Q
        return bool(np.abs(F - F.T).max() <= tol * max(1.0, np.abs(F).max()))

    @cached_property
    def _sym_eig(self):
        # eigenpairs of M^{1/2} (-Q) M^{-1/2}, symmetric for m-symmetric chains
        r = np.sqrt(self.m)
        S = r[:, None] * (-self.Q) / r[None, :]
        S = 0.5 * (S + S.T)
        return np.linalg.eigh(S)

    def __repr__(self):
        return f"TransientChain(n={self.n}, abscissa={self.abscissa:.6g})"


def validate_chain(Q, m) -> TransientChain:
    """Build a :class:`TransientChain`, raising on any violated invariant."""
    return TransientChain(Q, m)


def semigroup(chain: TransientChain, t: float) -> np.ndarray:
    """``expm(tQ)`` as a plain matrix (the transition operator on functions).

    m-symmetric chains go through the orthogonal eigenbasis of the symmetrised
    generator; everything else uses scaling-and-squaring Pade.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t == 0:
        return np.eye(chain.n)
    if chain.is_symmetric():
        lam, V = chain._sym_eig
        r = np.sqrt(chain.m)
        E = (V * np.exp(-t * lam)) @ V.T
        return E / r[:, None] * r[None, :]
    return scipy.linalg.expm(t * chain.Q)


def transition_density(chain: TransientChain, t: float) -> np.ndarray:
    """Transition density ``p_t(x, y)`` with respect to ``m``."""
    return semigroup(chain, t) / chain.m[None, :]


@dataclass(frozen=True, eq=False)
class GreenKernel:
    """Potential densities ``u(x, y) = int_0^inf p_t(x, y) dt`` w.r.t. ``m``."""

    u: np.ndarray
    chain: TransientChain | None = None

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(self.u))

    @property
    def n(self) -> int:
        return self.u.shape[0]


def _solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularSolve(f"matrix condition number {cond:.3g} too large")
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise SingularSolve(str(exc)) from exc


def green_kernel(chain: TransientChain) -> GreenKernel:
    u = _solve(-chain.Q, np.diag(1.0 / chain.m))
    return GreenKernel(u, chain)


def dual_chain(chain: TransientChain) -> TransientChain:
    """Chain in m-duality: ``Qhat = diag(m)^{-1} Q^T diag(m)``.

    Raises :class:`NotDualAdmissible` when ``Qhat`` has a positive row sum,
    i.e. ``m`` is not compatible with a sub-Markov dual.
    """
    m = chain.m
    Qh = chain.Q.T * m[None, :] / m[:, None]
    rows = Qh.sum(axis=1)
    scale = max(1.0, float(np.abs(Qh).max()))
    if np.any(rows > ROW_SUM_TOL * scale):
        i = int(np.argmax(rows))
        raise NotDualAdmissible(f"dual generator row {i} sums to {rows[i]:.6g} > 0")
    return TransientChain(Qh, m)


@dataclass(frozen=True, eq=False)
class SqrtKernel:
    """Density ``w`` with ``int w(x, y) w(y, z) dm(y) = u(x, z)``."""

    w: np.ndarray
    chain: TransientChain | None = None

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w))


def sqrt_kernel(chain: TransientChain) -> SqrtKernel:
    """Square root of the Green operator for an m-symmetric chain.

    ``w = (-Q)^{-1/2} diag(m)^{-1}``, which is also the potential density of
    the chain subordinated by a stable-1/2 clock.
    """
    if not chain.is_symmetric():
        raise NotSymmetric("sqrt_kernel needs an m-symmetric chain")
    lam, V = chain._sym_eig
    r = np.sqrt(chain.m)
    S = (V / np.sqrt(lam)) @ V.T
    w = S / r[:, None] / r[None, :]
    return SqrtKernel(0.5 * (w + w.T), chain)


@dataclass
class TimeChangeReport:
    u_x: np.ndarray
    u_y: np.ndarray  # density of Y with respect to m
    u_y_am: np.ndarray  # density of Y with respect to a*m
    rel_error_m: float
    rel_error_am: float
    convention: str | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.convention is not None


def _max_rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.finfo(float).tiny))


def time_change_check(chain: TransientChain, a, tol: float = 1e-10) -> TimeChangeReport:
    """Check ``u_Y(x, y) = u_X(x, y) / a(y)`` for ``Y`` with generator ``diag(a) Q``.

    The identity is tested with ``u_Y`` taken as a density against ``m`` and
    against ``a * m``; ``convention`` records which one satisfies it
    (``"m"``, ``"a*m"`` or ``None``).
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (chain.n,):
        raise ChainError(f"a must have length {chain.n}")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise NonPositiveA("time-change speed a must be finite and strictly positive")
    u_x = green_kernel(chain).u
    op_y = _solve(-(a[:, None] * chain.Q), np.eye(chain.n))
    u_y = op_y / chain.m[None, :]
    u_y_am = op_y / (a * chain.m)[None, :]
    target = u_x / a[None, :]
    err_m = _max_rel(u_y, target)
    err_am = _max_rel(u_y_am, target)
    convention = "m" if err_m <= tol else ("a*m" if err_am <= tol else None)
    return TimeChangeReport(u_x, u_y, u_y_am, err_m, err_am, convention, tol)


def _reject_constant(name: str):
    raise ChainError(f"non-finite number {name!r} in chain file")


def chain_from_json(source: str | Path | dict[str, Any]) -> TransientChain:
    """Load ``{"Q": [[...]], "m": [...]}`` from a path, JSON text or dict."""
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text() if isinstance(source, Path) or not str(source).lstrip().startswith("{") else source
        data = json.loads(text, parse_constant=_reject_constant)
    try:
        Q, m = data["Q"], data["m"]
    except (KeyError, TypeError) as exc:
        raise ChainError("chain JSON needs keys 'Q' and 'm'") from exc
    for v in np.ravel(np.asarray(Q, dtype=float)).tolist() + list(np.asarray(m, dtype=float)):
        if not math.isfinite(v):
            raise ChainError("chain JSON contains NaN or Inf")
    return TransientChain(np.asarray(Q, dtype=float), np.asarray(m, dtype=float))


def chain_to_json(chain: TransientChain) -> dict[str, Any]:
    return {"Q": chain.Q.tolist(), "m": chain.m.tolist()}
