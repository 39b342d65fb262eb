"""Finite signed measures, Revuz measures and proper norms.

A measure on the finite state space is its vector of point masses.  Revuz
measures additionally carry the reference weights ``m`` so the density
``f = nu / m`` of the associated additive functional ``int f(X_s) ds`` is
available.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .chain_model import GreenKernel, SqrtKernel, TransientChain, sqrt_kernel
from .errors import NotSymmetric

__all__ = [
    "FiniteMeasure",
    "RevuzMeasure",
    "NormTag",
    "CertificateReport",
    "as_weights",
    "w_norm",
    "w_operator_kernel",
    "u2inf_norm",
    "cyclic_integral",
    "norm_function",
    "proper_norm_certificate",
]


@dataclass(frozen=True, eq=False)
class FiniteMeasure:
    """Signed point masses on ``{0, ..., n-1}``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 1:
            raise ValueError("measure weights must be a 1-d vector")
        if not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def total_variation(self) -> float:
        return float(np.abs(self.weights).sum())

    def positive_part(self) -> FiniteMeasure:
        return FiniteMeasure(np.clip(self.weights, 0, None))

    def negative_part(self) -> FiniteMeasure:
        return FiniteMeasure(np.clip(-self.weights, 0, None))

    def __add__(self, other: FiniteMeasure) -> FiniteMeasure:
        return FiniteMeasure(self.weights + as_weights(other))

    def __rmul__(self, c: float) -> FiniteMeasure:
        return FiniteMeasure(c * self.weights)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> FiniteMeasure:
        return cls(np.asarray(data["weights"], dtype=float))


@dataclass(frozen=True, eq=False)
class RevuzMeasure(FiniteMeasure):
    """Positive measure tied to reference weights ``m``."""

    m: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        if self.m is None:
            object.__setattr__(self, "m", np.ones_like(self.weights))
        m = np.array(self.m, dtype=float, copy=True)
        if m.shape != self.weights.shape:
            raise ValueError("reference weights and measure weights differ in length")
        if np.any(self.weights < 0):
            raise ValueError("Revuz measures must be nonnegative")
        if np.any(m <= 0):
            raise ValueError("reference weights must be strictly positive")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def density(self) -> np.ndarray:
        """``f = nu / m``, the rate of the additive functional."""
        return self.weights / self.m

    @classmethod
    def from_density(cls, f, m) -> RevuzMeasure:
        m = np.asarray(m, dtype=float)
        return cls(np.asarray(f, dtype=float) * m, m)


def as_weights(nu) -> np.ndarray:
    if isinstance(nu, FiniteMeasure):
        return nu.weights
    return np.asarray(nu, dtype=float)


class NormTag(enum.Enum):
    W_NORM = "w"
    PSI_NORM = "psi"
    U2INF_NORM = "u2inf"


def w_operator_kernel(sq: SqrtKernel, nu) -> np.ndarray:
    """``M_nu(x, z) = sum_y w(x, y) w(y, z) nu(y)``."""
    w = sq.w
    return (w * as_weights(nu)[None, :]) @ w


def w_norm(chain: TransientChain, sq: SqrtKernel | None, nu) -> float:
    """L2(m x m) norm of ``M_nu``; a Hilbert-Schmidt norm in disguise."""
    if sq is None:
        sq = sqrt_kernel(chain)
    elif not chain.is_symmetric():
        raise NotSymmetric("w-norm needs an m-symmetric chain")
    M = w_operator_kernel(sq, nu)
    m = chain.m
    return float(np.sqrt(np.sum(M**2 * m[:, None] * m[None, :])))


def u2inf_norm(green: GreenKernel | np.ndarray, nu) -> float:
    """``max(|nu|(S), sup_x sum_y (u(x,y)^2 + u(y,x)^2) |nu|(y))``."""
    u = green.u if isinstance(green, GreenKernel) else np.asarray(green)
    a = np.abs(as_weights(nu))
    u2 = np.abs(u) ** 2
    sup = float(np.max(u2 @ a + u2.T @ a)) if a.size else 0.0
    return max(float(a.sum()), sup)


def cyclic_integral(u: np.ndarray, measures) -> complex | float:
    """``sum u(x1,x2) ... u(xn,x1) prod nu_j(x_j)`` as a trace of a matrix chain."""
    P = None
    for nu in measures:
        block = as_weights(nu)[:, None] * u
        P = block if P is None else P @ block
    return np.trace(P)


def norm_function(norm: NormTag, *, kernel=None, chain=None, model=None) -> Callable:
    """Resolve a :class:`NormTag` to a one-argument callable on measures."""
    if norm is NormTag.W_NORM:
        if chain is None:
            raise ValueError("W_NORM needs the chain")
        sq = sqrt_kernel(chain)
        return lambda nu: w_norm(chain, sq, nu)
    if norm is NormTag.U2INF_NORM:
        return lambda nu: u2inf_norm(kernel, nu)
    if norm is NormTag.PSI_NORM:
        if model is None:
            raise ValueError("PSI_NORM needs the Levy model")
        from .levy_lattice import psi_norm

        return lambda nu: psi_norm(model, nu)
    raise ValueError(f"unknown norm {norm!r}")


@dataclass
class CertificateReport:
    norm: str
    samples: int
    C_observed: float
    worst_tuple_seed: list[int] | None
    max_n: int
    seed: int

    def to_json(self) -> dict:
        return asdict(self)


def proper_norm_certificate(
    kernel,
    norm: NormTag,
    samples: int,
    max_n: int,
    seed: int,
    *,
    chain: TransientChain | None = None,
    model=None,
    signed: bool = False,
) -> CertificateReport:
    """Smallest ``C`` with ``|cyclic integral| <= C^n prod ||nu_j||`` over a sample.

    Tuple ``i`` is drawn from its own stream keyed by ``(seed, i)``; its length
    is uniform on ``2..max_n``.  Tuples whose norm product vanishes are skipped
    (both sides are then zero).
    """
    u = kernel.u if isinstance(kernel, GreenKernel) else np.asarray(kernel)
    if max_n < 2:
        raise ValueError("max_n must be >= 2")
    fn = norm_function(norm, kernel=u, chain=chain, model=model)
    n_states = u.shape[0]
    C_obs, worst = 0.0, None
    for i in range(samples):
        rng = np.random.default_rng([seed, i])
        k = int(rng.integers(2, max_n + 1))
        if signed:
            tup = [rng.standard_normal(n_states) for _ in range(k)]
        else:
            tup = [rng.exponential(size=n_states) * (rng.random(n_states) < 0.7) for _ in range(k)]
        lhs = abs(cyclic_integral(u, tup))
        rhs = float(np.prod([fn(nu) for nu in tup]))
        if rhs == 0.0:
            continue
        c = (lhs / rhs) ** (1.0 / k)
        if c > C_obs:
            C_obs, worst = c, [seed, i]
    return CertificateReport(norm.name, samples, C_obs, worst, max_n, seed)
