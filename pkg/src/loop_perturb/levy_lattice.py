"""Lattice Levy models on the discrete torus ``(Z/N)^d``.

Conventions (used everywhere, including the perturbation checks):

* forward DFT carries no factor, the inverse carries ``N**-d``;
* the potential is ``u(z) = N**-d sum_lam exp(2 pi i lam.z / N) / psi(lam)``
  and the kernel is translation invariant, ``u(x, y) = u(y - x)``;
* the reference measure is counting measure, so measures are plain weight
  vectors over the ``N**d`` sites (flattened in C order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from .errors import Condition38Violated, EpsilonTooLarge, LevyModelError
from .measure_space import as_weights

__all__ = [
    "LevyTorusModel",
    "exponent_family",
    "levy_potential",
    "perturbed_potential",
    "levy_derivative_kernel",
    "torus_kernel_matrix",
    "psi_norm",
    "fourier_moment",
    "model_from_json",
]


def _frequencies(d: int, N: int) -> list[np.ndarray]:
    return np.meshgrid(*[np.arange(N)] * d, indexing="ij")


def exponent_family(name: str, d: int, N: int, **params) -> np.ndarray:
    """Characteristic exponent on the dual torus for a built-in family.

    ``killed_walk``: ``mass2 + sum_i rate * 2 (1 - cos(2 pi lam_i / N))``
    ``relativistic``: ``(mass2 + sum_i 2 (1 - cos(2 pi lam_i / N)))**(s / 2)``
    ``drifted_walk``: ``killed_walk + i * drift * sum_i sin(2 pi lam_i / N)``
    """
    lam = _frequencies(d, N)
    lap = sum(2.0 * (1.0 - np.cos(2 * np.pi * l / N)) for l in lam)
    mass2 = float(params.get("mass2", 1.0))
    if name == "killed_walk":
        return (mass2 + float(params.get("rate", 1.0)) * lap).astype(complex)
    if name == "relativistic":
        s = float(params.get("s", 1.0))
        return ((mass2 + lap) ** (s / 2)).astype(complex)
    if name == "drifted_walk":
        rate = float(params.get("rate", 1.0))
        drift = float(params.get("drift", 0.0))
        sin = sum(np.sin(2 * np.pi * l / N) for l in lam)
        return mass2 + rate * lap + 1j * drift * sin
    raise LevyModelError(f"unknown exponent family {name!r}")


@dataclass(frozen=True, eq=False)
class LevyTorusModel:
    """Exponent ``psi`` (and optional perturbation ``kappa``) on the dual torus.

    ``C`` is the domination constant with ``|kappa| <= C |psi|``; it is computed
    when omitted and checked when given.
    """

    d: int
    N: int
    psi: np.ndarray
    kappa: np.ndarray | None = None
    C: float | None = None
    psi_min: float = field(init=False)

    def __post_init__(self):
        shape = (self.N,) * self.d
        psi = np.asarray(self.psi, dtype=complex)
        if psi.size == self.N**self.d and psi.shape != shape:
            psi = psi.reshape(shape)
        if psi.shape != shape:
            raise LevyModelError(f"psi must have shape {shape}, got {psi.shape}")
        if not np.all(np.isfinite(psi)):
            raise LevyModelError("psi must be finite")
        psi_min = float(psi.real.min())
        if not psi_min > 0:
            raise LevyModelError(f"Re psi must be > 0 everywhere, min is {psi_min}")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "psi_min", psi_min)
        if self.kappa is not None:
            kappa = np.asarray(self.kappa, dtype=complex).reshape(shape)
            if not np.all(np.isfinite(kappa)):
                raise LevyModelError("kappa must be finite")
            ratio = float(np.max(np.abs(kappa) / np.abs(psi)))
            if self.C is None:
                object.__setattr__(self, "C", ratio)
            elif ratio > self.C * (1 + 1e-12):
                raise Condition38Violated(f"max |kappa/psi| = {ratio:.6g} exceeds C = {self.C}")
            kappa.setflags(write=False)
            object.__setattr__(self, "kappa", kappa)

    @property
    def n(self) -> int:
        return self.N**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @cached_property
    def conj_symmetric(self) -> bool:
        """``psi(-lam) == conj(psi(lam))`` (and likewise for kappa)."""

        def ok(a):
            flipped = np.roll(np.flip(a), 1, axis=tuple(range(self.d)))
            return np.allclose(flipped, np.conj(a), rtol=1e-13, atol=1e-13 * np.abs(a).max())

        return ok(self.psi) and (self.kappa is None or ok(self.kappa))

    @cached_property
    def _neg_index(self) -> np.ndarray:
        """Flat index of ``-lam mod N`` for each flat frequency index."""
        grid = np.stack([l.ravel() for l in _frequencies(self.d, self.N)])
        return np.ravel_multi_index((-grid) % self.N, self.shape)

    @cached_property
    def _diff_index(self) -> np.ndarray:
        """``diff[a, b]`` = flat index of ``b - a mod N``."""
        grid = np.stack([l.ravel() for l in _frequencies(self.d, self.N)])
        diff = (grid[:, None, :] - grid[:, :, None]) % self.N
        return np.ravel_multi_index(tuple(diff), self.shape)

    def with_kappa(self, kappa, C: float | None = None) -> LevyTorusModel:
        return LevyTorusModel(self.d, self.N, self.psi, kappa, C)

    def require_kappa(self) -> np.ndarray:
        if self.kappa is None:
            raise LevyModelError("model has no perturbation exponent kappa")
        return self.kappa


def _real_if_symmetric(model: LevyTorusModel, z: np.ndarray) -> np.ndarray:
    if model.conj_symmetric:
        resid = np.abs(z.imag).max()
        if resid > 1e-12 * max(1.0, np.abs(z.real).max()):
            raise LevyModelError(f"imaginary residue {resid:.3g} for a conjugate-symmetric exponent")
        return z.real.copy()
    return z


def _inverse(model: LevyTorusModel, symbol: np.ndarray) -> np.ndarray:
    return _real_if_symmetric(model, np.fft.ifftn(symbol))


def levy_potential(model: LevyTorusModel) -> np.ndarray:
    """``u(z)`` on the torus, shape ``(N,)*d``."""
    return _inverse(model, 1.0 / model.psi)


def perturbed_potential(model: LevyTorusModel, eps: float) -> np.ndarray:
    """Potential of the exponent ``psi + eps * kappa``."""
    kappa = model.require_kappa()
    total = model.psi + eps * kappa
    # slack so that |eps| = 1/(2C) itself, where the bound is attained, is not lost to rounding
    if float(total.real.min()) < model.psi_min / 2 * (1 - 1e-12):
        raise EpsilonTooLarge(f"Re(psi + eps kappa) drops below psi_min/2 at eps={eps}")
    return _inverse(model, 1.0 / total)


def levy_derivative_kernel(model: LevyTorusModel) -> np.ndarray:
    """``d/d eps`` of the perturbed potential at 0: inverse DFT of ``-kappa/psi^2``."""
    kappa = model.require_kappa()
    return _inverse(model, -kappa / model.psi**2)


def torus_kernel_matrix(model: LevyTorusModel, z_values: np.ndarray) -> np.ndarray:
    """Materialise ``K[x, y] = k(y - x)`` over the flattened sites."""
    flat = np.asarray(z_values).reshape(-1)
    return flat[model._diff_index]


def psi_norm(model: LevyTorusModel, nu) -> float:
    """``sqrt(N**-d sum_lam [(1/|psi|) (*) (1/|psi|)](lam) |nu_hat(lam)|^2)``.

    ``(*)`` is circular convolution normalised by ``N**-d``.
    """
    w = as_weights(nu).reshape(model.shape)
    nu_hat = np.fft.fftn(w)
    inv = 1.0 / np.abs(model.psi)
    conv = np.fft.ifftn(np.fft.fftn(inv) ** 2).real / model.n
    val = float(np.sum(conv * np.abs(nu_hat) ** 2).real) / model.n
    return float(np.sqrt(max(val, 0.0)))


def fourier_moment(model: LevyTorusModel, measures, eps: float = 0.0) -> complex | float:
    """Cyclic integral computed entirely in frequency space.

    ``N**(-d k) sum_{lam_1..lam_k} prod_j nu_hat_j(lam_j - lam_{j-1}) / psi_eps(lam_j)``
    with ``lam_0 = lam_k``, written as the trace of a product of k matrices.
    """
    symbol = model.psi if eps == 0 else model.psi + eps * model.require_kappa()
    inv = (1.0 / symbol).reshape(-1) / model.n
    P = None
    for nu in measures:
        nu_hat = np.fft.fftn(as_weights(nu).reshape(model.shape)).reshape(-1)
        A = nu_hat[model._diff_index] * inv[None, :]
        P = A if P is None else P @ A
    z = complex(np.trace(P))
    return z.real if model.conj_symmetric else z


def _exponent_from_json(spec: dict[str, Any], d: int, N: int) -> np.ndarray:
    if "family" in spec:
        return exponent_family(spec["family"], d, N, **spec.get("params", {}))
    if "table" in spec:
        table = np.asarray(spec["table"], dtype=float)
        if "imag" in spec:
            table = table + 1j * np.asarray(spec["imag"], dtype=float)
        return table.reshape((N,) * d)
    raise LevyModelError("exponent spec needs 'family' or 'table'")


def model_from_json(source: str | Path | dict[str, Any]) -> LevyTorusModel:
    """``{"d", "N", "psi": {"family", "params"} | {"table"}, "kappa": same}``."""
    if isinstance(source, dict):
        data = source
    else:
        data = json.loads(Path(source).read_text())
    d, N = int(data["d"]), int(data["N"])
    psi = _exponent_from_json(data["psi"], d, N)
    kappa = _exponent_from_json(data["kappa"], d, N) if data.get("kappa") else None
    return LevyTorusModel(d, N, psi, kappa, data.get("C"))
