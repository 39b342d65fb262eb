"""Monte-Carlo sampling of the loop measure restricted to a lifetime window.

Restricted to lifetimes in ``[a, b]`` the loop measure is finite with total
mass ``int_a^b trace(expm(tQ)) / t dt``.  A sample is drawn by picking the
lifetime from that density, the base point ``x`` with probability
proportional to ``expm(tQ)[x, x]``, and then an exact bridge from ``x`` back to
``x`` by uniformization: a Poisson number of clock events conditioned on the
endpoint, a skeleton drawn by backward filtering with powers of
``P = I + Q / Lambda``, and sorted uniform event times.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.integrate
import scipy.stats

from .chain_model import TransientChain, semigroup
from .errors import KUnsupported, QuadratureFailed
from .measure_space import RevuzMeasure, as_weights

__all__ = [
    "LoopSample",
    "RestrictedLoopMeasureSpec",
    "LoopSampler",
    "restricted_mass",
    "base_distribution",
    "sample_loop",
    "evaluate_restricted_caf",
    "estimate_restricted_moment",
    "restricted_moment_oracle",
    "rotate_loop",
    "sample_stream",
    "dump_samples",
]

UNIFORMIZATION_SLACK = 1.1


@dataclass(frozen=True, eq=False)
class LoopSample:
    """Piecewise-constant based loop on ``[0, lifetime)``.

    ``states[i]`` is occupied on ``[jump_times[i-1], jump_times[i])`` with
    ``jump_times[-1] := lifetime``.  ``weight`` is the restricted total mass,
    so ``weight * F(sample)`` averages to the restricted moment of ``F``.
    """

    lifetime: float
    base: int
    jump_times: np.ndarray
    states: np.ndarray
    weight: float = 1.0

    def boundaries(self) -> np.ndarray:
        return np.concatenate(([0.0], self.jump_times, [self.lifetime]))

    def durations(self) -> np.ndarray:
        return np.diff(self.boundaries())

    def to_json(self) -> dict:
        return {
            "lifetime": self.lifetime,
            "base": int(self.base),
            "jump_times": [float(x) for x in self.jump_times],
            "states": [int(s) for s in self.states],
        }


@dataclass(frozen=True, eq=False)
class RestrictedLoopMeasureSpec:
    chain: TransientChain
    a: float
    b: float

    def __post_init__(self):
        if not (0 < self.a < self.b < math.inf):
            raise ValueError(f"need 0 < a < b < inf, got a={self.a}, b={self.b}")

    @classmethod
    def default(cls, chain: TransientChain) -> RestrictedLoopMeasureSpec:
        g = abs(chain.abscissa)
        return cls(chain, 0.2 / g, 5.0 / g)


def _trace_semigroup(chain: TransientChain):
    """Vectorised ``t -> trace(expm(tQ))`` via the eigenvalues of ``Q``."""
    lam = np.linalg.eigvals(chain.Q)
    return lambda t: np.exp(np.multiply.outer(np.asarray(t, dtype=float), lam)).sum(axis=-1).real


def restricted_mass(spec: RestrictedLoopMeasureSpec, rtol: float = 1e-10) -> float:
    tr = _trace_semigroup(spec.chain)
    val, err = scipy.integrate.quad(lambda t: float(tr(t)) / t, spec.a, spec.b, epsabs=0.0, epsrel=rtol, limit=200)
    if not np.isfinite(val) or err > 10 * rtol * abs(val) + 1e-300:
        raise QuadratureFailed(f"restricted mass quadrature error {err:.3g} on value {val:.6g}")
    return float(val)


def base_distribution(spec: RestrictedLoopMeasureSpec) -> np.ndarray:
    """Law of the base point: ``int_a^b expm(tQ)[x, x] / t dt``, normalised."""
    chain = spec.chain
    val, _ = scipy.integrate.quad_vec(lambda t: np.diag(semigroup(chain, t)) / t, spec.a, spec.b, epsrel=1e-12)
    return val / val.sum()


class LoopSampler:
    """Precomputed tables for repeated sampling from one restricted spec."""

    def __init__(self, spec: RestrictedLoopMeasureSpec, cells: int = 4096):
        self.spec = spec
        chain = spec.chain
        n = chain.n
        self.mass = restricted_mass(spec)

        # lifetime CDF on a geometric grid, 8-point Gauss-Legendre per cell
        tr = _trace_semigroup(chain)
        edges = np.geomspace(spec.a, spec.b, cells + 1)
        xg, wg = np.polynomial.legendre.leggauss(8)
        mid, half = (edges[1:] + edges[:-1]) / 2, (edges[1:] - edges[:-1]) / 2
        nodes = mid[:, None] + half[:, None] * xg[None, :]
        cell_mass = (tr(nodes) / nodes * wg[None, :]).sum(axis=1) * half
        self._edges = edges
        self._cdf = np.concatenate(([0.0], np.cumsum(cell_mass)))
        self._cdf /= self._cdf[-1]

        # diag(expm(tQ)) through the eigenbasis when it is well conditioned
        lam, V = np.linalg.eig(chain.Q)
        self._lam = lam
        self._diag_weights = None
        if np.linalg.cond(V) < 1e8:
            self._diag_weights = V * np.linalg.inv(V).T  # [x, k] = V[x,k] Vinv[k,x]

        # uniformization tables
        rate = UNIFORMIZATION_SLACK * float(np.max(-np.diag(chain.Q)))
        self.rate = rate
        P = np.eye(n) + chain.Q / rate
        lt = rate * spec.b
        self.n_max = int(math.ceil(lt + 12 * math.sqrt(lt) + 30))
        powers = np.empty((self.n_max + 1, n, n))
        powers[0] = np.eye(n)
        for r in range(1, self.n_max + 1):
            powers[r] = powers[r - 1] @ P
        self._P = P
        self._powers = powers
        self._pow_diag = np.einsum("rxx->rx", powers)  # (P^r)[x, x]

    def _diag_semigroup(self, t: float) -> np.ndarray:
        if self._diag_weights is not None:
            d = (self._diag_weights @ np.exp(t * self._lam)).real
        else:
            d = np.diag(semigroup(self.spec.chain, t))
        return np.clip(d, 0.0, None)

    def sample_lifetime(self, rng: np.random.Generator) -> float:
        u = rng.random()
        i = int(np.searchsorted(self._cdf, u, side="right")) - 1
        i = min(max(i, 0), len(self._edges) - 2)
        c0, c1 = self._cdf[i], self._cdf[i + 1]
        frac = (u - c0) / (c1 - c0) if c1 > c0 else 0.5
        return float(self._edges[i] + frac * (self._edges[i + 1] - self._edges[i]))

    def sample_bridge(self, t: float, rng: np.random.Generator, base: int | None = None) -> LoopSample:
        """Loop of length ``t``; the base is drawn from ``diag(expm(tQ))``
        unless given."""
        if base is None:
            d = self._diag_semigroup(t)
            base = int(rng.choice(len(d), p=d / d.sum()))
        lt = self.rate * t
        ns = np.arange(self.n_max + 1)
        logp = ns * math.log(lt) - lt - scipy.special.gammaln(ns + 1)
        w = np.exp(logp) * self._pow_diag[:, base]
        count = int(rng.choice(self.n_max + 1, p=w / w.sum()))

        states = [base]
        s = base
        col = self._powers[:, :, base]  # (P^r)[:, base]
        for r in range(count, 0, -1):
            probs = self._P[s] * col[r - 1]
            cum = np.cumsum(probs)
            s = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            s = min(s, len(probs) - 1)
            states.append(s)
        times = np.sort(rng.random(count)) * t
        states = np.asarray(states)
        keep = np.flatnonzero(states[1:] != states[:-1])
        return LoopSample(t, base, times[keep], np.concatenate(([base], states[1:][keep])), self.mass)

    def sample(self, rng: np.random.Generator) -> LoopSample:
        return self.sample_bridge(self.sample_lifetime(rng), rng)


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_loop(spec: RestrictedLoopMeasureSpec, rng: np.random.Generator) -> LoopSample:
    return LoopSampler(spec).sample(rng)


def _densities(measures, m) -> list[np.ndarray]:
    out = []
    for nu in measures:
        if isinstance(nu, RevuzMeasure):
            out.append(nu.density)
        else:
            if m is None:
                raise ValueError("plain weight vectors need the reference weights m")
            out.append(as_weights(nu) / np.asarray(m, dtype=float))
    return out


def evaluate_restricted_caf(sample: LoopSample, measures: Sequence, m=None) -> float:
    """``M^{nu_1..nu_k}`` over the loop: ``L^nu`` for k=1, ``L^nu1 L^nu2`` for k=2.

    ``L^nu = sum over holding intervals of (nu/m)(state) * duration``.
    """
    k = len(measures)
    if k not in (1, 2):
        raise KUnsupported(f"Monte-Carlo functionals support k in {{1, 2}}, got {k}")
    dur = sample.durations()
    vals = [float(np.dot(f[sample.states], dur)) for f in _densities(measures, m)]
    return vals[0] if k == 1 else vals[0] * vals[1]


def estimate_restricted_moment(
    spec: RestrictedLoopMeasureSpec,
    measures: Sequence,
    samples: int,
    seed: int,
    sampler: LoopSampler | None = None,
) -> tuple[float, float]:
    """Restricted loop-measure moment and its standard error.

    Sample ``i`` uses the stream :func:`sample_stream` ``(seed, i)``, so the
    result does not depend on how the work is scheduled.
    """
    if len(measures) not in (1, 2):
        raise KUnsupported("Monte-Carlo functionals support k in {1, 2}")
    sampler = sampler or LoopSampler(spec)
    m = spec.chain.m
    dens = _densities(measures, m)
    vals = np.empty(samples)
    for i in range(samples):
        s = sampler.sample(sample_stream(seed, i))
        dur = s.durations()
        L = [float(np.dot(f[s.states], dur)) for f in dens]
        vals[i] = L[0] if len(L) == 1 else L[0] * L[1]
    vals *= sampler.mass
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
    return mean, stderr


def restricted_moment_oracle(spec: RestrictedLoopMeasureSpec, measures: Sequence, panels: int = 64) -> float:
    """Exact restricted moment by quadrature.

    k=1: ``int_a^b trace(diag(f) expm(tQ)) dt`` (the ``1/t`` cancels because
    all ``t`` rotations of the observation time give the same trace).
    k=2: ``int_a^b int_0^t trace(F1 expm(rQ) F2 expm((t-r)Q)) dr dt``.
    Composite Gauss-Legendre in both variables.
    """
    chain = spec.chain
    dens = _densities(measures, chain.m)
    xg, wg = np.polynomial.legendre.leggauss(16)
    edges = np.linspace(spec.a, spec.b, panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        ts = (hi + lo) / 2 + (hi - lo) / 2 * xg
        for t, wt in zip(ts, wg * (hi - lo) / 2):
            if len(dens) == 1:
                total += wt * float(np.dot(dens[0], np.diag(semigroup(chain, t))))
            elif len(dens) == 2:
                rs = t / 2 + t / 2 * xg
                inner = 0.0
                for r, wr in zip(rs, wg * t / 2):
                    Er, Etr = semigroup(chain, r), semigroup(chain, t - r)
                    inner += wr * float(np.trace((dens[0][:, None] * Er) @ (dens[1][:, None] * Etr)))
                total += wt * inner
            else:
                raise KUnsupported("oracle supports k in {1, 2}")
    return total


def rotate_loop(sample: LoopSample, u: float) -> LoopSample:
    """``rho_u``: re-base the loop at time ``u mod lifetime``."""
    if u < 0:
        raise ValueError("u must be >= 0")
    zeta = sample.lifetime
    shift = math.fmod(u, zeta)
    if shift == 0.0:
        return sample
    edges = sample.boundaries()
    starts, ends, states = edges[:-1], edges[1:], sample.states
    pieces = []
    for lo, hi, s in zip(starts, ends, states):
        if hi > shift:
            pieces.append((max(lo, shift) - shift, hi - shift, s))
    for lo, hi, s in zip(starts, ends, states):
        if lo < shift:
            pieces.append((lo + zeta - shift, min(hi, shift) + zeta - shift, s))
    merged = [list(pieces[0])]
    for lo, hi, s in pieces[1:]:
        if s == merged[-1][2] or hi - lo <= 0:
            merged[-1][1] = hi
        else:
            merged.append([lo, hi, s])
    jump_times = np.array([p[0] for p in merged[1:]], dtype=float)
    new_states = np.array([p[2] for p in merged], dtype=int)
    return LoopSample(zeta, int(new_states[0]), jump_times, new_states, sample.weight)


def dump_samples(samples: Iterable[LoopSample], path) -> None:
    """JSON-lines dump, one ``{lifetime, base, jump_times, states}`` per line."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")
