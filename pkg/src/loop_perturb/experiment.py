"""Seeded instance generation and the check suites behind the CLI.

A run is described by a JSON config (see ``configs/``).  Every check yields a
:class:`CheckRecord`; the run passes iff every record passes.  Records are
ordered by ``(seed, name)`` so reports are reproducible under any schedule.

Record metrics:

``rel``    ``error = |lhs - rhs| / max(|lhs|, |rhs|)``, pass if ``<= tolerance``
``abs``    ``error = |lhs - rhs|``, pass if ``<= tolerance``
``ratio``  ``error = lhs / rhs`` (a bound ``lhs <= rhs``), pass if ``<= tolerance``
``z``      ``error = |lhs - rhs| / stderr``, pass if ``<= tolerance``
``pvalue`` ``error = p``, pass if ``>= tolerance``
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import scipy
import scipy.stats

from . import __version__
from .chain_model import (
    TransientChain,
    chain_from_json,
    dual_chain,
    green_kernel,
    sqrt_kernel,
    time_change_check,
    transition_density,
)
from .errors import ConfigInvalid, GenerationFailed, LoopPerturbError, NotDualAdmissible
from .levy_lattice import LevyTorusModel, exponent_family
from .loop_moments import CafProductSpec, caf_moment, insertion_identity_check
from .loop_sampler import (
    LoopSampler,
    RestrictedLoopMeasureSpec,
    base_distribution,
    estimate_restricted_moment,
    restricted_moment_oracle,
    rotate_loop,
    sample_stream,
)
from .measure_space import NormTag, RevuzMeasure, proper_norm_certificate
from .perturbation import (
    JumpPerturbation,
    jump_derivative,
    jump_dual_check,
    jump_perturbed_potential,
    jump_semigroup_check,
    killing_derivative,
    killing_remainder_check,
    levy_derivative,
)

logger = logging.getLogger(__name__)

__all__ = [
    "GROUPS",
    "InstanceParams",
    "RandomInstance",
    "CheckRecord",
    "RunReport",
    "ExperimentConfig",
    "generate_random_instance",
    "random_levy_pair",
    "load_config",
    "run_suite",
    "write_report",
    "CSV_COLUMNS",
]

GROUPS = ("identities", "norms", "killing", "levy", "jump", "mc")
THREADS_ENV = "LOOP_PERTURB_THREADS"

DEFAULT_TOLERANCES = {
    "identity": 1e-10,
    "duality": 1e-10,
    "time_change": 1e-10,
    "w_squared": 1e-8,
    "proper_norm": 1e-8,
    "forms": 1e-10,
    "fd": 1e-6,
    "order": 0.2,
    "series": 1e-10,
    "ratio": 0.1,
    "semigroup": 1e-6,
    "mc_z": 3.0,
    "chi2_p": 0.01,
}

# -- instance generation --------------------------------------------------------


@dataclass
class InstanceParams:
    """Generator parameters.

    ``n`` is a state count or an inclusive ``[lo, hi]`` range drawn per seed.
    ``density`` is the probability of each extra off-diagonal edge; a ring is
    always present so the chain is irreducible.
    """

    n: int | list = 6
    density: float = 0.5
    symmetric: bool = False
    dual_admissible: bool = False
    jump: bool = True
    circulation: bool = True
    n_measures: int = 4
    max_retries: int = 20

    def __post_init__(self):
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise ConfigInvalid(f"bad state count {self.n!r}")
        if not (0 < self.density <= 1):
            raise ConfigInvalid("edge density must lie in (0, 1]")
        if self.n_measures < 1:
            raise ConfigInvalid("n_measures must be >= 1")

    @property
    def n_range(self) -> tuple[int, int]:
        if isinstance(self.n, (list, tuple)):
            if len(self.n) != 2:
                raise ConfigInvalid("n range must be [lo, hi]")
            return int(self.n[0]), int(self.n[1])
        return int(self.n), int(self.n)


@dataclass
class RandomInstance:
    seed: int
    chain: TransientChain
    measures: list[RevuzMeasure]
    jump: JumpPerturbation | None = None


def _ring(n: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    if n > 1:
        idx = np.arange(n)
        mask[idx, (idx + 1) % n] = True
    return mask


def _draw_chain(p: InstanceParams, n: int, rng: np.random.Generator) -> TransientChain:
    m = rng.uniform(0.5, 2.0, n)
    mask = (rng.random((n, n)) < p.density) | _ring(n)
    np.fill_diagonal(mask, False)
    if p.symmetric:
        mask = mask | mask.T
        cond = np.triu(rng.exponential(1.0, (n, n)) * mask, 1)
        cond = cond + cond.T
        R = cond / m[:, None]  # m_x Q[x, y] symmetric
    else:
        R = rng.exponential(1.0, (n, n)) * mask
    kill = rng.exponential(0.5, n) * (rng.random(n) < 0.5)
    kill[rng.integers(n)] += rng.uniform(0.2, 1.0)
    if p.dual_admissible:
        # column condition sum_y m_y Q[y, x] <= 0
        need = (m @ R) / m - R.sum(axis=1)
        kill = np.maximum(kill, need + rng.uniform(0.05, 0.3, n))
    Q = R - np.diag(R.sum(axis=1) + kill)
    for _ in range(10):
        if np.max(np.linalg.eigvals(Q).real) < -1e-3:
            break
        Q = Q - 0.1 * np.eye(n)
    return TransientChain(Q, m)


def _draw_jump(p: InstanceParams, m: np.ndarray, rng: np.random.Generator) -> JumpPerturbation:
    n = len(m)
    mask = (rng.random((n, n)) < p.density) | _ring(n) | (n == 1)
    j = rng.exponential(1.0, (n, n)) * mask
    j = (j + j.T) / 2
    if p.circulation and n >= 3:
        cycle = rng.permutation(n)
        w = rng.uniform(0.2, 1.0)
        for a, b in zip(cycle, np.roll(cycle, -1)):
            j[a, b] += w / (m[a] * m[b])
    return JumpPerturbation(j, m)


def _draw_measures(p: InstanceParams, m: np.ndarray, rng: np.random.Generator) -> list[RevuzMeasure]:
    out = []
    n = len(m)
    for _ in range(p.n_measures):
        w = rng.exponential(1.0, n) * (rng.random(n) < 0.7)
        w[rng.integers(n)] += rng.uniform(0.1, 1.0)
        out.append(RevuzMeasure(w, m))
    return out


def generate_random_instance(params: InstanceParams | dict, seed: int) -> RandomInstance:
    """Deterministic random chain, measures and (optionally) jump density.

    Retries with the same stream on validation failure and raises
    :class:`GenerationFailed` after ``max_retries`` attempts.
    """
    p = params if isinstance(params, InstanceParams) else InstanceParams(**params)
    rng = np.random.default_rng(seed)
    lo, hi = p.n_range
    n = int(rng.integers(lo, hi + 1))
    last: Exception | None = None
    for attempt in range(p.max_retries):
        try:
            chain = _draw_chain(p, n, rng)
            if p.dual_admissible:
                dual_chain(chain)
            measures = _draw_measures(p, chain.m, rng)
            jump = _draw_jump(p, chain.m, rng) if p.jump else None
            return RandomInstance(seed, chain, measures, jump)
        except LoopPerturbError as exc:
            logger.info("seed %d attempt %d rejected: %s", seed, attempt, exc)
            last = exc
    raise GenerationFailed(f"seed {seed}: no valid instance after {p.max_retries} attempts ({last})")


def random_levy_pair(d: int, N: int, seed: int) -> LevyTorusModel:
    """Random exponent ``psi`` and perturbation ``kappa`` from the built-in families.

    Odd seeds add an odd imaginary drift term to both, so the kernels stay
    real but are no longer symmetric.
    """
    rng = np.random.default_rng([seed, d, N])
    drift = seed % 2 == 1
    psi_name = str(rng.choice(["killed_walk", "relativistic"])) if not drift else "drifted_walk"
    psi = exponent_family(
        psi_name, d, N, mass2=rng.uniform(0.3, 2.0), rate=rng.uniform(0.5, 2.0),
        s=rng.uniform(0.6, 1.8), drift=rng.uniform(-1.0, 1.0),
    )
    kappa = exponent_family(
        "drifted_walk" if drift else "killed_walk", d, N,
        mass2=rng.uniform(0.1, 1.0), rate=rng.uniform(0.0, 1.5), drift=rng.uniform(-0.5, 0.5),
    )
    return LevyTorusModel(d, N, psi, kappa)


# -- records and reports --------------------------------------------------------


@dataclass
class CheckRecord:
    seed: int
    name: str
    anchor: str
    metric: str
    lhs: float
    rhs: float
    error: float
    tolerance: float
    passed: bool
    lhs_imag: float = 0.0
    rhs_imag: float = 0.0
    message: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


CSV_COLUMNS = (
    "seed", "name", "anchor", "metric", "lhs", "rhs", "lhs_imag", "rhs_imag",
    "error", "tolerance", "pass", "message",
)


def _record(seed, name, anchor, metric, lhs, rhs, tol, error=None, message="") -> CheckRecord:
    lhs_c, rhs_c = complex(lhs), complex(rhs)
    if error is None:
        if metric == "rel":
            scale = max(abs(lhs_c), abs(rhs_c))
            error = 0.0 if lhs_c == rhs_c else abs(lhs_c - rhs_c) / scale
        elif metric == "abs":
            error = abs(lhs_c - rhs_c)
        elif metric == "ratio":
            error = 0.0 if lhs_c.real == 0 else lhs_c.real / rhs_c.real if rhs_c.real > 0 else math.inf
        else:
            raise ValueError(f"metric {metric!r} needs an explicit error")
    error = float(error)
    if metric == "pvalue":
        ok = error >= tol
    else:
        ok = bool(np.isfinite(error)) and error <= tol
    return CheckRecord(
        int(seed), name, anchor, metric, lhs_c.real, rhs_c.real, float(error), float(tol), bool(ok),
        lhs_c.imag, rhs_c.imag, message,
    )


def _failure(seed, name, anchor, exc: Exception) -> CheckRecord:
    return CheckRecord(int(seed), name, anchor, "error", math.nan, math.nan, math.nan, math.nan, False,
                       message=f"{type(exc).__name__}: {exc}")


@dataclass
class RunReport:
    config: dict
    records: list[CheckRecord]
    generated_at: str = ""
    versions: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def summary(self) -> dict:
        by_group: dict[str, dict[str, int]] = {}
        for r in self.records:
            g = next((part for part in r.name.split(".") if part in GROUPS), r.name.split(".")[0])
            s = by_group.setdefault(g, {"total": 0, "passed": 0, "failed": 0})
            s["total"] += 1
            s["passed" if r.passed else "failed"] += 1
        n_pass = sum(r.passed for r in self.records)
        return {
            "total": len(self.records),
            "passed": n_pass,
            "failed": len(self.records) - n_pass,
            "pass": self.passed,
            "groups": dict(sorted(by_group.items())),
        }

    def to_json(self) -> dict:
        return {
            "summary": self.summary(),
            "config": self.config,
            "versions": self.versions,
            "generated_at": self.generated_at,
            "records": [r.to_json() for r in self.records],
        }


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def write_report(report: RunReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``report.json`` and ``checks.csv`` (one row per seed and check)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "report.json", out / "checks.csv"
    jpath.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with cpath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            d = r.to_json()
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
    return jpath, cpath


# -- configuration ----------------------------------------------------------------


@dataclass
class FamilyConfig:
    label: str
    params: InstanceParams
    seeds: list[int]
    k_values: list[int]
    chain: TransientChain | None = None
    measures: list | None = None
    jump: list | None = None
    semigroup_seeds: int | None = None  # run the (slow) semigroup check on the first few seeds only


@dataclass
class LevyConfig:
    geometries: list[tuple[int, int]]
    pairs: int
    k: int = 2


@dataclass
class McConfig:
    samples: int
    seed: int
    chains: list[int]
    params: InstanceParams
    window: tuple[float, float] | None = None
    rotation_samples: int | None = None


@dataclass
class ExperimentConfig:
    name: str
    checks: list[str]
    families: list[FamilyConfig]
    levy: LevyConfig | None
    mc: McConfig | None
    tolerances: dict[str, float]
    raw: dict

    def with_seed(self, seed: int) -> ExperimentConfig:
        """``--seed`` override: every family and the MC stage use the single seed."""
        fams = [FamilyConfig(**{**f.__dict__, "seeds": [seed]}) for f in self.families]
        mc = McConfig(**{**self.mc.__dict__, "seed": seed, "chains": [seed]}) if self.mc else None
        raw = {**self.raw, "seed_override": seed}
        return ExperimentConfig(self.name, self.checks, fams, self.levy, mc, self.tolerances, raw)


def _seeds(spec) -> list[int]:
    if isinstance(spec, dict):
        return list(range(int(spec.get("start", 0)), int(spec.get("start", 0)) + int(spec["count"])))
    if isinstance(spec, int):
        return [spec]
    if isinstance(spec, list) and all(isinstance(s, int) for s in spec):
        return list(spec)
    raise ConfigInvalid(f"bad seed specification {spec!r}")


def _params(d: dict) -> InstanceParams:
    allowed = set(InstanceParams.__dataclass_fields__)
    extra = set(d) - allowed
    if extra:
        raise ConfigInvalid(f"unknown generator fields {sorted(extra)}")
    try:
        return InstanceParams(**d)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse and validate a config; raises :class:`ConfigInvalid`."""
    try:
        raw = source if isinstance(source, (dict, list)) else json.loads(Path(source).read_text())
    except (OSError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a JSON object")
    try:
        checks = list(raw.get("checks", GROUPS))
        bad = [c for c in checks if c not in GROUPS]
        if bad:
            raise ConfigInvalid(f"unknown check groups {bad}")
        tol = dict(DEFAULT_TOLERANCES)
        for k, v in raw.get("tolerances", {}).items():
            if k not in tol:
                raise ConfigInvalid(f"unknown tolerance {k!r}")
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigInvalid(f"tolerance {k!r} must be > 0")
            tol[k] = float(v)

        families = []
        for i, f in enumerate(raw.get("instances", [])):
            f = dict(f)
            label = f.pop("label", f"family{i}")
            if "seeds" not in f:
                raise ConfigInvalid(f"instance family {label!r} needs seeds")
            seeds = _seeds(f.pop("seeds"))
            k_values = [int(k) for k in f.pop("k", [1, 2, 3])]
            semigroup_seeds = f.pop("semigroup_seeds", None)
            chain = measures = jump = None
            if "chain" in f:
                chain = chain_from_json(f.pop("chain"))
                measures = [np.asarray(w, dtype=float) for w in f.pop("measures")]
                jump = f.pop("jump", None)
                f.setdefault("n", chain.n)
            families.append(FamilyConfig(label, _params(f), seeds, k_values, chain, measures, jump, semigroup_seeds))

        levy = None
        if "levy" in raw:
            lv = raw["levy"]
            levy = LevyConfig([tuple(g) for g in lv["geometries"]], int(lv["pairs"]), int(lv.get("k", 2)))

        mc = None
        if "mc" in raw:
            mcr = dict(raw["mc"])
            if "seed" not in mcr:
                raise ConfigInvalid("mc section needs an explicit seed")
            window = tuple(mcr["window"]) if mcr.get("window") else None
            mc = McConfig(
                int(mcr["samples"]), int(mcr["seed"]), _seeds(mcr.get("chains", [0])),
                _params(mcr.get("generator", {"n": 3})), window, mcr.get("rotation_samples"),
            )
            if mc.samples < 2:
                raise ConfigInvalid("mc samples must be >= 2")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise ConfigInvalid(f"invalid config: {exc}") from exc
    return ExperimentConfig(str(raw.get("name", "unnamed")), checks, families, levy, mc, tol, raw)


# -- checks -------------------------------------------------------------------------

ANCHORS = {
    "closed_form": "one-state chain: closed-form Green kernel and moments",
    "insertion": "insertion identity: slot-insertion sum equals diagonal bridge moment",
    "dual_kernel": "duality: dual transition density is the transpose",
    "time_change": "time change by a: potential density divided by a(y)",
    "w_squared": "square-root kernel: W composed with W equals U",
    "proper_norm": "proper norm: cyclic integral bounded by C^n times norm product",
    "killing_fd": "killing derivative: minus the inserted moment, vs finite differences",
    "killing_forms": "killing derivative: insertion sum vs diagonal bridge form",
    "fd_order": "finite-difference convergence order",
    "remainder": "killing expansion: second-order remainder bound",
    "levy_forms": "Levy derivative: insertion form vs Fourier form",
    "levy_fd": "Levy derivative vs finite differences",
    "jump_forms": "jump derivative: insertion form vs bridge-difference form",
    "jump_fd": "jump derivative vs one-sided finite differences",
    "neumann": "jump potential: Neumann series vs direct resolvent",
    "neumann_ratio": "jump potential: geometric ratio vs spectral radius",
    "jump_dual": "jump perturbation of the dual chain gives the transposed potential",
    "semigroup": "jump semigroup: time-ordered expansion vs matrix exponential",
    "mc_moment": "restricted loop measure moment: Monte Carlo vs quadrature",
    "mc_rotation": "rotation invariance of the loop measure (base point law)",
}


def _spec(inst: RandomInstance, k: int) -> tuple[CafProductSpec, RevuzMeasure]:
    ms = inst.measures
    return CafProductSpec(tuple(ms[i % len(ms)] for i in range(k))), ms[-1]


def _guarded(out: list, seed: int, name: str, anchor_key: str, fn: Callable[[], Iterable[CheckRecord]]):
    try:
        out.extend(fn())
    except Exception as exc:  # recorded per check; remaining checks continue
        logger.warning("check %s failed on seed %d: %s", name, seed, exc)
        out.append(_failure(seed, name, ANCHORS[anchor_key], exc))


def _identity_checks(fam: FamilyConfig, inst: RandomInstance, tol: dict) -> list[CheckRecord]:
    out: list[CheckRecord] = []
    s, chain = inst.seed, inst.chain
    g = green_kernel(chain)
    pre = fam.label + ".identities."

    if chain.n == 1:
        q, m0 = -chain.Q[0, 0], chain.m[0]
        nu = [float(v.weights[0]) for v in inst.measures]

        def closed():
            u0 = 1.0 / (q * m0)
            yield _record(s, pre + "closed_form_green", ANCHORS["closed_form"], "rel", g.u[0, 0], u0, tol["identity"])
            t = 0.7
            yield _record(s, pre + "closed_form_density", ANCHORS["closed_form"], "rel",
                          transition_density(chain, t)[0, 0], math.exp(-q * t) / m0, tol["identity"])
            spec, _ = _spec(inst, 2)
            yield _record(s, pre + "closed_form_caf_k2", ANCHORS["closed_form"], "rel",
                          caf_moment(g, spec), u0**2 * nu[0] * nu[1 % len(nu)], tol["identity"])

        _guarded(out, s, pre + "closed_form", "closed_form", closed)

    for k in fam.k_values:
        def ins(k=k):
            spec, nu = _spec(inst, k)
            r = insertion_identity_check(g, spec, nu, tol["identity"])
            yield _record(s, pre + f"insertion_k{k}", ANCHORS["insertion"], "rel", r.insertion, r.bridge, tol["identity"])

        _guarded(out, s, pre + f"insertion_k{k}", "insertion", ins)

    def dual():
        try:
            dch = dual_chain(chain)
        except NotDualAdmissible:
            return
        rng = np.random.default_rng([s, 7])
        worst = (0.0, 0.0, 0.0)
        scale = 1.0 / abs(chain.abscissa)
        for t in rng.uniform(0.05, 3.0, 5) * scale:
            p, ph = transition_density(chain, t), transition_density(dch, t)
            err = float(np.abs(ph - p.T).max() / np.abs(p).max())
            if err >= worst[0]:
                worst = (err, float(np.abs(ph).max()), float(np.abs(p).max()))
        yield _record(s, pre + "dual_kernel", ANCHORS["dual_kernel"], "rel", worst[1], worst[2], tol["duality"], error=worst[0])
        uh = green_kernel(dch).u
        err = float(np.abs(uh - g.u.T).max() / np.abs(g.u).max())
        yield _record(s, pre + "dual_green", ANCHORS["dual_kernel"], "rel", float(np.abs(uh).max()), float(np.abs(g.u).max()),
                      tol["duality"], error=err)

    _guarded(out, s, pre + "dual_kernel", "dual_kernel", dual)

    def tchange():
        a = np.random.default_rng([s, 11]).uniform(0.3, 3.0, chain.n)
        r = time_change_check(chain, a, tol["time_change"])
        yield _record(s, pre + "time_change", ANCHORS["time_change"], "rel", float(np.abs(r.u_y).max()),
                      float(np.abs(r.u_x / a[None, :]).max()), tol["time_change"], error=r.rel_error_m,
                      message=f"convention={r.convention}")

    _guarded(out, s, pre + "time_change", "time_change", tchange)
    return out


def _norm_checks(fam: FamilyConfig, inst: RandomInstance, tol: dict) -> list[CheckRecord]:
    out: list[CheckRecord] = []
    s, chain = inst.seed, inst.chain
    pre = fam.label + ".norms."
    g = green_kernel(chain)

    if chain.is_symmetric():
        def wsq():
            w = sqrt_kernel(chain).w
            W2 = (w * chain.m[None, :]) @ w
            err = float(np.abs(W2 - g.u).max() / np.abs(g.u).max())
            yield _record(s, pre + "w_squared", ANCHORS["w_squared"], "rel", float(np.abs(W2).max()),
                          float(np.abs(g.u).max()), tol["w_squared"], error=err)

        _guarded(out, s, pre + "w_squared", "w_squared", wsq)

        def wcert():
            r = proper_norm_certificate(g, NormTag.W_NORM, 200, 6, s, chain=chain, signed=True)
            yield _record(s, pre + "proper_norm_w", ANCHORS["proper_norm"], "ratio", r.C_observed, 1.0,
                          1.0 + tol["proper_norm"])

        _guarded(out, s, pre + "proper_norm_w", "proper_norm", wcert)

    def ucert():
        r = proper_norm_certificate(g, NormTag.U2INF_NORM, 200, 6, s, chain=chain)
        yield _record(s, pre + "proper_norm_u2inf", ANCHORS["proper_norm"], "ratio", r.C_observed, 1.0,
                      1.0 + tol["proper_norm"])

    _guarded(out, s, pre + "proper_norm_u2inf", "proper_norm", ucert)
    return out


def _order_record(s, name, order, tol) -> CheckRecord:
    if order is None:
        return _record(s, name, ANCHORS["fd_order"], "abs", 2.0, 2.0, tol, error=0.0,
                       message="differences at round-off level, order not measurable")
    return _record(s, name, ANCHORS["fd_order"], "abs", order, 2.0, tol)


def _killing_checks(fam: FamilyConfig, inst: RandomInstance, tol: dict) -> list[CheckRecord]:
    out: list[CheckRecord] = []
    s, chain = inst.seed, inst.chain
    pre = fam.label + ".killing."
    for k in fam.k_values:
        def deriv(k=k):
            spec, nu = _spec(inst, k)
            r = killing_derivative(chain, nu, spec, tol=tol["fd"])
            yield _record(s, pre + f"forms_k{k}", ANCHORS["killing_forms"], "rel", r.analytic, r.analytic_alt,
                          tol["forms"], error=r.forms_rel_error)
            yield _record(s, pre + f"fd_k{k}", ANCHORS["killing_fd"], "rel", r.analytic, r.richardson,
                          tol["fd"], error=r.rel_error)
            yield _order_record(s, pre + f"order_k{k}", r.observed_order, tol["order"])

        _guarded(out, s, pre + f"fd_k{k}", "killing_fd", deriv)

        def rem(k=k):
            spec, nu = _spec(inst, k)
            for eps in (1e-1, 1e-2):
                r = killing_remainder_check(chain, nu, spec, eps)
                yield _record(s, pre + f"remainder_k{k}_eps{eps:g}", ANCHORS["remainder"], "ratio",
                              r.remainder, r.bound, 1.0)

        _guarded(out, s, pre + f"remainder_k{k}", "remainder", rem)
    return out


def _jump_for(fam: FamilyConfig, inst: RandomInstance) -> JumpPerturbation | None:
    if fam.jump is not None:
        return JumpPerturbation(np.asarray(fam.jump, dtype=float), inst.chain.m)
    return inst.jump


def _jump_checks(fam: FamilyConfig, inst: RandomInstance, tol: dict) -> list[CheckRecord]:
    out: list[CheckRecord] = []
    s, chain = inst.seed, inst.chain
    pre = fam.label + ".jump."
    try:
        jp = _jump_for(fam, inst)
    except Exception as exc:
        return [_failure(s, pre + "setup", "jump intensity density with symmetric marginals", exc)]
    if jp is None:
        return out
    eps = abs(chain.abscissa) / float(np.max(jp.c))
    for k in fam.k_values:
        def deriv(k=k):
            spec, _ = _spec(inst, k)
            r = jump_derivative(chain, jp, spec, tol=tol["fd"])
            yield _record(s, pre + f"forms_k{k}", ANCHORS["jump_forms"], "rel", r.analytic, r.analytic_alt,
                          tol["forms"], error=r.forms_rel_error)
            yield _record(s, pre + f"fd_k{k}", ANCHORS["jump_fd"], "rel", r.analytic, r.richardson,
                          tol["fd"], error=r.rel_error)

        _guarded(out, s, pre + f"fd_k{k}", "jump_fd", deriv)

    def neumann():
        r = jump_perturbed_potential(chain, jp, eps)
        yield _record(s, pre + "neumann", ANCHORS["neumann"], "rel", float(np.abs(r.series.u).max()),
                      float(np.abs(r.direct.u).max()), tol["series"], error=r.rel_error,
                      message=f"terms={r.terms_used}")
        if r.spectral_ratio > 0:
            yield _record(s, pre + "neumann_ratio", ANCHORS["neumann_ratio"], "rel", r.observed_ratio,
                          r.spectral_ratio, tol["ratio"])

    _guarded(out, s, pre + "neumann", "neumann", neumann)

    def dual():
        try:
            dual_chain(chain)
        except NotDualAdmissible:
            return
        r = jump_dual_check(chain, jp, eps, tol["duality"])
        yield _record(s, pre + "dual", ANCHORS["jump_dual"], "rel", float(np.abs(r.u_hat).max()),
                      float(np.abs(r.u).max()), tol["duality"], error=r.rel_error)

    _guarded(out, s, pre + "dual", "jump_dual", dual)

    limit = fam.semigroup_seeds
    if limit is None or fam.seeds.index(s) < limit:
        def semi():
            r = jump_semigroup_check(chain, jp, eps, 1.0 / abs(chain.abscissa), tol["semigroup"])
            yield _record(s, pre + "semigroup", ANCHORS["semigroup"], "rel", float(np.abs(r.series).max()),
                          float(np.abs(r.exact).max()), tol["semigroup"], error=r.rel_error,
                          message=f"terms={r.terms_used}")

        _guarded(out, s, pre + "semigroup", "semigroup", semi)
    return out


def _levy_checks(cfg: LevyConfig, tol: dict) -> list[CheckRecord]:
    out: list[CheckRecord] = []
    for d, N in cfg.geometries:
        pre = f"levy.d{d}_N{N}."
        for seed in range(cfg.pairs):
            def run(d=d, N=N, seed=seed):
                model = random_levy_pair(d, N, seed)
                rng = np.random.default_rng([seed, d, N, 1])
                ms = [rng.exponential(1.0, N**d) for _ in range(cfg.k)]
                r = levy_derivative(model, CafProductSpec(tuple(ms)), tol=tol["fd"])
                yield _record(seed, pre + "forms", ANCHORS["levy_forms"], "rel", r.analytic, r.analytic_alt,
                              tol["forms"], error=r.forms_rel_error)
                yield _record(seed, pre + "fd", ANCHORS["levy_fd"], "rel", r.analytic, r.richardson,
                              tol["fd"], error=r.rel_error)

            _guarded(out, seed, pre + "fd", "levy_fd", run)
    return out


def mc_rotation_test(sampler: LoopSampler, samples: int, seed: int) -> tuple[float, float]:
    """Chi-squared test of the base point after a uniform random rotation.

    Each loop is rotated by ``U * lifetime``; if the loop measure is
    rotation invariant the new base point still follows the base law.
    Returns ``(statistic, p_value)``.
    """
    pi = base_distribution(sampler.spec)
    counts = np.zeros(len(pi))
    for i in range(samples):
        rng = sample_stream(seed, i)
        loop = sampler.sample(rng)
        rotated = rotate_loop(loop, rng.random() * loop.lifetime)
        counts[rotated.base] += 1
    keep = pi * samples >= 5  # merge sparse cells into one bin
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(pi[keep], pi[~keep].sum()) * samples
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    if len(obs) < 2:
        return 0.0, 1.0
    stat, p = scipy.stats.chisquare(obs, exp)
    return float(stat), float(p)


def _mc_checks(cfg: McConfig, tol: dict) -> list[CheckRecord]:
    out: list[CheckRecord] = []
    for cseed in cfg.chains:
        def run(cseed=cseed):
            inst = generate_random_instance(cfg.params, cseed)
            spec = (RestrictedLoopMeasureSpec(inst.chain, *cfg.window) if cfg.window
                    else RestrictedLoopMeasureSpec.default(inst.chain))
            sampler = LoopSampler(spec)
            ms = inst.measures
            for k, measures in ((1, [ms[0]]), (2, [ms[0], ms[1 % len(ms)]])):
                est, se = estimate_restricted_moment(spec, measures, cfg.samples, cfg.seed + k, sampler)
                exact = restricted_moment_oracle(spec, measures)
                z = abs(est - exact) / se if se > 0 else (0.0 if est == exact else math.inf)
                yield _record(cseed, f"mc.moment_k{k}", ANCHORS["mc_moment"], "z", est, exact, tol["mc_z"], error=z,
                              message=f"stderr={se:.6g}")
            stat, p = mc_rotation_test(sampler, cfg.rotation_samples or cfg.samples, cfg.seed + 100)
            yield _record(cseed, "mc.rotation_chi2", ANCHORS["mc_rotation"], "pvalue", stat, 0.0, tol["chi2_p"], error=p)

        _guarded(out, cseed, "mc.moment", "mc_moment", run)
    return out


# -- driver -------------------------------------------------------------------------

_FAMILY_GROUPS = {
    "identities": _identity_checks,
    "norms": _norm_checks,
    "killing": _killing_checks,
    "jump": _jump_checks,
}


def _instance(fam: FamilyConfig, seed: int) -> RandomInstance:
    if fam.chain is not None:
        ms = [RevuzMeasure(w, fam.chain.m) for w in fam.measures]
        return RandomInstance(seed, fam.chain, ms, None)
    return generate_random_instance(fam.params, seed)


def _run_instance(fam: FamilyConfig, seed: int, groups: list[str], tol: dict) -> list[CheckRecord]:
    try:
        inst = _instance(fam, seed)
    except Exception as exc:
        return [_failure(seed, fam.label + ".generate", "seeded random instance generation", exc)]
    out = []
    for g in groups:
        if g in _FAMILY_GROUPS:
            out.extend(_FAMILY_GROUPS[g](fam, inst, tol))
    return out


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def versions() -> dict:
    return {
        "loop_perturb": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def run_suite(config: ExperimentConfig | dict | str | Path, groups: list[str] | None = None) -> RunReport:
    """Run the requested check groups (default: the config's ``checks``)."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    groups = list(cfg.checks if groups is None else groups)
    tol = cfg.tolerances
    jobs: list[Callable[[], list[CheckRecord]]] = []
    for fam in cfg.families:
        if any(g in _FAMILY_GROUPS for g in groups):
            for seed in fam.seeds:
                jobs.append(lambda fam=fam, seed=seed: _run_instance(fam, seed, groups, tol))
    if "levy" in groups and cfg.levy is not None:
        jobs.append(lambda: _levy_checks(cfg.levy, tol))
    if "mc" in groups and cfg.mc is not None:
        jobs.append(lambda: _mc_checks(cfg.mc, tol))

    workers = _threads()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda f: f(), jobs))
    else:
        results = [f() for f in jobs]
    records = sorted((r for rs in results for r in rs), key=lambda r: (r.seed, r.name))
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    echo = {**cfg.raw, "groups_run": groups}
    return RunReport(echo, records, stamp, versions())
