"""Loop measures of finite transient Markov chains: exact cyclic moments,
perturbation derivatives, proper norms and Monte-Carlo loop sampling."""

from __future__ import annotations

__version__ = "0.1.0"

from .chain_model import (
    GreenKernel,
    SqrtKernel,
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
from . import errors
from .levy_lattice import LevyTorusModel, exponent_family, fourier_moment, levy_potential, psi_norm
from .loop_moments import (
    CafProductSpec,
    CyclicKind,
    bridge_moment,
    caf_moment,
    enumerate_cyclic,
    insertion_identity_check,
    phi_moment,
)
from .loop_sampler import (
    LoopSample,
    LoopSampler,
    RestrictedLoopMeasureSpec,
    estimate_restricted_moment,
    evaluate_restricted_caf,
    restricted_mass,
    rotate_loop,
    sample_loop,
)
from .measure_space import FiniteMeasure, NormTag, RevuzMeasure, proper_norm_certificate, u2inf_norm, w_norm
from .perturbation import (
    JumpPerturbation,
    fd_derivative,
    jump_derivative,
    jump_perturbed_potential,
    killing_derivative,
    levy_derivative,
)
