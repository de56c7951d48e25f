"""Large deviations of switching diffusions on Riemannian manifolds.

Submodules:

geometry     manifolds (R^d, flat torus, unit sphere), charts, exp/log, transport
switching    rate matrices, invariant measures, Donsker-Varadhan functional
models       drift and rate-field families and the Model bundle
hamiltonian  principal-eigenvalue Hamiltonian and its Legendre transform
dynamics     Monte Carlo simulation and the pre-limit / limit generators
variational  actions, optimal curves, Hopf-Lax, resolvent and semigroup
lab          experiment configs, Monte Carlo studies, persistence and CLI
"""
from .errors import (ChartDomain, ConfigError, ContractViolation, CutLocus, GeoLDPError,
                     InsufficientData, InvalidGenerator, NoUniqueInvariant, NumericalFailure)
from .geometry import (CotangentVector, Euclidean, ManifoldPoint, ScalarField, Sphere2,
                       TangentVector, Torus2, distance, exp_map, laplace_beltrami, log_map,
                       manifold_from_id, parallel_transport, point)
from .switching import averaged_drift, donsker_varadhan, invariant_measure, validate_generator
from .models import Model, build_model, brownian, symmetric_twostate
from .hamiltonian import (double_transform, grad_p_hamiltonian, hamiltonian,
                          hamiltonian_variational, legendre)
from .curves import Curve, geodesic_curve
from .dynamics import SimConfig, simulate, simulate_averaged, simulate_batch
from .variational import (ResolventConfig, action, growth_constants, hopf_lax, optimal_curve,
                          resolvent, semigroup, viscosity_residual)

__version__ = "0.1.0"
