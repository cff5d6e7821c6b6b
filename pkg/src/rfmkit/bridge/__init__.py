"""Bridge densities, population fields and perturbations."""
from .fields import (BridgeConditionalField, FunctionField, LinearField, PerturbedField,
                     VelocityField, ZeroField, check_time)
from .perturb import MODES, make_perturbation, perturb_field
from .spd import (RiemannianGaussianPrior, SpdImportanceField, WishartTarget, moment_condition,
                  psi_map, spd_conditional_log_density, spd_log_Jt, spd_log_jacobian)
from .sphere import (AtomicSphereBridge, AtomicTarget, HarmonicSphereBridge, HarmonicTarget,
                     RegularityConstants, SphereBridge, SpherePopulationField, SphereTarget, UniformSpherePrior, UniformTarget,
                     VMFTarget, harmonic_coefficients, make_sphere_bridge, make_sphere_target,
                     sphere_constants, sphere_dlogJ_dr, sphere_jacobian_Jt)

__all__ = [
    "AtomicSphereBridge", "AtomicTarget",
    "BridgeConditionalField", "FunctionField", "HarmonicSphereBridge", "HarmonicTarget",
    "LinearField", "MODES", "PerturbedField", "RegularityConstants", "RiemannianGaussianPrior",
    "SpdImportanceField", "SphereBridge", "SpherePopulationField", "SphereTarget",
    "UniformSpherePrior", "UniformTarget", "VMFTarget", "VelocityField", "WishartTarget",
    "ZeroField", "check_time", "harmonic_coefficients", "make_perturbation",
    "make_sphere_bridge", "make_sphere_target", "moment_condition", "perturb_field", "psi_map",
    "spd_conditional_log_density", "spd_log_Jt", "spd_log_jacobian", "sphere_constants",
    "sphere_dlogJ_dr", "sphere_jacobian_Jt",
]
