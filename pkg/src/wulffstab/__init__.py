"""Anisotropic geometry and stability checks around Wulff shapes.

Core objects: :class:`~wulffstab.integrand.EllipticIntegrand` (the anisotropy),
:class:`~wulffstab.grid.GridDomain` / :class:`~wulffstab.grid.ScalarField`
(lattice fields on star-shaped bodies), the torsion-potential solver in
:mod:`wulffstab.torsion`, sampled hypersurfaces with anisotropic curvature in
:mod:`wulffstab.surface`, and the deficit/identity/stability machinery in
:mod:`wulffstab.analysis`.
"""

from .integrand import (EllipticIntegrand, ValidationReport, IntegrandError,
                        EllipticityError, GaugeSolveError,
                        quasi_uniform_directions, random_directions)
from .grid import (GridDomain, ScalarField, FHessianField, FieldSampler,
                   f_calculus, volume_integral, GridError, ResolutionError)
from .surface import (SampledHypersurface, sample_star, aniso_curvature,
                      surface_integral, extract_level_set, SurfaceError,
                      SphereProfile, WulffProfile, PerturbedWulffProfile,
                      DumbbellProfile, StarLevelFn, GaugeLevelFn)
from .torsion import (TorsionSolution, solve_torsion, exact_wulff_ball,
                      boundary_trace, one_sided_neighborhood, SolveError,
                      torsion_c0_bound, wulff_body_volume)
from .analysis import (WulffSphere, DeficitReport, analyze_case,
                       stability_experiment, hk_deficit, reilly_residual,
                       alexandrov_deficit, serrin_deficit, pohozaev_residual,
                       p_function, fit_wulff, hausdorff_distance,
                       radial_gauge_distance, good_slice, pinching_check,
                       minkowski_residual, surface_volume, frak_h,
                       thm11_quantity, AnalysisError, MeanConvexityError)

__all__ = [
    "EllipticIntegrand", "ValidationReport", "IntegrandError",
    "EllipticityError", "GaugeSolveError",
    "quasi_uniform_directions", "random_directions",
    "GridDomain", "ScalarField", "FHessianField", "FieldSampler",
    "f_calculus", "volume_integral", "GridError", "ResolutionError",
    "SampledHypersurface", "sample_star", "aniso_curvature",
    "surface_integral", "extract_level_set", "SurfaceError",
    "SphereProfile", "WulffProfile", "PerturbedWulffProfile",
    "DumbbellProfile", "StarLevelFn", "GaugeLevelFn",
    "TorsionSolution", "solve_torsion", "exact_wulff_ball", "boundary_trace",
    "one_sided_neighborhood", "SolveError", "torsion_c0_bound",
    "wulff_body_volume",
    "WulffSphere", "DeficitReport", "analyze_case", "stability_experiment",
    "hk_deficit", "reilly_residual", "alexandrov_deficit", "serrin_deficit",
    "pohozaev_residual", "p_function", "fit_wulff", "hausdorff_distance",
    "radial_gauge_distance", "good_slice", "pinching_check",
    "minkowski_residual", "surface_volume", "frak_h", "thm11_quantity",
    "AnalysisError", "MeanConvexityError",
]

__version__ = "0.1.0"
