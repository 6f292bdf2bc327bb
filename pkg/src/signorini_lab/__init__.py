"""Desk-scale laboratory for incompressible Signorini energies."""

from .geometry import (
    Mesh,
    MeshError,
    ObstacleError,
    ObstacleSet,
    build_box_mesh,
    build_unit_cube_mesh,
    extract_obstacle,
    integrate_surface,
    integrate_volume,
    read_mesh_file,
    write_mesh_file,
)
from .kinematics import (
    DeformationField,
    DisplacementField,
    determinant_expansion_check,
    extract_displacement,
    optimal_rotation,
    rebuild_deformation,
    translations,
)
from .loads import (
    AdmissibilityReport,
    KernelClass,
    LoadError,
    LoadSpec,
    Rotation,
    affine_field,
    classify_kernel,
    constant_field,
    eval_load,
    eval_load_affine,
    find_load_center,
    nodal_field,
    phi,
    read_load_file,
    resultant_and_torque,
    verify_global_admissibility,
)
from .material import (
    MaterialError,
    MaterialModel,
    elastic_tensor,
    incompressible_energy,
    quadratic_form_QI,
    verify_taylor_remainder,
    yeoh_energy,
    yeoh_material,
)
from .recovery import (
    FlowDomainError,
    FlowResult,
    RecoveryStep,
    SmoothField,
    UnderResolvedError,
    bogovskii_correct,
    build_recovery_sequence,
    integrate_flow,
    make_divergence_free,
    mollify,
    verify_upper_bound,
)
from .solvers import (
    NonlinearProblem,
    QuadraticProblem,
    SolveFailure,
    SolveResult,
    Variant,
    eval_limit,
    max_load_over_kernel,
    minimize_limit,
    minimize_nonlinear,
    nonlinear_energy,
    optimal_shear_b,
    tilde_lift,
)
from .harness import (
    ConvergenceRecord,
    ExperimentConfig,
    ExperimentError,
    ExperimentReport,
    emit_outputs,
    parse_config,
    run_experiment,
    sandwich_check,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
