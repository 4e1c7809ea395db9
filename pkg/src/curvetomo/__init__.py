"""curvetomo: dynamic tomography over level curves.

Forward transform over the level curves of a phase function, adjoint
backprojection, microlocal condition checkers (visibility, local and
semi-global Bolker), the cutoff normal operator, and iterative
normal-equation reconstruction.
"""

__version__ = "0.1.0"

from .errors import (
    BranchError,
    ConfigError,
    CoverageError,
    CurveTomoError,
    DegenerateSymbolError,
    DivergenceError,
    DomainError,
    NumericBudgetError,
    OutOfRangeError,
    SeedProjectionError,
    StallError,
)
from .geometry import (
    AffineMotion,
    BreathingMotion,
    BumpWeight,
    IdentityMotion,
    LevelCurve,
    LevelCurveFrame,
    MotionModel,
    PhaseFunction,
    Rect,
    RotationMotion,
    UnitWeight,
    Weight,
    fan_to_parallel,
    fd_derivatives,
    homogeneous_extension,
    make_dynamic_phase,
    make_fanbeam_phase,
    make_motion,
    make_static_phase,
    trace_level_curve,
)
from .microlocal import (
    CanonicalPoint,
    CovectorSample,
    SymbolValue,
    VisibilityMap,
    bolker_determinant,
    canonical_point,
    data_projection_rank,
    principal_symbol,
    homogeneous_equivalence_check,
    semiglobal_bolker_check,
    solve_time_for_direction,
    visibility_map,
)
from .operators import (
    Chart,
    CutoffAtlas,
    ImageGrid,
    LevelSetTransform,
    NormalOperator,
    SinoSpec,
    Sinogram,
    adjoint,
    apply_normal,
    build_default_atlas,
    forward_lagrangian,
    forward_levelset,
    lagrangian_to_levelset_weight,
    make_image_grid,
)
from .phantom import (
    EllipseSpec,
    WavefrontSampleSet,
    boundary_wavefront,
    default_phantom,
    recon_phantom,
    render_phantom,
    visibility_audit,
)
from .recon import (
    PerturbationTable,
    SolveReport,
    StabilityReport,
    band_limited_ensemble,
    cg_normal_solve,
    edge_response,
    h1_norm,
    landweber_solve,
    perturbation_sweep,
    stability_probe,
)
from .io_cli import (
    GeometryConfig,
    build_geometry,
    crc64,
    fanbeam_convert,
    read_grid_file,
    write_grid_file,
    write_pgm16,
)
