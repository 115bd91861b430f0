"""elastident: elasticity identification from rendered observations.

A derivative-free pipeline around a moving least squares material point
method (MLS-MPM) simulator: simulate hyperelastic objects, render proxy
observations (grayscale splats and dense flow), and recover per-object
Young's modulus and Poisson's ratio by finite-difference optimization of a
joint photometric plus flow loss.

Module map: material (parameters, conversions, recovery metric),
constitutive (fixed-corotated stress and energy), mpm (the solver),
observation (camera, splat renderer, flow, PFM/FLW1 formats), scene (scene
files and particle sampling), identify (loss and optimizer), initializer
(manual and MLLM-backed initial fields), cli (command-line entry point).
"""

from . import errors
from .constitutive import corotated_energy, kirchhoff_stress, polar_svd
from .errors import ElastidentError
from .identify import (
    ObservationSet,
    OptimizeOptions,
    fd_gradient,
    joint_loss,
    observe,
    optimize,
    read_history,
    write_history,
)
from .initializer import InitObject, InitRequest, manual_init, mllm_init
from .material import (
    LameParams,
    MaterialField,
    MaterialParams,
    derived_moduli,
    field_relative_error,
    lame_from_params,
    params_from_lame,
    relative_error,
)
from .mpm import (
    ForceEvent,
    Grid,
    Particles,
    SimConfig,
    Snapshot,
    g2p,
    grid_update,
    p2g,
    read_mpms,
    simulate,
    simulate_particles,
    substep,
    write_mpms,
)
from .observation import (
    Camera,
    epe,
    particle_flow,
    read_flow,
    read_image,
    splat_render,
    write_flow,
    write_image,
)
from .scene import (
    Scene,
    load_scene,
    parse_scene,
    read_material_field,
    write_material_field,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "ElastidentError",
    # material
    "MaterialParams",
    "LameParams",
    "MaterialField",
    "lame_from_params",
    "params_from_lame",
    "derived_moduli",
    "relative_error",
    "field_relative_error",
    # constitutive
    "polar_svd",
    "kirchhoff_stress",
    "corotated_energy",
    # mpm
    "SimConfig",
    "ForceEvent",
    "Grid",
    "Particles",
    "Snapshot",
    "p2g",
    "grid_update",
    "g2p",
    "substep",
    "simulate",
    "simulate_particles",
    "write_mpms",
    "read_mpms",
    # observation
    "Camera",
    "splat_render",
    "particle_flow",
    "epe",
    "write_image",
    "read_image",
    "write_flow",
    "read_flow",
    # scene
    "Scene",
    "parse_scene",
    "load_scene",
    "write_material_field",
    "read_material_field",
    # identify
    "ObservationSet",
    "OptimizeOptions",
    "observe",
    "joint_loss",
    "fd_gradient",
    "optimize",
    "write_history",
    "read_history",
    # initializer
    "InitObject",
    "InitRequest",
    "manual_init",
    "mllm_init",
    "__version__",
]
