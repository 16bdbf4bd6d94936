"""Score-based diffusion models for data supported on embedded manifolds.

Constrained manifolds (hyperplane, sphere, SO(k), triangle meshes), isotropic
and normal-boosted perturbations, four training objectives, reverse-SDE and
annealing samplers, quadrature oracles and two-sample metrics.
"""
from .config import PRESETS, ExperimentConfig, derive_rng
from .errors import *  # noqa: F401,F403
from .experiments import RunReport, run_experiment, run_seed, verify_theorems
from .manifold import (Circle, Hyperplane, Manifold, SpecialOrthogonal, Sphere, TriangleMesh,
                       build_manifold, icosahedron, read_obj, write_obj)
from .network import ScoreModel
from .noise import NoiseSchedule, perturb_iso, perturb_niso, sigma_det, sigma_inverse_apply
from .samplers import SampleConfig, annealing_sde_sample, reverse_sde_sample

__version__ = "0.1.0"
