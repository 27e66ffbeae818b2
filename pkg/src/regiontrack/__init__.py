"""Region-based shape and radiance tracking through image sequences.

Shape is carried by a level set, appearance by a template radiance
resampled through a backward warp; the warp descends a Sobolev-type
gradient whose translation part is recovered before any deformation.
Occlusion and dis-occlusion are estimated explicitly each frame.
"""

from .fields import (ClosestPointMap, DegenerateRegionError, Grid2D, LevelSet,
                     RegionMask, ScalarField, VectorField, bilinear_sample,
                     closest_point_map, extend_to_narrowband,
                     gaussian_smooth_on_region, jacobian_det, signed_distance)
from .sobolev import (SobolevGradient, SolverFailureError, SourceField,
                      assemble_gradient, inner_product, solve_neumann_poisson)
from .descent import (BackwardWarp, CflViolationError, DescentConfig,
                      DescentResult, Penalty, TrackingFailureError, WarpState,
                      cfl_timestep, deformation_step, descend, displacement,
                      energy, f1_field, horn_schunck_descend,
                      horn_schunck_step, init_state, transport_backward_map,
                      translation_phase, upwind_advect_levelset)
from .occlusion import (OcclusionEstimate, beta_o_from_residual,
                        final_occlusion, residual, update_occlusion)
from .disocclusion import (DisocclusionParams, ParzenModel, detect,
                           likelihood_map)
from .tracker import (TrackerConfig, TrackerState, init, match, run, step,
                      update_radiance)
from .io_utils import (EvalReport, RunConfig, f_measure, load_frames,
                       load_mask, pr_sweep, render_flow, render_overlay,
                       save_mask)
from . import synth

__version__ = "0.1.0"
