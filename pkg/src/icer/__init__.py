"""Information-regularized edit inversion on synthetic forward models."""

from .decoder import PairedAsset, ResidualDecoder, als_fit, decode, encode, make_paired_assets
from .design import (IcerConfig, IcerResult, WeightState, design_step, design_weights, icer_objective,
                     logit_gradient, run_icer, topk_keyframes, weight_partial, weights_from_logits)
from .errors import *  # noqa: F401,F403
from .forward import FrameConstraint, FrameState, ForwardModel, hvp_phi, make_model, model_from_spec
from .information import FrameInfo, InfoCache, assemble, build_cache, build_frame_info, conditioning_report
from .inversion import LossConfig, fit_code, frame_loss, objective_gradient, preconditioned_step
from .scenario import RunResult, Scenario, evaluate, generate_scenario, load_scenario, save_scenario
from .spd import SpdMatrix, cholesky, logdet, solve, trace_solve_product

__version__ = "0.1.0"
