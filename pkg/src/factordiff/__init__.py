"""Conditional denoising diffusion on a synthetic factor world.

A desk-scale library: noise schedules and exact posterior algebra,
one-step / midpoint / improved-midpoint clean-state estimators, a small
cross-attention conditional denoiser with exact gradients, composite
identity/expression training losses, oracle-validated sampler benchmarks,
and reproducible sampling/ablation studies with a CLI.
"""

from .numerics import Rng, OptimState, adamw_step, gauss, grad_check
from .schedule import (NoiseSchedule, make_linear_schedule, posterior_coeffs,
                       posterior_step, q_sample)
from .samplers import (METHODS, SamplerConfig, compare_estimators, estimate_x0,
                       generate, improved_midpoint_estimate, midpoint_estimate,
                       one_step_x0)
from .world import (FactorSample, OracleEncoders, WorldSpec, build_world,
                    decode, derive_encoders, encode_exp, encode_id, exp_travel,
                    id_embeddings, make_sample, mask_background,
                    oracle_denoiser_gaussian, oracle_denoiser_pointmass,
                    sample_world)
from .denoiser import (ConditionBundle, DenoiserConfig, DenoiserParams,
                       build_condition, backward, forward, init_params,
                       make_denoiser)
from .training import (ESTIMATORS, NumericFailure, TrainConfig, TrainState,
                       init_training, load_checkpoint, loss_dm, loss_exp,
                       loss_id, run_training, save_checkpoint, total_loss,
                       train_step)
from .metrics import (MetricsReport, metric_exp_error, metric_id_retrieval,
                      metric_mse, metric_pose_error)
from .studies import StudyReport, evaluate_model, run_ablation_study, run_sampling_study

__version__ = "0.1.0"
