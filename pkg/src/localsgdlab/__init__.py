"""Desk-scale laboratory for local SGD training of tiny language models."""

__version__ = "0.1.0"

from .model import (ModelConfig, ParameterVector, TokenBatch, backward,
                    build_model, count_non_embedding, flops_per_step,
                    forward_loss, grad_check)
from .optim import (AdamWHyper, AdamWState, CosineSchedule, NesterovHyper,
                    NesterovState, adamw_step, cosine_lr, nesterov_step,
                    sgd_step)
from .perfmodel import (Topology, comm_time_per_sync, compute_time_per_step,
                        lambda_coeff, min_bandwidth, scaling_efficiency,
                        sweep_scenarios)
from .scalinglaw import (PowerLawFit, StepPenaltyFit, fit_power_law,
                         fit_step_penalty, goodness_report,
                         predict_loss_from_efficiency, predict_power_law,
                         predict_step_penalty)
