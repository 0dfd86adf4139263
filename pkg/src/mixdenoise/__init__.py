"""Desk-scale lab for softmax-attention denoising of Gaussian-mixture tokens.

The package trains a one-layer single-head attention model to predict the
noise injected by a forward diffusion process on multi-token Gaussian
mixture data, and verifies the trained model against exact references: a
known-means oracle estimator with a closed-form risk, the exact posterior
mean computed by subset enumeration, and the exact score function.
"""

from .diagnostics import (AttentionDiag, attention_diagnostics, mean_estimation_error,
                          qk_separation, same_pattern_mass, uniformity_deviation, vt_gap)
from .estimator import AttentionDenoiser
from .model import (Gradients, ModelParams, attention_matrix, forward, load_checkpoint,
                    sample_gradients, sample_loss, save_checkpoint)
from .oracles import (PosteriorSummary, RiskReport, bayes_mmse, bayes_posterior,
                      bayes_risk_mc, oracle_mmse, oracle_risk_closed, oracle_risk_mc,
                      score_function, score_matching_error, score_network, shrink_coef)
from .patterns import (MixtureParams, PatternSet, Sample, build_pattern_set, enumerate_nu,
                       imbalance_delta, imbalanced_proportions, mixture_params_from_json,
                       mixture_params_to_json, mixture_proportions, sample_data,
                       subset_indicators, uniform_proportions)
from .schedule import (NoiseSchedule, TimeSet, forward_noise, linear_schedule,
                       schedule_from_json, schedule_to_json, time_averaged_snr)
from .training import (DivergenceError, EvalRecord, TrainConfig, TrainTrace, evaluate,
                       init_params, run_training, train_step)

__version__ = "0.1.0"
