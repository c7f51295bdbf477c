"""Temporal-calibration policy optimization on a synthetic video QA task.

A linear-softmax token policy answers temporal and spatial multiple-choice
questions about short symbol sequences. Trainers compare group-normalized
(GRPO, GSPO) advantages against rewards calibrated by a shuffled-frame
greedy baseline (TGPO variants).
"""
from .calibrate import calibrate_group, calibrated_rewards, make_baseline, shuffle_frames
from .kernels import BACKEND
from .optim import (
    AdvantageReport,
    GroupRollout,
    MiniBatch,
    Variant,
    compute_advantage,
    global_normalize,
    group_normalize,
    kl_regularizer,
    sequence_ratio,
    token_ratios,
    update_step,
)
from .policy import (
    Layout,
    PolicyParams,
    Response,
    Role,
    encode_context,
    greedy_decode,
    init_params,
    response_logprob,
    sample,
)
from .rewards import combined_reward, parse_response, score
from .trainer import TrainConfig, evaluate, reward_auc, run_training
from .vqaenv import EnvSpec, Kind, TaskInstance, generate_corpus, oracle_answer

__version__ = "0.1.0"
