"""reuselab: a desk-scale laboratory for attention-map reuse in diffusion sampling."""

from .analysis import (
    ExponentialFit,
    PerturbationReport,
    SimilarityCurve,
    attention_distance,
    fit_exponential,
    perturbation_sweep,
    similarity_curve,
)
from .checkpoint import load_weights, save_weights
from .metrics import CostModel, CostTally, l1_image_distance, latency_estimate, psnr
from .model import (
    AttentionDirective,
    AttentionObservation,
    AttentionSite,
    ModelWeights,
    PromptSpec,
    all_prompts,
    cfg_predict,
    init_weights,
    predict_noise,
)
from .numerics import SeededRng, gaussian, matmul, softmax_rows
from .reuse import AttentionCache, ReuseConfig, StrategyVector, cache_memory_bytes
from .sampler import (
    NoiseSchedule,
    SampleResult,
    SamplerConfig,
    ddim_step,
    make_schedule,
    multistep2_step,
    sample,
)
from .search import (
    SearchConfig,
    SearchReport,
    UtilityEvaluator,
    bit_flip_set,
    exhaustive_search,
    hurry,
    phast_search,
)
from .train import TrainConfig, TrainResult, generate_dataset, train_toy

__version__ = "0.1.0"
