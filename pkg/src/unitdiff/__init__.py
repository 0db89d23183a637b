"""Diffusion over discrete speech-style units via a continuous K-means space.

The package implements a hybrid diffusion process (Gaussian forward
corruption in a codebook embedding space, discrete backward sampling),
multinomial and absorbing discrete-diffusion baselines, a small trainable
denoiser with verified gradients, and a synthetic unit-translation
benchmark for comparing the three systems.
"""

from .codebook import (
    Codebook,
    embed,
    fit_kmeans,
    knn_perturb,
    load_codebook,
    make_structured_codebook,
    min_centroid_gap,
    quantize,
    save_codebook,
)
from .schedule import (
    NoiseSchedule,
    linear_schedule,
    posterior_sample,
    q_sample,
    subset_trajectory,
    uniform_schedule,
)
from .baselines import (
    CorruptionKind,
    absorbing_q_sample,
    absorbing_reverse_step,
    baseline_sample,
    multinomial_q_sample,
    multinomial_reverse_step,
)
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    TrainingDiverged,
    desk_config,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    sequence_nll,
    train,
)
from .hybrid import (
    SamplerConfig,
    forward_corrupt,
    intermediate_quality,
    knn_accuracy_curve,
    sample,
    sample_with_length_beam,
    sample_without_kmeans_mapping,
    training_loss,
)
from .synthbench import (
    Dataset,
    MetricsReport,
    SynthPair,
    evaluate_system,
    generate_dataset,
    levenshtein,
    load_dataset_jsonl,
    meta_bleu,
    save_dataset_jsonl,
    unit_accuracy,
)
from .rng import derive_seed

__version__ = "0.1.0"
