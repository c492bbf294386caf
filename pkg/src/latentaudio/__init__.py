"""Desk-scale latent-diffusion text-to-audio toolkit.

Library surface: stereo waveform handling and WAV I/O, a variational
audio autoencoder with chunked decoding, a conditioned diffusion
transformer, v-objective training, DPM-Solver++ sampling with
classifier-free guidance, metadata-to-prompt construction, embedding
deduplication, and audio quality metrics. The ``latentaudio`` command
exposes the same functionality from the shell.
"""

from .audio import ChunkPolicy, Waveform, load_wav, ms_lr_split, sample_chunks, save_wav, trim_trailing_silence
from .autoencoder import (
    AudioAutoencoder,
    AutoencoderConfig,
    GaussianLatentParams,
    LatentSeq,
    receptive_field_latents,
    reparameterize,
    snake,
)
from .conditioning import (
    Conditioner,
    ConditioningBundle,
    ImportedTextEmbedder,
    TextEmbedder,
    TimingCondition,
    ToyTextEmbedder,
    import_text_embeddings,
    timestep_embed,
    timing_features,
    toy_text_embed,
)
from .datapipe import (
    EmbeddingIndex,
    RecordingMetadata,
    build_prompt,
    dedup_scan,
    detect_music,
    memorization_candidates,
)
from .diffusion import (
    GenerationModels,
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    dpm_solver_pp,
    eps_from_v,
    generate,
    load_generation_models,
    noise,
    save_generation_models,
    v_target,
    x0_from_v,
)
from .dit import DiffusionTransformer, DitConfig, rope_half
from .errors import DataError, NumericError
from .evalkit import (
    EmbeddingStats,
    PromptFilterList,
    clap_score,
    default_filter_list,
    filter_prompts,
    frechet_distance,
    mean_kl,
    mel_distance,
    si_sdr,
    stft_distance,
)
from .losses import DiscriminatorBank, MrstftConfig, adversarial_step, kl_regularizer, mrstft_loss
from .trainer import TrainConfig, lr_at, train_autoencoder, train_dit

__version__ = "0.1.0"
