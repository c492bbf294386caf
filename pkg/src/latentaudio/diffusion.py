"""v-objective diffusion: noise schedule, training targets, DPM-Solver++
sampling with classifier-free guidance, and end-to-end generation.

The continuous-time cosine schedule keeps alpha(t)^2 + sigma(t)^2 = 1.
Sampling runs the second-order multistep DPM-Solver++ in data-prediction
form over a log-SNR-uniform time grid from t ~ 1 down to t_min.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from . import tensorstore
from .audio import Waveform, trim_trailing_silence
from .autoencoder import AudioAutoencoder, AutoencoderConfig, LatentSeq
from .conditioning import Conditioner, TextEmbedder, TimingCondition, ToyTextEmbedder
from .dit import DiffusionTransformer, DitConfig
from .errors import DataError, NumericError

T_MIN = 1e-4  # endpoint clamp: sigma(0) = 0 and log-SNR(1) diverge


@dataclass
class NoiseSchedule:
    """Continuous (alpha, sigma) schedule on t in [0, 1]."""

    kind: str = "cosine"

    def __post_init__(self):
        if self.kind != "cosine":
            raise DataError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t):
        t = torch.as_tensor(t)
        return torch.cos(0.5 * math.pi * t)

    def sigma(self, t):
        t = torch.as_tensor(t)
        return torch.sin(0.5 * math.pi * t)

    def log_snr(self, t):
        """lambda(t) = log(alpha / sigma); decreasing in t."""
        t = torch.as_tensor(t, dtype=torch.float64)
        return torch.log(self.alpha(t)) - torch.log(self.sigma(t))

    def t_of_log_snr(self, lam):
        lam = torch.as_tensor(lam, dtype=torch.float64)
        return (2.0 / math.pi) * torch.atan(torch.exp(-lam))


@dataclass
class SamplerConfig:
    steps: int = 100
    cfg_scale: float = 7.0
    order: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.order not in (1, 2):
            raise DataError(f"order must be 1 or 2, got {self.order}")


def _coeffs(s: NoiseSchedule, t, like: torch.Tensor):
    a = s.alpha(t).to(like.dtype)
    b = s.sigma(t).to(like.dtype)
    if a.dim() > 0 and a.dim() < like.dim():
        shape = list(a.shape) + [1] * (like.dim() - a.dim())
        a = a.reshape(shape)
        b = b.reshape(shape)
    return a, b


def noise(x0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Forward noising: x_t = alpha(t) * x0 + sigma(t) * eps."""
    a, b = _coeffs(s, t, x0)
    return a * x0 + b * eps


def v_target(x0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Training target: v = alpha(t) * eps - sigma(t) * x0."""
    a, b = _coeffs(s, t, x0)
    return a * eps - b * x0


def x0_from_v(x_t: torch.Tensor, v: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    a, b = _coeffs(s, t, x_t)
    return a * x_t - b * v


def eps_from_v(x_t: torch.Tensor, v: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    a, b = _coeffs(s, t, x_t)
    return b * x_t + a * v


def cfg_combine(cond_v: torch.Tensor, uncond_v: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + scale * (cond - uncond).

    scale 1 short-circuits to the conditional prediction exactly, so
    guidance-off sampling is bit-identical to conditional-only sampling.
    """
    if scale == 1.0:
        return cond_v
    return uncond_v + scale * (cond_v - uncond_v)


def dpm_solver_pp(
    model,
    cond,
    cfg: SamplerConfig,
    s: NoiseSchedule,
    shape: tuple[int, ...],
    null_cond=None,
    t_min: float = T_MIN,
    latent_rate: float = 44100 / 2048,
) -> LatentSeq:
    """Multistep DPM-Solver++ (data prediction) from t ~ 1 down to t_min.

    ``model`` maps (x_t, t, cond) -> v. When ``cfg.cfg_scale != 1`` the
    model is also called with ``null_cond`` at every step and the two
    predictions are combined by classifier-free guidance. The time grid is
    uniform in log-SNR; the final update is first-order for stability.
    """
    if cfg.cfg_scale != 1.0 and null_cond is None:
        raise DataError("cfg_scale != 1 requires null conditioning")
    lam_grid = torch.linspace(
        s.log_snr(1.0 - t_min).item(), s.log_snr(t_min).item(), cfg.steps + 1, dtype=torch.float64
    )
    ts = s.t_of_log_snr(lam_grid)
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    x = torch.randn(shape, generator=gen)

    def predict_x0(x_t: torch.Tensor, t: float, step: int) -> torch.Tensor:
        v = model(x_t, t, cond)
        if cfg.cfg_scale != 1.0:
            v = cfg_combine(v, model(x_t, t, null_cond), cfg.cfg_scale)
        if not torch.isfinite(v).all():
            raise NumericError(f"non-finite model output at sampler step {step}")
        a, b = _coeffs(s, t, x_t)
        return a * x_t - b * v

    history: list[tuple[float, torch.Tensor]] = []
    history.append((float(lam_grid[0]), predict_x0(x, float(ts[0]), 0)))
    for i in range(1, cfg.steps + 1):
        lam_prev, lam = float(lam_grid[i - 1]), float(lam_grid[i])
        h = lam - lam_prev
        t_i, t_prev = float(ts[i]), float(ts[i - 1])
        a_i = s.alpha(t_i).to(x.dtype)
        sig_i = s.sigma(t_i).to(x.dtype)
        sig_prev = s.sigma(t_prev).to(x.dtype)
        phi = math.expm1(-h)
        use_second = cfg.order == 2 and len(history) >= 2 and i < cfg.steps
        if use_second:
            (lam_pp, x0_pp), (lam_p, x0_p) = history[-2], history[-1]
            r = (lam_p - lam_pp) / h
            d1 = (x0_p - x0_pp) / r
            x = (sig_i / sig_prev) * x - a_i * phi * (x0_p + 0.5 * d1)
        else:
            x0_p = history[-1][1]
            x = (sig_i / sig_prev) * x - a_i * phi * x0_p
        if i < cfg.steps:
            history.append((lam, predict_x0(x, t_i, i)))
            history = history[-2:]
    return LatentSeq(values=x, latent_rate=latent_rate)


@dataclass
class GenerationModels:
    """Everything needed to turn a prompt into audio."""

    autoencoder: AudioAutoencoder
    dit: DiffusionTransformer
    conditioner: Conditioner
    text_embedder: TextEmbedder
    latent_frames: int = 1024


def generate(
    prompt: str,
    seconds_total: float,
    sampler: SamplerConfig,
    models: GenerationModels,
    schedule: NoiseSchedule | None = None,
    trim: bool = True,
    trim_threshold_db: float = -60.0,
) -> Waveform:
    """Sample a latent sequence for the prompt, decode it and trim silence.

    The latent window is fixed (default 1024 frames ~ 47.55 s); the timing
    condition (0, seconds_total) tells the model how much of it to fill.
    """
    tc = TimingCondition(seconds_start=0.0, seconds_total=seconds_total)
    schedule = schedule or NoiseSchedule()
    tokens, mask = models.text_embedder.embed(prompt)
    conditioner = models.conditioner

    def model_fn(x_t, t, which):
        with torch.no_grad():
            if which == "cond":
                bundle = conditioner.bundle(tokens, mask, tc, t)
            else:
                bundle = conditioner.null_bundle(tc, t)
            return models.dit(x_t, bundle)

    cfg_ae = models.autoencoder.cfg
    z = dpm_solver_pp(
        model_fn,
        "cond",
        sampler,
        schedule,
        shape=(cfg_ae.latent_channels, models.latent_frames),
        null_cond="null",
        latent_rate=cfg_ae.latent_rate,
    )
    with torch.no_grad():
        samples = models.autoencoder.decode(z)
    w = Waveform(samples=samples.cpu().numpy(), sample_rate=cfg_ae.sample_rate)
    if trim:
        w = trim_trailing_silence(w, threshold_db=trim_threshold_db)
    return w


def save_generation_models(out_dir: str | Path, models: GenerationModels) -> None:
    """Write the model bundle as tensor containers under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensorstore.save_state_dict(
        out / "autoencoder.ltc", models.autoencoder.state_dict(),
        manifest={"kind": "autoencoder", "config": asdict(models.autoencoder.cfg)},
    )
    tensorstore.save_state_dict(
        out / "dit.ltc", models.dit.state_dict(),
        manifest={"kind": "dit", "config": asdict(models.dit.cfg)},
    )
    tensorstore.save_state_dict(
        out / "conditioner.ltc", models.conditioner.state_dict(),
        manifest={
            "kind": "conditioner",
            "text_dim": models.conditioner.text_dim,
            "embed_dim": models.conditioner.embed_dim,
            "latent_frames": models.latent_frames,
        },
    )


def load_generation_models(in_dir: str | Path, text_embedder: TextEmbedder | None = None) -> GenerationModels:
    """Load a bundle written by :func:`save_generation_models`."""
    src = Path(in_dir)
    ae_state, ae_manifest = tensorstore.load_state_dict(src / "autoencoder.ltc")
    ae = AudioAutoencoder(AutoencoderConfig(**ae_manifest["config"]))
    ae.load_state_dict(ae_state)
    dit_state, dit_manifest = tensorstore.load_state_dict(src / "dit.ltc")
    dit = DiffusionTransformer(DitConfig(**dit_manifest["config"]))
    dit.load_state_dict(dit_state)
    cond_state, cond_manifest = tensorstore.load_state_dict(src / "conditioner.ltc")
    conditioner = Conditioner(cond_manifest["text_dim"], cond_manifest["embed_dim"])
    conditioner.load_state_dict(cond_state)
    embedder = text_embedder or ToyTextEmbedder(cond_manifest["text_dim"])
    if embedder.dim != cond_manifest["text_dim"]:
        raise DataError(
            f"text embedder dim {embedder.dim} does not match bundle text_dim "
            f"{cond_manifest['text_dim']}"
        )
    return GenerationModels(
        autoencoder=ae,
        dit=dit,
        conditioner=conditioner,
        text_embedder=embedder,
        latent_frames=int(cond_manifest.get("latent_frames", 1024)),
    )
