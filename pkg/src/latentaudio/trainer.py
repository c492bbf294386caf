"""Optimization loops: two-phase autoencoder training (full model, then
frozen-encoder decoder-only), and v-objective training for the diffusion
transformer with conditioning dropout.

All models train with decoupled AdamW and a learning rate that ramps up
exponentially and decays exponentially. Training is deterministic for a
fixed seed in single-threaded mode; a NaN loss aborts with diagnostics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import tensorstore
from .autoencoder import AudioAutoencoder, AutoencoderConfig, GaussianLatentParams, reparameterize
from .conditioning import Conditioner, TextEmbedder, TimingCondition, ToyTextEmbedder
from .diffusion import NoiseSchedule, noise, v_target
from .dit import DiffusionTransformer, DitConfig, collate_bundles
from .errors import DataError, NumericError
from .losses import DiscriminatorBank, MrstftConfig, adversarial_step, kl_regularizer, mrstft_loss

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
AE_CHUNK_FRAMES = 65536  # ~1.5 s batch chunks at 44.1kHz
DIT_BASE_LR = 5e-5


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    disc_lr: float = 3e-4
    weight_decay: float = 0.001
    warmup_steps: int = 1000
    decay_rate: float = 0.1
    batch_size: int = 4
    max_steps: int = 500
    phase: str = "ae_full"  # ae_full | ae_decoder_only | dit
    cond_dropout: float = 0.10

    def __post_init__(self):
        if self.base_lr <= 0 or self.disc_lr <= 0:
            raise DataError("learning rates must be positive")
        if not (0 <= self.cond_dropout < 1):
            raise DataError("cond_dropout must lie in [0, 1)")
        if self.phase not in ("ae_full", "ae_decoder_only", "dit"):
            raise DataError(f"unknown phase {self.phase!r}")
        if self.warmup_steps < 1 or self.max_steps < 1 or self.batch_size < 1:
            raise DataError("warmup_steps, max_steps and batch_size must be >= 1")
        if self.decay_rate <= 0:
            raise DataError("decay_rate must be positive")


@dataclass
class LossWeights:
    reconstruction: float = 1.0
    adversarial: float = 0.1
    feature_match: float = 5.0
    kl: float = 1e-4


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Exponential ramp-up times exponential decay; 0 at step 0."""
    if step < 0:
        raise DataError("step must be >= 0")
    ramp = 1.0 - math.exp(-step / cfg.warmup_steps)
    decay = cfg.decay_rate ** (step / cfg.max_steps)
    return cfg.base_lr * ramp * decay


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _check_finite(step: int, terms: dict[str, float]) -> None:
    bad = {k: v for k, v in terms.items() if not math.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss at step {step}: {bad} (all terms: {terms})")


@dataclass
class AutoencoderTrainResult:
    autoencoder: AudioAutoencoder
    discriminators: DiscriminatorBank
    phase1_history: list[dict]
    phase2_history: list[dict]
    encoder_hashes: list[str]
    checkpoints: dict[str, str] = field(default_factory=dict)


def _ae_batch(chunks, idx) -> torch.Tensor:
    return torch.stack(
        [torch.as_tensor(np.asarray(chunks[i]), dtype=torch.float32) for i in idx]
    )


def _ae_phase(
    ae: AudioAutoencoder,
    bank: DiscriminatorBank,
    chunks,
    cfg: TrainConfig,
    mrstft_cfg: MrstftConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    noise_seed: int,
    checkpoint_every: int,
    hash_log: list[str] | None,
) -> list[dict]:
    gen_params = [p for p in ae.parameters() if p.requires_grad]
    opt_g = torch.optim.AdamW(gen_params, lr=cfg.base_lr, betas=ADAM_BETAS,
                              eps=ADAM_EPS, weight_decay=cfg.weight_decay)
    opt_d = torch.optim.AdamW(bank.parameters(), lr=cfg.disc_lr, betas=ADAM_BETAS,
                              eps=ADAM_EPS, weight_decay=cfg.weight_decay)
    history = []
    for step in range(cfg.max_steps):
        lr = lr_at(step + 1, cfg)
        _set_lr(opt_g, lr)
        _set_lr(opt_d, lr * cfg.disc_lr / cfg.base_lr)
        idx = rng.integers(0, len(chunks), size=cfg.batch_size)
        x = _ae_batch(chunks, idx)

        mean, log_var = ae.encoder(x)
        params = GaussianLatentParams(mean=mean, log_variance=log_var)
        z = reparameterize(params, noise_seed + step).values
        y = ae.decoder(z)

        # discriminator update on detached fakes
        opt_d.zero_grad()
        d_loss, _, _ = adversarial_step(x, y.detach(), bank)
        d_loss.backward()
        opt_d.step()

        # generator update; bank weights frozen so the real branch builds no graph
        for p in bank.parameters():
            p.requires_grad_(False)
        opt_g.zero_grad()
        recon = mrstft_loss(x, y, mrstft_cfg)
        kl = kl_regularizer(params, weight=weights.kl)
        _, g_adv, fm = adversarial_step(x, y, bank)
        total = (
            weights.reconstruction * recon
            + kl
            + weights.adversarial * g_adv
            + weights.feature_match * fm
        )
        total.backward()
        opt_g.step()
        for p in bank.parameters():
            p.requires_grad_(True)

        terms = {
            "step": step,
            "lr": lr,
            "total": float(total.detach()),
            "recon": float(recon.detach()),
            "kl": float(kl.detach()),
            "g_adv": float(g_adv.detach()),
            "fm": float(fm.detach()),
            "d_loss": float(d_loss.detach()),
        }
        _check_finite(step, {k: v for k, v in terms.items() if k != "step"})
        history.append(terms)
        if hash_log is not None and (step + 1) % checkpoint_every == 0:
            hash_log.append(tensorstore.state_hash(ae.encoder.state_dict()))
    return history


def train_autoencoder(
    chunks,
    cfg_phase1: TrainConfig,
    cfg_phase2: TrainConfig,
    ae_config: AutoencoderConfig | None = None,
    mrstft_cfg: MrstftConfig | None = None,
    loss_weights: LossWeights | None = None,
    disc_channels: int = 16,
    rng_seed: int = 0,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 100,
) -> AutoencoderTrainResult:
    """Two-phase autoencoder training.

    Phase 1 updates encoder, decoder and discriminators; phase 2 freezes
    the encoder and continues on the decoder (verified by hashing the
    encoder weights around every checkpoint interval). ``chunks`` is a
    sequence of (2, frames) arrays with a common length divisible by the
    total stride.
    """
    if len(chunks) == 0:
        raise DataError("no training chunks given")
    if cfg_phase1.phase != "ae_full" or cfg_phase2.phase != "ae_decoder_only":
        raise DataError("phase configs must be ae_full then ae_decoder_only")
    frames = {np.asarray(c).shape for c in chunks}
    if len(frames) != 1:
        raise DataError(f"chunks must share one shape, got {sorted(frames)}")

    torch.manual_seed(rng_seed)
    ae = AudioAutoencoder(ae_config)
    bank = DiscriminatorBank(channels=disc_channels)
    mrstft_cfg = mrstft_cfg or MrstftConfig()
    weights = loss_weights or LossWeights()
    rng = np.random.default_rng(rng_seed)

    phase1 = _ae_phase(
        ae, bank, chunks, cfg_phase1, mrstft_cfg, weights, rng,
        noise_seed=rng_seed + 1_000_000,
        checkpoint_every=checkpoint_every, hash_log=None,
    )

    for p in ae.encoder.parameters():
        p.requires_grad_(False)
    hashes = [tensorstore.state_hash(ae.encoder.state_dict())]
    phase2 = _ae_phase(
        ae, bank, chunks, cfg_phase2, mrstft_cfg, weights, rng,
        noise_seed=rng_seed + 2_000_000,
        checkpoint_every=checkpoint_every, hash_log=hashes,
    )
    hashes.append(tensorstore.state_hash(ae.encoder.state_dict()))

    checkpoints = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ae_path = out / "autoencoder.ltc"
        tensorstore.save_state_dict(
            ae_path, ae.state_dict(),
            manifest={"kind": "autoencoder", "config": asdict(ae.cfg)},
        )
        disc_path = out / "discriminators.ltc"
        tensorstore.save_state_dict(disc_path, bank.state_dict(), manifest={"kind": "discriminators"})
        _write_csv(out / "ae_phase1_loss.csv", phase1)
        _write_csv(out / "ae_phase2_loss.csv", phase2)
        checkpoints = {"autoencoder": str(ae_path), "discriminators": str(disc_path)}

    return AutoencoderTrainResult(
        autoencoder=ae,
        discriminators=bank,
        phase1_history=phase1,
        phase2_history=phase2,
        encoder_hashes=hashes,
        checkpoints=checkpoints,
    )


@dataclass
class DitTrainResult:
    dit: DiffusionTransformer
    conditioner: Conditioner
    history: list[dict]
    null_conditioned_items: int
    checkpoints: dict[str, str] = field(default_factory=dict)


def train_dit(
    latents,
    prompts: list[str],
    cfg: TrainConfig,
    dit_config: DitConfig | None = None,
    text_embedder: TextEmbedder | None = None,
    schedule: NoiseSchedule | None = None,
    timing: list[TimingCondition] | None = None,
    rng_seed: int = 0,
    out_dir: str | Path | None = None,
) -> DitTrainResult:
    """v-objective training: predict v = alpha*eps - sigma*x0 on noised latents.

    Each step draws a batch, a uniform t per item and fresh noise; with
    probability ``cfg.cond_dropout`` the batch's text conditioning is
    replaced by the null (empty) set to enable classifier-free guidance.
    """
    if cfg.phase != "dit":
        raise DataError("config phase must be 'dit'")
    x0_all = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
    if x0_all.dim() != 3:
        raise DataError(f"latents must be (n, channels, T), got {tuple(x0_all.shape)}")
    n, channels, T = x0_all.shape
    if len(prompts) != n:
        raise DataError(f"{n} latents vs {len(prompts)} prompts")

    torch.manual_seed(rng_seed)
    dit_config = dit_config or DitConfig(latent_channels=channels)
    if dit_config.latent_channels != channels:
        raise DataError(
            f"latents have {channels} channels but DitConfig says {dit_config.latent_channels}"
        )
    model = DiffusionTransformer(dit_config)
    embedder = text_embedder or ToyTextEmbedder(dim=dit_config.embed_dim)
    conditioner = Conditioner(text_dim=embedder.dim, embed_dim=dit_config.embed_dim)
    schedule = schedule or NoiseSchedule()
    if timing is None:
        seconds = min(T * 2048 / 44100.0, 47.0)
        timing = [TimingCondition(0.0, seconds)] * n

    params = list(model.parameters()) + list(conditioner.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.base_lr, betas=ADAM_BETAS,
                            eps=ADAM_EPS, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(rng_seed)
    embed_cache = {p: embedder.embed(p) for p in set(prompts)}

    history = []
    n_null = 0
    for step in range(cfg.max_steps):
        lr = lr_at(step + 1, cfg)
        _set_lr(opt, lr)
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = torch.tensor(rng.uniform(0.0, 1.0, size=cfg.batch_size), dtype=torch.float32)
        gen = torch.Generator().manual_seed(rng_seed + 31_000_000 + step)
        x0 = x0_all[idx]
        eps = torch.randn(x0.shape, generator=gen)
        x_t = noise(x0, eps, t, schedule)
        target = v_target(x0, eps, t, schedule)

        drop_batch = cfg.cond_dropout > 0 and rng.random() < cfg.cond_dropout
        bundles = []
        for row, i in enumerate(idx):
            if drop_batch:
                n_null += 1
                bundles.append(conditioner.null_bundle(timing[i], float(t[row])))
            else:
                tokens, mask = embed_cache[prompts[i]]
                bundles.append(conditioner.bundle(tokens, mask, timing[i], float(t[row])))
        bundle = collate_bundles(bundles)

        opt.zero_grad()
        v_pred = model(x_t, bundle)
        loss = torch.mean((v_pred - target) ** 2)
        loss.backward()
        opt.step()

        terms = {"step": step, "lr": lr, "mse": float(loss.detach())}
        _check_finite(step, {"mse": terms["mse"]})
        history.append(terms)

    checkpoints = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dit_path = out / "dit.ltc"
        tensorstore.save_state_dict(
            dit_path, model.state_dict(), manifest={"kind": "dit", "config": asdict(dit_config)}
        )
        cond_path = out / "conditioner.ltc"
        tensorstore.save_state_dict(
            cond_path, conditioner.state_dict(),
            manifest={"kind": "conditioner", "text_dim": embedder.dim,
                      "embed_dim": dit_config.embed_dim, "latent_frames": T},
        )
        _write_csv(out / "dit_loss.csv", history)
        checkpoints = {"dit": str(dit_path), "conditioner": str(cond_path)}

    return DitTrainResult(
        dit=model,
        conditioner=conditioner,
        history=history,
        null_conditioned_items=n_null,
        checkpoints=checkpoints,
    )
