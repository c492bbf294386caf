"""Command-line entry point.

One binary, subcommand style. Global flags: --config (flat JSON key/value
file), --seed, --threads, --verbose. Flags beat config values, which beat
defaults. Results go to files named in flags; progress goes to stderr.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import tensorstore
from .audio import ChunkPolicy, Waveform, load_wav, pad_to_multiple, sample_chunks, save_wav, trim_trailing_silence
from .autoencoder import AudioAutoencoder, AutoencoderConfig, LatentSeq, reparameterize
from .conditioning import ImportedTextEmbedder, ToyTextEmbedder
from .datapipe import EmbeddingIndex, RecordingMetadata, build_prompt, dedup_scan, detect_music, memorization_candidates
from .diffusion import (
    GenerationModels,
    SamplerConfig,
    generate,
    load_generation_models,
)
from .dit import DitConfig
from .errors import DataError, NumericError
from .evalkit import (
    EmbeddingStats,
    clap_score,
    frechet_distance,
    mean_kl,
    mel_distance,
    si_sdr,
    stft_distance,
)
from .trainer import AE_CHUNK_FRAMES, DIT_BASE_LR, TrainConfig, train_autoencoder, train_dit


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise DataError(f"config file {path} must hold a flat JSON object")
    return cfg


def _pick(args, config: dict, name: str, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}")


def _load_embedding_index(path: str) -> EmbeddingIndex:
    tensors, manifest = tensorstore.load_tensors(path)
    if "vectors" not in tensors:
        raise DataError(f"{path}: container has no 'vectors' tensor")
    ids = manifest.get("ids")
    if ids is None:
        raise DataError(f"{path}: manifest carries no 'ids' list")
    return EmbeddingIndex.from_raw([str(i) for i in ids], tensors["vectors"])


def save_embedding_index(path: str | Path, idx: EmbeddingIndex) -> None:
    tensorstore.save_tensors(
        path, {"vectors": idx.vectors.astype(np.float32)},
        manifest={"kind": "embedding-index", "ids": list(idx.ids)},
    )


def _load_latents(path: str) -> tuple[np.ndarray, dict]:
    tensors, manifest = tensorstore.load_tensors(path)
    if "latents" not in tensors:
        raise DataError(f"{path}: container has no 'latents' tensor")
    return tensors["latents"], manifest


def _write_rows(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _ae_config(args, config) -> AutoencoderConfig:
    channels = _pick(args, config, "ae_channels", None)
    latent = int(_pick(args, config, "latent_channels", 64))
    kwargs = {"latent_channels": latent,
              "resnet_layers_per_block": int(_pick(args, config, "resnet_layers", 2))}
    if channels:
        kwargs["block_channels"] = _parse_int_list(channels) if isinstance(channels, str) else channels
    return AutoencoderConfig(**kwargs)


def _load_or_init_models(args, config, seed: int) -> GenerationModels:
    import torch

    ckpt = _pick(args, config, "ckpt", None)
    text_dim = int(_pick(args, config, "text_dim", 64))
    embeddings_file = _pick(args, config, "text_embeddings", None)
    embedder = None
    if ckpt:
        if embeddings_file:
            manifest = tensorstore.load_tensors(Path(ckpt) / "conditioner.ltc")[1]
            embedder = ImportedTextEmbedder(embeddings_file, dim=int(manifest["text_dim"]))
        return load_generation_models(ckpt, text_embedder=embedder)
    _progress("[models] no --ckpt given; using seeded random-initialized models")
    torch.manual_seed(seed)
    from .conditioning import Conditioner
    from .dit import DiffusionTransformer

    ae_cfg = _ae_config(args, config)
    dit_cfg = DitConfig(
        depth=int(_pick(args, config, "dit_depth", 8)),
        embed_dim=int(_pick(args, config, "dit_dim", 256)),
        heads=int(_pick(args, config, "dit_heads", 8)),
        latent_channels=ae_cfg.latent_channels,
    )
    if embeddings_file:
        embedder = ImportedTextEmbedder(embeddings_file, dim=text_dim)
    else:
        embedder = ToyTextEmbedder(text_dim)
    return GenerationModels(
        autoencoder=AudioAutoencoder(ae_cfg),
        dit=DiffusionTransformer(dit_cfg),
        conditioner=Conditioner(text_dim=embedder.dim, embed_dim=dit_cfg.embed_dim),
        text_embedder=embedder,
        latent_frames=int(_pick(args, config, "latent_frames", 1024)),
    )


# ---------------------------------------------------------------- handlers


def _cmd_train_ae(args, config, seed):
    data_dir = Path(args.data)
    wavs = sorted(data_dir.glob("*.wav"))
    if not wavs:
        raise DataError(f"no .wav files under {data_dir}")
    chunk_frames = int(_pick(args, config, "chunk_frames", AE_CHUNK_FRAMES))
    policy = ChunkPolicy(chunk_seconds=chunk_frames / 44100.0,
                         max_chunks_per_recording=int(_pick(args, config, "max_chunks", 3)))
    chunks = []
    for i, path in enumerate(wavs):
        w = load_wav(path)
        for start, end in sample_chunks(w.n_frames, policy, rng_seed=seed + i):
            seg = w.samples[:, start:min(end, w.n_frames)]
            if seg.shape[1] < chunk_frames:
                seg = np.pad(seg, ((0, 0), (0, chunk_frames - seg.shape[1])))
            chunks.append(seg[:, :chunk_frames])
    _progress(f"[train-ae] {len(chunks)} chunks of {chunk_frames} frames from {len(wavs)} files")

    common = dict(
        base_lr=float(_pick(args, config, "base_lr", 1.5e-4)),
        disc_lr=float(_pick(args, config, "disc_lr", 3e-4)),
        weight_decay=float(_pick(args, config, "weight_decay", 0.001)),
        warmup_steps=int(_pick(args, config, "warmup_steps", 1000)),
        decay_rate=float(_pick(args, config, "decay_rate", 0.1)),
        batch_size=int(_pick(args, config, "batch_size", 4)),
    )
    cfg1 = TrainConfig(phase="ae_full", max_steps=int(_pick(args, config, "steps1", 500)), **common)
    cfg2 = TrainConfig(phase="ae_decoder_only", max_steps=int(_pick(args, config, "steps2", 100)), **common)
    result = train_autoencoder(
        chunks, cfg1, cfg2, ae_config=_ae_config(args, config),
        disc_channels=int(_pick(args, config, "disc_channels", 16)),
        rng_seed=seed, out_dir=args.out,
    )
    first, last = result.phase1_history[0]["recon"], result.phase1_history[-1]["recon"]
    _progress(f"[train-ae] phase1 recon {first:.4f} -> {last:.4f}; "
              f"encoder hash constant: {len(set(result.encoder_hashes)) == 1}")
    return 0


def _cmd_train_dit(args, config, seed):
    latents, _ = _load_latents(args.latents)
    if latents.ndim != 3:
        raise DataError(f"{args.latents}: expected (n, channels, T) latents")
    prompts = [line.rstrip("\n") for line in Path(args.prompts).read_text().splitlines()]
    if len(prompts) != latents.shape[0]:
        raise DataError(f"{latents.shape[0]} latents vs {len(prompts)} prompts")
    cfg = TrainConfig(
        phase="dit",
        base_lr=float(_pick(args, config, "base_lr", DIT_BASE_LR)),
        weight_decay=float(_pick(args, config, "weight_decay", 0.001)),
        warmup_steps=int(_pick(args, config, "warmup_steps", 1000)),
        decay_rate=float(_pick(args, config, "decay_rate", 0.1)),
        batch_size=int(_pick(args, config, "batch_size", 4)),
        max_steps=int(_pick(args, config, "steps", 2000)),
        cond_dropout=float(_pick(args, config, "cond_dropout", 0.10)),
    )
    dit_cfg = DitConfig(
        depth=int(_pick(args, config, "dit_depth", 8)),
        embed_dim=int(_pick(args, config, "dit_dim", 256)),
        heads=int(_pick(args, config, "dit_heads", 8)),
        latent_channels=latents.shape[1],
    )
    embeddings_file = _pick(args, config, "text_embeddings", None)
    if embeddings_file:
        embedder = ImportedTextEmbedder(embeddings_file, dim=int(_pick(args, config, "text_dim", 64)))
    else:
        embedder = ToyTextEmbedder(int(_pick(args, config, "text_dim", 64)))
    result = train_dit(latents, prompts, cfg, dit_config=dit_cfg,
                       text_embedder=embedder, rng_seed=seed, out_dir=args.out)
    _progress(f"[train-dit] mse {result.history[0]['mse']:.4f} -> {result.history[-1]['mse']:.4f} "
              f"({result.null_conditioned_items} null-conditioned items)")
    return 0


def _cmd_generate(args, config, seed):
    models = _load_or_init_models(args, config, seed)
    sampler = SamplerConfig(
        steps=int(_pick(args, config, "steps", 100)),
        cfg_scale=float(_pick(args, config, "cfg_scale", 7.0)),
        order=int(_pick(args, config, "order", 2)),
        rng_seed=seed,
    )
    w = generate(args.prompt, float(args.seconds), sampler, models)
    save_wav(w, args.out)
    _progress(f"[generate] wrote {args.out}: {w.seconds:.2f}s at {w.sample_rate}Hz")
    return 0


def _load_autoencoder(args, config, seed) -> AudioAutoencoder:
    import torch

    ckpt = _pick(args, config, "ckpt", None)
    if ckpt:
        state, manifest = tensorstore.load_state_dict(Path(ckpt) / "autoencoder.ltc")
        ae = AudioAutoencoder(AutoencoderConfig(**manifest["config"]))
        ae.load_state_dict(state)
        return ae
    _progress("[models] no --ckpt given; using a seeded random-initialized autoencoder")
    torch.manual_seed(seed)
    return AudioAutoencoder(_ae_config(args, config))


def _cmd_encode(args, config, seed):
    import torch

    w = pad_to_multiple(load_wav(args.input), 2048)
    ae = _load_autoencoder(args, config, seed)
    with torch.no_grad():
        params = ae.encode(w)
    if args.sample:
        z = reparameterize(params, seed).values
    else:
        z = params.mean
    tensorstore.save_tensors(
        args.out, {"latents": z.numpy()},
        manifest={"kind": "latents", "latent_rate": ae.cfg.latent_rate, "sampled": bool(args.sample)},
    )
    _progress(f"[encode] {w.n_frames} frames -> latents {tuple(z.shape)}")
    return 0


def _decode_common(args, config, seed, chunked: bool):
    import torch

    latents, manifest = _load_latents(args.latents)
    if latents.ndim != 2:
        raise DataError(f"{args.latents}: expected a single (channels, T) latent sequence")
    ae = _load_autoencoder(args, config, seed)
    z = LatentSeq(values=torch.as_tensor(latents), latent_rate=manifest.get("latent_rate", 44100 / 2048))
    with torch.no_grad():
        if chunked:
            samples = ae.chunked_decode(z, chunk_len=int(args.chunk), overlap=int(args.overlap))
        else:
            samples = ae.decode(z)
    w = Waveform(samples=samples.numpy(), sample_rate=ae.cfg.sample_rate)
    if getattr(args, "trim", False):
        w = trim_trailing_silence(w)
    save_wav(w, args.out)
    _progress(f"[{'chunk-decode' if chunked else 'decode'}] latents {latents.shape} -> {w.n_frames} frames")
    return 0


def _cmd_decode(args, config, seed):
    return _decode_common(args, config, seed, chunked=False)


def _cmd_chunk_decode(args, config, seed):
    return _decode_common(args, config, seed, chunked=True)


def _cmd_eval_recon(args, config, seed):
    ref_dir, est_dir = Path(args.ref), Path(args.est)
    names = sorted(p.name for p in ref_dir.glob("*.wav"))
    if not names:
        raise DataError(f"no .wav files under {ref_dir}")
    rows = []
    sums = np.zeros(3)
    for name in names:
        est_path = est_dir / name
        if not est_path.exists():
            raise DataError(f"estimate missing for {name}")
        r, e = load_wav(ref_dir / name), load_wav(est_path)
        vals = [stft_distance(r, e), mel_distance(r, e), si_sdr(r, e)]
        sums += np.array(vals)
        rows.append([name] + [f"{v:.6f}" for v in vals])
    mean = sums / len(names)
    rows.append(["summary"] + [f"{v:.6f}" for v in mean])
    _write_rows(args.out, ["file", "stft", "mel", "sisdr"], rows)
    _progress(f"[eval-recon] {len(names)} pairs -> {args.out} "
              f"(stft {mean[0]:.4f} mel {mean[1]:.4f} sisdr {mean[2]:.2f} dB)")
    return 0


def _cmd_eval_gen(args, config, seed):
    header, values = [], []
    if args.ref_emb and args.gen_emb:
        ref = _load_embedding_index(args.ref_emb)
        gen = _load_embedding_index(args.gen_emb)
        fd = frechet_distance(
            EmbeddingStats.from_embeddings(ref.vectors),
            EmbeddingStats.from_embeddings(gen.vectors),
        )
        header.append("frechet")
        values.append(f"{fd:.6f}")
    if args.ref_probs and args.gen_probs:
        p_ref, _ = tensorstore.load_tensors(args.ref_probs)
        p_gen, _ = tensorstore.load_tensors(args.gen_probs)
        if "probs" not in p_ref or "probs" not in p_gen:
            raise DataError("probability containers need a 'probs' tensor")
        a, b = p_ref["probs"], p_gen["probs"]
        if a.shape != b.shape:
            raise DataError(f"probability shapes differ: {a.shape} vs {b.shape}")
        header.append("mean_kl")
        values.append(f"{mean_kl(list(zip(a, b))):.6f}")
    if args.text_emb and args.audio_emb:
        t = _load_embedding_index(args.text_emb)
        a = _load_embedding_index(args.audio_emb)
        if t.ids != a.ids:
            raise DataError("text/audio embedding ids do not align")
        header.append("clap")
        values.append(f"{clap_score(list(zip(t.vectors, a.vectors))):.6f}")
    if not header:
        raise UsageError("eval-gen: need at least one metric's input pair")
    _write_rows(args.out, header, [values])
    _progress(f"[eval-gen] {dict(zip(header, values))} -> {args.out}")
    return 0


def _cmd_dedup(args, config, seed):
    idx = _load_embedding_index(args.emb)
    groups = dedup_scan(idx, float(_pick(args, config, "threshold", 0.99)))
    rows = [[gi, member] for gi, group in enumerate(groups) for member in group]
    _write_rows(args.out, ["group", "id"], rows)
    _progress(f"[dedup] {len(groups)} duplicate groups over {len(idx.ids)} items -> {args.out}")
    return 0


def _cmd_mem_scan(args, config, seed):
    gen = _load_embedding_index(args.gen)
    train = _load_embedding_index(args.train)
    pairs = memorization_candidates(gen, train, k=int(_pick(args, config, "k", 50)))
    rows = [[rank, g, t, f"{c:.6f}"] for rank, (g, t, c) in enumerate(pairs, start=1)]
    _write_rows(args.out, ["rank", "gen_id", "train_id", "cosine"], rows)
    _progress(f"[mem-scan] top {len(pairs)} candidates -> {args.out}")
    return 0


def _cmd_build_prompts(args, config, seed):
    lines = Path(args.metadata).read_text().splitlines()
    prompts = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{args.metadata}:{i + 1}: invalid JSON: {e}")
        md = RecordingMetadata(**record)
        prompts.append(build_prompt(md, rng_seed=seed + i))
    Path(args.out).write_text("\n".join(prompts) + "\n")
    _progress(f"[build-prompts] {len(prompts)} prompts -> {args.out}")
    return 0


def _cmd_detect_music(args, config, seed):
    tensors, manifest = tensorstore.load_tensors(args.probs)
    if "probs" not in tensors:
        raise DataError(f"{args.probs}: container has no 'probs' tensor")
    tags = manifest.get("tags")
    hop = manifest.get("hop_seconds")
    if tags is None or hop is None:
        raise DataError(f"{args.probs}: manifest must carry 'tags' and 'hop_seconds'")
    music_tags = {t.strip() for t in args.music_tags.split(",") if t.strip()}
    if not music_tags:
        raise UsageError("detect-music: --music-tags is empty")
    verdict = detect_music(
        tensors["probs"], [str(t) for t in tags], music_tags,
        hop_seconds=float(hop),
        threshold=float(_pick(args, config, "threshold", 0.15)),
        min_seconds=float(_pick(args, config, "min_seconds", 30.0)),
    )
    print("music" if verdict else "not-music")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="latentaudio", description=__doc__)
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--threads", type=int, default=1, help="torch thread cap")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ae", help="two-phase autoencoder training on a WAV directory")
    p.add_argument("--data", required=True, help="directory of .wav files")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    for flag in ("base-lr", "disc-lr", "weight-decay", "decay-rate"):
        p.add_argument(f"--{flag}", type=float)
    for flag in ("warmup-steps", "batch-size", "steps1", "steps2", "chunk-frames",
                 "max-chunks", "latent-channels", "resnet-layers", "disc-channels"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--ae-channels", help="comma-separated block channel widths")
    p.set_defaults(func=_cmd_train_ae)

    p = sub.add_parser("train-dit", help="v-objective diffusion training on latents")
    p.add_argument("--latents", required=True, help="container with (n, channels, T) 'latents'")
    p.add_argument("--prompts", required=True, help="text file, one prompt per line")
    p.add_argument("--out", required=True)
    for flag in ("base-lr", "weight-decay", "decay-rate", "cond-dropout"):
        p.add_argument(f"--{flag}", type=float)
    for flag in ("warmup-steps", "batch-size", "steps", "dit-depth", "dit-dim",
                 "dit-heads", "text-dim"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--text-embeddings", help="embedding import file")
    p.set_defaults(func=_cmd_train_dit)

    p = sub.add_parser("generate", help="text-to-audio generation")
    p.add_argument("--prompt", required=True)
    p.add_argument("--seconds", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="model bundle directory (seeded random init if omitted)")
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--order", type=int)
    p.add_argument("--text-embeddings")
    for flag in ("latent-channels", "resnet-layers", "dit-depth", "dit-dim",
                 "dit-heads", "text-dim", "latent-frames"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--ae-channels")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("encode", help="waveform -> latent container")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--sample", action="store_true", help="sample the posterior instead of its mean")
    p.add_argument("--latent-channels", type=int)
    p.add_argument("--resnet-layers", type=int)
    p.add_argument("--ae-channels")
    p.set_defaults(func=_cmd_encode)

    for name, chunked in (("decode", False), ("chunk-decode", True)):
        p = sub.add_parser(name, help="latent container -> waveform")
        p.add_argument("--latents", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--ckpt")
        p.add_argument("--trim", action="store_true")
        p.add_argument("--latent-channels", type=int)
        p.add_argument("--resnet-layers", type=int)
        p.add_argument("--ae-channels")
        if chunked:
            p.add_argument("--chunk", type=int, required=True)
            p.add_argument("--overlap", type=int, default=16)
            p.set_defaults(func=_cmd_chunk_decode)
        else:
            p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval-recon", help="reconstruction metrics over paired WAV directories")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_recon)

    p = sub.add_parser("eval-gen", help="generation metrics over embedding/probability files")
    p.add_argument("--ref-emb")
    p.add_argument("--gen-emb")
    p.add_argument("--ref-probs")
    p.add_argument("--gen-probs")
    p.add_argument("--text-emb")
    p.add_argument("--audio-emb")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_gen)

    p = sub.add_parser("dedup", help="duplicate groups in an embedding index")
    p.add_argument("--emb", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dedup)

    p = sub.add_parser("mem-scan", help="memorization candidates: generations nearest to training items")
    p.add_argument("--gen", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mem_scan)

    p = sub.add_parser("build-prompts", help="metadata JSON-lines -> prompt strings")
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_prompts)

    p = sub.add_parser("detect-music", help="music detection over a tag-probability timeline")
    p.add_argument("--probs", required=True)
    p.add_argument("--music-tags", required=True, help="comma-separated tag names")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-seconds", type=float)
    p.set_defaults(func=_cmd_detect_music)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args.config)
        import torch

        torch.set_num_threads(max(1, args.threads))
        return args.func(args, config, args.seed)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: file not found: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
