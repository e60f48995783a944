"""Alternating GAN optimization with ablation toggles and checkpointing.

One training step runs the discriminator update first (on detached synthetic
images), then the generator update against the freshly updated discriminator.
Both use Adam with beta1 = 0.5 and share a step-decay learning-rate schedule.
Checkpoints are written atomically and restore bitwise-identical forwards.
"""

from __future__ import annotations

import collections
import dataclasses
import json
import os
import time
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .discriminator import DiscriminatorConfig, build_discriminator
from .errors import EmptyManifest, IndivisiblePatch, NaNLoss
from .features import SliceFeatureExtractor, make_extractor
from .generator import FinalActivation, GeneratorConfig, TranslationGenerator
from .io import load_volume
from .losses import (
    LossReport,
    LossWeights,
    bce_voxel_d_loss,
    generator_total_loss,
    relativistic_d_loss,
)
from .patches import sample_patch_pair
from .volumes import DatasetManifest

CHECKPOINT_VERSION = 1
_HISTORY_LEN = 1024


@dataclasses.dataclass(frozen=True)
class AblationFlags:
    """Feature toggles matching the leave-one-out study rows."""

    mr_input: bool = True
    mr_output: bool = True
    unet_d: bool = True
    relativistic: bool = True


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 3
    patch_size: tuple[int, int, int] = (96, 96, 96)
    lr: float = 1e-4
    scheduler_step_size: int = 10
    scheduler_gamma: float = 0.5
    epochs: int = 1
    steps_per_epoch: int = 0
    max_steps: int | None = None
    mixed_precision: bool | None = None
    seed: int = 0
    checkpoint_every: int = 0
    ablation: AblationFlags = AblationFlags()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.scheduler_step_size < 1 or not (0 < self.scheduler_gamma <= 1):
            raise ValueError("scheduler parameters out of range")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epochs and steps_per_epoch must be >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        object.__setattr__(self, "patch_size", tuple(int(s) for s in self.patch_size))

    @property
    def amp_enabled(self) -> bool:
        # default: on only where fast and numerically safe
        if self.mixed_precision is None:
            return torch.cuda.is_available()
        return self.mixed_precision


@dataclasses.dataclass
class TrainState:
    """Everything the loop mutates, bundled for checkpointing."""

    step: int
    generator: TranslationGenerator
    discriminator: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    sched_g: torch.optim.lr_scheduler.StepLR
    sched_d: torch.optim.lr_scheduler.StepLR
    rng: np.random.Generator
    loss_history: collections.deque
    train_config: TrainConfig
    weights: LossWeights
    fx: SliceFeatureExtractor
    last_checkpoint: str | None = None


def apply_ablation(
    gen_config: GeneratorConfig, disc_config: DiscriminatorConfig, flags: AblationFlags
) -> tuple[GeneratorConfig, DiscriminatorConfig]:
    """Resolve ablation toggles into concrete model configurations.

    Disabling multi-resolution output leaves a single supervised level, so the
    discriminator shrinks to one logit level accordingly.
    """
    gen_config = dataclasses.replace(
        gen_config, mr_input_enabled=flags.mr_input, mr_output_enabled=flags.mr_output
    )
    disc_levels = gen_config.num_output_levels if flags.mr_output else 1
    disc_config = dataclasses.replace(
        disc_config, unet_mode=flags.unet_d, num_levels=disc_levels
    )
    return gen_config, disc_config


def downsample_pyramid(x: torch.Tensor, num_levels: int) -> list[torch.Tensor]:
    """Tensor image -> factor-2 average-pooled pyramid (dims must divide)."""
    levels = [x]
    for _ in range(1, num_levels):
        levels.append(F.avg_pool3d(levels[-1], kernel_size=2))
    return levels


def _enum_safe(value):
    return value.value if isinstance(value, (FinalActivation,)) else value


def _config_json(cfg) -> str:
    d = {k: _enum_safe(v) for k, v in dataclasses.asdict(cfg).items()}
    return json.dumps(d, sort_keys=True)


def _gen_config_from_json(text: str) -> GeneratorConfig:
    d = json.loads(text)
    d["final_activation"] = FinalActivation(d["final_activation"])
    d["rdb_layers_per_level"] = tuple(d["rdb_layers_per_level"])
    return GeneratorConfig(**d)


def _disc_config_from_json(text: str) -> DiscriminatorConfig:
    return DiscriminatorConfig(**json.loads(text))


def _train_config_json(cfg: TrainConfig) -> str:
    d = dataclasses.asdict(cfg)
    d["ablation"] = dataclasses.asdict(cfg.ablation)
    return json.dumps(d, sort_keys=True)


def _train_config_from_json(text: str) -> TrainConfig:
    d = json.loads(text)
    d["ablation"] = AblationFlags(**d["ablation"])
    d["patch_size"] = tuple(d["patch_size"])
    return TrainConfig(**d)


def save_checkpoint(
    state: TrainState,
    path,
    fx_kind: str = "standin",
    fx_seed: int = 0,
    config_hash: str | None = None,
) -> str:
    """Atomically write the full training state; returns the final path."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "step": state.step,
        "gen_config": _config_json(state.generator.config),
        "disc_config": _config_json(state.discriminator.config),
        "train_config": _train_config_json(state.train_config),
        "loss_weights": json.dumps(dataclasses.asdict(state.weights)),
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "sched_g": state.sched_g.state_dict(),
        "sched_d": state.sched_d.state_dict(),
        "numpy_rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "loss_history": [dataclasses.asdict(r) for r in state.loss_history],
        "fx_kind": fx_kind,
        "fx_seed": fx_seed,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    state.last_checkpoint = str(path)
    return str(path)


def load_checkpoint(path, fx: SliceFeatureExtractor | None = None) -> TrainState:
    """Rebuild a TrainState from ``save_checkpoint`` output."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    gen = TranslationGenerator(_gen_config_from_json(payload["gen_config"]))
    gen.load_state_dict(payload["generator"])
    disc = build_discriminator(_disc_config_from_json(payload["disc_config"]))
    disc.load_state_dict(payload["discriminator"])
    train_config = _train_config_from_json(payload["train_config"])
    weights = LossWeights(**json.loads(payload["loss_weights"]))

    opt_g, opt_d, sched_g, sched_d = _build_optimizers(gen, disc, train_config)
    opt_g.load_state_dict(payload["opt_g"])
    opt_d.load_state_dict(payload["opt_d"])
    sched_g.load_state_dict(payload["sched_g"])
    sched_d.load_state_dict(payload["sched_d"])

    rng = np.random.default_rng()
    rng.bit_generator.state = payload["numpy_rng"]
    torch.set_rng_state(payload["torch_rng"])
    history = collections.deque(
        (LossReport(**r) for r in payload["loss_history"]), maxlen=_HISTORY_LEN
    )
    if fx is None:
        fx = make_extractor(payload.get("fx_kind", "standin"), seed=payload.get("fx_seed", 0))
    return TrainState(
        step=payload["step"],
        generator=gen,
        discriminator=disc,
        opt_g=opt_g,
        opt_d=opt_d,
        sched_g=sched_g,
        sched_d=sched_d,
        rng=rng,
        loss_history=history,
        train_config=train_config,
        weights=weights,
        fx=fx,
        last_checkpoint=str(path),
    )


def _build_optimizers(gen, disc, cfg: TrainConfig):
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    sched_g = torch.optim.lr_scheduler.StepLR(
        opt_g, step_size=cfg.scheduler_step_size, gamma=cfg.scheduler_gamma
    )
    sched_d = torch.optim.lr_scheduler.StepLR(
        opt_d, step_size=cfg.scheduler_step_size, gamma=cfg.scheduler_gamma
    )
    return opt_g, opt_d, sched_g, sched_d


def init_state(
    train_config: TrainConfig,
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    weights: LossWeights,
    fx: SliceFeatureExtractor,
) -> TrainState:
    """Fresh models, optimizers, and RNG streams, all seeded from the config."""
    torch.manual_seed(train_config.seed)
    gen_config, disc_config = apply_ablation(gen_config, disc_config, train_config.ablation)
    gen = TranslationGenerator(gen_config)
    disc = build_discriminator(disc_config)
    opt_g, opt_d, sched_g, sched_d = _build_optimizers(gen, disc, train_config)
    return TrainState(
        step=0,
        generator=gen,
        discriminator=disc,
        opt_g=opt_g,
        opt_d=opt_d,
        sched_g=sched_g,
        sched_d=sched_d,
        rng=np.random.default_rng(train_config.seed),
        loss_history=collections.deque(maxlen=_HISTORY_LEN),
        train_config=train_config,
        weights=weights,
        fx=fx,
    )


def _autocast(enabled: bool):
    device = "cuda" if torch.cuda.is_available() else "cpu"
    dtype = torch.float16 if device == "cuda" else torch.bfloat16
    return torch.autocast(device_type=device, dtype=dtype, enabled=enabled)


def train_step(state: TrainState, src: torch.Tensor, tgt: torch.Tensor) -> LossReport:
    """One discriminator update followed by one generator update.

    ``src``/``tgt`` are UNIT-domain (B, 1, D, H, W) patch batches. Returns the
    step's LossReport; raises NaNLoss (tagged with the last checkpoint) on any
    non-finite loss.
    """
    cfg = state.train_config
    gen, disc = state.generator, state.discriminator
    amp = cfg.amp_enabled
    flags = cfg.ablation

    inputs = downsample_pyramid(src, gen.config.num_input_levels)
    n_out = len(gen.output_levels)
    real_pyr = downsample_pyramid(tgt, n_out)

    try:
        with _autocast(amp):
            fake_pyr = gen(inputs)

            # discriminator step on detached synthetics
            d_real = disc(real_pyr)
            d_fake = disc([f.detach() for f in fake_pyr])
            if flags.relativistic:
                loss_d = relativistic_d_loss(d_real, d_fake)
            else:
                loss_d = bce_voxel_d_loss(d_real, d_fake)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.float().backward()
        state.opt_d.step()

        with _autocast(amp):
            # generator step against the updated discriminator
            d_fake_g = disc(fake_pyr)
            with torch.no_grad():
                d_real_g = disc(real_pyr)
            mode = "relativistic" if flags.relativistic else "bce"
            total, report = generator_total_loss(
                fake_pyr, real_pyr, d_real_g, d_fake_g, state.weights, state.fx,
                adversarial=mode,
            )
        state.opt_g.zero_grad(set_to_none=True)
        total.float().backward()
        state.opt_g.step()
    except NaNLoss as exc:
        raise NaNLoss(str(exc), last_checkpoint=state.last_checkpoint) from exc

    with torch.no_grad():
        level_loss = relativistic_d_loss if flags.relativistic else bce_voxel_d_loss
        d_per_level = tuple(
            float(level_loss([r.detach()], [f.detach()]))
            for r, f in zip(d_real, d_fake)
        )
    report = dataclasses.replace(
        report, l_d=float(loss_d.detach()), l_d_per_level=d_per_level
    )
    state.loss_history.append(report)
    state.step += 1
    return report


def _load_training_pairs(manifest: DatasetManifest):
    pairs = []
    for case in manifest.train_cases:
        pairs.append((load_volume(case.source), load_volume(case.target)))
    return pairs


def sample_batch(
    pairs, batch_size: int, patch_size, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Assemble one batch of aligned patch pairs from preloaded volumes."""
    srcs, tgts = [], []
    for _ in range(batch_size):
        case_idx = int(rng.integers(len(pairs)))
        seed = int(rng.integers(2**63))
        src_vol, tgt_vol = pairs[case_idx]
        ps, pt, _ = sample_patch_pair(src_vol, tgt_vol, patch_size, rng_seed=seed)
        srcs.append(torch.from_numpy(ps.data.copy()))
        tgts.append(torch.from_numpy(pt.data.copy()))
    return torch.stack(srcs).unsqueeze(1), torch.stack(tgts).unsqueeze(1)


def run_training(
    train_config: TrainConfig,
    manifest: DatasetManifest,
    out_dir,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    weights: LossWeights | None = None,
    fx: SliceFeatureExtractor | None = None,
    fx_kind: str = "standin",
    fx_seed: int = 0,
    config_hash: str | None = None,
) -> tuple[TrainState, list[dict]]:
    """Full training schedule over the manifest's TRAIN split.

    Runs ``epochs * steps_per_epoch`` steps (capped by ``max_steps``),
    stepping the lr schedule once per epoch, appending one structured record
    per step to ``out_dir/metrics.jsonl``, and checkpointing atomically to
    ``out_dir/checkpoint.pt`` — once before any update, periodically when
    ``checkpoint_every`` is set, and at the end.
    """
    if not manifest.train_cases:
        raise EmptyManifest("manifest has no TRAIN cases")
    gen_config = gen_config or GeneratorConfig()
    disc_config = disc_config or DiscriminatorConfig()
    weights = weights or LossWeights()
    fx = fx or make_extractor(fx_kind, seed=fx_seed)

    resolved_gen, _ = apply_ablation(gen_config, disc_config, train_config.ablation)
    if any(p % resolved_gen.divisor for p in train_config.patch_size):
        raise IndivisiblePatch(
            f"patch {train_config.patch_size} not divisible by {resolved_gen.divisor}"
        )

    os.makedirs(out_dir, exist_ok=True)
    state = init_state(train_config, gen_config, disc_config, weights, fx)
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    save_checkpoint(state, ckpt_path, fx_kind=fx_kind, fx_seed=fx_seed, config_hash=config_hash)

    pairs = _load_training_pairs(manifest)
    steps_per_epoch = train_config.steps_per_epoch or len(pairs)
    budget = train_config.epochs * steps_per_epoch
    if train_config.max_steps is not None:
        budget = min(budget, train_config.max_steps)

    metrics: list[dict] = []
    log_path = os.path.join(out_dir, "metrics.jsonl")
    t0 = time.monotonic()
    with open(log_path, "w", encoding="utf-8") as log:
        done = 0
        for epoch in range(train_config.epochs):
            if done >= budget:
                break
            for _ in range(steps_per_epoch):
                if done >= budget:
                    break
                src, tgt = sample_batch(
                    pairs, train_config.batch_size, train_config.patch_size, state.rng
                )
                report = train_step(state, src, tgt)
                done += 1
                row = {
                    "step": state.step,
                    "epoch": epoch,
                    "lr": state.sched_g.get_last_lr()[0],
                    "wallclock": time.monotonic() - t0,
                    **dataclasses.asdict(report),
                }
                metrics.append(row)
                log.write(json.dumps(row) + "\n")
                if (
                    train_config.checkpoint_every
                    and state.step % train_config.checkpoint_every == 0
                ):
                    save_checkpoint(state, ckpt_path, fx_kind=fx_kind, fx_seed=fx_seed, config_hash=config_hash)
            state.sched_g.step()
            state.sched_d.step()
    if state.step > 0:
        save_checkpoint(state, ckpt_path, fx_kind=fx_kind, fx_seed=fx_seed, config_hash=config_hash)
    return state, metrics
