"""Training loops: noise-agnostic single-step (pixel-space L1) and standard multi-step v-prediction."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import diffusion
from .codec import IdentityCodec, build_codec, fit_autoencoder
from .denoiser import Denoiser, DenoiserConfig, Task, denoise, denoise_joint
from .model import CompletionModel, pixel_tensors
from .schedule import NoiseSchedule, ScheduleStateError, build_schedule
from .semantics import build_default_palette
from .synthdata import SceneSample

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epoch", "loss", "loss_depth", "loss_sem", "val_REL"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    gamma: float = 0.1
    seed: int = 0
    num_timesteps: int = 1000
    fixed_timestep: Optional[int] = None  # None -> T
    scheduler_mode: str = "rescaled"      # original | rescaled
    step_mode: str = "single"             # single | multi
    joint_mode: bool = True
    noisy_input_mode: str = "zeros"       # zeros | gaussian
    codec: str = "identity"               # identity | tiny
    codec_steps: int = 400
    near: float = 0.3
    far: float = 1.5
    flip_augment: bool = True
    grad_clip: float = 1.0
    val_steps: int = 10                   # inference steps for multi-step validation
    val_max_samples: int = 64
    float64: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.scheduler_mode not in ("original", "rescaled"):
            raise ValueError(f"unknown scheduler_mode {self.scheduler_mode!r}")
        if self.step_mode not in ("single", "multi"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.noisy_input_mode not in ("zeros", "gaussian"):
            raise ValueError(f"unknown noisy_input_mode {self.noisy_input_mode!r}")
        if self.step_mode == "single":
            if self.fixed_timestep is None:
                self.fixed_timestep = self.num_timesteps
            if self.fixed_timestep != self.num_timesteps:
                raise ValueError("single-step training fixes the timestep at T")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def combined_loss(pred_depth, gt_depth, pred_sem=None, gt_sem=None, gamma: float = 0.1):
    """Mean-L1 depth term plus ``gamma`` times mean-L1 semantic term."""
    if pred_depth.shape != gt_depth.shape:
        raise ValueError(f"depth shape mismatch {tuple(pred_depth.shape)} vs {tuple(gt_depth.shape)}")
    depth = (pred_depth - gt_depth).abs().mean()
    if pred_sem is None:
        return depth
    if pred_sem.shape != gt_sem.shape:
        raise ValueError(f"semantic shape mismatch {tuple(pred_sem.shape)} vs {tuple(gt_sem.shape)}")
    return depth + gamma * (pred_sem - gt_sem).abs().mean()


def make_single_step_target(z0, schedule: NoiseSchedule):
    """The v the network must output at t = T so that the clean estimate equals ``z0``.

    Under the convention in :mod:`didsee.diffusion` this is ``-z0``.
    """
    if not schedule.rescaled or schedule.alpha_bar(schedule.T) != 0.0:
        raise ScheduleStateError("single-step target requires a zero terminal-SNR schedule")
    return -z0


@dataclass
class TrainResult:
    model: CompletionModel
    log: list[dict]


def _set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _noisy_input(mode, y0, t, schedule, gen):
    if mode == "zeros":
        return torch.zeros_like(y0)
    eps = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
    return diffusion.forward_diffuse(y0, eps, t, schedule)


def train(dataset: list[SceneSample], denoiser_config: DenoiserConfig, train_config: TrainConfig,
          val_dataset: Optional[list[SceneSample]] = None, log_path=None, progress: bool = False) -> TrainResult:
    cfg = train_config
    if not dataset:
        raise ValueError("empty training set")
    if denoiser_config.joint_mode != cfg.joint_mode:
        denoiser_config = DenoiserConfig(**{**asdict(denoiser_config), "joint_mode": cfg.joint_mode})
    _set_determinism(cfg.seed)
    dtype = torch.float64 if cfg.float64 else torch.float32
    schedule = build_schedule(cfg.scheduler_mode, cfg.num_timesteps)
    palette = build_default_palette()

    px = pixel_tensors(dataset, cfg.near, cfg.far, palette, dtype)
    codec = build_codec(cfg.codec)
    if not isinstance(codec, IdentityCodec):
        images = torch.cat([px["rgb"], px["gt"], px["raw"], px["sem"]])
        codec = codec.to(dtype)
        fit_autoencoder(codec, images, steps=cfg.codec_steps, seed=cfg.seed)
    if denoiser_config.latent_channels != codec.latent_channels:
        denoiser_config = DenoiserConfig(**{**asdict(denoiser_config), "latent_channels": codec.latent_channels})

    denoiser = Denoiser(denoiser_config).to(dtype)
    model = CompletionModel(denoiser, schedule, codec, cfg.step_mode, cfg.scheduler_mode,
                            cfg.noisy_input_mode, cfg.near, cfg.far, palette)
    val_set = list(val_dataset if val_dataset is not None else dataset)[: cfg.val_max_samples]

    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(1, steps_per_epoch * cfg.epochs)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)
    gen = torch.Generator().manual_seed(cfg.seed)
    rows: list[dict] = []
    step = 0

    for epoch in range(cfg.epochs):
        denoiser.train()
        order = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = {k: px[k][idx] for k in ("rgb", "raw", "gt", "sem")}
            if cfg.flip_augment:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                for k in batch:
                    batch[k] = torch.where(flip[:, None, None, None], batch[k].flip(-1), batch[k])
            loss, ld, ls = _step_loss(model, batch, cfg, gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}): depth={ld}, sem={ls}, lr={sched.get_last_lr()[0]}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(denoiser.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            rows.append({"step": step, "epoch": epoch, "loss": loss.item(), "loss_depth": ld,
                         "loss_sem": ls, "val_REL": ""})
            step += 1
        val_rel = validation_rel(model, val_set, cfg)
        if rows:
            rows[-1]["val_REL"] = val_rel
        msg = f"epoch {epoch}: loss {rows[-1]['loss']:.5f} val_REL {val_rel:.5f}"
        (print if progress else log.info)(msg)

    denoiser.eval()
    if log_path is not None:
        write_log_csv(rows, log_path)
    return TrainResult(model, rows)


def _step_loss(model: CompletionModel, batch, cfg: TrainConfig, gen):
    codec, schedule, denoiser = model.codec, model.schedule, model.denoiser
    x = codec.encode(batch["rgb"])
    d = codec.encode(batch["raw"])
    with torch.no_grad():
        y0 = codec.encode(batch["gt"])
        s0 = codec.encode(batch["sem"]) if cfg.joint_mode else None
    bsz = x.shape[0]

    if cfg.step_mode == "single":
        t = cfg.fixed_timestep
        z_d = _noisy_input(cfg.noisy_input_mode, y0, t, schedule, gen)
        if cfg.joint_mode:
            z_s = _noisy_input(cfg.noisy_input_mode, s0, t, schedule, gen)
            v_d, v_s = denoise_joint(denoiser, x, d, z_d, z_s, t)
        else:
            v_d = denoise(denoiser, x, d, z_d, t, Task.DEPTH)
        # pixel-space supervision through the decoder
        pred_d = codec.decode(diffusion.predict_clean(z_d, v_d, t, schedule))
        loss_d = (pred_d - batch["gt"]).abs().mean()
        if cfg.joint_mode:
            pred_s = codec.decode(diffusion.predict_clean(z_s, v_s, t, schedule))
            loss_s = (pred_s - batch["sem"]).abs().mean()
            loss = combined_loss(pred_d, batch["gt"], pred_s, batch["sem"], cfg.gamma)
        else:
            loss_s = torch.zeros(())
            loss = loss_d
        return loss, loss_d.item(), loss_s.item()

    # multi-step: random timestep per sample, MSE on v in latent space
    t = torch.randint(1, schedule.T + 1, (bsz,), generator=gen)
    a = torch.tensor(schedule.sqrt_alpha_bars[t.numpy() - 1], dtype=y0.dtype)[:, None, None, None]
    b = torch.sqrt(torch.clamp(1 - a ** 2, min=0.0))
    eps_d = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
    z_d = a * y0 + b * eps_d
    v_target_d = a * eps_d - b * y0
    if cfg.joint_mode:
        eps_s = torch.randn(s0.shape, generator=gen, dtype=s0.dtype)
        z_s = a * s0 + b * eps_s
        v_d, v_s = denoise_joint(denoiser, x, d, z_d, z_s, t)
        loss_d = F.mse_loss(v_d, v_target_d)
        loss_s = F.mse_loss(v_s, a * eps_s - b * s0)
        loss = loss_d + cfg.gamma * loss_s
    else:
        v_d = denoise(denoiser, x, d, z_d, t, Task.DEPTH)
        loss_d = F.mse_loss(v_d, v_target_d)
        loss_s = torch.zeros(())
        loss = loss_d
    return loss, loss_d.item(), loss_s.item()


def validation_rel(model: CompletionModel, samples, cfg: TrainConfig) -> float:
    from .evaluation import evaluate_model
    if not samples:
        return float("nan")
    report = evaluate_model(model, samples, steps=cfg.val_steps, strategy="trailing", seed=cfg.seed)
    return report["all"].rel


def write_log_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


# -- key/value config files --------------------------------------------------

def load_config_file(path) -> tuple[TrainConfig, DenoiserConfig]:
    """Read a flat TOML file; ``denoiser.<key>`` entries configure the network."""
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    den = data.pop("denoiser", {})
    return TrainConfig.from_dict(data), DenoiserConfig(**den)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def write_config_file(path, train_config: TrainConfig, denoiser_config: DenoiserConfig) -> Path:
    lines = ["# didsee training configuration (flat TOML)"]
    for k, v in asdict(train_config).items():
        if v is not None:
            lines.append(f"{k} = {_toml_value(v)}")
    for k, v in asdict(denoiser_config).items():
        if v is not None:
            lines.append(f"denoiser.{k} = {_toml_value(v)}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
