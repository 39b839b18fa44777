"""A trained completion model: denoiser + codec + schedule + the settings inference needs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import diffusion
from .codec import IdentityCodec, TinyAutoencoder
from .denoiser import Denoiser, Task, denoise, denoise_joint, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, build_schedule
from .semantics import Palette, build_default_palette, encode_labels
from .synthdata import SceneSample, preprocess_depth


@dataclass
class CompletionModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    codec: torch.nn.Module = field(default_factory=IdentityCodec)
    step_mode: str = "single"
    scheduler_mode: str = "rescaled"
    noisy_input_mode: str = "zeros"
    near: float = 0.3
    far: float = 1.5
    palette: Palette = field(default_factory=build_default_palette)

    @property
    def joint(self) -> bool:
        return self.denoiser.config.joint_mode

    @property
    def dtype(self):
        return next(self.denoiser.parameters()).dtype

    def encode_batch(self, samples: list[SceneSample]) -> dict:
        return encode_batch(samples, self.codec, self.near, self.far, self.palette, self.dtype)

    @torch.no_grad()
    def predict_v(self, batch: dict, z_depth, z_sem, t: int):
        """v estimates for the depth stream and (joint models only) the semantic stream."""
        self.denoiser.eval()
        if self.joint:
            return denoise_joint(self.denoiser, batch["x"], batch["d"], z_depth, z_sem, t)
        return denoise(self.denoiser, batch["x"], batch["d"], z_depth, t, Task.DEPTH), None

    def save(self, path, extra: Optional[dict] = None):
        meta = {
            "step_mode": self.step_mode,
            "scheduler_mode": self.scheduler_mode,
            "noisy_input_mode": self.noisy_input_mode,
            "num_timesteps": self.schedule.T,
            "depth_range": [self.near, self.far],
            "palette": {"names": list(self.palette.class_names), "colors": self.palette.colors.tolist()},
            "codec": _codec_meta(self.codec),
        }
        meta.update(extra or {})
        modules = {"codec": self.codec} if not isinstance(self.codec, IdentityCodec) else None
        return save_checkpoint(path, self.denoiser, self.schedule.fingerprint(), meta, modules)

    @classmethod
    def load(cls, path) -> "CompletionModel":
        denoiser, meta, arrays = load_checkpoint(path)
        schedule = build_schedule(meta["scheduler_mode"], int(meta["num_timesteps"]))
        if schedule.fingerprint() != meta["schedule_fingerprint"]:
            raise ValueError(f"{path}: schedule fingerprint mismatch")
        codec_meta = meta.get("codec", {"name": "identity"})
        if codec_meta["name"] == "identity":
            codec = IdentityCodec()
        else:
            codec = TinyAutoencoder(codec_meta["latent_channels"], codec_meta["hidden"])
            state = {k.split("/", 1)[1]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("codec/")}
            codec.load_state_dict(state)
            codec.to(next(denoiser.parameters()).dtype).eval().requires_grad_(False)
        pal = meta.get("palette")
        palette = Palette(np.array(pal["colors"]), tuple(pal["names"])) if pal else build_default_palette()
        near, far = meta.get("depth_range", [0.3, 1.5])
        return cls(denoiser, schedule, codec, meta["step_mode"], meta["scheduler_mode"],
                   meta["noisy_input_mode"], float(near), float(far), palette)


def _codec_meta(codec) -> dict:
    if isinstance(codec, IdentityCodec):
        return {"name": "identity"}
    return {"name": codec.name, "latent_channels": codec.latent_channels, "hidden": codec.hidden}


def pixel_tensors(samples: list[SceneSample], near: float, far: float, palette: Palette, dtype=torch.float32):
    """Pixel-space network inputs and targets for a list of samples."""
    rgb = np.stack([s.rgb for s in samples])
    raw = np.stack([preprocess_depth(s.raw_depth, near, far) for s in samples])
    gt = np.stack([preprocess_depth(s.gt_depth, near, far) for s in samples])
    sem = np.stack([encode_labels(s.labels, palette) for s in samples])
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
    return {
        "rgb": as_t(rgb), "raw": as_t(raw), "gt": as_t(gt), "sem": as_t(sem),
        "gt_m": np.stack([s.gt_depth for s in samples]),
        "labels": np.stack([s.labels for s in samples]),
    }


def encode_batch(samples, codec, near, far, palette, dtype=torch.float32) -> dict:
    px = pixel_tensors(samples, near, far, palette, dtype)
    with torch.no_grad():
        px.update(x=codec.encode(px["rgb"]), d=codec.encode(px["raw"]),
                  y0=codec.encode(px["gt"]), s0=codec.encode(px["sem"]))
    return px


class OracleModel:
    """Returns the exact v that recovers the ground-truth latent from any z_t."""

    step_mode = "multi"
    noisy_input_mode = "gaussian"
    joint = False

    def __init__(self, schedule: NoiseSchedule, near: float = 0.3, far: float = 1.5):
        self.schedule = schedule
        self.codec = IdentityCodec()
        self.near, self.far = near, far
        self.palette = build_default_palette()
        self.dtype = torch.float64

    def encode_batch(self, samples):
        return encode_batch(samples, self.codec, self.near, self.far, self.palette, self.dtype)

    def predict_v(self, batch, z_depth, z_sem, t):
        a, b = self.schedule.coefficients(t)
        y0 = batch["y0"]
        if b == 0.0:
            raise ValueError("oracle v undefined at alpha_bar == 1")
        eps = (z_depth - a * y0) / b
        return diffusion.v_target(y0, eps, t, self.schedule), None
