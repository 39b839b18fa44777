"""Conditional encoder-decoder denoiser with task switching and cross-task attention.

The network sees ``[z_x, z_d, z_t]`` stacked along channels and predicts v.
In joint mode a batch holds the depth stream in its first half and the
semantic stream in its second half; attention layers pair the halves so each
stream attends over its own tokens plus the other stream's tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "didsee-ckpt/1"


class Task(str, Enum):
    DEPTH = "depth"
    SEMANTIC = "semantic"

    @property
    def code(self) -> int:
        return 0 if self is Task.DEPTH else 1


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    depth_levels: int = 3
    time_embed_dim: int = 128
    attention_at_level: Optional[int] = None  # None -> innermost (bottleneck)
    latent_channels: int = 3
    joint_mode: bool = False
    max_groups: int = 8

    def __post_init__(self):
        if self.depth_levels < 1:
            raise ValueError("depth_levels must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.attention_at_level is None:
            self.attention_at_level = self.depth_levels
        if not 0 <= self.attention_at_level <= self.depth_levels:
            raise ValueError("attention_at_level must be in [0, depth_levels]")

    @property
    def input_channels(self) -> int:
        return 3 * self.latent_channels

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _sinusoid(x: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) * 2.0 / dim)
    ang = x.to(torch.float64)[..., None] * freqs
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # interleave sin/cos
    return out.reshape(*x.shape, dim)


def embed_timestep(t, dim: int) -> torch.Tensor:
    """Interleaved ``(sin, cos)`` features of ``t``; scalar t gives a (dim,) vector."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if torch.any(t < 0):
        raise ValueError("timestep must be non-negative")
    return _sinusoid(t, dim)


def embed_switch(task, dim: int) -> torch.Tensor:
    """Positional encoding of the task code (depth -> 0, semantic -> 1)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    if isinstance(task, (list, tuple)):
        codes = torch.tensor([Task(k).code for k in task])
    else:
        codes = torch.tensor(Task(task).code)
    return _sinusoid(codes, dim)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Softmax attention over tokens, shapes (..., N, C)."""
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return w @ v


def cross_task_attention(z_d: torch.Tensor, z_s: torch.Tensor, to_q=None, to_k=None, to_v=None):
    """Each stream queries from itself and keys/values from ``self (+) other``.

    Inputs are token tensors (..., N, C). Projections default to identity.
    """
    if z_d.shape != z_s.shape:
        raise ValueError(f"stream shapes differ: {tuple(z_d.shape)} vs {tuple(z_s.shape)}")
    to_q = to_q or (lambda x: x)
    to_k = to_k or (lambda x: x)
    to_v = to_v or (lambda x: x)
    ctx_d = torch.cat([z_d, z_s], dim=-2)
    ctx_s = torch.cat([z_s, z_d], dim=-2)
    out_d = attention(to_q(z_d), to_k(ctx_d), to_v(ctx_d))
    out_s = attention(to_q(z_s), to_k(ctx_s), to_v(ctx_s))
    return out_d, out_s


def _groups(ch: int, max_groups: int) -> int:
    for g in range(min(max_groups, ch), 0, -1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, max_groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, max_groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch, max_groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossTaskAttention(nn.Module):
    """Residual attention block; pairs batch halves when ``paired`` is set."""

    def __init__(self, ch, max_groups=8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch, max_groups), ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x, paired: bool = False):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (B, N, C)
        if paired:
            if b % 2:
                raise ValueError("paired attention needs an even batch (depth half, semantic half)")
            z_d, z_s = tokens[: b // 2], tokens[b // 2:]
            out_d, out_s = cross_task_attention(z_d, z_s, self.to_q, self.to_k, self.to_v)
            out = torch.cat([out_d, out_s], dim=0)
        else:
            out = attention(self.to_q(tokens), self.to_k(tokens), self.to_v(tokens))
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        g = cfg.max_groups
        emb_dim = cfg.time_embed_dim
        chans = [cfg.base_channels * 2 ** level for level in range(cfg.depth_levels + 1)]
        self.chans = chans

        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.in_conv = nn.Conv2d(cfg.input_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        for level in range(cfg.depth_levels):
            self.down_blocks.append(ResBlock(chans[level], chans[level], emb_dim, g))
            if level == cfg.attention_at_level:
                self.down_attn[str(level)] = CrossTaskAttention(chans[level], g)
            self.downsample.append(nn.Conv2d(chans[level], chans[level + 1], 3, stride=2, padding=1))

        self.mid1 = ResBlock(chans[-1], chans[-1], emb_dim, g)
        self.mid_attn = CrossTaskAttention(chans[-1], g) if cfg.attention_at_level == cfg.depth_levels else None
        self.mid2 = ResBlock(chans[-1], chans[-1], emb_dim, g)

        self.upsample = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        for level in reversed(range(cfg.depth_levels)):
            self.upsample.append(nn.Conv2d(chans[level + 1], chans[level], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * chans[level], chans[level], emb_dim, g))
            if level == cfg.attention_at_level:
                self.up_attn[str(level)] = CrossTaskAttention(chans[level], g)

        self.out_norm = nn.GroupNorm(_groups(chans[0], g), chans[0])
        self.out_conv = nn.Conv2d(chans[0], cfg.latent_channels, 3, padding=1)

    def embedding(self, t: torch.Tensor, tasks) -> torch.Tensor:
        dim = self.config.time_embed_dim
        emb = embed_timestep(t, dim) + embed_switch(tasks, dim)
        return self.emb_mlp(emb.to(self.in_conv.weight.dtype))

    def forward(self, inp: torch.Tensor, t, tasks, paired: bool = False) -> torch.Tensor:
        cfg = self.config
        b, c, h, w = inp.shape
        if c != cfg.input_channels:
            raise ValueError(f"expected {cfg.input_channels} input channels, got {c}")
        factor = 2 ** cfg.depth_levels
        if h % factor or w % factor:
            raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
        t = torch.as_tensor(t)
        if t.numel() == 1:
            t = t.reshape(1).expand(b)
        if isinstance(tasks, (str, Task)):
            tasks = [tasks] * b
        emb = self.embedding(t, list(tasks))

        x = self.in_conv(inp)
        skips = []
        for level in range(cfg.depth_levels):
            x = self.down_blocks[level](x, emb)
            if str(level) in self.down_attn:
                x = self.down_attn[str(level)](x, paired)
            skips.append(x)
            x = self.downsample[level](x)

        x = self.mid1(x, emb)
        if self.mid_attn is not None:
            x = self.mid_attn(x, paired)
        x = self.mid2(x, emb)

        for i, level in enumerate(reversed(range(cfg.depth_levels))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.upsample[i](x)
            x = self.up_blocks[i](torch.cat([x, skips[level]], dim=1), emb)
            if str(level) in self.up_attn:
                x = self.up_attn[str(level)](x, paired)

        return self.out_conv(F.silu(self.out_norm(x)))


def denoise(model: Denoiser, x_lat, d_lat, y_lat, t, task=Task.DEPTH):
    """Single-stream prediction ``f([z_x, z_d, z_t], t, task)``; batched (B, C, H, W) tensors."""
    if not (x_lat.shape == d_lat.shape == y_lat.shape):
        raise ValueError("conditioning and noisy latents must share a shape")
    return model(torch.cat([x_lat, d_lat, y_lat], dim=1), t, task, paired=False)


def denoise_joint(model: Denoiser, x_lat, d_lat, y_depth, y_sem, t):
    """Depth and semantic streams in one paired forward pass; returns ``(v_depth, v_sem)``."""
    if not (x_lat.shape == d_lat.shape == y_depth.shape == y_sem.shape):
        raise ValueError("conditioning and noisy latents must share a shape")
    b = x_lat.shape[0]
    cond = torch.cat([x_lat, d_lat], dim=1)
    inp = torch.cat([torch.cat([cond, y_depth], dim=1), torch.cat([cond, y_sem], dim=1)], dim=0)
    tasks = [Task.DEPTH] * b + [Task.SEMANTIC] * b
    t = torch.as_tensor(t)
    t = t.reshape(-1).expand(b) if t.numel() == 1 else t
    out = model(inp, torch.cat([t, t]), tasks, paired=model.config.joint_mode)
    return out[:b], out[b:]


def save_checkpoint(path, model: Denoiser, schedule_fingerprint: str, extra: Optional[dict] = None,
                    modules: Optional[dict] = None) -> Path:
    """Write parameters plus a JSON metadata block into an ``.npz`` container.

    Layout: one array per parameter named ``<prefix>/<param>`` (``denoiser/``
    for the network, other prefixes for auxiliary modules such as a codec) and
    a ``__metadata__`` uint8 array holding UTF-8 JSON with keys ``format``,
    ``denoiser_config``, ``schedule_fingerprint`` and any ``extra`` entries.
    """
    path = Path(path)
    arrays = {f"denoiser/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for prefix, module in (modules or {}).items():
        arrays.update({f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "denoiser_config": asdict(model.config),
        "schedule_fingerprint": schedule_fingerprint,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    meta.update(extra or {})
    arrays["__metadata__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(metadata, {name: array})`` without building a model."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "__metadata__" not in data.files:
            raise ValueError(f"{path}: missing metadata block")
        meta = json.loads(data["__metadata__"].tobytes().decode())
        arrays = {k: data[k] for k in data.files if k != "__metadata__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, arrays


def load_checkpoint(path) -> tuple[Denoiser, dict, dict]:
    """Rebuild the denoiser; returns ``(model, metadata, arrays)``."""
    meta, arrays = read_checkpoint(path)
    model = Denoiser(DenoiserConfig.from_dict(meta["denoiser_config"]))
    if meta.get("dtype") == "float64":
        model = model.double()
    state = {k.split("/", 1)[1]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("denoiser/")}
    model.load_state_dict(state)
    model.eval()
    return model, meta, arrays
