"""Image <-> latent codecs.

The identity codec makes pixel space the latent space. ``TinyAutoencoder`` is
a small convolutional stand-in for a pretrained VAE: 3-channel images in
[-1, 1] are mapped to a 2x-downsampled latent and back. Its weights are frozen
once fitted, but gradients still flow through ``decode`` so pixel-space losses
reach the denoiser.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class IdentityCodec(nn.Module):
    latent_channels = 3
    downsample = 1
    name = "identity"

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class TinyAutoencoder(nn.Module):
    name = "tiny"
    downsample = 2

    def __init__(self, latent_channels: int = 4, hidden: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.enc = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, latent_channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )

    def encode(self, x):
        return torch.tanh(self.enc(x))

    def decode(self, z):
        return self.dec(z)


def fit_autoencoder(codec: TinyAutoencoder, images: torch.Tensor, steps: int = 500, batch_size: int = 32,
                    lr: float = 2e-3, seed: int = 0) -> list[float]:
    """Reconstruction training on a stack of (N, 3, H, W) images; freezes the codec afterwards."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    losses = []
    codec.train()
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        x = images[idx]
        loss = F.l1_loss(codec.decode(codec.encode(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    codec.eval()
    codec.requires_grad_(False)
    return losses


def build_codec(name: str, latent_channels: int = 4, hidden: int = 32) -> nn.Module:
    if name == "identity":
        return IdentityCodec()
    if name == "tiny":
        return TinyAutoencoder(latent_channels, hidden)
    raise ValueError(f"unknown codec {name!r}")
