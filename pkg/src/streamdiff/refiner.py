"""Toy latent/pixel codec and pixel-domain fine-tuning of the decoder.

Latents are ``[B, F, H', W', C]``; pixels are ``[B, F, H, W, 3]`` in ``[-1, 1]``
with ``H = 4 H'``. The decoder is fine-tuned against ground-truth pixels on
clips decoded from frozen-generator latents, with L1 + L2 reconstruction and a
clip discriminator.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as Fn
from torch import nn

from . import numeric
from .numeric import DTYPE

FACTOR = 4


def _frames_in(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    B, F = x.shape[:2]
    return x.reshape(B * F, *x.shape[2:]).permute(0, 3, 1, 2), (B, F)


def _frames_out(y: torch.Tensor, bf: tuple[int, int]) -> torch.Tensor:
    return y.permute(0, 2, 3, 1).reshape(*bf, *y.shape[2:], y.shape[1])


class Encoder(nn.Module):
    def __init__(self, latent_channels: int = 4, hidden: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, hidden, FACTOR, stride=FACTOR, dtype=DTYPE),
                nn.SiLU(),
                nn.Conv2d(hidden, latent_channels, 3, padding=1, dtype=DTYPE),
            )

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x, bf = _frames_in(pixels)
        return _frames_out(self.net(x), bf)


class Decoder(nn.Module):
    def __init__(self, latent_channels: int = 4, hidden: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.ConvTranspose2d(latent_channels, hidden, FACTOR, stride=FACTOR, dtype=DTYPE),
                nn.SiLU(),
                nn.Conv2d(hidden, 3, 3, padding=1, padding_mode="replicate", dtype=DTYPE),
            )

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        x, bf = _frames_in(latents)
        return _frames_out(torch.tanh(self.net(x)), bf)


class Discriminator(nn.Module):
    """Three strided convolutions over the frame-stacked clip; one logit per clip."""

    def __init__(self, clip_frames: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        self.clip_frames = clip_frames
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3 * clip_frames, hidden, 4, stride=2, padding=1, dtype=DTYPE),
                nn.LeakyReLU(0.2),
                nn.Conv2d(hidden, 2 * hidden, 4, stride=2, padding=1, dtype=DTYPE),
                nn.LeakyReLU(0.2),
                nn.Conv2d(2 * hidden, 1, 4, stride=2, padding=1, dtype=DTYPE),
            )

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        B, F, H, W, ch = clip.shape
        if F != self.clip_frames:
            raise numeric.ShapeError(f"discriminator expects {self.clip_frames} frames, got {F}")
        x = clip.permute(0, 1, 4, 2, 3).reshape(B, F * ch, H, W)
        return self.net(x).mean(dim=(1, 2, 3))


def decode(decoder: Decoder, latents: torch.Tensor, clip_frames: int | None = None) -> torch.Tensor:
    """Decode a concatenated latent clip; checks its length when ``clip_frames`` is given."""
    if clip_frames is not None and latents.shape[1] != clip_frames:
        raise numeric.ShapeError(f"latent clip has {latents.shape[1]} frames, expected {clip_frames}")
    return decoder(latents)


def pretrain_vae(encoder, decoder, sample_fn, steps: int, lr: float = 2e-3, seed: int = 0) -> list[float]:
    """Joint reconstruction pretraining; ``sample_fn(gen)`` yields ``(pixels, latents)``.

    Loss: ``|D(E(p)) - p|^2 + |E(p) - z|^2 + |D(z) - p|^2`` (means).
    """
    gen = numeric.generator(seed, 17)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(decoder.parameters()), lr=lr)
    losses = []
    for _ in range(steps):
        p, z = sample_fn(gen)
        e = encoder(p)
        loss = Fn.mse_loss(decoder(e), p) + Fn.mse_loss(e, z) + Fn.mse_loss(decoder(z), p)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


@dataclass
class RefinerConfig:
    clip_frames: int = 8
    lambda_l1: float = 1.0
    lambda_l2: float = 1.0
    lambda_adv: float = 0.01
    decoder_lr: float = 1e-3
    disc_lr: float = 5e-4
    adv_loss: str = "logistic"  # or "hinge"


def reconstruction_loss(decoded, gt, cfg: RefinerConfig) -> torch.Tensor:
    return cfg.lambda_l1 * (decoded - gt).abs().mean() + cfg.lambda_l2 * ((decoded - gt) ** 2).mean()


def disc_loss(real_logit, fake_logit, kind: str = "logistic") -> torch.Tensor:
    if kind == "hinge":
        return Fn.relu(1 - real_logit).mean() + Fn.relu(1 + fake_logit).mean()
    return Fn.softplus(-real_logit).mean() + Fn.softplus(fake_logit).mean()


def generator_adv_loss(fake_logit, kind: str = "logistic") -> torch.Tensor:
    if kind == "hinge":
        return -fake_logit.mean()
    # non-saturating form of log(1 - D)
    return Fn.softplus(-fake_logit).mean()


class FrozenGuard:
    """Records a module's parameter hash and raises if it ever changes."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.digest = numeric.param_hash(module)

    def check(self) -> None:
        now = numeric.param_hash(self.module)
        if now != self.digest:
            raise AssertionError(f"frozen generator parameters changed ({self.digest[:12]} -> {now[:12]})")


def refine_step(decoder, discriminator, dec_opt, disc_opt, gen_latents, gt_pixels, cfg: RefinerConfig,
                guard: FrozenGuard | None = None) -> tuple[float, float]:
    """Discriminator sub-step then decoder sub-step; returns ``(loss_recon, loss_adv)``."""
    if guard is not None:
        guard.check()
    gen_latents = gen_latents.detach()
    decoded = decode(decoder, gen_latents, cfg.clip_frames)
    d_loss = disc_loss(discriminator(gt_pixels), discriminator(decoded.detach()), cfg.adv_loss)
    disc_opt.zero_grad(set_to_none=True)
    d_loss.backward()
    disc_opt.step()

    recon = reconstruction_loss(decoded, gt_pixels, cfg)
    adv = generator_adv_loss(discriminator(decoded), cfg.adv_loss)
    loss = recon + cfg.lambda_adv * adv
    dec_opt.zero_grad(set_to_none=True)
    disc_opt.zero_grad(set_to_none=True)
    loss.backward()
    dec_opt.step()
    if guard is not None:
        guard.check()
    return recon.item(), adv.item()


def train_refiner(base_decoder: Decoder, generator, clip_fn, steps: int, cfg: RefinerConfig, seed: int = 0):
    """Fine-tune a copy of ``base_decoder``; ``clip_fn(gen)`` yields ``(gen_latents, gt_pixels)``.

    Returns ``(refined_decoder, discriminator, trace)``; the generator must stay frozen.
    """
    guard = FrozenGuard(generator)
    refined = copy.deepcopy(base_decoder)
    disc = Discriminator(cfg.clip_frames, seed=seed)
    dec_opt = torch.optim.Adam(refined.parameters(), lr=cfg.decoder_lr)
    disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr, betas=(0.5, 0.999))
    gen = numeric.generator(seed, 19)
    trace = []
    for _ in range(steps):
        z, p = clip_fn(gen)
        trace.append(refine_step(refined, disc, dec_opt, disc_opt, z, p, cfg, guard))
    guard.check()
    return refined, disc, trace


def same_architecture(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return list(sa) == list(sb) and all(sa[k].shape == sb[k].shape for k in sa)
