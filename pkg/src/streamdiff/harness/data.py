"""Synthetic talking-identity latents, audio tracks and an analytic pixel renderer.

Per identity: a background pattern (zero inside the oral rectangle), a slow
mean-reverting global drift, and a mouth pattern scaled by the audio envelope.
The mouth pattern and the audio direction are shared by all identities so the
audio-to-mouth rule is learnable from few identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as Fn

from .. import numeric
from ..accdmd import OralMask
from ..model import ConditionSet

DTYPE = numeric.DTYPE


@dataclass(frozen=True)
class DataConfig:
    grid: tuple[int, int] = (4, 4)
    channels: int = 4
    cond_dim: int = 8
    oral_rows: tuple[int, int] = (3, 4)
    oral_cols: tuple[int, int] = (1, 3)
    background_scale: float = 0.8
    mouth_scale: float = 1.5
    drift_scale: float = 0.15
    drift_rho: float = 0.97
    frame_noise: float = 0.02
    audio_noise: float = 0.05
    silence_prob: float = 0.25


def _shared(cfg: DataConfig):
    g = numeric.generator(0xA0D10)
    mouth = (0.5 + torch.rand(cfg.oral_rows[1] - cfg.oral_rows[0], cfg.oral_cols[1] - cfg.oral_cols[0], cfg.channels,
                              generator=g, dtype=DTYPE)) * cfg.mouth_scale
    direction = numeric.randn((cfg.cond_dim,), g)
    direction = 2.0 * direction / direction.norm()
    return mouth, direction


@dataclass
class SyntheticIdentity:
    seed: int
    base: torch.Tensor  # [H', W', C]
    drift_dir: torch.Tensor  # [H', W', C], zero in the oral rect
    mask: OralMask
    cfg: DataConfig

    @classmethod
    def create(cls, seed: int, cfg: DataConfig = DataConfig()) -> "SyntheticIdentity":
        g = numeric.generator(seed, 1)
        mask = OralMask.rectangle(cfg.grid, cfg.oral_rows, cfg.oral_cols)
        outside = (1.0 - mask.values)[..., None]
        base = cfg.background_scale * numeric.randn((*cfg.grid, cfg.channels), g) * outside
        d = numeric.randn((*cfg.grid, cfg.channels), g) * outside
        d = d / d.pow(2).mean().sqrt()
        return cls(seed, base, d, mask, cfg)

    @property
    def reference(self) -> torch.Tensor:
        return self.base.clone()

    def envelope(self, n_frames: int, seed: int, silent: bool = False) -> torch.Tensor:
        if silent:
            return torch.zeros(n_frames, dtype=DTYPE)
        g = numeric.generator(self.seed, seed, 2)
        z = torch.zeros(n_frames, dtype=DTYPE)
        eps = numeric.randn((n_frames,), g)
        prev = 0.0
        for f in range(n_frames):
            prev = 0.6 * prev + eps[f]
            z[f] = prev
        env = torch.sigmoid(2.0 * z)
        # silent segments of 8 frames
        seg = torch.rand((n_frames + 7) // 8, generator=g, dtype=DTYPE) < self.cfg.silence_prob
        return env * (~seg).repeat_interleave(8)[:n_frames].to(DTYPE)

    def video(self, n_frames: int, seed: int, silent: bool = False):
        """Return ``(latents [F, H', W', C], audio [F, cond], envelope [F])``."""
        cfg = self.cfg
        mouth, direction = _shared(cfg)
        env = self.envelope(n_frames, seed, silent)
        g = numeric.generator(self.seed, seed, 3)
        a = torch.zeros(n_frames, dtype=DTYPE)
        eps = numeric.randn((n_frames,), g)
        s = (1 - cfg.drift_rho**2) ** 0.5
        for f in range(1, n_frames):
            a[f] = cfg.drift_rho * a[f - 1] + s * eps[f]
        outside = (1.0 - self.mask.values)[None, ..., None]
        noise = cfg.frame_noise * numeric.randn((n_frames, *cfg.grid, cfg.channels), g) * outside
        x = self.base[None] + cfg.drift_scale * a[:, None, None, None] * self.drift_dir[None] + noise
        r0, r1 = cfg.oral_rows
        c0, c1 = cfg.oral_cols
        x[:, r0:r1, c0:c1] = env[:, None, None, None] * mouth[None]
        audio = env[:, None] * direction[None] + cfg.audio_noise * numeric.randn((n_frames, cfg.cond_dim), g)
        return x, audio, env


@dataclass
class Sample:
    identity: SyntheticIdentity
    latents: torch.Tensor  # [F, H', W', C]
    audio: torch.Tensor
    envelope: torch.Tensor

    @property
    def reference(self) -> torch.Tensor:
        return self.identity.reference

    @property
    def mask(self) -> OralMask:
        return self.identity.mask

    def cond(self, start: int = 0, stop: int | None = None) -> ConditionSet:
        stop = self.latents.shape[0] if stop is None else stop
        return ConditionSet(self.audio[None, start:stop], reference=self.reference[None])


def gen_dataset(n_identities: int, frames_per_video: int, seed: int, cfg: DataConfig = DataConfig(),
                silent: bool = False) -> list[Sample]:
    if n_identities < 1:
        raise ValueError("need at least one identity")
    out = []
    for i in range(n_identities):
        ident = SyntheticIdentity.create(seed * 1000 + i, cfg)
        x, audio, env = ident.video(frames_per_video, seed, silent)
        out.append(Sample(ident, x, audio, env))
    return out


# ---------------------------------------------------------------------------
# pixels


def _render_matrix(channels: int) -> torch.Tensor:
    g = numeric.generator(0x9E7)
    return 0.7 * numeric.randn((channels - 1, 3), g)


def render_pixels(latents: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Analytic renderer ``[..., F, H', W', C] -> [..., F, 4H', 4W', 3]`` in ``[-1, 1]``.

    The first ``C - 1`` channels set smooth colour; the last modulates a
    pixel-level checker texture (the high-frequency content).
    """
    lead = latents.shape[:-3]
    H, W, C = latents.shape[-3:]
    z = latents.reshape(-1, H, W, C)
    low = z[..., : C - 1] @ _render_matrix(C)
    low = Fn.interpolate(low.permute(0, 3, 1, 2), scale_factor=factor, mode="bilinear", align_corners=False)
    amp = Fn.softplus(z[..., C - 1])[:, None]
    amp = Fn.interpolate(amp, scale_factor=factor, mode="nearest")
    ii = torch.arange(H * factor)[:, None]
    jj = torch.arange(W * factor)[None, :]
    checker = ((ii + jj) % 2 * 2 - 1).to(DTYPE)
    px = torch.tanh(0.6 * (low + 0.5 * amp * checker))
    return px.permute(0, 2, 3, 1).reshape(*lead, H * factor, W * factor, 3)
