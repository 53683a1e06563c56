"""Drift, sync and sharpness proxies plus the metric record."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as Fn

from .. import numeric


def _outside(mask) -> torch.Tensor:
    return (1.0 - mask.values)[..., None]


def drift_curve(latents: torch.Tensor, reference: torch.Tensor, mask) -> list[float]:
    """Per-frame RMS distance of the non-oral region to the reference.

    ``latents`` is ``[F, H', W', C]`` (or batched ``[B, F, ...]``, averaged over B).
    """
    if latents.dim() == 4:
        latents = latents[None]
    w = _outside(mask)
    diff = (latents - reference.reshape(-1, 1, *reference.shape[-3:])) * w
    n = float(w.sum()) * latents.shape[-1] / w.shape[-1]
    per = (diff.pow(2).sum(dim=(2, 3, 4)) / n).sqrt()
    return per.mean(dim=0).tolist()


def oral_energy(latents: torch.Tensor, mask) -> torch.Tensor:
    m = mask.values[..., None]
    n = float(m.sum()) * latents.shape[-1]
    return ((latents * m).pow(2).sum(dim=(-3, -2, -1)) / n).sqrt()


def pearson(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.reshape(-1) - a.mean()
    b = b.reshape(-1) - b.mean()
    den = float(a.norm() * b.norm())
    if den < 1e-12:
        return 0.0
    return max(-1.0, min(1.0, float((a * b).sum()) / den))


def sync_proxy(latents: torch.Tensor, envelope: torch.Tensor, mask) -> float:
    """Correlation between oral-region energy and the driving envelope."""
    if latents.dim() == 5:
        latents = latents[0]
    return pearson(oral_energy(latents, mask), envelope[: latents.shape[0]])


_SOBEL = torch.tensor([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]], dtype=numeric.DTYPE)


def sobel_magnitude(pixels: torch.Tensor) -> float:
    """Mean gradient magnitude of grayscale frames; ``pixels`` is ``[..., H, W, 3]``."""
    gray = pixels.mean(dim=-1).reshape(-1, 1, *pixels.shape[-3:-1])
    kx = _SOBEL[None, None]
    ky = _SOBEL.T[None, None]
    gx = Fn.conv2d(Fn.pad(gray, (1, 1, 1, 1), mode="replicate"), kx)
    gy = Fn.conv2d(Fn.pad(gray, (1, 1, 1, 1), mode="replicate"), ky)
    return float((gx.pow(2) + gy.pow(2)).sqrt().mean())


@dataclass
class MetricRecord:
    name: str
    seed: int
    drift: list[float]
    sync_proxy: float
    calls: dict
    horizon_chunks: int
    extra: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(d < 0 for d in self.drift):
            raise ValueError("drift must be non-negative")
        if not -1.0 <= self.sync_proxy <= 1.0:
            raise ValueError(f"sync proxy {self.sync_proxy} outside [-1, 1]")

    @property
    def horizon_drift(self) -> float:
        """Mean drift over the final chunk."""
        w = self.extra.get("chunk_frames", 1)
        tail = self.drift[-w:]
        return sum(tail) / len(tail) if tail else 0.0

    def canonical(self) -> dict:
        """Everything except wall times, so reruns compare byte-for-byte."""
        d = asdict(self)
        d.pop("wall_times")
        return d

    def to_json(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricRecord":
        return cls.from_dict(json.loads(text))
