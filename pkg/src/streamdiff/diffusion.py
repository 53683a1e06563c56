"""Noising, the few-step schedule, SNR phases, CFG and the student sampler.

Noise levels follow the flow convention ``x_t = (1 - t) x0 + t eps``. The
schedule stores its levels in sampling order (noisiest first). Where an index
``k`` is used, it follows the inference loop's labelling ``j = T, ..., 1``:
``t_T`` is the first (noisiest) level and ``t_1`` the last.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import numeric

LOW = "low"
HIGH = "high"


@dataclass(frozen=True)
class TimestepSchedule:
    steps: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25)
    snr_split: float = 0.5
    tau_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(float(s) for s in self.steps))
        object.__setattr__(self, "tau_grid", tuple(float(s) for s in self.tau_grid))
        if not self.steps:
            raise ValueError("schedule needs at least one step")
        if any(not 0.0 < s <= 1.0 for s in self.steps):
            raise ValueError(f"steps must lie in (0, 1], got {self.steps}")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError(f"steps must be strictly decreasing, got {self.steps}")

    @property
    def T(self) -> int:
        return len(self.steps)

    def level(self, k: int) -> float:
        """Noise level ``t_k`` (``k = T`` is the first sampling step)."""
        if not 1 <= k <= self.T:
            raise ValueError(f"step label {k} outside 1..{self.T}")
        return self.steps[self.T - k]

    def index(self, k: int) -> int:
        """Position of ``t_k`` in sampling order."""
        return self.T - k

    @property
    def low_set(self) -> tuple[float, ...]:
        return tuple(t for t in self.tau_grid if t >= self.snr_split)

    @property
    def high_set(self) -> tuple[float, ...]:
        return tuple(t for t in self.tau_grid if t < self.snr_split)

    def sample_tau(self, gen: torch.Generator) -> float:
        return self.tau_grid[int(torch.randint(len(self.tau_grid), (1,), generator=gen))]

    def sample_k(self, gen: torch.Generator) -> int:
        return int(torch.randint(1, self.T + 1, (1,), generator=gen))

    @classmethod
    def uniform(cls, n: int, **kw) -> "TimestepSchedule":
        return cls(steps=tuple((n - i) / n for i in range(n)), **kw)


def add_noise(x0: torch.Tensor, t: float, gen: torch.Generator | None = None, noise: torch.Tensor | None = None):
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"noise level {t} outside [0, 1]")
    if noise is None:
        noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return (1.0 - t) * x0 + t * noise


def classify_snr(tau: float, sched: TimestepSchedule) -> str:
    # large noise = low SNR; the split itself counts as low
    return LOW if tau >= sched.snr_split else HIGH


def cfg_combine(s_cond: torch.Tensor, s_uncond: torch.Tensor, alpha: float) -> torch.Tensor:
    if s_cond.shape != s_uncond.shape:
        raise numeric.ShapeError(f"cfg_combine: {tuple(s_cond.shape)} vs {tuple(s_uncond.shape)}")
    # written so that alpha = 1 and alpha = 0 return the inputs exactly
    return alpha * s_cond + (1.0 - alpha) * s_uncond


@dataclass
class SampleResult:
    x0: torch.Tensor
    kv: dict[int, list] = field(default_factory=dict)  # sampling index -> per-layer (k, v)
    trajectory: list[tuple[float, torch.Tensor, torch.Tensor]] = field(default_factory=list)  # (t, input, pred)


def few_step_sample(
    model,
    cond,
    sched: TimestepSchedule,
    gen: torch.Generator,
    caches=None,
    sink=None,
    positions=None,
    cfg_alpha: float | None = None,
    n_steps: int | None = None,
    noise: torch.Tensor | None = None,
    batch: int = 1,
    record: bool = False,
) -> SampleResult:
    """Denoise one chunk from pure noise through ``sched``.

    Without ``cfg_alpha`` every step is a single conditional pass. ``caches``
    supplies one context per sampling index (``caches.context(i)``); the
    keys/values produced at each step are returned, not committed.
    """
    c = model.config
    shape = (batch, cond.n_frames, *c.frame_grid, c.latent_channels)
    x = numeric.randn(shape, gen) if noise is None else noise
    n_steps = sched.T if n_steps is None else n_steps
    out = SampleResult(x0=x)
    with torch.no_grad():
        for i in range(n_steps):
            t = sched.steps[i]
            ctx = caches.context(i) if caches is not None else None
            pred, kv = model(x, t, cond, cache=ctx, sink=sink, positions=positions)
            if cfg_alpha is not None:
                pred_u, _ = model(x, t, cond, cache=ctx, sink=sink, positions=positions, use_audio=False)
                pred = cfg_combine(pred, pred_u, cfg_alpha)
            out.kv[i] = kv
            if record:
                out.trajectory.append((t, x, pred))
            if i + 1 < n_steps:
                x = add_noise(pred, sched.steps[i + 1], gen)
            out.x0 = pred
    return out


def backward_simulate(
    student,
    noise: torch.Tensor,
    sched: TimestepSchedule,
    cond,
    stop_at: int,
    gen: torch.Generator,
    caches=None,
    sink=None,
    positions=None,
) -> torch.Tensor:
    """Run the student sampler from ``noise`` through level ``t_k`` and renoise to ``t_k``.

    ``stop_at = T`` costs one pass; ``stop_at = 1`` samples the whole chunk before
    renoising to the last level. No gradient is recorded.
    """
    if not 1 <= stop_at <= sched.T:
        raise ValueError(f"stop_at {stop_at} outside 1..{sched.T}")
    res = few_step_sample(
        student, cond, sched, gen, caches=caches, sink=sink, positions=positions,
        n_steps=sched.T - stop_at + 1, noise=noise, batch=noise.shape[0],
    )
    return add_noise(res.x0, sched.level(stop_at), gen)
