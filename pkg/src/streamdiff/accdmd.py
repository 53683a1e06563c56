"""Phase-scheduled DMD objective with oral-region routing of the CFG term.

All "scores" are clean-latent predictions of the respective network. CFG is
audio CFG: the unconditional branch swaps the audio track for ``null_audio``.

Low-SNR taus (``tau >= snr_split``) use the standard guided objective::

    field = cfg(teacher_c, teacher_0) - fake_c

High-SNR taus keep the teacher unguided and guide the fake score instead, only
inside the oral mask::

    field = teacher_c - (M * cfg(fake_c, fake_0) + (1 - M) * fake_c)
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import torch

from . import numeric
from .diffusion import HIGH, LOW, TimestepSchedule, add_noise, cfg_combine, classify_snr

ACC = "acc"
GLOBAL = "global"  # plain CFG-DMD at every tau


@dataclass
class OralMask:
    values: torch.Tensor  # [H', W']

    def __post_init__(self):
        self.values = self.values.to(numeric.DTYPE).clamp(0.0, 1.0)

    def spatial(self) -> torch.Tensor:
        """Broadcastable against latents ``[B, F, H', W', C]``."""
        return self.values[None, None, :, :, None]

    @classmethod
    def rectangle(cls, grid, rows, cols) -> "OralMask":
        m = torch.zeros(*grid, dtype=numeric.DTYPE)
        m[rows[0] : rows[1], cols[0] : cols[1]] = 1.0
        return cls(m)


@dataclass
class ScorePair:
    s_real: torch.Tensor
    s_fake: torch.Tensor
    phase: str
    region_mode: str  # "global" | "oral-masked"

    def __post_init__(self):
        if self.s_real.shape != self.s_fake.shape:
            raise numeric.ShapeError(f"score shapes differ: {tuple(self.s_real.shape)} vs {tuple(self.s_fake.shape)}")


def decompose_cfg_gradient(s_real_cond, s_real_uncond, s_fake, alpha: float):
    """Return ``(grad_full, delta_dm, delta_ca)`` with ``grad_full = dm + (alpha - 1) ca``."""
    if not (s_real_cond.shape == s_real_uncond.shape == s_fake.shape):
        raise numeric.ShapeError(
            f"shapes {tuple(s_real_cond.shape)}, {tuple(s_real_uncond.shape)}, {tuple(s_fake.shape)} differ"
        )
    delta_dm = s_real_cond - s_fake
    delta_ca = s_real_cond - s_real_uncond
    return delta_dm + (alpha - 1.0) * delta_ca, delta_dm, delta_ca


@dataclass
class PhasedField:
    field: torch.Tensor
    phase: str
    pair: ScorePair
    teacher_passes: int
    fake_passes: int


def phased_scores(
    teacher,
    fake_model,
    x_tau: torch.Tensor,
    tau: float,
    cond,
    alpha: float,
    mask: OralMask | None,
    phase: str,
    sched: TimestepSchedule,
    teacher_sink=None,
    fake_sink=None,
    positions=None,
    fake_alpha: float | None = None,
    routing: str = ACC,
) -> PhasedField:
    """Assemble the per-element distillation field for one renoised sample."""
    if phase != classify_snr(tau, sched):
        raise ValueError(f"phase {phase!r} does not match tau={tau} (split {sched.snr_split})")
    fake_alpha = alpha if fake_alpha is None else fake_alpha
    t0, f0 = teacher.calls["forward"], fake_model.calls["forward"]
    kw = dict(positions=positions)
    with torch.no_grad():
        real_c, _ = teacher(x_tau, tau, cond, sink=teacher_sink, **kw)
        if routing == GLOBAL or phase == LOW:
            real_0, _ = teacher(x_tau, tau, cond, sink=teacher_sink, use_audio=False, **kw)
            fake_c, _ = fake_model(x_tau, tau, cond, sink=fake_sink, **kw)
            s_real = cfg_combine(real_c, real_0, alpha)
            pair = ScorePair(s_real, fake_c, phase, "global")
        else:
            fake_c, _ = fake_model(x_tau, tau, cond, sink=fake_sink, **kw)
            fake_0, _ = fake_model(x_tau, tau, cond, sink=fake_sink, use_audio=False, **kw)
            fake_cfg = cfg_combine(fake_c, fake_0, fake_alpha)
            m = mask.spatial() if mask is not None else torch.zeros(())
            blend = m * fake_cfg + (1.0 - m) * fake_c
            pair = ScorePair(real_c, blend, phase, "oral-masked")
    return PhasedField(
        pair.s_real - pair.s_fake,
        phase,
        pair,
        teacher.calls["forward"] - t0,
        fake_model.calls["forward"] - f0,
    )


def normalize_field(field: torch.Tensor) -> torch.Tensor:
    dims = tuple(range(1, field.dim()))
    scale = field.abs().mean(dim=dims, keepdim=True) + 1e-8
    return field / scale


def dmd_generator_loss(gradient_field: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Stop-gradient surrogate whose gradient w.r.t. ``generated`` is ``-normalize(field)``."""
    if gradient_field.shape != generated.shape:
        raise numeric.ShapeError(f"field {tuple(gradient_field.shape)} vs generated {tuple(generated.shape)}")
    target = numeric.stop_gradient(generated + normalize_field(gradient_field.detach()))
    return 0.5 * ((generated - target) ** 2).sum()


def denoising_loss(model, x0, tau, cond, gen, sink=None, positions=None, use_audio=True) -> torch.Tensor:
    x_tau = add_noise(x0, tau, gen)
    pred, _ = model(x_tau, tau, cond, sink=sink, positions=positions, use_audio=use_audio)
    return ((pred - x0) ** 2).mean()


def train_fake_score(fake_model, optimizer, generated, cond, sched, gen, sink_fn=None, positions=None, tau=None) -> float:
    """One denoising-regression step of the fake-score net on detached student outputs."""
    if generated.requires_grad:
        raise ValueError("train_fake_score expects outputs detached from the student graph")
    tau = sched.sample_tau(gen) if tau is None else tau
    sink = sink_fn() if sink_fn is not None else None
    loss = denoising_loss(fake_model, generated, tau, cond, gen, sink=sink, positions=positions)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


# ---------------------------------------------------------------------------
# teacher training


@dataclass
class Clip:
    latents: torch.Tensor  # [B, F, H', W', C]
    cond: object  # ConditionSet
    start: int = 0


def train_denoiser(
    model,
    sample_fn: Callable[[torch.Generator], Clip],
    steps: int,
    lr: float,
    seed: int,
    p_uncond: float = 0.15,
    sink_offset: int = 16,
    use_sink: bool = True,
    t_range: tuple[float, float] = (0.02, 1.0),
) -> list[float]:
    """Plain denoising training with audio dropout; returns the loss trace."""
    from .cache import sink_context

    gen = numeric.generator(seed, 7)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(steps):
        clip = sample_fn(gen)
        lo, hi = t_range
        tau = lo + (hi - lo) * float(torch.rand((), generator=gen, dtype=numeric.DTYPE))
        drop = float(torch.rand((), generator=gen)) < p_uncond
        F = clip.latents.shape[1]
        pos = torch.arange(clip.start, clip.start + F)
        sink = sink_context(model, clip.cond.reference, clip.start - sink_offset) if use_sink else None
        loss = denoising_loss(model, clip.latents, tau, clip.cond, gen, sink=sink, positions=pos, use_audio=not drop)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        losses.append(loss.item())
    return losses


def eval_denoiser(model, clips: Iterable[Clip], seed: int, taus=(0.2, 0.4, 0.6, 0.8), sink_offset=16, use_sink=True) -> float:
    """Mean denoising loss over fixed clips and noise draws."""
    from .cache import sink_context

    total, n = 0.0, 0
    with torch.no_grad():
        for ci, clip in enumerate(clips):
            F = clip.latents.shape[1]
            pos = torch.arange(clip.start, clip.start + F)
            sink = sink_context(model, clip.cond.reference, clip.start - sink_offset) if use_sink else None
            for ti, tau in enumerate(taus):
                gen = numeric.generator(seed, ci, ti)
                total += float(denoising_loss(model, clip.latents, tau, clip.cond, gen, sink=sink, positions=pos))
                n += 1
    return total / max(n, 1)


def sft_teacher(teacher, chunks: list[Clip], steps: int, lr: float, seed: int, **kw):
    """Fine-tune a copy of ``teacher`` on short chunks of the streaming length."""
    adapted = copy.deepcopy(teacher)
    if not chunks or steps <= 0:
        return adapted
    w = adapted.config.chunk_frames
    bad = [c.latents.shape[1] for c in chunks if c.latents.shape[1] != w]
    if bad:
        raise ValueError(f"SFT chunks must have {w} frames, got {sorted(set(bad))}")

    def sample(gen):
        return chunks[int(torch.randint(len(chunks), (1,), generator=gen))]

    train_denoiser(adapted, sample, steps, lr, seed, **kw)
    return adapted


# ---------------------------------------------------------------------------
# generator step


@dataclass
class DMDConfig:
    alpha: float = 1.8
    fake_alpha: float = 1.8
    routing: str = ACC
    student_lr: float = 1e-4
    fake_lr: float = 2e-4
    grad_clip: float = 1.0


@dataclass
class Telemetry:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def log(self, **record) -> dict:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record


class TrainingDiverged(RuntimeError):
    pass


def generator_update(
    generated: torch.Tensor,
    student_opt,
    student_params,
    teacher,
    fake_model,
    fake_opt,
    cond,
    sched: TimestepSchedule,
    gen: torch.Generator,
    mask: OralMask | None,
    cfg: DMDConfig,
    teacher_sink=None,
    fake_sink_fn=None,
    positions=None,
    frame_gate: torch.Tensor | None = None,
    telemetry: Telemetry | None = None,
    **extra,
) -> dict:
    """Distillation step on ``generated`` (student output with graph) then one fake step."""
    tau = sched.sample_tau(gen)
    phase = classify_snr(tau, sched)
    x_tau = add_noise(generated.detach(), tau, gen)
    with torch.no_grad():
        fake_sink = fake_sink_fn() if fake_sink_fn is not None else None
    pf = phased_scores(
        teacher, fake_model, x_tau, tau, cond, cfg.alpha, mask, phase, sched,
        teacher_sink=teacher_sink, fake_sink=fake_sink, positions=positions,
        fake_alpha=cfg.fake_alpha, routing=cfg.routing,
    )
    fld = pf.field
    if frame_gate is not None:
        fld = fld * frame_gate.to(fld.dtype)[None, :, None, None, None]
    loss = dmd_generator_loss(fld, generated)
    if not math.isfinite(loss.item()):
        raise TrainingDiverged(f"non-finite generator loss at tau={tau} phase={phase}: {loss.item()}")
    student_opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(student_params, cfg.grad_clip)
    student_opt.step()
    fake_loss = train_fake_score(fake_model, fake_opt, generated.detach(), cond, sched, gen, fake_sink_fn, positions)
    rec = dict(
        phase=phase,
        tau=tau,
        teacher_passes=pf.teacher_passes,
        fake_passes=pf.fake_passes,
        loss=loss.item(),
        field_norm=float(fld.abs().mean()),
        fake_loss=fake_loss,
        **extra,
    )
    if telemetry is not None:
        telemetry.log(**rec)
    return rec


def train_accdmd(
    student,
    teacher,
    fake_model,
    sample_fn: Callable[[torch.Generator], tuple],
    steps: int,
    sched: TimestepSchedule,
    cfg: DMDConfig,
    seed: int,
    sink_offset: int = 16,
    use_sink: bool = True,
    telemetry: Telemetry | None = None,
):
    """Distil on first windows: backward simulation, student pass, phased field.

    ``sample_fn(gen)`` returns ``(Clip, OralMask)`` for one chunk of the
    streaming length. Returns the telemetry records.
    """
    from .cache import sink_context
    from .diffusion import backward_simulate

    telemetry = telemetry or Telemetry()
    gen = numeric.generator(seed, 11)
    s_opt = torch.optim.Adam(student.parameters(), lr=cfg.student_lr)
    f_opt = torch.optim.Adam(fake_model.parameters(), lr=cfg.fake_lr)
    for p in teacher.parameters():
        p.requires_grad_(False)
    for it in range(steps):
        clip, mask = sample_fn(gen)
        F = clip.latents.shape[1]
        pos = torch.arange(clip.start, clip.start + F)
        ref = clip.cond.reference
        sink_pos = clip.start - sink_offset
        # only the student drops its sink in the no-sink ablation
        ctx = lambda m: sink_context(m, ref, sink_pos)
        s_ctx = ctx if use_sink else (lambda m: None)
        with torch.no_grad():
            s_sink = s_ctx(student)
            t_sink = ctx(teacher)
        k = sched.sample_k(gen)
        noise = numeric.randn(clip.latents.shape, gen)
        z = backward_simulate(student, noise, sched, clip.cond, k, gen, sink=s_sink, positions=pos)
        generated, _ = student(z, sched.level(k), clip.cond, sink=s_ctx(student), positions=pos)
        generator_update(
            generated, s_opt, list(student.parameters()), teacher, fake_model, f_opt, clip.cond, sched, gen,
            mask, cfg, teacher_sink=t_sink, fake_sink_fn=(lambda: ctx(fake_model)), positions=pos,
            telemetry=telemetry, stage="accdmd", step=it, k=k,
        )
    return telemetry.records
