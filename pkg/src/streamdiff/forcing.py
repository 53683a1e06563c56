"""Long-horizon self-rollout training with recaching and tail-only gating.

One rollout persists across training iterations: each iteration generates
the next window from the rollout's own caches, distils on it, and advances
``l`` by ``w``. The rollout resets once ``l`` reaches ``total_frames``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from . import numeric
from .accdmd import DMDConfig, OralMask, Telemetry, generator_update
from .cache import KVCacheSet, SinkCache, recache, set_sink, sink_context
from .diffusion import TimestepSchedule, add_noise, few_step_sample
from .model import ConditionSet


@dataclass
class ForcingConfig:
    chunk_frames: int = 4
    cache_frames: int = 12
    total_frames: int = 64
    long_threshold: int = 8
    tail_only: bool = True
    use_sink: bool = True
    sink_offset: int | None = None

    def __post_init__(self):
        w = self.chunk_frames
        if self.cache_frames % w:
            raise ValueError(f"cache capacity {self.cache_frames} must be a multiple of the chunk size {w}")
        if self.total_frames % w or self.total_frames < 2 * w:
            raise ValueError(f"total_frames {self.total_frames} must be a multiple of {w} and at least two chunks")

    @property
    def delta(self) -> int:
        return self.cache_frames + self.chunk_frames if self.sink_offset is None else self.sink_offset

    @property
    def n_switch(self) -> int:
        return self.total_frames // self.chunk_frames - 1


@dataclass
class RolloutState:
    kv: KVCacheSet
    sink: SinkCache
    cond: ConditionSet  # covers the whole rollout
    mask: OralMask | None
    l: int = 0
    switch_index: int = 1
    switch_point: int = 4
    long_threshold: int = 8
    frames: list[torch.Tensor] = field(default_factory=list)
    recache_calls: int = 0
    rollout_id: int = 0

    def generated(self) -> torch.Tensor:
        return torch.cat(self.frames, dim=1)


def new_rollout(student, sched, cfg: ForcingConfig, cond, mask, gen, rollout_id=0) -> RolloutState:
    c = student.config
    kv = KVCacheSet(sched.steps, c.n_layers, cfg.cache_frames, c.cells)
    sink = SinkCache(c.cells)
    if cfg.use_sink:
        set_sink(sink, student, cond.reference)
    i = int(torch.randint(1, cfg.n_switch + 1, (1,), generator=gen))
    return RolloutState(kv, sink, cond, mask, 0, i, i * cfg.chunk_frames, cfg.long_threshold, rollout_id=rollout_id)


def tail_gate(w: int, l: int, long_threshold: int) -> torch.Tensor:
    """Per-frame weights: only the final frame once ``l >= long_threshold``."""
    gate = torch.ones(w, dtype=numeric.DTYPE)
    if l >= long_threshold:
        gate[:-1] = 0.0
    return gate


@dataclass
class StepContext:
    """What the gradient pass needs from a rollout step."""

    contexts: list  # per sampling index, pre-commit cache context
    trajectory: list
    positions: torch.Tensor
    cond: ConditionSet
    l_before: int


def rollout_step(state: RolloutState, student, sched: TimestepSchedule, gen, cfg: ForcingConfig):
    """Generate the next window from the rollout caches and commit it.

    Returns ``(window, state, StepContext)``; the window is detached.
    """
    w = cfg.chunk_frames
    l0 = state.l
    pos = torch.arange(l0, l0 + w)
    cond = state.cond.frames(l0, l0 + w)
    contexts = [state.kv.context(i) for i in range(len(state.kv))]
    sink = state.sink.context(l0 - cfg.delta) if state.sink.is_set else None
    res = few_step_sample(student, cond, sched, gen, caches=state.kv, sink=sink, positions=pos, record=True,
                          batch=cond.audio.shape[0])
    for i, kv in res.kv.items():
        state.kv.append_evict(i, kv, pos)
    state.frames.append(res.x0)
    state.l += w
    return res.x0, state, StepContext(contexts, res.trajectory, pos, cond, l0)


def maybe_recache(state: RolloutState, student, cfg: ForcingConfig, seed: int) -> bool:
    if state.l != state.switch_point or not state.frames:
        return False
    state.kv = recache(
        student, state.cond.frames(0, state.l), state.kv, state.sink if state.sink.is_set else None,
        state.generated(), 0, seed=seed, chunk_frames=cfg.chunk_frames, sink_offset=cfg.delta,
    )
    state.recache_calls += 1
    return True


class ForcingTrainer:
    """Iterates the forcing loop; ``sample_fn(gen)`` returns ``(cond, mask)`` for one rollout."""

    def __init__(
        self,
        student,
        teacher,
        fake_model,
        sample_fn: Callable,
        sched: TimestepSchedule,
        cfg: ForcingConfig,
        dmd: DMDConfig,
        seed: int = 0,
        telemetry: Telemetry | None = None,
    ):
        self.student, self.teacher, self.fake = student, teacher, fake_model
        self.sample_fn = sample_fn
        self.sched, self.cfg, self.dmd = sched, cfg, dmd
        self.seed = seed
        self.gen = numeric.generator(seed, 13)
        self.telemetry = telemetry or Telemetry()
        self.s_opt = torch.optim.Adam(student.parameters(), lr=dmd.student_lr)
        self.f_opt = torch.optim.Adam(fake_model.parameters(), lr=dmd.fake_lr)
        for p in teacher.parameters():
            p.requires_grad_(False)
        self.state: RolloutState | None = None
        self.n_rollouts = 0
        self.iteration = 0

    def _reset(self):
        cond, mask = self.sample_fn(self.gen)
        if cond.n_frames < self.cfg.total_frames:
            raise ValueError(f"rollout conditions cover {cond.n_frames} frames, need {self.cfg.total_frames}")
        self.state = new_rollout(self.student, self.sched, self.cfg, cond, mask, self.gen, self.n_rollouts)
        self.n_rollouts += 1

    def step(self) -> dict:
        cfg, sched = self.cfg, self.sched
        if self.state is None or self.state.l >= cfg.total_frames:
            self._reset()
        st = self.state
        recached = maybe_recache(st, self.student, cfg, seed=self.seed * 1000003 + self.iteration)
        _, st, ctx = rollout_step(st, self.student, sched, self.gen, cfg)

        k = sched.sample_k(self.gen)
        idx = sched.index(k)
        level = sched.level(k)
        z = add_noise(ctx.trajectory[idx][2], level, self.gen)
        ref = st.cond.reference
        sink_pos = ctx.l_before - cfg.delta
        s_sink = sink_context(self.student, ref, sink_pos) if cfg.use_sink else None
        generated, _ = self.student(z, level, ctx.cond, cache=ctx.contexts[idx], sink=s_sink, positions=ctx.positions)
        gate = tail_gate(cfg.chunk_frames, ctx.l_before, cfg.long_threshold) if cfg.tail_only else None
        # teacher and fake see the window cache-free, sink at the same relative offset;
        # only the student drops its sink in the no-sink ablation
        local = torch.arange(cfg.chunk_frames)
        with torch.no_grad():
            t_sink = sink_context(self.teacher, ref, -cfg.delta)
        rec = generator_update(
            generated, self.s_opt, list(self.student.parameters()), self.teacher, self.fake, self.f_opt, ctx.cond,
            sched, self.gen, st.mask, self.dmd, teacher_sink=t_sink,
            fake_sink_fn=lambda: sink_context(self.fake, ref, -cfg.delta),
            positions=local, frame_gate=gate, telemetry=self.telemetry,
            stage="forcing", step=self.iteration, l=ctx.l_before, k=k, recached=recached,
            gated=gate is not None and bool((gate[:-1] == 0).all()) and cfg.chunk_frames > 1,
            rollout=st.rollout_id, switch_index=st.switch_index,
        )
        self.iteration += 1
        return rec

    def run(self, steps: int) -> list[dict]:
        for _ in range(steps):
            self.step()
        return self.telemetry.records


def training_loop(student, teacher, fake_model, sample_fn, sched, cfg: ForcingConfig, dmd: DMDConfig, steps: int,
                  seed: int = 0, telemetry: Telemetry | None = None):
    trainer = ForcingTrainer(student, teacher, fake_model, sample_fn, sched, cfg, dmd, seed, telemetry)
    trainer.run(steps)
    return student, trainer
