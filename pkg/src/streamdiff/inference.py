"""Streaming chunk-by-chunk generation with per-timestep caches and a rolling sink."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from . import numeric
from .cache import KVCacheSet, SinkCache, set_sink, sink_context
from .diffusion import TimestepSchedule, add_noise, few_step_sample
from .model import ConditionSet

FIRST_CHUNK = "first_chunk"
REFERENCE = "reference"


def rolling_rope(sink: SinkCache, current_start_position: int, delta: int) -> torch.Tensor:
    """Move the sink to ``current_start_position - delta``; returns its token positions."""
    sink.position = current_start_position - delta
    return (sink.position + torch.arange(max(sink.n_frames, 1))).repeat_interleave(sink.cells)


def split_conditions(cond_seq, M: int, w: int) -> list[ConditionSet]:
    if isinstance(cond_seq, ConditionSet):
        if cond_seq.n_frames < M * w:
            raise ValueError(f"condition track has {cond_seq.n_frames} frames, {M} chunks need {M * w}")
        return [cond_seq.frames(i * w, (i + 1) * w) for i in range(M)]
    cond_seq = list(cond_seq)
    if len(cond_seq) < M:
        raise ValueError(f"{len(cond_seq)} condition chunks supplied for {M} chunks")
    return cond_seq[:M]


class StreamSession:
    """State of one generation stream.

    Args:
        model: the few-step student.
        sched: sampling schedule; one cache buffer per level.
        cache_frames: capacity ``L`` of every buffer, a multiple of the chunk size.
        sink_offset: rolling offset ``delta``; defaults to ``L + w``.
        rolling: keep the sink at a fixed offset before the current chunk.
        sink_source: ``first_chunk`` pins the first generated frame after chunk 1
            (the reference serves chunk 1); ``reference`` pins the reference throughout.
        cfg_alpha: audio guidance scale; ``None`` keeps one pass per step.
    """

    def __init__(
        self,
        model,
        sched: TimestepSchedule,
        cache_frames: int = 12,
        sink_offset: int | None = None,
        rolling: bool = True,
        sink_source: str = FIRST_CHUNK,
        use_sink: bool = True,
        seed: int = 0,
        cfg_alpha: float | None = None,
    ):
        c = model.config
        w = c.chunk_frames
        if cache_frames % w:
            raise ValueError(f"cache capacity {cache_frames} must be a multiple of the chunk size {w}")
        if sink_source not in (FIRST_CHUNK, REFERENCE):
            raise ValueError(f"unknown sink source {sink_source!r}")
        self.model = model
        self.sched = sched
        self.w = w
        self.delta = cache_frames + w if sink_offset is None else sink_offset
        self.rolling = rolling
        self.sink_source = sink_source
        self.use_sink = use_sink
        self.seed = seed
        self.cfg_alpha = cfg_alpha
        self.kv = KVCacheSet(sched.steps, c.n_layers, cache_frames, c.cells)
        self.sink = SinkCache(c.cells)
        self.position = 0
        self.chunk_index = 0
        self.outputs: list[torch.Tensor] = []
        self.decoded: list[torch.Tensor] = []
        self.chunk_times: list[float] = []
        self.chunk_calls: list[int] = []

    def _sink_ctx(self, cond: ConditionSet):
        if not self.use_sink:
            return None
        start = self.position if self.rolling else 0
        if not self.sink.is_set:
            # chunk 1 under first_chunk: reference frame stands in until x^1 exists
            return sink_context(self.model, cond.reference, start - self.delta)
        rolling_rope(self.sink, start, self.delta)
        return self.sink.context()

    def step(self, cond: ConditionSet, noise: torch.Tensor | None = None, record: bool = False):
        """Generate, commit and return the next chunk ``[B, w, H', W', C]``."""
        if cond.n_frames != self.w:
            raise numeric.ShapeError(f"chunk conditions cover {cond.n_frames} frames, chunk size is {self.w}")
        t0 = time.perf_counter()
        calls0 = self.model.calls["forward"]
        if self.use_sink and self.sink_source == REFERENCE and not self.sink.is_set:
            set_sink(self.sink, self.model, cond.reference)
        gen = numeric.generator(self.seed, self.chunk_index)
        pos = torch.arange(self.position, self.position + self.w)
        with torch.no_grad():
            sink = self._sink_ctx(cond)
            res = few_step_sample(
                self.model, cond, self.sched, gen, caches=self.kv, sink=sink, positions=pos,
                noise=noise, batch=cond.audio.shape[0], record=record, cfg_alpha=self.cfg_alpha,
            )
        for i, kv in res.kv.items():
            self.kv.append_evict(i, kv, pos)
        if self.use_sink and self.sink_source == FIRST_CHUNK and self.chunk_index == 0:
            set_sink(self.sink, self.model, res.x0[:, 0])
        self.outputs.append(res.x0)
        self.position += self.w
        self.chunk_index += 1
        self.chunk_calls.append(self.model.calls["forward"] - calls0)
        self.chunk_times.append(time.perf_counter() - t0)
        self.last_result = res
        return res.x0

    def latents(self) -> torch.Tensor:
        return torch.cat(self.outputs, dim=1)


def generate_stream(
    model,
    cond_seq,
    M: int,
    sched: TimestepSchedule,
    decoder: Callable[[torch.Tensor], torch.Tensor] | None = None,
    seed: int = 0,
    **session_kw,
):
    """Generate ``M`` chunks; returns ``(latents [B, M*w, ...], pixels or None, session)``."""
    if M < 1:
        raise ValueError("need at least one chunk")
    session = StreamSession(model, sched, seed=seed, **session_kw)
    for cond in split_conditions(cond_seq, M, session.w):
        x = session.step(cond)
        if decoder is not None:
            with torch.no_grad():
                session.decoded.append(decoder(x))
    pixels = torch.cat(session.decoded, dim=1) if session.decoded else None
    return session.latents(), pixels, session


def generate_full_context(
    model,
    cond_seq,
    M: int,
    sched: TimestepSchedule,
    seed: int = 0,
    cache_frames: int = 12,
    sink_offset: int | None = None,
    sink_source: str = FIRST_CHUNK,
    use_sink: bool = True,
) -> torch.Tensor:
    """Non-streaming reference: every step recomputes all chunks from scratch.

    At step ``j`` of chunk ``i`` the stitched forward sees the step-``j`` inputs
    of every earlier chunk within ``cache_frames`` frames, mirroring what the
    per-timestep caches hold. Uses the same noise streams as the session.
    """
    c = model.config
    w = c.chunk_frames
    delta = cache_frames + w if sink_offset is None else sink_offset
    conds = split_conditions(cond_seq, M, w)
    ref = conds[0].reference
    inputs: list[dict[int, torch.Tensor]] = []
    sink_latent = None
    sinks, outs = [], []
    with torch.no_grad():
        for i, cond in enumerate(conds):
            start = i * w
            if not use_sink:
                sinks.append(None)
            elif sink_source == REFERENCE or sink_latent is None:
                sinks.append(sink_context(model, ref, start - delta))
            else:
                sinks.append(sink_context(model, sink_latent, start - delta))
            gen = numeric.generator(seed, i)
            B = cond.audio.shape[0]
            x = numeric.randn((B, w, *c.frame_grid, c.latent_channels), gen)
            mine = {}
            lo = max(0, i - cache_frames // w)
            for j, t in enumerate(sched.steps):
                mine[j] = x
                chunks = [inputs[a][j] for a in range(lo, i)] + [x]
                preds = model.forward_stitched(
                    chunks,
                    [t] * len(chunks),
                    conds[lo : i + 1],
                    sinks[lo : i + 1],
                    [torch.arange(a * w, (a + 1) * w) for a in range(lo, i + 1)],
                    window=cache_frames,
                )
                pred = preds[-1]
                if j + 1 < sched.T:
                    x = add_noise(pred, sched.steps[j + 1], gen)
            inputs.append(mine)
            outs.append(pred)
            if i == 0 and sink_source == FIRST_CHUNK:
                sink_latent = pred[:, 0]
    return torch.cat(outs, dim=1)


@dataclass
class LatencyReport:
    chunk_seconds: list[float]
    calls_per_chunk: list[int]
    calls_per_frame: float
    cache_high_water_bytes: int
    cache_model_bytes: int
    frames: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cache_model_bytes(session: StreamSession, batch: int = 1) -> int:
    """Expected full-cache footprint: levels x capacity x layers x (k + v)."""
    c = session.model.config
    return session.sched.T * session.kv.capacity * c.n_layers * 2 * c.cells * c.model_dim * 8 * batch


def latency_report(session: StreamSession) -> LatencyReport:
    if not session.outputs:
        raise ValueError("latency report needs at least one generated chunk")
    frames = len(session.outputs) * session.w
    batch = session.outputs[0].shape[0]
    return LatencyReport(
        chunk_seconds=list(session.chunk_times),
        calls_per_chunk=list(session.chunk_calls),
        calls_per_frame=sum(session.chunk_calls) / frames,
        cache_high_water_bytes=session.kv.high_water,
        cache_model_bytes=cache_model_bytes(session, batch),
        frames=frames,
    )
