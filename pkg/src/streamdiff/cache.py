"""Per-timestep FIFO key/value caches and the pinned reference sink."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import torch

from . import numeric
from .model import LayerKV


@dataclass
class FrameKV:
    keys: list[torch.Tensor]  # per layer [B, cells, D], pre-rotary
    values: list[torch.Tensor]
    position: int
    tag: int


def split_frames(kv, cells: int, positions, tags=None) -> list[FrameKV]:
    """Cut a chunk's per-layer ``(k, v)`` into per-frame blocks."""
    n_tokens = kv[0][0].shape[1]
    if n_tokens % cells:
        raise numeric.ShapeError(f"{n_tokens} tokens is not a whole number of {cells}-cell frames")
    n = n_tokens // cells
    positions = [int(p) for p in positions]
    if len(positions) != n:
        raise numeric.ShapeError(f"{len(positions)} positions for {n} frames")
    tags = positions if tags is None else [int(t) for t in tags]
    frames = []
    for f in range(n):
        sl = slice(f * cells, (f + 1) * cells)
        frames.append(FrameKV([k[:, sl] for k, _ in kv], [v[:, sl] for _, v in kv], positions[f], tags[f]))
    return frames


class KVCacheSet:
    """One FIFO buffer of whole frames per denoising level.

    Buffers are indexed by sampling order (0 = noisiest level) and evolve
    independently. Each holds at most ``capacity`` frames.
    """

    def __init__(self, levels, n_layers: int, capacity: int, cells: int):
        if capacity <= 0:
            raise ValueError("cache capacity must be positive")
        self.levels = tuple(float(t) for t in levels)
        self.n_layers = n_layers
        self.capacity = capacity
        self.cells = cells
        self.buffers: list[deque[FrameKV]] = [deque() for _ in self.levels]
        self.high_water = 0

    def __len__(self) -> int:
        return len(self.buffers)

    def length(self, t: int) -> int:
        return len(self.buffers[t])

    def append_evict(self, t: int, kv, positions, tags=None) -> "KVCacheSet":
        if len(kv) != self.n_layers:
            raise numeric.ShapeError(f"kv covers {len(kv)} layers, cache has {self.n_layers}")
        frames = split_frames(kv, self.cells, positions, tags)
        if len(frames) > self.capacity:
            raise ValueError(f"chunk of {len(frames)} frames exceeds cache capacity {self.capacity}")
        buf = self.buffers[t]
        while len(buf) + len(frames) > self.capacity:
            buf.popleft()
        buf.extend(frames)
        self.high_water = max(self.high_water, self.nbytes())
        return self

    def context(self, t: int) -> list[LayerKV] | None:
        buf = self.buffers[t]
        if not buf:
            return None
        pos = torch.tensor([f.position for f in buf]).repeat_interleave(self.cells)
        return [
            (torch.cat([f.keys[l] for f in buf], dim=1), torch.cat([f.values[l] for f in buf], dim=1), pos)
            for l in range(self.n_layers)
        ]

    def tags(self, t: int) -> list[int]:
        return [f.tag for f in self.buffers[t]]

    def positions(self, t: int) -> list[int]:
        return [f.position for f in self.buffers[t]]

    def nbytes(self) -> int:
        total = 0
        for buf in self.buffers:
            for f in buf:
                total += sum(k.numel() * k.element_size() for k in f.keys)
                total += sum(v.numel() * v.element_size() for v in f.values)
        return total

    def reset(self) -> None:
        for buf in self.buffers:
            buf.clear()

    def dump(self) -> str:
        """One line per (timestep, layer) buffer, for test oracles and debugging."""
        lines = []
        for t, buf in enumerate(self.buffers):
            tags = ",".join(str(f.tag) for f in buf)
            for l in range(self.n_layers):
                lines.append(f"timestep={t} level={self.levels[t]:g} layer={l} frames={len(buf)} tags=[{tags}]")
        return "\n".join(lines)

    def clone_empty(self) -> "KVCacheSet":
        return KVCacheSet(self.levels, self.n_layers, self.capacity, self.cells)


class SinkCache:
    """Pinned key/values of reference frames plus a movable position."""

    def __init__(self, cells: int):
        self.cells = cells
        self.kv: list[tuple[torch.Tensor, torch.Tensor]] | None = None
        self.latent: torch.Tensor | None = None
        self.position = 0
        self.times_set = 0

    @property
    def is_set(self) -> bool:
        return self.kv is not None

    @property
    def n_frames(self) -> int:
        return 0 if self.kv is None else self.kv[0][0].shape[1] // self.cells

    @property
    def n_tokens(self) -> int:
        return 0 if self.kv is None else self.kv[0][0].shape[1]

    def reset(self) -> None:
        self.kv = None
        self.latent = None
        self.position = 0

    def context(self, position: int | None = None) -> list[LayerKV] | None:
        if self.kv is None:
            return None
        start = self.position if position is None else position
        pos = (start + torch.arange(self.n_frames)).repeat_interleave(self.cells)
        return [(k, v, pos) for k, v in self.kv]


def set_sink(sink: SinkCache, model, latent: torch.Tensor) -> SinkCache:
    """Encode ``latent`` (``[B, H', W', C]`` or ``[B, S, H', W', C]``) and pin it."""
    if sink.is_set:
        raise RuntimeError("sink already set; reset it first")
    c = model.config
    if latent.dim() == 4:
        latent = latent[:, None]
    if tuple(latent.shape[2:]) != (*c.frame_grid, c.latent_channels):
        raise numeric.ShapeError(f"sink latent {tuple(latent.shape)} does not match the model grid")
    latent = latent[:, : c.sink_frames]
    with torch.no_grad():
        kv = model.encode_sink(latent)
    sink.kv = [(k.detach(), v.detach()) for k, v in kv]
    sink.latent = latent.detach()
    sink.times_set += 1
    return sink


def recache(
    model,
    cond,
    cache: KVCacheSet,
    sink: SinkCache | None,
    frames: torch.Tensor,
    start_position: int,
    seed: int = 0,
    chunk_frames: int | None = None,
    sink_offset: int | None = None,
) -> KVCacheSet:
    """Rebuild every per-level buffer from clean frames.

    Frames are re-encoded chunk by chunk; for buffer ``i`` each chunk is
    renoised to that buffer's level with noise drawn from ``(seed, chunk, i)``,
    so the result is deterministic. ``cond`` must cover exactly ``frames``.
    ``start_position`` is the temporal position of ``frames[:, 0]``.
    """
    from .diffusion import add_noise

    w = chunk_frames or model.config.chunk_frames
    frames = frames[:, -cache.capacity :]
    n = frames.shape[1]
    skip = cond.n_frames - n
    start_position += skip
    cond = cond.frames(skip, cond.n_frames)
    out = cache.clone_empty()
    delta = cache.capacity + w if sink_offset is None else sink_offset
    bounds = list(range(n % w, n + 1, w))
    if n % w:
        bounds = [0] + bounds
    with torch.no_grad():
        for ci, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            pos = torch.arange(start_position + a, start_position + b)
            sink_ctx = sink.context(int(pos[0]) - delta) if sink is not None else None
            for i, level in enumerate(out.levels):
                x = add_noise(frames[:, a:b], level, numeric.generator(seed, ci, i))
                _, kv = model(x, level, cond.frames(a, b), cache=out.context(i), sink=sink_ctx, positions=pos, count=False)
                out.append_evict(i, kv, pos)
    return out


def sink_context(model, latent: torch.Tensor, position: int) -> list[LayerKV]:
    """Encode reference frames as a sink context at ``position`` (keeps the graph)."""
    c = model.config
    if latent.dim() == 4:
        latent = latent[:, None]
    latent = latent[:, : c.sink_frames]
    kv = model.encode_sink(latent)
    pos = (position + torch.arange(latent.shape[1])).repeat_interleave(c.cells)
    return [(k, v, pos) for k, v in kv]
