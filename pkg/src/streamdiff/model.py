"""Toy latent-video transformer shared by student, teacher and fake-score nets.

Tokens are (frame, grid cell) pairs. Attention masking is frame-blocked: every
cell of frame ``f`` shares one temporal position, cells within a frame see each
other, and causal layers only look at frames ``<= f`` of the current chunk.
Keys/values of earlier chunks (the cache) and of the reference sink are always
visible. The network predicts the clean latent.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch
from torch import nn

from . import numeric
from .numeric import DTYPE, ShapeError

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"

# (keys, values, positions) for one layer; keys/values are [B, tokens, dim] and
# stored *before* rotary embedding so positions can be remapped later.
LayerKV = tuple[torch.Tensor, torch.Tensor, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    model_dim: int = 64
    n_heads: int = 4
    layer_kind: tuple[str, ...] | None = None
    chunk_frames: int = 4
    frame_grid: tuple[int, int] = (8, 8)
    latent_channels: int = 4
    sink_frames: int = 1
    cond_dim: int = 16
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    causal_first: bool = True

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"rotary embedding needs an even head dim, got {self.head_dim}")
        if self.layer_kind is None:
            first, second = (CAUSAL, BIDIRECTIONAL) if self.causal_first else (BIDIRECTIONAL, CAUSAL)
            kinds = tuple(first if i % 2 == 0 else second for i in range(self.n_layers))
            object.__setattr__(self, "layer_kind", kinds)
        object.__setattr__(self, "layer_kind", tuple(self.layer_kind))
        object.__setattr__(self, "frame_grid", tuple(self.frame_grid))
        if len(self.layer_kind) != self.n_layers:
            raise ValueError(f"layer_kind has {len(self.layer_kind)} entries for {self.n_layers} layers")
        bad = set(self.layer_kind) - {CAUSAL, BIDIRECTIONAL}
        if bad:
            raise ValueError(f"unknown layer kinds {sorted(bad)}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def cells(self) -> int:
        return self.frame_grid[0] * self.frame_grid[1]

    @property
    def sink_tokens(self) -> int:
        return self.sink_frames * self.cells

    def with_pattern(self, pattern: str) -> "ModelConfig":
        """``hybrid`` (alternating), ``causal`` or ``bidirectional`` layer layout."""
        if pattern == "hybrid":
            return replace(self, layer_kind=None)
        if pattern in (CAUSAL, "full_causal"):
            return replace(self, layer_kind=(CAUSAL,) * self.n_layers)
        if pattern in (BIDIRECTIONAL, "full_bidirectional"):
            return replace(self, layer_kind=(BIDIRECTIONAL,) * self.n_layers)
        raise ValueError(f"unknown layer pattern {pattern!r}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "model_dim": self.model_dim,
            "n_heads": self.n_heads,
            "layer_kind": list(self.layer_kind),
            "chunk_frames": self.chunk_frames,
            "frame_grid": list(self.frame_grid),
            "latent_channels": self.latent_channels,
            "sink_frames": self.sink_frames,
            "cond_dim": self.cond_dim,
            "mlp_ratio": self.mlp_ratio,
            "rope_base": self.rope_base,
            "causal_first": self.causal_first,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layer_kind"] = tuple(d["layer_kind"])
        d["frame_grid"] = tuple(d["frame_grid"])
        return cls(**d)


@dataclass
class LatentChunk:
    frames: torch.Tensor  # [B, w, H', W', C]
    chunk_index: int = 0
    noise_level: float = 0.0


@dataclass
class ConditionSet:
    """Per-chunk conditions, batch-first.

    ``audio`` is [B, F, cond_dim]; ``text`` is [B, cond_dim] or None;
    ``reference`` is [B, H', W', C]. ``null_audio`` replaces the audio track for
    unconditional evaluations.
    """

    audio: torch.Tensor
    reference: torch.Tensor | None = None
    text: torch.Tensor | None = None
    null_audio: torch.Tensor | None = None

    def __post_init__(self):
        if self.null_audio is None:
            self.null_audio = torch.zeros(self.audio.shape[-1], dtype=self.audio.dtype)

    @property
    def n_frames(self) -> int:
        return self.audio.shape[1]

    def frames(self, start: int, stop: int) -> "ConditionSet":
        return ConditionSet(self.audio[:, start:stop], self.reference, self.text, self.null_audio)


def build_mask(config: ModelConfig, layer: int, n_sink: int, n_cache: int, n_chunk: int) -> torch.Tensor:
    """Frame-level attention mask ``[n_chunk, n_sink + n_cache + n_chunk]``.

    Columns are ordered sink, cache, current chunk. Sink frames only ever
    appear as keys.
    """
    ctx = torch.ones(n_chunk, n_sink + n_cache, dtype=torch.bool)
    if config.layer_kind[layer] == CAUSAL:
        own = torch.tril(torch.ones(n_chunk, n_chunk, dtype=torch.bool))
    else:
        own = torch.ones(n_chunk, n_chunk, dtype=torch.bool)
    return torch.cat([ctx, own], dim=1)


def expand_frame_mask(mask: torch.Tensor, cells: int) -> torch.Tensor:
    return mask.repeat_interleave(cells, 0).repeat_interleave(cells, 1)


def rope_apply(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate pairs ``(x[..., i], x[..., i + d/2])`` by ``position * base**(-2i/d)``.

    ``x`` is ``[..., N, d]`` and ``positions`` holds one (integer) position per token.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope_apply: head dim must be even, got {d}")
    if positions.shape[-1] != x.shape[-2]:
        raise ShapeError(f"rope_apply: {positions.shape[-1]} positions for {x.shape[-2]} tokens")
    half = d // 2
    freqs = base ** (-torch.arange(half, dtype=DTYPE) * 2.0 / d)
    ang = positions.to(DTYPE)[..., None] * freqs
    c, s = numeric.cos(ang), numeric.sin(ang)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * c - x2 * s, x1 * s + x2 * c], dim=-1)


def timestep_features(t: torch.Tensor, n: int = 8) -> torch.Tensor:
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), n, dtype=DTYPE))
    ang = t.to(DTYPE)[..., None] * freqs
    return torch.cat([numeric.sin(ang), numeric.cos(ang)], dim=-1)


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = numeric.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.norm2 = numeric.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim, dtype=DTYPE), nn.GELU(), nn.Linear(mlp_ratio * dim, dim, dtype=DTYPE)
        )

    def project(self, h: torch.Tensor):
        return self.qkv(self.norm1(h)).chunk(3, dim=-1)

    def attend(self, q, k, v, q_pos, k_pos, mask, rope_base) -> torch.Tensor:
        B, Nq, D = q.shape
        Nk = k.shape[1]
        hd = D // self.n_heads
        q = q.view(B, Nq, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, Nk, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, Nk, self.n_heads, hd).transpose(1, 2)
        q = rope_apply(q, q_pos, rope_base)
        k = rope_apply(k, k_pos, rope_base)
        logits = numeric.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
        attn = numeric.softmax(logits, dim=-1, mask=mask)
        out = numeric.matmul(attn, v).transpose(1, 2).reshape(B, Nq, D)
        return self.proj(out)

    def finish(self, h: torch.Tensor, attn_out: torch.Tensor) -> torch.Tensor:
        h = h + attn_out
        return h + self.mlp(self.norm2(h))


class VideoTransformer(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        D = config.model_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch = nn.Linear(config.latent_channels, D, dtype=DTYPE)
            # unit scale so cells can match their own sink cell from the start
            self.spatial = nn.Parameter(torch.randn(config.cells, D, dtype=DTYPE))
            self.time_mlp = nn.Sequential(nn.Linear(16, D, dtype=DTYPE), nn.SiLU(), nn.Linear(D, D, dtype=DTYPE))
            self.audio_proj = nn.Linear(config.cond_dim, D, dtype=DTYPE)
            self.text_proj = nn.Linear(config.cond_dim, D, bias=False, dtype=DTYPE)
            self.blocks = nn.ModuleList(Block(D, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers))
            self.norm_out = numeric.LayerNorm(D)
            self.head = nn.Linear(D, config.latent_channels, dtype=DTYPE)
        self.calls: Counter = Counter()

    # ------------------------------------------------------------------ pieces

    def _tokens(self, x: torch.Tensor, t) -> torch.Tensor:
        B, F = x.shape[:2]
        c = self.config
        if tuple(x.shape[2:]) != (*c.frame_grid, c.latent_channels):
            raise ShapeError(f"latent frames {tuple(x.shape)} do not match grid {c.frame_grid}x{c.latent_channels}")
        h = self.patch(x.reshape(B, F, c.cells, c.latent_channels)) + self.spatial
        t = torch.as_tensor(t, dtype=DTYPE)
        t = t.expand(B, F) if t.dim() < 2 else t
        h = h + self.time_mlp(timestep_features(t))[:, :, None, :]
        return h.reshape(B, F * c.cells, -1)

    def inject_conditions(self, hidden: torch.Tensor, cond: ConditionSet, use_audio: bool = True, use_text: bool = True):
        """Add the per-frame audio projection and the global text bias."""
        B, N, D = hidden.shape
        F = N // self.config.cells
        if cond.audio.shape[1] != F:
            raise ShapeError(f"audio track has {cond.audio.shape[1]} frames, hidden state has {F}")
        audio = cond.audio if use_audio else cond.null_audio.expand_as(cond.audio)
        a = self.audio_proj(audio).repeat_interleave(self.config.cells, dim=1)
        hidden = hidden + a
        if use_text and cond.text is not None:
            hidden = hidden + self.text_proj(cond.text)[:, None, :]
        return hidden

    def _head(self, h: torch.Tensor, B: int, F: int) -> torch.Tensor:
        c = self.config
        return self.head(self.norm_out(h)).reshape(B, F, *c.frame_grid, c.latent_channels)

    def mask_for(self, layer: int, n_sink: int, n_cache: int, n_chunk: int) -> torch.Tensor:
        return build_mask(self.config, layer, n_sink, n_cache, n_chunk)

    def _frame_positions(self, positions, F: int) -> torch.Tensor:
        if positions is None:
            positions = torch.arange(F)
        positions = torch.as_tensor(positions)
        if positions.numel() != F:
            raise ShapeError(f"{positions.numel()} positions for {F} frames")
        if F > 1 and not bool((positions[1:] > positions[:-1]).all()):
            raise ValueError("chunk positions must be strictly increasing")
        return positions.repeat_interleave(self.config.cells)

    # ---------------------------------------------------------------- forwards

    def forward(
        self,
        x: torch.Tensor,
        t,
        cond: ConditionSet,
        cache: Sequence[LayerKV] | None = None,
        sink: Sequence[LayerKV] | None = None,
        positions=None,
        use_audio: bool = True,
        use_text: bool = True,
        count: bool = True,
    ):
        """One chunk forward with optional cache and sink context.

        Args:
            x: noisy latents ``[B, F, H', W', C]``.
            t: noise level, scalar or ``[B, F]``.
            cond: conditions for these ``F`` frames.
            cache: per-layer ``(k, v, token_positions)`` of previous frames.
            sink: per-layer ``(k, v, token_positions)`` of the reference sink.
            positions: temporal position of each of the ``F`` frames.

        Returns:
            ``(prediction, new_kv)`` where ``new_kv[l] = (k, v)`` holds this
            chunk's pre-rotary keys and values at layer ``l``.
        """
        c = self.config
        B, F = x.shape[:2]
        n_layers = c.n_layers
        for name, ctx in (("cache", cache), ("sink", sink)):
            if ctx is not None and len(ctx) != n_layers:
                raise ShapeError(f"{name} has {len(ctx)} layers, model has {n_layers}")
        q_pos = self._frame_positions(positions, F)
        if count:
            self.calls["forward"] += 1
            if not use_audio:
                self.calls["uncond"] += 1

        h = self._tokens(x, t)
        new_kv = []
        for l, block in enumerate(self.blocks):
            q, k, v = block.project(h)
            new_kv.append((k, v))
            ks, vs, ps = [], [], []
            n_sink = n_cache = 0
            for ctx in (sink, cache):
                if ctx is None or ctx[l][0].shape[1] == 0:
                    continue
                ck, cv, cp = ctx[l]
                if cp.numel() != ck.shape[1] or ck.shape[1] % c.cells:
                    raise ShapeError(f"context keys {tuple(ck.shape)} vs {cp.numel()} positions at layer {l}")
                ks.append(ck)
                vs.append(cv)
                ps.append(cp)
                if ctx is sink:
                    n_sink = ck.shape[1] // c.cells
                else:
                    n_cache = ck.shape[1] // c.cells
            keys = torch.cat(ks + [k], dim=1)
            vals = torch.cat(vs + [v], dim=1)
            k_pos = torch.cat(ps + [q_pos])
            mask = expand_frame_mask(self.mask_for(l, n_sink, n_cache, F), c.cells)
            h = block.finish(h, block.attend(q, keys, vals, q_pos, k_pos, mask, c.rope_base))
            if l == 0:
                h = self.inject_conditions(h, cond, use_audio, use_text)
        return self._head(h, B, F), new_kv

    def encode_sink(self, latent: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Per-layer keys/values of clean reference frames ``[B, S, H', W', C]``."""
        B, S = latent.shape[:2]
        cond = ConditionSet(torch.zeros(B, S, self.config.cond_dim, dtype=DTYPE))
        self.calls["sink"] += 1
        _, kv = self.forward(latent, 0.0, cond, use_audio=False, use_text=False, count=False)
        return kv

    def forward_stitched(
        self,
        chunks: Sequence[torch.Tensor],
        ts: Sequence[float],
        conds: Sequence[ConditionSet],
        sinks: Sequence[Sequence[LayerKV] | None],
        positions: Sequence[torch.Tensor],
        window: int | None = None,
        use_audio: bool = True,
    ) -> list[torch.Tensor]:
        """Full forward over several chunks at once under the stitched mask.

        Chunk ``a`` sees its own frames per layer kind, every frame of earlier
        chunks that lies within ``window`` frames before its start, and only its
        own entry of ``sinks``. This recomputes everything from scratch and is
        the reference the cached path is checked against.
        """
        c = self.config
        cells = c.cells
        sizes = [x.shape[1] for x in chunks]
        starts = [sum(sizes[:i]) for i in range(len(sizes))]
        total = sum(sizes)
        B = chunks[0].shape[0]
        h = torch.cat([self._tokens(x, t) for x, t in zip(chunks, ts)], dim=1)
        q_pos = torch.cat([self._frame_positions(p, n) for p, n in zip(positions, sizes)])
        chunk_of = torch.cat([torch.full((n,), i) for i, n in enumerate(sizes)])
        frame_idx = torch.arange(total)
        sink_frames = [0 if s is None else s[0][0].shape[1] // cells for s in sinks]
        self.calls["forward"] += 1

        for l, block in enumerate(self.blocks):
            q, k, v = block.project(h)
            causal = c.layer_kind[l] == CAUSAL
            own = chunk_of[:, None] == chunk_of[None, :]
            if causal:
                own = own & (frame_idx[None, :] <= frame_idx[:, None])
            start_q = torch.tensor(starts)[chunk_of]
            earlier = chunk_of[None, :] < chunk_of[:, None]
            if window is not None:
                earlier = earlier & (frame_idx[None, :] >= (start_q - window)[:, None])
            seq_mask = own | earlier
            sink_cols, ks, vs, ps = [], [], [], []
            for i, s in enumerate(sinks):
                if s is None or sink_frames[i] == 0:
                    continue
                sk, sv, sp = s[l]
                ks.append(sk)
                vs.append(sv)
                ps.append(sp)
                col = (chunk_of == i)[:, None].expand(total, sink_frames[i])
                sink_cols.append(col)
            frame_mask = torch.cat(sink_cols + [seq_mask], dim=1)
            keys = torch.cat(ks + [k], dim=1)
            vals = torch.cat(vs + [v], dim=1)
            k_pos = torch.cat(ps + [q_pos])
            mask = expand_frame_mask(frame_mask, cells)
            h = block.finish(h, block.attend(q, keys, vals, q_pos, k_pos, mask, c.rope_base))
            if l == 0:
                parts = []
                for i, (n, cond) in enumerate(zip(sizes, conds)):
                    seg = h[:, starts[i] * cells : (starts[i] + n) * cells]
                    parts.append(self.inject_conditions(seg, cond, use_audio))
                h = torch.cat(parts, dim=1)
        out = self._head(h, B, total)
        return [out[:, s : s + n] for s, n in zip(starts, sizes)]


def clone_model(model: VideoTransformer, config: ModelConfig | None = None) -> VideoTransformer:
    """Copy weights into a fresh model, optionally with a different layer layout."""
    new = VideoTransformer(config or model.config)
    new.load_state_dict(model.state_dict())
    return new


def save_model(path, model: VideoTransformer) -> None:
    numeric.save_module(path, model, header={"model_config": model.config.to_dict()})


def load_model(path) -> VideoTransformer:
    tensors, header = numeric.load_tensors(path)
    model = VideoTransformer(ModelConfig.from_dict(header["model_config"]))
    model.load_state_dict(tensors)
    return model


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module
