"""Fast self-checks of the core invariants, used by ``streamdiff check-invariants``."""

from __future__ import annotations

import itertools
from typing import Callable

import torch

from . import numeric
from .accdmd import OralMask, decompose_cfg_gradient, phased_scores
from .cache import KVCacheSet
from .diffusion import HIGH, LOW, TimestepSchedule, cfg_combine
from .inference import generate_full_context, generate_stream
from .model import ConditionSet, ModelConfig, VideoTransformer, rope_apply


def _small(pattern: str = "hybrid", seed: int = 0) -> VideoTransformer:
    cfg = ModelConfig(n_layers=4, model_dim=16, n_heads=2, frame_grid=(2, 3), latent_channels=3, cond_dim=5)
    return VideoTransformer(cfg.with_pattern(pattern), seed=seed)


def _cond(config: ModelConfig, frames: int, seed: int) -> ConditionSet:
    g = numeric.generator(seed, 99)
    return ConditionSet(numeric.randn((1, frames, config.cond_dim), g),
                        reference=numeric.randn((1, *config.frame_grid, config.latent_channels), g))


def check_decomposition(seed: int) -> tuple[bool, str]:
    g = numeric.generator(seed, 1)
    worst = 0.0
    for alpha in (0.0, 1.0, 1.8, 3.0):
        for _ in range(25):
            c, u, f = (numeric.randn((2, 4, 3, 3, 3), g) for _ in range(3))
            full, _, _ = decompose_cfg_gradient(c, u, f, alpha)
            worst = max(worst, float((full - (cfg_combine(c, u, alpha) - f)).abs().max()))
    return worst <= 1e-12, f"max abs {worst:.2e}"


def check_fifo(seed: int) -> tuple[bool, str]:
    cells, layers, n = 1, 1, 0
    for capacity in (4, 8):
        for length in range(1, 5):
            for seq in itertools.product(range(2), repeat=length):
                cache = KVCacheSet((1.0, 0.5), layers, capacity, cells)
                oracle: list[list[int]] = [[], []]
                for step, t in enumerate(seq):
                    frames = list(range(4 * step, 4 * step + 4))
                    kv = [(torch.zeros(1, 4, 2, dtype=numeric.DTYPE),) * 2]
                    cache.append_evict(t, kv, frames)
                    oracle[t] = (oracle[t] + frames)[-capacity:]
                    if [cache.positions(j) for j in range(2)] != oracle:
                        return False, f"mismatch on sequence {seq}"
                n += 1
    return True, f"{n} sequences"


def check_equivalence(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for pattern in ("hybrid", "causal", "bidirectional"):
        model = _small(pattern, seed)
        cond = _cond(model.config, 16, seed)
        sched = TimestepSchedule()
        a = generate_stream(model, cond, 4, sched, seed=seed)[0]
        b = generate_full_context(model, cond, 4, sched, seed=seed)
        worst = max(worst, float((a - b).abs().max()))
    return worst <= 1e-5, f"max abs {worst:.2e}"


def check_call_counts(seed: int) -> tuple[bool, str]:
    model = _small(seed=seed)
    generate_stream(model, _cond(model.config, 12, seed), 3, TimestepSchedule(), seed=seed)
    ok = model.calls["forward"] == 12 and model.calls["uncond"] == 0
    teacher, fake = _small("bidirectional", seed), _small("bidirectional", seed + 1)
    x = numeric.randn((1, 4, 2, 3, 3), numeric.generator(seed, 2))
    cond = _cond(teacher.config, 4, seed)
    mask = OralMask(torch.ones(2, 3))
    low = phased_scores(teacher, fake, x, 0.7, cond, 1.8, mask, LOW, TimestepSchedule())
    high = phased_scores(teacher, fake, x, 0.3, cond, 1.8, mask, HIGH, TimestepSchedule())
    passes = [(low.teacher_passes, low.fake_passes), (high.teacher_passes, high.fake_passes)]
    ok = ok and passes == [(2, 1), (1, 2)]
    return ok, f"student calls {model.calls['forward']}/12, phase passes {passes}"


def check_rope(seed: int) -> tuple[bool, str]:
    g = numeric.generator(seed, 3)
    q, k = numeric.randn((6, 8), g), numeric.randn((5, 8), g)
    qp, kp = torch.arange(6), torch.arange(5) * 2

    def logits(shift):
        return rope_apply(q, qp + shift) @ rope_apply(k, kp + shift).T

    worst = max(float((logits(s) - logits(0)).abs().max()) for s in (3, 97, 800))
    return worst <= 1e-9, f"max abs {worst:.2e}"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "decomposition": check_decomposition,
    "fifo_oracle": check_fifo,
    "cache_equivalence": check_equivalence,
    "call_counts": check_call_counts,
    "rope_shift": check_rope,
}


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        with torch.no_grad():
            ok, detail = fn(seed)
        out.append((name, ok, detail))
    return out
