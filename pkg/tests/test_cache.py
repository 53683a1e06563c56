import itertools

import pytest
import torch

from streamdiff import numeric
from streamdiff.cache import KVCacheSet, SinkCache, recache, set_sink, split_frames

from conftest import make_cond, make_latents, make_model

CELLS = 2
LAYERS = 2


def chunk_kv(tag0, frames=4, dim=3):
    """Per-layer kv whose entries encode (layer, frame tag) so content is checkable."""
    kv = []
    for l in range(LAYERS):
        vals = torch.tensor([[tag0 + f] * CELLS for f in range(frames)], dtype=numeric.DTYPE).reshape(1, -1, 1)
        kv.append((vals.expand(1, -1, dim) + 1000 * l, -vals.expand(1, -1, dim)))
    return kv


def append(cache, t, tag0, frames=4):
    return cache.append_evict(t, chunk_kv(tag0, frames), list(range(tag0, tag0 + frames)))


class TestAppendEvict:
    def test_empty_plus_chunk(self):
        cache = KVCacheSet((1.0,), LAYERS, 12, CELLS)
        append(cache, 0, 0)
        assert cache.length(0) == 4

    def test_full_cache_keeps_most_recent(self):
        cache = KVCacheSet((1.0,), LAYERS, 12, CELLS)
        for c in range(3):
            append(cache, 0, 4 * c + 1)  # frames 1..12
        append(cache, 0, 13)
        assert cache.length(0) == 12
        assert cache.tags(0)[:4] == [5, 6, 7, 8]

    def test_oldest_chunk_fully_evicted(self):
        cache = KVCacheSet((1.0,), LAYERS, 12, CELLS)
        for c in range(4):
            append(cache, 0, 4 * c)
        assert cache.tags(0) == list(range(4, 16))

    def test_layer_mismatch_rejected(self):
        cache = KVCacheSet((1.0,), LAYERS, 12, CELLS)
        with pytest.raises(numeric.ShapeError):
            cache.append_evict(0, chunk_kv(0)[:1], list(range(4)))

    def test_oversized_chunk_rejected(self):
        cache = KVCacheSet((1.0,), LAYERS, 4, CELLS)
        with pytest.raises(ValueError):
            append(cache, 0, 0, frames=8)

    def test_partial_frame_rejected(self):
        kv = [(torch.zeros(1, 3, 2, dtype=numeric.DTYPE),) * 2] * LAYERS
        with pytest.raises(numeric.ShapeError):
            split_frames(kv, CELLS, [0])

    def test_context_layout(self):
        cache = KVCacheSet((1.0,), LAYERS, 8, CELLS)
        append(cache, 0, 0)
        append(cache, 0, 4)
        ctx = cache.context(0)
        k, v, pos = ctx[1]
        assert k.shape == (1, 8 * CELLS, 3)
        assert pos.tolist() == sum([[f] * CELLS for f in range(8)], [])
        assert float(k[0, 0, 0]) == 1000.0 and float(v[0, -1, 0]) == -7.0

    def test_dump(self):
        cache = KVCacheSet((1.0, 0.5), LAYERS, 8, CELLS)
        append(cache, 1, 0)
        lines = cache.dump().splitlines()
        assert len(lines) == 2 * LAYERS
        assert lines[0] == "timestep=0 level=1 layer=0 frames=0 tags=[]"
        assert lines[2] == "timestep=1 level=0.5 layer=0 frames=4 tags=[0,1,2,3]"


class TestFifoOracle:
    @pytest.mark.parametrize("capacity", [4, 8, 12])
    def test_exhaustive_against_list_model(self, capacity):
        levels = (1.0, 0.5, 0.25)
        for n in range(1, 7):
            for seq in itertools.product(range(len(levels)), repeat=n):
                cache = KVCacheSet(levels, LAYERS, capacity, CELLS)
                oracle = [[] for _ in levels]
                for step, t in enumerate(seq):
                    frames = list(range(4 * step, 4 * step + 4))
                    append(cache, t, frames[0])
                    oracle[t] = (oracle[t] + frames)[-capacity:]
                    for j in range(len(levels)):
                        assert cache.tags(j) == oracle[j]
                        assert cache.length(j) <= capacity
                for j in range(len(levels)):
                    ctx = cache.context(j)
                    if oracle[j]:
                        assert ctx[0][0][0, ::CELLS, 0].tolist() == [float(f) for f in oracle[j]]
                    else:
                        assert ctx is None

    def test_independence_between_timesteps(self):
        cache = KVCacheSet((1.0, 0.5), LAYERS, 8, CELLS)
        append(cache, 0, 0)
        before = [x.clone() for x in cache.context(0)[0][:2]]
        for c in range(3):
            append(cache, 1, 100 + 4 * c)
        after = cache.context(0)[0][:2]
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            KVCacheSet((1.0,), LAYERS, 0, CELLS)


def _recache_setup(seed=0):
    model = make_model(seed=seed)
    c = model.config
    frames = make_latents(c, 12, seed=seed)
    cond = make_cond(c, 12, seed=seed)
    sink = set_sink(SinkCache(c.cells), model, cond.reference)
    cache = KVCacheSet((1.0, 0.5), c.n_layers, 8, c.cells)
    return model, frames, cond, sink, cache


def _buffers(cache):
    return [[(f.keys[l], f.values[l]) for f in buf for l in range(len(f.keys))] for buf in cache.buffers]


class TestRecache:
    def test_idempotent(self):
        model, frames, cond, sink, cache = _recache_setup()
        a = recache(model, cond, cache, sink, frames, 0, seed=5)
        b = recache(model, cond, a, sink, frames, 0, seed=5)
        for ba, bb in zip(_buffers(a), _buffers(b)):
            for (ka, va), (kb, vb) in zip(ba, bb):
                assert float((ka - kb).abs().max()) <= 1e-9 and float((va - vb).abs().max()) <= 1e-9

    def test_only_supplied_frames_after_eviction(self):
        model, frames, cond, sink, cache = _recache_setup()
        out = recache(model, cond, cache, sink, frames, 100, seed=1)
        for t in range(2):
            assert out.positions(t) == list(range(104, 112))

    def test_perturbed_frames_differ(self):
        model, frames, cond, sink, cache = _recache_setup()
        a = recache(model, cond, cache, sink, frames, 0, seed=1)
        b = recache(model, cond, cache, sink, frames + 0.1, 0, seed=1)
        ka = a.context(1)[0][0]
        kb = b.context(1)[0][0]
        assert float((ka - kb).abs().max()) > 1e-6

    def test_does_not_count_calls(self):
        model, frames, cond, sink, cache = _recache_setup()
        model.calls.clear()
        recache(model, cond, cache, sink, frames, 0)
        assert model.calls["forward"] == 0


class TestSink:
    def test_set_from_reference(self):
        model = make_model()
        cond = make_cond(model.config, 4)
        sink = set_sink(SinkCache(model.config.cells), model, cond.reference)
        assert sink.n_tokens == model.config.sink_tokens
        assert sink.times_set == 1

    def test_double_set_rejected(self):
        model = make_model()
        cond = make_cond(model.config, 4)
        sink = set_sink(SinkCache(model.config.cells), model, cond.reference)
        with pytest.raises(RuntimeError):
            set_sink(sink, model, cond.reference)

    def test_reset_then_set_equals_fresh(self):
        model = make_model()
        c1, c2 = make_cond(model.config, 4, seed=1), make_cond(model.config, 4, seed=2)
        sink = set_sink(SinkCache(model.config.cells), model, c1.reference)
        sink.reset()
        set_sink(sink, model, c2.reference)
        fresh = set_sink(SinkCache(model.config.cells), model, c2.reference)
        assert all(torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) for a, b in zip(sink.kv, fresh.kv))

    def test_shape_checked(self):
        model = make_model()
        with pytest.raises(numeric.ShapeError):
            set_sink(SinkCache(model.config.cells), model, torch.zeros(1, 3, 3, 3, dtype=numeric.DTYPE))

    def test_context_positions(self):
        model = make_model()
        sink = set_sink(SinkCache(model.config.cells), model, make_cond(model.config, 4).reference)
        ctx = sink.context(-16)
        assert ctx[0][2].tolist() == [-16] * model.config.cells
