import math

import pytest
import torch

from streamdiff import numeric
from streamdiff.accdmd import DMDConfig, OralMask, TrainingDiverged
from streamdiff.cache import sink_context
from streamdiff.diffusion import TimestepSchedule, few_step_sample
from streamdiff.cache import KVCacheSet
from streamdiff.forcing import ForcingConfig, ForcingTrainer, new_rollout, rollout_step, tail_gate, training_loop
from streamdiff.harness.data import DataConfig, SyntheticIdentity
from streamdiff.harness.experiments import audio_sampler
from streamdiff.model import clone_model

from conftest import make_cond, make_model

SCHED = TimestepSchedule()
MASK = OralMask(torch.tensor([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]))


def _sampler(frames=16, seed=0):
    def sample(gen):
        return make_cond(make_model().config, frames, seed=seed + int(torch.randint(1000, (1,), generator=gen))), MASK

    return sample


def _trainer(total=16, tail_only=True, student=None, teacher=None, seed=0):
    student = student or make_model(seed=0)
    teacher = teacher or make_model("bidirectional", seed=1)
    fake = clone_model(teacher)
    cfg = ForcingConfig(4, 8, total, 8, tail_only)
    return ForcingTrainer(student, teacher, fake, _sampler(total), SCHED, cfg, DMDConfig(student_lr=1e-3, fake_lr=1e-3),
                          seed=seed)


class _Tap(torch.nn.Module):
    """Wraps a student and keeps gradient-enabled outputs for inspection."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.config = inner.config
        self.calls = inner.calls
        self.taps = []

    def forward(self, *a, **kw):
        out, kv = self.inner(*a, **kw)
        if torch.is_grad_enabled() and out.requires_grad:
            out.retain_grad()
            self.taps.append(out)
        return out, kv

    def encode_sink(self, latent):
        return self.inner.encode_sink(latent)


class TestTailGate:
    def test_values(self):
        assert tail_gate(4, 0, 8).tolist() == [1, 1, 1, 1]
        assert tail_gate(4, 8, 8).tolist() == [0, 0, 0, 1]
        assert tail_gate(4, 0, 0).tolist() == [0, 0, 0, 1]
        assert tail_gate(1, 100, 8).tolist() == [1]

    def test_non_tail_gradients_exactly_zero(self):
        tap = _Tap(make_model(seed=0))
        trainer = _trainer(total=24, student=tap)
        for _ in range(6):
            rec = trainer.step()
            grad = tap.taps[-1].grad
            norms = [float(grad[:, f].norm()) for f in range(4)]
            if rec["l"] >= 8:
                assert norms[:3] == [0.0, 0.0, 0.0] and norms[3] > 0
            else:
                assert all(n > 0 for n in norms)

    def test_all_frame_variant_keeps_every_frame(self):
        tap = _Tap(make_model(seed=0))
        trainer = _trainer(total=16, tail_only=False, student=tap)
        for _ in range(4):
            trainer.step()
            assert all(float(tap.taps[-1].grad[:, f].norm()) > 0 for f in range(4))


class TestRollout:
    def test_first_step_equals_cache_free_sample(self):
        student = make_model(seed=0)
        cfg = ForcingConfig(4, 8, 16)
        cond = make_cond(student.config, 16)
        state = new_rollout(student, SCHED, cfg, cond, MASK, numeric.generator(0))
        with torch.no_grad():
            win, _, ctx = rollout_step(state, student, SCHED, numeric.generator(1), cfg)
            fresh = KVCacheSet(SCHED.steps, student.config.n_layers, 8, student.config.cells)
            ref = few_step_sample(student, cond.frames(0, 4), SCHED, numeric.generator(1), caches=fresh,
                                  sink=sink_context(student, cond.reference, -cfg.delta), positions=torch.arange(4))
        torch.testing.assert_close(win, ref.x0, rtol=0, atol=0)
        assert ctx.l_before == 0 and all(c is None for c in ctx.contexts)

    def test_cache_audit(self):
        student = make_model(seed=0)
        cfg = ForcingConfig(4, 8, 24)
        state = new_rollout(student, SCHED, cfg, make_cond(student.config, 24), MASK, numeric.generator(0))
        gen = numeric.generator(1)
        with torch.no_grad():
            for n in range(1, 6):
                rollout_step(state, student, SCHED, gen, cfg)
                for t in range(SCHED.T):
                    assert state.kv.positions(t) == list(range(max(0, 4 * n - 8), 4 * n))
        assert state.l == 20 and state.generated().shape[1] == 20

    def test_reset_at_total_frames(self):
        trainer = _trainer(total=16)
        recs = [trainer.step() for _ in range(9)]
        assert [r["l"] for r in recs] == [0, 4, 8, 12, 0, 4, 8, 12, 0]
        assert [r["rollout"] for r in recs] == [0] * 4 + [1] * 4 + [2]

    def test_recache_once_at_switch(self):
        trainer = _trainer(total=16)
        recs = [trainer.step() for _ in range(8)]
        for rollout in (0, 1):
            rows = [r for r in recs if r["rollout"] == rollout]
            hits = [r for r in rows if r["recached"]]
            assert len(hits) == 1
            assert hits[0]["l"] == 4 * rows[0]["switch_index"]

    def test_reproducible(self):
        a = [_trainer(seed=3).step()["loss"] for _ in range(1)]
        t1, t2 = _trainer(seed=3), _trainer(seed=3)
        r1 = [t1.step() for _ in range(3)]
        r2 = [t2.step() for _ in range(3)]
        assert r1 == r2 and a[0] == r1[0]["loss"]
        assert numeric.param_hash(t1.student) == numeric.param_hash(t2.student)

    def test_short_conditions_rejected(self):
        student = make_model(seed=0)
        trainer = ForcingTrainer(student, make_model("bidirectional"), make_model("bidirectional"), _sampler(8),
                                 SCHED, ForcingConfig(4, 8, 16), DMDConfig())
        with pytest.raises(ValueError):
            trainer.step()


class TestUpdates:
    def test_one_fake_step_per_generator_step(self):
        trainer = _trainer()
        counts = {"s": 0, "f": 0}
        for key, opt in (("s", trainer.s_opt), ("f", trainer.f_opt)):
            orig = opt.step

            def counted(*a, _orig=orig, _key=key, **kw):
                counts[_key] += 1
                return _orig(*a, **kw)

            opt.step = counted
        for n in range(1, 6):
            trainer.step()
            assert counts == {"s": n, "f": n}

    def test_teacher_untouched(self):
        trainer = _trainer()
        h = numeric.param_hash(trainer.teacher)
        trainer.run(3)
        assert numeric.param_hash(trainer.teacher) == h

    def test_divergence_aborts(self):
        teacher = make_model("bidirectional", seed=1)
        with torch.no_grad():
            teacher.head.weight.fill_(float("inf"))
        trainer = _trainer(teacher=teacher)
        with pytest.raises(TrainingDiverged):
            trainer.step()


def test_smoke_epoch_eight_identities():
    dc = DataConfig(grid=(2, 3), channels=3, cond_dim=5, oral_rows=(1, 2), oral_cols=(0, 2))
    idents = [SyntheticIdentity.create(i, dc) for i in range(8)]
    student = make_model(seed=0)
    teacher = make_model("bidirectional", seed=1)
    h0 = numeric.param_hash(student)
    cfg = ForcingConfig(4, 8, 16)
    _, trainer = training_loop(student, teacher, clone_model(teacher), audio_sampler(idents, 16, [0]), SCHED, cfg,
                               DMDConfig(), steps=8, seed=0)
    recs = trainer.telemetry.records
    assert len(recs) == 8 and all(math.isfinite(r["loss"]) and math.isfinite(r["fake_loss"]) for r in recs)
    assert numeric.param_hash(student) != h0
    assert trainer.n_rollouts == 2
