"""Per-seed pipeline (teacher, distillation, forcing, refiner), evaluation and ablations."""

from __future__ import annotations

import copy
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import torch

from .. import numeric
from ..accdmd import Clip, DMDConfig, Telemetry, sft_teacher, train_accdmd, train_denoiser
from ..forcing import ForcingConfig, training_loop
from ..inference import StreamSession, generate_stream
from ..model import VideoTransformer, clone_model, save_model
from ..refiner import Decoder, Encoder, RefinerConfig, pretrain_vae, train_refiner
from .config import ExperimentConfig
from .data import Sample, SyntheticIdentity, gen_dataset, render_pixels
from .metrics import MetricRecord, drift_curve, sobel_magnitude, sync_proxy

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "full_causal": {"pattern": "causal"},
    "full_bidirectional": {"pattern": "bidirectional"},
    "no_sink": {"use_sink": False},
    "original_dmd": {"routing": "global"},
    "all_forcing": {"tail_only": False},
    "no_sft": {"sft": False},
}
ABLATIONS = tuple(VARIANTS) + ("no_forcing", "no_refiner")


@dataclass
class Datasets:
    train: list[Sample]
    eval: list[Sample]


def make_datasets(cfg: ExperimentConfig, seed: int) -> Datasets:
    dc = cfg.data.data_config()
    # many identities, so the reference can only be reproduced through the sink
    train = []
    for i in range(cfg.data.n_train):
        ident = SyntheticIdentity.create(seed * 100003 + i, dc)
        x, a, e = ident.video(cfg.data.frames, 10 * seed)
        train.append(Sample(ident, x, a, e))
    ev = gen_dataset(cfg.data.n_eval, cfg.data.frames, 7_000_000 + seed, dc)
    return Datasets(train, ev)


def _pick(gen, n: int) -> int:
    return int(torch.randint(n, (1,), generator=gen))


def clip_sampler(samples: list[Sample], n_frames: int, aligned: int = 1, first_only: bool = False):
    """Random ``n_frames`` windows; ``aligned`` restricts starts to multiples."""

    def sample(gen) -> Clip:
        s = samples[_pick(gen, len(samples))]
        F = s.latents.shape[0]
        start = 0 if first_only else aligned * _pick(gen, (F - n_frames) // aligned + 1)
        return Clip(s.latents[None, start : start + n_frames], s.cond(start, start + n_frames), start)

    return sample


def audio_sampler(identities: list[SyntheticIdentity], n_frames: int, counter: list[int]):
    """Fresh audio tracks for ground-truth-free stages; returns ``(cond, mask)``."""

    def sample(gen):
        ident = identities[_pick(gen, len(identities))]
        counter[0] += 1
        x, a, e = ident.video(n_frames, 50_000 + counter[0] + 1000 * _pick(gen, 1000))
        return Sample(ident, x, a, e).cond(), ident.mask

    return sample


def train_teacher(cfg: ExperimentConfig, data: Datasets, seed: int, sft: bool = True):
    mc = cfg.model.model_config(cfg.data, "bidirectional")
    teacher = VideoTransformer(mc, seed=seed)
    w = cfg.model.chunk_frames
    delta = cfg.forcing.cache_frames + w
    tc = cfg.teacher
    pre = train_denoiser(teacher, clip_sampler(data.train, tc.clip_chunks * w), tc.pretrain_steps, tc.lr,
                         seed, p_uncond=tc.p_uncond, sink_offset=delta)
    if not sft:
        return teacher, {"pretrain": pre}
    # SFT chunks: chunk-aligned windows of the streaming length
    g = numeric.generator(seed, 23)
    chunks = [clip_sampler(data.train, w, aligned=w)(g) for _ in range(64)]
    adapted = sft_teacher(teacher, chunks, tc.sft_steps, tc.sft_lr, seed + 1, p_uncond=tc.p_uncond,
                          sink_offset=delta)
    return adapted, {"pretrain": pre}


def distill(cfg: ExperimentConfig, teacher, data: Datasets, seed: int, pattern="hybrid", use_sink=True,
            routing="acc", telemetry: Telemetry | None = None):
    w = cfg.model.chunk_frames
    student = clone_model(teacher, teacher.config.with_pattern(pattern))
    fake = clone_model(teacher)
    dmd = DMDConfig(cfg.accdmd.alpha, cfg.accdmd.fake_alpha, routing, cfg.accdmd.student_lr, cfg.accdmd.fake_lr)
    idents = [s.identity for s in data.train]
    counter = [0]
    af = audio_sampler(idents, w, counter)

    def sample(gen):
        cond, mask = af(gen)
        B = 1
        lat = torch.zeros(B, w, *cfg.data.grid, cfg.data.channels, dtype=numeric.DTYPE)
        return Clip(lat, cond, 0), mask

    train_accdmd(student, teacher, fake, sample, cfg.accdmd.steps, cfg.schedule.schedule(), dmd, seed,
                 sink_offset=cfg.forcing.cache_frames + w, use_sink=use_sink, telemetry=telemetry)
    return student, fake


def force(cfg: ExperimentConfig, student, teacher, fake, data: Datasets, seed: int, use_sink=True, tail_only=True,
          routing="acc", telemetry: Telemetry | None = None):
    fc = cfg.forcing
    fcfg = ForcingConfig(cfg.model.chunk_frames, fc.cache_frames, fc.total_frames, fc.long_threshold, tail_only,
                         use_sink)
    dmd = DMDConfig(cfg.accdmd.alpha, cfg.accdmd.fake_alpha, routing, fc.student_lr, fc.fake_lr)
    counter = [0]
    sample = audio_sampler([s.identity for s in data.train], fc.total_frames, counter)
    training_loop(student, teacher, fake, sample, cfg.schedule.schedule(), fcfg, dmd, fc.steps, seed + 2, telemetry)
    return student


def evaluate(name: str, model, cfg: ExperimentConfig, samples: list[Sample], seed: int, use_sink=True,
             sched=None, cfg_alpha=None, horizon_chunks=None) -> tuple[MetricRecord, list[torch.Tensor]]:
    """Stream every eval sample; average drift curves and sync proxies."""
    sched = sched or cfg.schedule.schedule()
    M = horizon_chunks or cfg.eval.horizon_chunks
    w = cfg.model.chunk_frames
    curves, syncs, outs = [], [], []
    model.calls.clear()
    t0 = time.perf_counter()
    for i, s in enumerate(samples):
        lat, _, sess = generate_stream(model, s.cond(), M, sched, seed=1000 * seed + i, cache_frames=cfg.forcing.cache_frames,
                                       use_sink=use_sink, cfg_alpha=cfg_alpha)
        curves.append(drift_curve(lat[0], s.reference, s.mask))
        syncs.append(sync_proxy(lat[0], s.envelope[: M * w], s.mask))
        outs.append(lat[0])
    n = len(samples)
    curve = [sum(c[k] for c in curves) / n for k in range(M * w)]
    calls = {k: int(v) for k, v in sorted(model.calls.items())}
    calls["per_chunk"] = calls.get("forward", 0) / (n * M)
    rec = MetricRecord(name, seed, curve, sum(syncs) / n, calls, M, extra={"chunk_frames": w},
                       wall_times={"eval_s": time.perf_counter() - t0})
    return rec, outs


def horizon_drift(rec: MetricRecord) -> float:
    return rec.horizon_drift


def train_codec(cfg: ExperimentConfig, data: Datasets, seed: int):
    enc = Encoder(cfg.data.channels, seed=seed)
    dec = Decoder(cfg.data.channels, seed=seed)
    clip_len = cfg.refiner.clip_chunks * cfg.model.chunk_frames

    def sample(gen):
        c = clip_sampler(data.train, clip_len)(gen)
        return render_pixels(c.latents), c.latents

    pretrain_vae(enc, dec, sample, cfg.refiner.vae_steps, cfg.refiner.vae_lr, seed)
    return enc, dec


def refine(cfg: ExperimentConfig, student, decoder, data: Datasets, seed: int, use_sink=True):
    """Pool of generated clips from the frozen student, then decoder fine-tuning."""
    w = cfg.model.chunk_frames
    M = cfg.refiner.clip_chunks
    pool = []
    for i, s in enumerate(data.train[: cfg.refiner.pool_clips]):
        lat, _, _ = generate_stream(student, s.cond(), M, cfg.schedule.schedule(), seed=90_000 + 100 * seed + i,
                                    cache_frames=cfg.forcing.cache_frames, use_sink=use_sink)
        pool.append((lat.detach(), render_pixels(s.latents[None, : M * w])))
    rc = RefinerConfig(M * w, cfg.refiner.lambda_l1, cfg.refiner.lambda_l2, cfg.refiner.lambda_adv,
                       cfg.refiner.decoder_lr, cfg.refiner.disc_lr, cfg.refiner.adv_loss)

    def clip_fn(gen):
        return pool[_pick(gen, len(pool))]

    refined, disc, trace = train_refiner(decoder, student, clip_fn, cfg.refiner.steps, rc, seed)
    return refined, trace


def decoder_metrics(decoder, gen_latents: list[torch.Tensor], samples: list[Sample], clip_frames: int) -> dict:
    errs, hf_dec, hf_gt = [], [], []
    with torch.no_grad():
        for lat, s in zip(gen_latents, samples):
            n = (lat.shape[0] // clip_frames) * clip_frames
            for a in range(0, n, clip_frames):
                px = decoder(lat[None, a : a + clip_frames])
                gt = render_pixels(s.latents[None, a : a + clip_frames])
                errs.append(float((px - gt).abs().mean()))
                hf_dec.append(sobel_magnitude(px))
                hf_gt.append(sobel_magnitude(gt))
    k = len(errs)
    return {"pixel_error": sum(errs) / k, "hf": sum(hf_dec) / k, "hf_gt": sum(hf_gt) / k}


def _round(x):
    if isinstance(x, float):
        return float(f"{x:.12g}")
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_round(v) for v in x]
    return x


@dataclass
class SeedResult:
    seed: int
    records: dict[str, MetricRecord]
    decoder: dict[str, dict]
    telemetry: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        return {
            "seed": self.seed,
            "records": {k: v.canonical() for k, v in sorted(self.records.items())},
            "decoder": _round(self.decoder),
        }

    def to_json(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SeedResult":
        recs = {k: MetricRecord.from_dict(v) for k, v in d["records"].items()}
        return cls(d["seed"], recs, d.get("decoder", {}))


def run_seed(cfg: ExperimentConfig, seed: int, variants=None, out_dir: str | Path | None = None,
             with_refiner: bool = True) -> SeedResult:
    """Full pipeline for one seed; ``variants`` picks keys of ``VARIANTS``."""
    torch.set_num_threads(1)
    variants = tuple(variants or cfg.run.variants)
    timings = {}
    t0 = time.perf_counter()
    data = make_datasets(cfg, seed)
    need_raw = any(not VARIANTS[v].get("sft", True) for v in variants)
    teacher, _ = train_teacher(cfg, data, seed)
    raw_teacher = train_teacher(cfg, data, seed, sft=False)[0] if need_raw else None
    timings["teacher_s"] = time.perf_counter() - t0
    log.info("seed %d: teacher done in %.0fs", seed, timings["teacher_s"])

    records: dict[str, MetricRecord] = {}
    tele = Telemetry()
    tsched = cfg.schedule.teacher_schedule()
    records["teacher"], _ = evaluate("teacher", teacher, cfg, data.eval, seed, sched=tsched,
                                     cfg_alpha=cfg.schedule.teacher_alpha, horizon_chunks=cfg.eval.sync_chunks)
    students, outputs = {}, {}
    for name in variants:
        variant = VARIANTS[name]
        t1 = time.perf_counter()
        tch = teacher if variant.get("sft", True) else raw_teacher
        use_sink = variant.get("use_sink", True)
        routing = variant.get("routing", "acc")
        student, fake = distill(cfg, tch, data, seed, variant.get("pattern", "hybrid"), use_sink, routing, tele)
        if name == "full":
            records["no_forcing"], _ = evaluate("no_forcing", student, cfg, data.eval, seed)
            records["no_forcing_sync"], _ = evaluate("no_forcing_sync", student, cfg, data.eval, seed,
                                                     horizon_chunks=cfg.eval.sync_chunks)
        student = force(cfg, student, tch, fake, data, seed, use_sink, variant.get("tail_only", True), routing, tele)
        records[name], outputs[name] = evaluate(name, student, cfg, data.eval, seed, use_sink=use_sink)
        if name == "full":
            records["full_sync"], _ = evaluate("full_sync", student, cfg, data.eval, seed,
                                               horizon_chunks=cfg.eval.sync_chunks)
        students[name] = student
        timings[f"{name}_s"] = time.perf_counter() - t1
        log.info("seed %d: %s done in %.0fs", seed, name, timings[f"{name}_s"])

    decoders = {}
    if with_refiner and "full" in students:
        t1 = time.perf_counter()
        _, base = train_codec(cfg, data, seed)
        refined, _ = refine(cfg, students["full"], base, data, seed)
        clip = cfg.refiner.clip_chunks * cfg.model.chunk_frames
        decoders["base"] = decoder_metrics(base, outputs["full"], data.eval, clip)
        decoders["refined"] = decoder_metrics(refined, outputs["full"], data.eval, clip)
        timings["refiner_s"] = time.perf_counter() - t1
        if out_dir is not None:
            numeric.save_module(Path(out_dir) / f"seed{seed}" / "decoder_base", base)
            numeric.save_module(Path(out_dir) / f"seed{seed}" / "decoder_refined", refined)
    if out_dir is not None:
        d = Path(out_dir) / f"seed{seed}"
        save_model(d / "teacher", teacher)
        for name, m in students.items():
            save_model(d / f"student_{name}", m)
    timings["total_s"] = time.perf_counter() - t0
    return SeedResult(seed, records, decoders, tele.records, timings)


def _run_seed_job(args):
    cfg, seed, variants, with_refiner = args
    return run_seed(cfg, seed, variants, with_refiner=with_refiner)


def run_seeds(cfg: ExperimentConfig, seeds=None, variants=None, workers=None, with_refiner=True) -> list[SeedResult]:
    seeds = tuple(cfg.run.seeds if seeds is None else seeds)
    workers = cfg.run.workers if workers is None else workers
    jobs = [(cfg, s, variants, with_refiner) for s in seeds]
    if workers <= 1:
        return [_run_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_job, jobs))


# ---------------------------------------------------------------------------
# directional claims


def hf_gap_closed(dec: dict) -> float:
    base_gap = abs(dec["base"]["hf"] - dec["base"]["hf_gt"])
    ref_gap = abs(dec["refined"]["hf"] - dec["refined"]["hf_gt"])
    if base_gap < 1e-12:
        return 0.0
    return (base_gap - ref_gap) / base_gap


def claims(results: list[SeedResult]) -> dict[str, dict]:
    """Median-direction summaries of the end-to-end claims; claims lacking records are skipped."""

    def have(*names):
        return bool(results) and all(n in r.records for r in results for n in names)

    def claim(margin, strict):
        vals = [margin(r) for r in results]
        m = median(vals)
        return {"median_margin": m, "values": vals, "passed": m > 0 if strict else m >= 0}

    def drift_gap(worse, better):
        return lambda r: horizon_drift(r.records[worse]) - horizon_drift(r.records[better])

    out = {}
    if have("full_sync", "teacher"):
        out["sync_vs_teacher"] = claim(
            lambda r: r.records["full_sync"].sync_proxy - 0.8 * r.records["teacher"].sync_proxy, strict=False)
    if have("no_forcing", "full"):
        out["forcing_reduces_drift"] = claim(drift_gap("no_forcing", "full"), strict=True)
    if have("full_causal", "full"):
        out["hybrid_vs_causal"] = claim(drift_gap("full_causal", "full"), strict=False)
    if have("no_sink", "full"):
        out["sink_reduces_drift"] = claim(drift_gap("no_sink", "full"), strict=True)
    if results and all(r.decoder for r in results):
        gain = [r.decoder["base"]["pixel_error"] - r.decoder["refined"]["pixel_error"] for r in results]
        closed = [hf_gap_closed(r.decoder) for r in results]
        m1, m2 = median(gain), median(closed)
        out["refiner"] = {"median_pixel_gain": m1, "median_hf_closed": m2, "values": list(zip(gain, closed)),
                          "passed": m1 > 0 and m2 >= 0.2}
    return out


def ablation_table(results: list[SeedResult]) -> dict[str, dict]:
    """Median horizon drift and sync per ablation axis; absent axes are named as missing."""
    table = {}
    for name in ABLATIONS:
        if name == "no_refiner":
            if results and all(r.decoder for r in results):
                table[name] = {"pixel_error": median(r.decoder["base"]["pixel_error"] for r in results)}
            else:
                table[name] = {"missing": "decoder"}
            continue
        recs = [r.records.get(name) for r in results]
        if not recs or any(x is None for x in recs):
            table[name] = {"missing": name}
            continue
        table[name] = {"drift": median(horizon_drift(x) for x in recs), "sync": median(x.sync_proxy for x in recs),
                       "calls_per_chunk": recs[0].calls.get("per_chunk")}
    if "drift" in table.get("full", {}) and all(r.decoder for r in results):
        table["full"]["pixel_error"] = median(r.decoder["refined"]["pixel_error"] for r in results)
    return table


def ablation_suite(cfg: ExperimentConfig, seeds=None, workers=None) -> dict:
    """Every ablation axis; returns ``{"table": {axis: medians}, "results": [...]}``."""
    results = run_seeds(cfg, seeds, variants=tuple(VARIANTS), workers=workers)
    return {"table": ablation_table(results), "results": results}
