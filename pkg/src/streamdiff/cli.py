"""Command-line entry point: ``streamdiff <subcommand> --config C --seed S --out DIR``.

Stages read and write checkpoints (``name.json`` + ``name.bin``) under ``--out``::

    train-teacher-sft  -> teacher
    train-accdmd       teacher -> student_accdmd, fake
    train-forcing      student_accdmd, fake, teacher -> student
    train-refiner      student -> decoder_base, decoder_refined
    infer-stream       student, decoder_* -> stream/ (tensors, PNG frames, metrics)
    check-invariants   quick property checks, non-zero exit on failure
    report             results.jsonl (run with --run if absent) -> drift.png, ablations.png, summary.txt
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import numeric
from .accdmd import Telemetry
from .harness import experiments as ex
from .harness.config import ExperimentConfig, load_config, tiny_config
from .harness.data import render_pixels
from .inference import generate_stream, latency_report
from .model import load_model, save_model
from .refiner import Decoder

log = logging.getLogger("streamdiff")


class MissingArtifact(FileNotFoundError):
    pass


def _need(out: Path, name: str) -> Path:
    p = out / name
    if not p.with_suffix(".json").exists():
        raise MissingArtifact(f"missing artifact {name!r} in {out}; run the stage that produces it first")
    return p


def _config(args) -> ExperimentConfig:
    if args.tiny:
        return tiny_config()
    return load_config(args.config)


def _decoder(cfg: ExperimentConfig, path: Path) -> Decoder:
    dec = Decoder(cfg.data.channels)
    numeric.load_module(path, dec)
    return dec


def _telemetry(path: Path) -> Telemetry:
    path.unlink(missing_ok=True)
    return Telemetry(path=path)


def write_frames(pixels: torch.Tensor, directory: Path) -> list[Path]:
    """Write ``[F, H, W, 3]`` pixels in ``[-1, 1]`` as lossless PNG frames."""
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("frame_*.png"):
        old.unlink()
    arr = ((pixels.detach().clamp(-1, 1).numpy() + 1.0) * 127.5).round().astype(np.uint8)
    paths = []
    for i, frame in enumerate(arr):
        p = directory / f"frame_{i:04d}.png"
        Image.fromarray(frame, mode="RGB").save(p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- stages


def cmd_train_teacher_sft(cfg, args, out: Path) -> dict:
    data = ex.make_datasets(cfg, args.seed)
    teacher, info = ex.train_teacher(cfg, data, args.seed)
    save_model(out / "teacher", teacher)
    return {"pretrain_final_loss": info["pretrain"][-1] if info["pretrain"] else None}


def cmd_train_accdmd(cfg, args, out: Path) -> dict:
    teacher = load_model(_need(out, "teacher"))
    data = ex.make_datasets(cfg, args.seed)
    tele = _telemetry(out / "telemetry_accdmd.jsonl")
    student, fake = ex.distill(cfg, teacher, data, args.seed, telemetry=tele)
    save_model(out / "student_accdmd", student)
    save_model(out / "fake", fake)
    return {"steps": len(tele.records)}


def cmd_train_forcing(cfg, args, out: Path) -> dict:
    teacher = load_model(_need(out, "teacher"))
    student = load_model(_need(out, "student_accdmd"))
    fake = load_model(_need(out, "fake"))
    data = ex.make_datasets(cfg, args.seed)
    tele = _telemetry(out / "telemetry_forcing.jsonl")
    student = ex.force(cfg, student, teacher, fake, data, args.seed, telemetry=tele)
    save_model(out / "student", student)
    return {"steps": len(tele.records)}


def cmd_train_refiner(cfg, args, out: Path) -> dict:
    student = load_model(_need(out, "student"))
    data = ex.make_datasets(cfg, args.seed)
    _, base = ex.train_codec(cfg, data, args.seed)
    refined, trace = ex.refine(cfg, student, base, data, args.seed)
    numeric.save_module(out / "decoder_base", base)
    numeric.save_module(out / "decoder_refined", refined)
    return {"final_recon": trace[-1][0] if trace else None}


def cmd_infer_stream(cfg, args, out: Path) -> dict:
    student = load_model(_need(out, "student"))
    decoder = _decoder(cfg, _need(out, f"decoder_{args.decoder}"))
    data = ex.make_datasets(cfg, args.seed)
    sample = data.eval[0]
    M = args.chunks or cfg.eval.horizon_chunks
    lat, px, session = generate_stream(student, sample.cond(), M, cfg.schedule.schedule(), decoder=decoder,
                                       seed=args.seed, cache_frames=cfg.forcing.cache_frames)
    d = out / "stream"
    numeric.save_tensors(d / "latents", {"latents": lat[0]}, {"seed": args.seed, "chunks": M})
    numeric.save_tensors(d / "pixels", {"pixels": px[0]}, {"decoder": args.decoder})
    write_frames(px[0], d / "frames")
    write_frames(render_pixels(sample.latents[: M * cfg.model.chunk_frames]), d / "frames_gt")
    sink = f"sink position={session.sink.position} frames={session.sink.n_frames}" if session.sink.is_set else "sink unset"
    (d / "cache_dump.txt").write_text(session.kv.dump() + "\n" + sink + "\n")
    rec, _ = ex.evaluate("stream", student, cfg, [sample], args.seed, horizon_chunks=M)
    report = latency_report(session).to_dict()
    (d / "metrics.json").write_text(rec.to_json() + "\n")
    (d / "latency.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return {"frames": lat.shape[1], "horizon_drift": rec.horizon_drift, "sync_proxy": rec.sync_proxy,
            "calls_per_frame": report["calls_per_frame"]}


def cmd_check_invariants(cfg, args, out: Path) -> dict:
    from .invariants import run_all

    results = run_all(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise SystemExit(f"invariant checks failed: {', '.join(failed)}")
    return {"checked": len(results)}


def cmd_report(cfg, args, out: Path) -> dict:
    from .harness.report import load_results, save_results, write_report

    path = out / "results.jsonl"
    if args.run:
        seeds = cfg.run.seeds if args.seeds is None else tuple(int(s) for s in args.seeds.split(","))
        results = ex.run_seeds(cfg, seeds, variants=cfg.run.variants, workers=args.workers)
        save_results(results, path)
    elif not path.exists():
        raise MissingArtifact(f"missing artifact 'results.jsonl' in {out}; rerun with --run")
    paths = write_report(load_results(path), out)
    print(paths["summary"].read_text(), end="")
    return {k: str(v) for k, v in paths.items()}


COMMANDS = {
    "train-teacher-sft": cmd_train_teacher_sft,
    "train-accdmd": cmd_train_accdmd,
    "train-forcing": cmd_train_forcing,
    "train-refiner": cmd_train_refiner,
    "infer-stream": cmd_infer_stream,
    "check-invariants": cmd_check_invariants,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamdiff", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="INI experiment config (defaults if omitted)")
        p.add_argument("--tiny", action="store_true", help="use the seconds-scale preset instead of --config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("runs"))
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "infer-stream":
            p.add_argument("--decoder", choices=("refined", "base"), default="refined")
            p.add_argument("--chunks", type=int, default=None)
        if name == "report":
            p.add_argument("--run", action="store_true", help="run the seed sweep before reporting")
            p.add_argument("--seeds", default=None, help="comma-separated seeds overriding the config")
            p.add_argument("--workers", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        info = COMMANDS[args.command](cfg, args, args.out)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **info}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
