"""Drift-curve plots, ablation tables and a plain-text summary."""

from __future__ import annotations

import json
from pathlib import Path
from statistics import median

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import SeedResult, ablation_table, claims  # noqa: E402


def median_curves(results: list[SeedResult]) -> dict[str, list[float]]:
    """Per-frame median drift for every record name present in all seeds."""
    names = set.intersection(*(set(r.records) for r in results)) if results else set()
    out = {}
    for name in sorted(names):
        curves = [r.records[name].drift for r in results]
        n = min(len(c) for c in curves)
        out[name] = [median(c[k] for c in curves) for k in range(n)]
    return out


def format_table(table: dict[str, dict]) -> str:
    cols = ("drift", "sync", "pixel_error", "calls_per_chunk")
    lines = ["axis".ljust(20) + "".join(c.rjust(16) for c in cols)]
    for name, row in table.items():
        if "missing" in row:
            lines.append(name.ljust(20) + f"  missing artifact: {row['missing']}")
            continue
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append(("-" if v is None else f"{v:.4f}").rjust(16))
        lines.append(name.ljust(20) + "".join(cells))
    return "\n".join(lines)


def plot_drift(curves: dict[str, list[float]], path: Path, chunk_frames: int = 4) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, c in curves.items():
        if name.endswith("_sync") or name == "teacher":
            continue
        ax.plot(range(1, len(c) + 1), c, label=name)
    ax.set_xlabel("frame")
    ax.set_ylabel("drift to reference (median over seeds)")
    for x in range(chunk_frames, max((len(c) for c in curves.values()), default=0), chunk_frames):
        ax.axvline(x + 0.5, color="0.9", lw=0.5, zorder=0)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_table(table: dict[str, dict], path: Path) -> None:
    rows = [(k, v) for k, v in table.items() if "drift" in v]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key in zip(axes, ("drift", "sync")):
        ax.bar([k for k, _ in rows], [v[key] for _, v in rows], color="tab:blue")
        ax.set_title(f"median {key}")
        ax.tick_params(axis="x", rotation=60, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def summary_text(results: list[SeedResult]) -> str:
    lines = [f"seeds: {[r.seed for r in results]}", "", format_table(ablation_table(results)), ""]
    for name, c in claims(results).items():
        status = "PASS" if c["passed"] else "FAIL"
        detail = {k: v for k, v in c.items() if k not in ("passed", "values")}
        lines.append(f"{status} {name} {json.dumps(detail, sort_keys=True)}")
    lines.append("")
    lines.append("call counters (seed %d):" % results[0].seed)
    for name, rec in sorted(results[0].records.items()):
        lines.append(f"  {name}: {json.dumps(rec.calls, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def write_report(results: list[SeedResult], out_dir: str | Path) -> dict[str, Path]:
    """Render ``drift.png``, ``ablations.png`` and ``summary.txt`` into ``out_dir``."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"drift": out / "drift.png", "ablations": out / "ablations.png", "summary": out / "summary.txt"}
    w = next(iter(results[0].records.values())).extra.get("chunk_frames", 4)
    plot_drift(median_curves(results), paths["drift"], w)
    plot_table(ablation_table(results), paths["ablations"])
    paths["summary"].write_text(summary_text(results))
    return paths


def load_results(path: str | Path) -> list[SeedResult]:
    """Read one canonical ``SeedResult`` JSON document per line."""
    text = Path(path).read_text()
    return [SeedResult.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def save_results(results: list[SeedResult], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in results))
