"""Cross-run summaries: summary.csv and an accuracy-vs-round SVG."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .data import read_csv, write_csv

SUMMARY_HEADER = ("run", "defense", "final_accuracy", "mean_psnr", "mean_ssim")
_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class RunSummary:
    run: str
    defense: str
    accuracies: list[float]
    mean_psnr: float
    mean_ssim: float

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]

    def row(self) -> tuple:
        return (self.run, self.defense, self.final_accuracy, self.mean_psnr, self.mean_ssim)


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan


def summarize_run(run_dir: str | Path) -> RunSummary:
    run_dir = Path(run_dir)
    rounds = run_dir / "rounds.csv"
    if not rounds.is_file():
        raise FileNotFoundError(f"{rounds} not found")
    accs = [float(r["accuracy"]) for r in read_csv(rounds)]
    if not accs:
        raise ValueError(f"{rounds} has no rounds")
    defense = "unknown"
    snap = run_dir / "config_snapshot.json"
    if snap.is_file():
        defense = json.loads(snap.read_text())["defense"]["kind"]
    psnrs, ssims = [], []
    attack = run_dir / "attack.csv"
    if attack.is_file():
        for r in read_csv(attack):
            if r["defense"] == defense:
                psnrs.append(float(r["psnr"]))
                ssims.append(float(r["ssim"]))
    return RunSummary(run_dir.name, defense, accs, _mean(psnrs), _mean(ssims))


def render_svg(runs: list[RunSummary], width: int = 640, height: int = 400) -> str:
    """Accuracy-vs-round chart, one polyline per run."""
    pad = 50
    max_round = max(len(r.accuracies) for r in runs)
    sx = (width - 2 * pad) / max(max_round - 1, 1)
    sy = height - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">round</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {height / 2})">accuracy</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = height - pad - tick * sy
        parts.append(f'<text x="{pad - 6}" y="{y:.1f}" text-anchor="end" font-size="10">{tick:.2f}</text>')
    for i, run in enumerate(runs):
        colour = _COLOURS[i % len(_COLOURS)]
        pts = " ".join(f"{pad + j * sx:.2f},{height - pad - a * sy:.2f}" for j, a in enumerate(run.accuracies))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        label = escape(f"{run.run} ({run.defense})")
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 * (i + 1)}" text-anchor="end" font-size="11" fill="{colour}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> list[RunSummary]:
    runs = [summarize_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "summary.csv", [r.row() for r in runs], SUMMARY_HEADER)
    (out / "accuracy.svg").write_text(render_svg(runs))
    return runs
