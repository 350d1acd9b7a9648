"""Report export: structured text, mask renderings, density tables.

Mask images are binary PPM (P6). Each patch is a square cell; pruned patches
are painted white, kept patches keep a grey level derived from the patch
feature energy (or a flat grey when no features are supplied). Words are
listed per layer with pruned ones struck through as ``~~w7~~``.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..budget import COUNTING_CONVENTION
from ..report import PruneReport

CELL = 8
FORMATS = ("text", "json")


def _grid(n: int):
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an ``(h, w, 3)`` uint8 array as binary PPM."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, maxval, rest = data.split(maxsplit=4)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w), 3)


def mask_image(alive, n_tokens: int, shade=None) -> np.ndarray:
    """Render content tokens ``1..n_tokens`` as a grid; ``alive`` holds kept positions."""
    rows, cols = _grid(n_tokens)
    base = np.full(n_tokens, 96, dtype=np.uint8) if shade is None else np.asarray(shade, np.uint8)
    cells = np.full(n_tokens, 255, dtype=np.uint8)
    for pos in alive:
        if 1 <= pos <= n_tokens:
            cells[pos - 1] = base[pos - 1]
    img = np.kron(cells.reshape(rows, cols), np.ones((CELL, CELL), dtype=np.uint8))
    return np.repeat(img[:, :, None], 3, axis=2)


def _shade(features) -> np.ndarray:
    energy = np.linalg.norm(np.asarray(features, dtype=np.float64), axis=1)
    span = energy.max() - energy.min()
    scaled = (energy - energy.min()) / span if span > 0 else np.zeros_like(energy)
    # darker = more energy; stays well clear of the white used for pruned cells
    return (160 - 140 * scaled).astype(np.uint8)


def strike_lines(inst, n_words: int) -> list:
    lines = []
    for rec in inst.branch("language"):
        alive = set(rec.kept)
        words = [f"w{j}" if j in alive else f"~~w{j}~~" for j in range(1, n_words + 1)]
        lines.append(f"layer {rec.layer}: " + " ".join(words))
    return lines


def density_table(report: PruneReport) -> list:
    """Rows ``(branch, layer, mean alive count out, mean kept fraction of input)``."""
    rows = []
    if not report.instances:
        return rows
    for branch in ("vision", "language"):
        recs = [inst.branch(branch) for inst in report.instances]
        for layer in range(len(recs[0])):
            n_out = [r[layer].n_out for r in recs]
            frac = [r[layer].n_out / r[layer].n_in for r in recs]
            rows.append((branch, layer, float(np.mean(n_out)), float(np.mean(frac))))
    return rows


def text_summary(report: PruneReport) -> str:
    lines = [
        "madtp prune report",
        f"counting: {COUNTING_CONVENTION}",
        f"samples: {len(report.instances)}",
        f"temperature: {report.temperature!r}",
        f"baseline_gflops: {report.baseline_gflops!r}",
        f"dataset_gflops: {report.dataset_gflops!r}",
        f"reduce_ratio: {report.reduce_ratio!r}",
        "ledger:",
    ]
    lines += [f"  - {s}" for s in report.ledger]
    if report.instances:
        lines.append("density (branch, layer, mean alive, mean kept fraction):")
        lines += [f"  {b}\t{l}\t{n:.4f}\t{f:.4f}" for b, l, n, f in density_table(report)]
        lines.append("samples (index, difficulty, gflops, vision alive, language alive):")
        for inst in report.instances:
            lines.append(f"  {inst.index}\t{inst.difficulty}\t{inst.gflops!r}\t"
                         f"{inst.alive_counts('vision')}\t{inst.alive_counts('language')}")
    return "\n".join(lines) + "\n"


def export_report(report: PruneReport, out_dir, fmt: str = "json", images=None,
                  max_samples: int | None = None) -> list:
    """Write the report and its renderings under ``out_dir``; returns written paths.

    ``images`` optionally maps instance index to raw patch features used to
    shade kept cells.
    """
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        main = out / ("report.json" if fmt == "json" else "report.txt")
        main.write_text(report.dumps() if fmt == "json" else text_summary(report))
        written.append(main)
        table = out / "density.tsv"
        table.write_text("branch\tlayer\tmean_alive\tmean_kept_fraction\n" + "".join(
            f"{b}\t{l}\t{n!r}\t{f!r}\n" for b, l, n, f in density_table(report)))
        written.append(table)
        cfg = report.config.get("model", {}) if report.config else {}
        n_patches = cfg.get("n_patches")
        n_words = cfg.get("n_words")
        samples = report.instances if max_samples is None else report.instances[:max_samples]
        if samples:
            (out / "masks").mkdir(exist_ok=True)
        for inst in samples:
            shade = _shade(images[inst.index]) if images is not None else None
            for branch, n in (("vision", n_patches), ("language", n_words)):
                for rec in inst.branch(branch):
                    n_tok = n if n is not None else rec.n_in - 1
                    img = mask_image(rec.kept, n_tok, shade if branch == "vision" else None)
                    path = out / "masks" / f"pair{inst.index:05d}_{branch}_layer{rec.layer}.ppm"
                    write_ppm(path, img)
                    written.append(path)
            words = out / "masks" / f"pair{inst.index:05d}_words.txt"
            words.write_text("\n".join(strike_lines(inst, n_words or 0)) + "\n")
            written.append(words)
        return written
    except OSError as exc:
        raise OSError(f"{out}: cannot write report ({exc})") from exc
