"""Plate detection/recognition metrics and the end-to-end pipeline harness.

Detectors and recognisers are plain callables::

    detector(scene_image, row, rng) -> BoundingBox
    recognizer(plate_image) -> str

The shipped implementations are an oracle detector that jitters the ground
truth box and a template-matching recogniser that reads the embedded font.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .fileio import read_ppm
from .plates.font import CHARSET, GLYPH_COLS, GLYPH_ROWS, GLYPHS
from .plates.synth import DEFAULT_KEEP_FRACTION, BoundingBox, ManifestRow, center_crop, crop

DS_GATE = 0.5


@dataclass(frozen=True)
class CERBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        return self.edits / self.ref_len


def cer(reference: str, hypothesis: str) -> CERBreakdown:
    """Character error rate with a minimal unit-cost alignment.

    Among optimal alignments the backtrace prefers matches/substitutions,
    then deletions, then insertions.
    """
    if not reference:
        raise ValueError("reference text must be non-empty")
    n, m = len(reference), len(hypothesis)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dp[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            dp[i, j] = min(diag, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return CERBreakdown(substitutions=int(s), deletions=d, insertions=ins, ref_len=n)


@dataclass(frozen=True)
class Overlap:
    ds: float
    iou: float


def box_overlap(a: BoundingBox, b: BoundingBox) -> Overlap:
    """Dice score and IoU of two pixel rectangles."""
    iw = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    total = a.area + b.area
    return Overlap(ds=2 * inter / total, iou=inter / (total - inter))


def oracle_detector(jitter: float = 0.0) -> Callable:
    """Detector returning the ground-truth box with each edge moved by up to ``jitter`` of its side."""
    if jitter < 0:
        raise ValueError("jitter must be non-negative")

    def detect(image: np.ndarray, row: ManifestRow, rng: np.random.Generator) -> BoundingBox:
        return jitter_box(row.box, jitter, rng, image.shape[1], image.shape[0])

    detect.jitter = jitter
    return detect


def jitter_box(box: BoundingBox, jitter: float, rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    d = rng.uniform(-jitter, jitter, size=4)
    x0 = box.x + d[0] * box.w
    x1 = box.x + box.w + d[1] * box.w
    y0 = box.y + d[2] * box.h
    y1 = box.y + box.h + d[3] * box.h
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    x0 = int(np.clip(round(x0), 0, width - 1))
    y0 = int(np.clip(round(y0), 0, height - 1))
    x1 = int(np.clip(round(x1), x0 + 1, width))
    y1 = int(np.clip(round(y1), y0 + 1, height))
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def missing_detector() -> Callable:
    """Detector that always answers with a 1x1 box in the image corner."""

    def detect(image: np.ndarray, row: ManifestRow, rng: np.random.Generator) -> BoundingBox:
        return BoundingBox(0, 0, 1, 1)

    return detect


def _canonical(cell: np.ndarray) -> np.ndarray:
    """Centre the inked columns of a 7-row cell inside a 7x5 canvas."""
    cols = np.flatnonzero(cell.max(axis=0) > 0)
    out = np.zeros((GLYPH_ROWS, GLYPH_COLS))
    if cols.size == 0:
        return out
    part = cell[:, cols[0] : cols[-1] + 1][:, :GLYPH_COLS]
    off = (GLYPH_COLS - part.shape[1]) // 2
    out[:, off : off + part.shape[1]] = part
    return out


TEMPLATES: dict[str, np.ndarray] = {ch: _canonical(GLYPHS[ch].astype(np.float64)) for ch in CHARSET}


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) runs of True."""
    padded = np.concatenate([[False], flags, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def _pool(block: np.ndarray, rows: int, cols: int) -> np.ndarray:
    h, w = block.shape
    rb = np.linspace(0, h, rows + 1)
    cb = np.linspace(0, w, cols + 1)
    out = np.zeros((rows, cols))
    for r in range(rows):
        r0, r1 = int(np.floor(rb[r])), max(int(np.floor(rb[r])) + 1, int(np.ceil(rb[r + 1])))
        for c in range(cols):
            c0, c1 = int(np.floor(cb[c])), max(int(np.floor(cb[c])) + 1, int(np.ceil(cb[c + 1])))
            out[r, c] = block[r0:r1, c0:c1].mean()
    return out


def template_recognizer(
    plate_img: np.ndarray,
    templates: dict[str, np.ndarray] | None = None,
    contrast_floor: float = 30.0,
) -> str:
    """Read the single text line of a (centre-cropped) plate by template matching.

    The background level is the median of the border pixels; ink is anything
    farther than half the maximal contrast from it.  Cells come from the
    column projection of the tallest ink row band.
    """
    templates = templates or TEMPLATES
    img = np.asarray(plate_img, dtype=np.float64)
    if img.ndim == 3:
        gray = img @ np.array([0.299, 0.587, 0.114])
    else:
        gray = img
    h, w = gray.shape
    if h < GLYPH_ROWS or w < 3:
        return ""
    border = np.concatenate([gray[0], gray[-1], gray[:, 0], gray[:, -1]])
    diff = np.abs(gray - np.median(border))
    peak = diff.max()
    if peak < contrast_floor:
        return ""
    strength = np.clip(diff / peak, 0.0, 1.0)
    ink = strength > 0.5

    row_runs = _runs(ink.any(axis=1))
    r0, r1 = max(row_runs, key=lambda r: (r[1] - r[0], -r[0]))
    unit = (r1 - r0) / GLYPH_ROWS
    if unit < 0.75:
        return ""
    band = strength[r0:r1]
    cells = []
    for c0, c1 in _runs(ink[r0:r1].any(axis=0)):
        width = c1 - c0
        if width < 0.5 * unit:
            continue
        pieces = max(1, int(round((width + unit) / ((GLYPH_COLS + 1) * unit))))
        bounds = np.linspace(c0, c1, pieces + 1)
        for p in range(pieces):
            cells.append((int(round(bounds[p])), int(round(bounds[p + 1]))))

    out = []
    names = list(templates)
    stack = np.stack([templates[ch] for ch in names])
    for c0, c1 in cells:
        n_cols = int(np.clip(round((c1 - c0) / unit), 1, GLYPH_COLS))
        cell = _canonical(_pool(band[:, c0:c1], GLYPH_ROWS, n_cols))
        dist = np.sum((stack - cell[None]) ** 2, axis=(1, 2))
        out.append(names[int(np.argmin(dist))])
    return "".join(out)


@dataclass
class ItemResult:
    file: str
    text: str
    prediction: str
    box: list[int]
    detected: list[int]
    ds: float
    iou: float
    cer: float

    @property
    def lpd_ok(self) -> bool:
        return self.ds >= DS_GATE

    @property
    def exact(self) -> bool:
        return self.prediction == self.text


@dataclass
class PipelineReport:
    n: int
    lpd_accuracy: float
    lpr_accuracy_given_lpd: float | None
    avg_cer_given_lpd: float | None
    lpr_accuracy: float
    avg_cer: float
    mean_ds: float
    mean_iou: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(items: Sequence[ItemResult]) -> PipelineReport:
    if not items:
        raise ValueError("no items to summarise")
    n = len(items)
    gated = [it for it in items if it.lpd_ok]
    return PipelineReport(
        n=n,
        lpd_accuracy=len(gated) / n,
        lpr_accuracy_given_lpd=(sum(it.exact for it in gated) / len(gated)) if gated else None,
        avg_cer_given_lpd=(float(np.mean([it.cer for it in gated]))) if gated else None,
        lpr_accuracy=sum(it.exact for it in items) / n,
        avg_cer=float(np.mean([it.cer for it in items])),
        mean_ds=float(np.mean([it.ds for it in items])),
        mean_iou=float(np.mean([it.iou for it in items])),
    )


def run_item(
    image: np.ndarray,
    row: ManifestRow,
    detector: Callable,
    recognizer: Callable,
    rng: np.random.Generator,
    keep_fraction: float = DEFAULT_KEEP_FRACTION,
) -> ItemResult:
    """Detect, crop, centre-crop, recognise and score one scene."""
    box = detector(image, row, rng)
    plate = center_crop(crop(image, box), keep_fraction)
    if getattr(recognizer, "needs_truth", False):
        pred = recognizer(plate, row)
    else:
        pred = recognizer(plate)
    ov = box_overlap(box, row.box)
    return ItemResult(
        file=row.extra.get("relative_file", str(row.file)),
        text=row.text,
        prediction=pred,
        box=row.box.as_list(),
        detected=box.as_list(),
        ds=ov.ds,
        iou=ov.iou,
        cer=cer(row.text, pred).cer,
    )


def truth_recognizer() -> Callable:
    """Recogniser that returns the ground-truth text of the row being scored."""

    def recognize(plate: np.ndarray, row: ManifestRow) -> str:
        return row.text

    recognize.needs_truth = True
    return recognize


def evaluate_pipeline(
    rows: Iterable[ManifestRow],
    detector: Callable,
    recognizer: Callable,
    seed: int = 0,
    keep_fraction: float = DEFAULT_KEEP_FRACTION,
    images: Iterable[np.ndarray] | None = None,
) -> tuple[PipelineReport, list[ItemResult]]:
    """Score every scene of a manifest; ``images`` overrides reading ``row.file``."""
    rows = list(rows)
    imgs = list(images) if images is not None else [read_ppm(r.file) for r in rows]
    items = []
    for i, (row, img) in enumerate(zip(rows, imgs)):
        if row.box is None:
            raise ValueError(f"{row.file}: scene manifest row without a box")
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        items.append(run_item(img, row, detector, recognizer, rng, keep_fraction))
    return summarize(items), items


def write_report(out_dir: str | Path, report: PipelineReport, items: Sequence[ItemResult]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lpr_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "lpr_items.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "text", "prediction", "ds", "iou", "cer"])
        for it in items:
            w.writerow([it.file, it.text, it.prediction, repr(it.ds), repr(it.iou), repr(it.cer)])
