"""Accuracy, latency aggregation, compute metrics, and trade-off reports.

WER uses the minimal-edit-distance alignment with unit costs; among minimal
alignments the one with the fewest insertions (hence fewest deletions, most
substitutions) is chosen, which pins a unique (S, I, D) decomposition.  The
report writer emits a fixed-schema CSV plus a dependency-free SVG scatter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class WerBreakdown:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_len

    @property
    def del_pct(self) -> float:
        return 100.0 * self.deletions / self.ref_len

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.substitutions + other.substitutions,
                            self.insertions + other.insertions,
                            self.deletions + other.deletions,
                            self.ref_len + other.ref_len)


def align_tokens(ref: Sequence, hyp: Sequence) -> list[tuple]:
    """Edit alignment as (op, ref_index, hyp_index) steps.

    op is one of match/sub/ins/del.  Cost order: fewest edits, then fewest
    insertions; ties in the backtrace prefer substitution over insertion
    over deletion.
    """
    n, m = len(ref), len(hyp)
    INF = (10 ** 9, 10 ** 9)
    total = [[0] * (m + 1) for _ in range(n + 1)]
    insd = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        total[i][0] = i
    for j in range(1, m + 1):
        total[0][j] = j
        insd[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = (total[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), insd[i - 1][j - 1])
            ins = (total[i][j - 1] + 1, insd[i][j - 1] + 1)
            dele = (total[i - 1][j] + 1, insd[i - 1][j])
            best = min(diag, ins, dele)
            total[i][j], insd[i][j] = best
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        here = (total[i][j], insd[i][j])
        if i > 0 and j > 0 and here == (total[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                                        insd[i - 1][j - 1]):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and here == (total[i][j - 1] + 1, insd[i][j - 1] + 1):
            ops.append(("ins", None, j - 1))
            j -= 1
        else:
            ops.append(("del", i - 1, None))
            i -= 1
    ops.reverse()
    return ops


def wer(ref: Sequence, hyp: Sequence) -> WerBreakdown:
    if len(ref) == 0:
        raise ValueError("wer: empty reference")
    counts = WerBreakdown(ref_len=len(ref))
    for op, _, _ in align_tokens(ref, hyp):
        if op == "sub":
            counts.substitutions += 1
        elif op == "ins":
            counts.insertions += 1
        elif op == "del":
            counts.deletions += 1
    return counts


# ---------------------------------------------------------------------
# real-time factor
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class RtfSample:
    wall_seconds: float          # mean over repetitions
    audio_seconds: float
    rep_ratios: tuple[float, ...]

    @property
    def ratio(self) -> float:
        return self.wall_seconds / self.audio_seconds

    @property
    def ratio_variance(self) -> float:
        return float(np.var(self.rep_ratios))


def measure_rtf(decode_once, audio_seconds: float, repetitions: int = 3,
                warmup: int = 1) -> RtfSample:
    """Time ``decode_once()`` over several repetitions, excluding warm-up."""
    if audio_seconds <= 0:
        raise ValueError("measure_rtf: audio duration must be positive")
    for _ in range(warmup):
        decode_once()
    walls = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        decode_once()
        walls.append(time.perf_counter() - t0)
    ratios = tuple(w / audio_seconds for w in walls)
    return RtfSample(float(np.mean(walls)), float(audio_seconds), ratios)


# ---------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------

REPORT_COLUMNS = ("experiment", "emf_ctx_ms", "br_vcmd_ms", "br_dict_ms",
                  "domain_vec", "dict_wer", "vcmd_wer", "vcmd_del",
                  "avg_fd_ms", "l_avg_ms", "rtf")


@dataclass
class ReportRow:
    experiment: str
    emf_ctx_ms: str
    br_vcmd_ms: float | None
    br_dict_ms: float | None
    domain_vec: bool
    dict_wer: float | None
    vcmd_wer: float | None
    vcmd_del: float | None
    avg_fd_ms: float | None
    l_avg_ms: float | None
    rtf: float | None = None


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _parse_number(cell: str) -> float | None:
    if cell == "":
        return None
    return float(cell)


def render_report_csv(rows: Sequence[ReportRow]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        if not isinstance(row, ReportRow):
            raise ValueError(f"report: row {row!r} does not match the report schema")
        lines.append(",".join(_format_cell(getattr(row, c)) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[ReportRow]:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or tuple(lines[0].split(",")) != REPORT_COLUMNS:
        raise ValueError("report: header does not match the report schema")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(REPORT_COLUMNS):
            raise ValueError(f"report: malformed row {ln!r}")
        rows.append(ReportRow(
            experiment=cells[0], emf_ctx_ms=cells[1],
            br_vcmd_ms=_parse_number(cells[2]), br_dict_ms=_parse_number(cells[3]),
            domain_vec=cells[4] == "true",
            dict_wer=_parse_number(cells[5]), vcmd_wer=_parse_number(cells[6]),
            vcmd_del=_parse_number(cells[7]), avg_fd_ms=_parse_number(cells[8]),
            l_avg_ms=_parse_number(cells[9]), rtf=_parse_number(cells[10])))
    return rows


def _scatter_panel(rows, x_field, y_field, x_label, y_label, origin_x, title):
    width, height = 420, 360
    mx, my_top, my_bot = 50, 30, 40
    pts = [(getattr(r, x_field), getattr(r, y_field), r.experiment) for r in rows
           if getattr(r, x_field) is not None and getattr(r, y_field) is not None]
    parts = [f'<g transform="translate({origin_x},0)">']
    parts.append(f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" '
                 f'font-size="13">{title}</text>')
    parts.append(f'<rect x="{mx}" y="{my_top}" width="{width - mx - 10}" '
                 f'height="{height - my_top - my_bot}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
                 f'font-size="11">{x_label}</text>')
    parts.append(f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="11" '
                 f'transform="rotate(-90 14 {height / 2:.0f})">{y_label}</text>')
    if pts:
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        xspan = (x1 - x0) or 1.0
        yspan = (y1 - y0) or 1.0
        x0, x1 = x0 - 0.05 * xspan, x1 + 0.05 * xspan
        y0, y1 = y0 - 0.05 * yspan, y1 + 0.05 * yspan

        def sx(x):
            return mx + (x - x0) / (x1 - x0) * (width - mx - 10)

        def sy(y):
            return (height - my_bot) - (y - y0) / (y1 - y0) * (height - my_top - my_bot)

        for tick in (x0, x1):
            parts.append(f'<text x="{sx(tick):.1f}" y="{height - my_bot + 14:.1f}" '
                         f'text-anchor="middle" font-size="9">{tick:.3g}</text>')
        for tick in (y0, y1):
            parts.append(f'<text x="{mx - 4}" y="{sy(tick) + 3:.1f}" text-anchor="end" '
                         f'font-size="9">{tick:.3g}</text>')
        for x, y, label in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3.5" '
                         f'fill="steelblue"/>')
            parts.append(f'<text x="{sx(x) + 5:.1f}" y="{sy(y) - 5:.1f}" '
                         f'font-size="10">{label}</text>')
    parts.append("</g>")
    return "\n".join(parts)


def render_report_svg(rows: Sequence[ReportRow]) -> str:
    body = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="860" height="360" '
        'viewBox="0 0 860 360" font-family="sans-serif">',
        _scatter_panel(rows, "avg_fd_ms", "dict_wer", "VCmd avg finalization delay (ms)",
                       "Dictation WER (%)", 0, "Accuracy vs emission latency"),
        _scatter_panel(rows, "rtf", "dict_wer", "Real-time factor",
                       "Dictation WER (%)", 430, "Accuracy vs compute"),
        "</svg>",
    ]
    return "\n".join(body) + "\n"


def emit_report(rows: Sequence[ReportRow], csv_path, svg_path) -> None:
    """Write the trade-off report: fixed-schema CSV plus a two-panel SVG."""
    Path(csv_path).write_text(render_report_csv(rows))
    Path(svg_path).write_text(render_report_svg(rows))
