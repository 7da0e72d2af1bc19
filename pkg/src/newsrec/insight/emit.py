"""CSV, JSON and static SVG output for the analysis artifacts.

The SVG writers format every number with a fixed precision and iterate in a
fixed order, so identical input gives identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from xml.sax.saxutils import escape, quoteattr

from ..errors import DataError, EmitError
from .stats import ArticleStats, DistributionComparison, PopulationSplit, split_populations

CANVAS_W, CANVAS_H = 1000, 600
FORMATS = ("csv", "json", "svg")
STATS_COLUMNS = ("news_id", "total_impressions", "total_clicks", "ctr")
DIST_COLUMNS = ("subcategory", "ground_truth", "recommended")


def _n(v):
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


# -- squarified treemap ---------------------------------------------------------


def _worst(row, side):
    s = sum(row)
    return max(max(row) * side * side / (s * s), s * s / (side * side * min(row)))


def squarify(values, x, y, w, h):
    """Squarified layout of positive ``values`` (any order) into the box; returns rects in input order.

    Each rect is (x, y, width, height) with area proportional to its value.
    """
    order = sorted(range(len(values)), key=lambda i: -values[i])
    total = float(sum(values))
    if total <= 0:
        return [(x, y, 0.0, 0.0)] * len(values)
    scaled = [values[i] * w * h / total for i in order]
    rects = [None] * len(values)
    pos = 0
    while pos < len(scaled):
        side = min(w, h)
        end = pos + 1
        while end < len(scaled) and _worst(scaled[pos:end + 1], side) <= _worst(scaled[pos:end], side):
            end += 1
        row = scaled[pos:end]
        s = sum(row)
        if w >= h:
            cw = s / h if h else 0.0
            cy = y
            for i, a in zip(order[pos:end], row):
                rh = a / cw if cw else 0.0
                rects[i] = (x, cy, cw, rh)
                cy += rh
            x, w = x + cw, w - cw
        else:
            rh = s / w if w else 0.0
            cx = x
            for i, a in zip(order[pos:end], row):
                rw = a / rh if rh else 0.0
                rects[i] = (cx, y, rw, rh)
                cx += rw
            y, h = y + rh, h - rh
        pos = end
    return rects


# -- SVG ----------------------------------------------------------------------------

_PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
            "#9c755f", "#bab0ac")


def _svg_open(width, height, title):
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]


def _ticks(hi, n=5):
    """Integer tick positions 0..>=hi with a 1/2/5 x 10^k step."""
    if hi <= 0:
        return [0, 1]
    raw = hi / n
    mag = 10 ** math.floor(math.log10(raw)) if raw >= 1 else 1
    step = next(int(m * mag) for m in (1, 2, 5, 10) if m * mag >= raw)
    return list(range(0, math.ceil(hi / step) * step + 1, step))


def scatter_svg(stats, split=None, title="Article exposure and clicks"):
    """Impressions (x) against clicks (y); CTR sets both radius and fill opacity."""
    ml, mr, mt, mb = 70, 30, 40, 60
    pw, ph = CANVAS_W - ml - mr, CANVAS_H - mt - mb
    xt = _ticks(max((s.total_impressions for s in stats), default=1))
    yt = _ticks(max((s.total_clicks for s in stats), default=1))
    xmax, ymax = max(xt[-1], 1), max(yt[-1], 1)
    top_ids = {s.news_id for s in split.top} if split else set()
    out = _svg_open(CANVAS_W, CANVAS_H, title)
    out.append(f'<text x="{CANVAS_W // 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>')
    out.append(f'<g transform="translate({ml},{mt})">')
    out.append(f'<rect x="0" y="0" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>')
    for t in xt:
        px = _n(pw * t / xmax)
        out.append(f'<line x1="{px}" y1="{ph}" x2="{px}" y2="{ph + 5}" stroke="#333333"/>')
        out.append(f'<text x="{px}" y="{ph + 20}" text-anchor="middle" font-size="11">{t}</text>')
    for t in yt:
        py = _n(ph - ph * t / ymax)
        out.append(f'<line x1="-5" y1="{py}" x2="0" y2="{py}" stroke="#333333"/>')
        out.append(f'<text x="-8" y="{py}" text-anchor="end" dominant-baseline="middle" font-size="11">{t}</text>')
    out.append(f'<text x="{pw // 2}" y="{ph + 45}" text-anchor="middle" font-size="13">total impressions</text>')
    out.append(f'<text transform="translate(-50,{ph // 2}) rotate(-90)" text-anchor="middle" '
               f'font-size="13">total clicks</text>')
    # draw low-CTR points first so the informative ones stay visible
    for s in sorted(stats, key=lambda s: (s.ctr, s.news_id)):
        cx = _n(pw * s.total_impressions / xmax)
        cy = _n(ph - ph * s.total_clicks / ymax)
        color = "#e15759" if s.news_id in top_ids else "#4e79a7"
        out.append(f'<circle cx="{cx}" cy="{cy}" r="{_n(2 + 8 * s.ctr)}" fill="{color}" '
                   f'fill-opacity="{_n(0.15 + 0.85 * s.ctr)}" data-id={quoteattr(s.news_id)}/>')
    out.append("</g>")
    if split:
        out.append(f'<text x="{CANVAS_W - mr}" y="24" text-anchor="end" font-size="12">red: top '
                   f'{len(split.top)} by clicks; blue: remaining {len(split.bottom)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def treemap_svg(comp, title="Subcategory distribution"):
    """Two squarified treemaps, ground truth above recommendations, each on a 1000x600 panel."""
    gap, head = 40, 30
    height = 2 * (CANVAS_H + head) + gap
    colors = {s: _PALETTE[i % len(_PALETTE)] for i, s in enumerate(comp.subcategories)}
    out = _svg_open(CANVAS_W, height, title)
    for k, (side, counts) in enumerate((("ground_truth", comp.ground_truth), ("recommended", comp.recommended))):
        oy = k * (CANVAS_H + head + gap)
        labels = [s for s in comp.subcategories if counts.get(s, 0) > 0]
        total = sum(counts.get(s, 0) for s in labels)
        caption = "clicked (ground truth)" if side == "ground_truth" else f"recommended (top {comp.top_n})"
        out.append(f'<text x="0" y="{oy + 20}" font-size="16">{escape(caption)}: {total}</text>')
        out.append(f'<g transform="translate(0,{oy + head})" data-side="{side}" data-total="{total}">')
        rects = squarify([counts[s] for s in labels], 0.0, 0.0, float(CANVAS_W), float(CANVAS_H))
        for s, (x, y, w, h) in zip(labels, rects):
            out.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" fill="{colors[s]}" '
                       f'stroke="#ffffff" data-label={quoteattr(s)} data-count="{counts[s]}"/>')
            if w > 60 and h > 30:
                out.append(f'<text x="{_n(x + 4)}" y="{_n(y + 16)}" font-size="12" fill="#ffffff">'
                           f"{escape(s)} ({counts[s]})</text>")
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- tabular ------------------------------------------------------------------------


def _stats_rows(stats):
    return [[s.news_id, s.total_impressions, s.total_clicks, repr(s.ctr)] for s in stats]


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render(artifact, fmt):
    """Serialise ``artifact`` to text in ``fmt`` (csv, json or svg)."""
    if fmt not in FORMATS:
        raise DataError(f"unknown output format {fmt!r}; expected one of {FORMATS}")
    if isinstance(artifact, PopulationSplit):
        stats, split = artifact.top + artifact.bottom, artifact
    elif isinstance(artifact, list) and all(isinstance(s, ArticleStats) for s in artifact):
        stats = artifact
        split = split_populations(stats) if len(stats) >= 20 else None
    elif isinstance(artifact, DistributionComparison):
        if fmt == "csv":
            return _csv_text(DIST_COLUMNS, artifact.rows())
        if fmt == "json":
            gt, rc = artifact.totals
            rows = [dict(zip(DIST_COLUMNS, r)) for r in artifact.rows()]
            return json.dumps({"top_n": artifact.top_n, "totals": {"ground_truth": gt, "recommended": rc},
                               "rows": rows}, indent=1) + "\n"
        return treemap_svg(artifact)
    else:
        raise DataError(f"cannot emit an object of type {type(artifact).__name__}")

    if fmt == "csv":
        return _csv_text(STATS_COLUMNS, _stats_rows(stats))
    if fmt == "json":
        doc = {"articles": [dict(zip(STATS_COLUMNS, (s.news_id, s.total_impressions, s.total_clicks, s.ctr)))
                            for s in stats]}
        if split:
            doc["population"] = {"fraction": split.fraction, "top": [s.news_id for s in split.top],
                                 "bottom_count": len(split.bottom)}
        return json.dumps(doc, indent=1) + "\n"
    return scatter_svg(stats, split)


def emit(artifact, fmt, path):
    """Write ``artifact`` to ``path``; returns the path."""
    text = render(artifact, fmt)
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise EmitError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def read_article_stats_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != STATS_COLUMNS:
            raise DataError(f"{path}: expected columns {STATS_COLUMNS}")
        return [ArticleStats(r["news_id"], int(r["total_impressions"]), int(r["total_clicks"])) for r in reader]


def read_distribution_csv(path, top_n=1):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return DistributionComparison([r["subcategory"] for r in rows],
                                  {r["subcategory"]: int(r["ground_truth"]) for r in rows if int(r["ground_truth"])},
                                  {r["subcategory"]: int(r["recommended"]) for r in rows if int(r["recommended"])},
                                  top_n)
