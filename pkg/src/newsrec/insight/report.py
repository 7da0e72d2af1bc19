"""Analysis files for a finished run: exposure statistics and subcategory comparison."""

from __future__ import annotations

import os

from .emit import emit
from .stats import article_stats, clicked_ids, compare_distributions, rank_candidates, split_populations


def emit_analysis(dataset, impressions, scores, out_dir, formats=("csv", "json", "svg"), top_n=1, png=True):
    """Write exposure and distribution artifacts under ``out_dir/analysis``; returns the paths."""
    target = os.path.join(out_dir, "analysis")
    stats = article_stats(impressions)
    split = split_populations(stats) if len(stats) >= 20 else None
    comp = None
    if scores is not None:
        comp = compare_distributions(clicked_ids(impressions), rank_candidates(impressions, scores),
                                     dataset.articles, top_n)
    paths = []
    for fmt in formats:
        paths.append(emit(stats, fmt, os.path.join(target, f"article_stats.{fmt}")))
        if comp is not None:
            paths.append(emit(comp, fmt, os.path.join(target, f"distribution.{fmt}")))
    if png:
        from .plotting import plot_distribution, plot_exposure
        paths.append(plot_exposure(stats, split, os.path.join(target, "exposure.png")))
        if comp is not None:
            paths.append(plot_distribution(comp, os.path.join(target, "distribution.png")))
    return [os.path.relpath(p, out_dir) for p in paths]
