from .emit import (
    FORMATS,
    emit,
    read_article_stats_csv,
    read_distribution_csv,
    render,
    scatter_svg,
    squarify,
    treemap_svg,
)
from .stats import (
    ArticleStats,
    DistributionComparison,
    PopulationSplit,
    article_stats,
    clicked_ids,
    compare_distributions,
    rank_candidates,
    split_populations,
)

__all__ = [
    "FORMATS", "emit", "read_article_stats_csv", "read_distribution_csv", "render", "scatter_svg", "squarify",
    "treemap_svg", "ArticleStats", "DistributionComparison", "PopulationSplit", "article_stats", "clicked_ids",
    "compare_distributions", "rank_candidates", "split_populations",
]
