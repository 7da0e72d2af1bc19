"""Readers and writers for MIND-format ``news.tsv`` / ``behaviors.tsv``."""

from __future__ import annotations

import calendar
import logging
from dataclasses import dataclass, field
from datetime import datetime

from ..errors import ParseError

log = logging.getLogger(__name__)

NEWS_COLUMNS = ("news_id", "category", "subcategory", "title", "abstract", "url",
                "title_entities", "abstract_entities")
TIME_FORMAT = "%m/%d/%Y %I:%M:%S %p"


@dataclass
class NewsArticle:
    news_id: str
    category: str
    subcategory: str
    raw_title: str
    raw_abstract: str = ""
    title: list = field(default_factory=list)  # token ids, filled in by the vocabulary step
    abstract: list = field(default_factory=list)


@dataclass
class ImpressionLog:
    impression_id: str
    user_id: str
    timestamp: int
    history: list
    candidates: list  # [(news_id, label)]

    @property
    def positives(self):
        return [n for n, y in self.candidates if y == 1]

    @property
    def negatives(self):
        return [n for n, y in self.candidates if y == 0]


@dataclass
class ParseReport:
    rows: int = 0
    rejected_empty_title: int = 0
    duplicates: int = 0


def parse_time(text):
    """MIND "M/D/YYYY h:mm:ss AM" timestamps to UTC epoch seconds."""
    return calendar.timegm(datetime.strptime(text.strip(), TIME_FORMAT).timetuple())


def format_time(epoch):
    dt = datetime.utcfromtimestamp(epoch)
    hour = dt.hour % 12 or 12
    return f"{dt.month}/{dt.day}/{dt.year} {hour}:{dt.minute:02d}:{dt.second:02d} {'AM' if dt.hour < 12 else 'PM'}"


def _open(path):
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open: {exc.strerror}", path) from None


def parse_news_tsv(path, report=None):
    """Return ``{news_id: NewsArticle}`` in file order.

    Rows with an empty title are dropped and counted; a repeated id keeps
    the last row and bumps ``report.duplicates``.
    """
    report = report if report is not None else ParseReport()
    articles = {}
    with _open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != len(NEWS_COLUMNS):
                raise ParseError(f"expected {len(NEWS_COLUMNS)} tab-separated columns, got {len(cols)}", path, lineno)
            report.rows += 1
            news_id, category, subcategory, title, abstract = cols[:5]
            if not news_id:
                raise ParseError("empty news_id", path, lineno)
            if not title.strip():
                report.rejected_empty_title += 1
                continue
            if news_id in articles:
                report.duplicates += 1
                del articles[news_id]
            articles[news_id] = NewsArticle(news_id, category, subcategory, title, abstract)
    if report.duplicates:
        log.warning("%s: %d duplicate news ids (last row wins)", path, report.duplicates)
    if report.rejected_empty_title:
        log.info("%s: dropped %d rows with empty titles", path, report.rejected_empty_title)
    return articles


def parse_behaviors_tsv(path):
    impressions = []
    with _open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(f"expected 5 tab-separated columns, got {len(cols)}", path, lineno)
            imp_id, user_id, time_text, history, cands = cols
            try:
                ts = parse_time(time_text)
            except ValueError:
                raise ParseError(f"unparseable timestamp {time_text!r}", path, lineno) from None
            candidates = []
            for item in cands.split():
                nid, sep, label = item.rpartition("-")
                if not sep or not nid or label not in ("0", "1"):
                    raise ParseError(f"bad candidate {item!r}; expected '<id>-0' or '<id>-1'", path, lineno)
                candidates.append((nid, int(label)))
            if not candidates:
                raise ParseError("impression without candidates", path, lineno)
            impressions.append(ImpressionLog(imp_id, user_id, ts, history.split(), candidates))
    return impressions


def write_news_tsv(path, articles):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in articles:
            fh.write("\t".join([a.news_id, a.category, a.subcategory, a.raw_title, a.raw_abstract,
                                "", "[]", "[]"]) + "\n")


def write_behaviors_tsv(path, impressions):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for imp in impressions:
            cands = " ".join(f"{n}-{y}" for n, y in imp.candidates)
            fh.write("\t".join([imp.impression_id, imp.user_id, format_time(imp.timestamp),
                                " ".join(imp.history), cands]) + "\n")
