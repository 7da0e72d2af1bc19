"""Assembly of a :class:`ProcessedDataset` from MIND-format directories, plus its cache."""

from __future__ import annotations

import gc
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .. import container
from ..errors import DataError, StaleCacheError
from ..models.zoo import NewsFeatures
from .mind import ImpressionLog, NewsArticle, ParseReport, parse_behaviors_tsv, parse_news_tsv
from .sampling import split_validation
from .text import Vocabulary, build_embedding_matrix, build_vocab, tokenize

log = logging.getLogger(__name__)


@dataclass
class PreprocessStats:
    news_rows: int = 0
    rejected_empty_title: int = 0
    duplicate_ids: int = 0
    dropped_history_refs: int = 0
    dropped_candidate_refs: int = 0
    dropped_impressions: int = 0
    embedding_hits: int = 0


@dataclass
class ProcessedDataset:
    articles: dict  # news_id -> NewsArticle, in row order
    train: list
    valid: list
    test: list
    vocab: Vocabulary
    embeddings: np.ndarray
    split: dict
    categories: list = field(default_factory=lambda: ["<unk>"])
    subcategories: list = field(default_factory=lambda: ["<unk>"])
    users: list = field(default_factory=lambda: ["<unk>"])
    stats: PreprocessStats = field(default_factory=PreprocessStats)

    def __post_init__(self):
        self._news_index = None

    @property
    def news_index(self):
        """news_id -> feature row (row 0 is padding)."""
        if self._news_index is None:
            self._news_index = {nid: i + 1 for i, nid in enumerate(self.articles)}
        return self._news_index

    @property
    def user_index(self):
        return {u: i for i, u in enumerate(self.users) if i > 0}

    def features(self, max_title_len, max_abstract_len):
        n = len(self.articles) + 1
        title = np.zeros((n, max_title_len), dtype=np.int64)
        abstract = np.zeros((n, max_abstract_len), dtype=np.int64)
        cat = np.zeros(n, dtype=np.int64)
        sub = np.zeros(n, dtype=np.int64)
        cidx = {c: i for i, c in enumerate(self.categories)}
        sidx = {c: i for i, c in enumerate(self.subcategories)}
        for i, a in enumerate(self.articles.values(), 1):
            t = a.title[:max_title_len]
            title[i, : len(t)] = t
            b = a.abstract[:max_abstract_len]
            abstract[i, : len(b)] = b
            cat[i] = cidx.get(a.category, 0)
            sub[i] = sidx.get(a.subcategory, 0)
        return NewsFeatures(title, abstract, cat, sub)

    # -- serialisation ------------------------------------------------------

    def sections(self):
        arts = [[a.news_id, a.category, a.subcategory, a.raw_title, a.raw_abstract, a.title, a.abstract]
                for a in self.articles.values()]
        out = {"articles": arts}
        row = self.news_index
        for name in ("train", "valid", "test"):
            out.update(_encode_impressions(name, getattr(self, name), row))
        out["vocab"] = self.vocab.itos
        out["embeddings"] = np.ascontiguousarray(self.embeddings)
        out["meta"] = {
            "split": self.split,
            "categories": self.categories,
            "subcategories": self.subcategories,
            "users": self.users,
            "stats": self.stats.__dict__,
        }
        return out

    @classmethod
    def from_sections(cls, s):
        articles = {}
        for nid, cat, sub, rt, ra, t, ab in s["articles"]:
            articles[nid] = NewsArticle(nid, cat, sub, rt, ra, t, ab)
        ids = np.array([None] + list(articles), dtype=object)
        splits = [_decode_impressions(name, s, ids) for name in ("train", "valid", "test")]
        vocab = Vocabulary()
        for tok in s["vocab"][2:]:
            vocab.add(tok)
        meta = s["meta"]
        return cls(articles, *splits, vocab, s["embeddings"],
                   meta["split"], meta["categories"], meta["subcategories"], meta["users"],
                   PreprocessStats(**meta["stats"]))

    def content_hash(self):
        h = hashlib.sha256()
        for name, value in self.sections().items():
            kind, payload = container.encode_section(value)
            h.update(name.encode())
            h.update(bytes([kind]))
            h.update(payload)
        return h.hexdigest()


def _encode_impressions(name, impressions, row):
    # columnar layout: news ids become feature rows, lists become flat arrays plus offsets
    hist = [row[n] for imp in impressions for n in imp.history]
    cand = [row[n] for imp in impressions for n, _ in imp.candidates]
    return {
        f"{name}.ids": [[imp.impression_id, imp.user_id] for imp in impressions],
        f"{name}.time": np.array([imp.timestamp for imp in impressions], dtype=np.int64),
        f"{name}.hist_len": np.array([len(imp.history) for imp in impressions], dtype=np.int32),
        f"{name}.hist": np.array(hist, dtype=np.int32),
        f"{name}.cand_len": np.array([len(imp.candidates) for imp in impressions], dtype=np.int32),
        f"{name}.cand": np.array(cand, dtype=np.int32),
        f"{name}.label": np.array([y for imp in impressions for _, y in imp.candidates], dtype=np.int8),
    }


def _decode_impressions(name, s, ids):
    hist = ids[s[f"{name}.hist"]].tolist()
    cand = ids[s[f"{name}.cand"]].tolist()
    labels = s[f"{name}.label"].tolist()
    times = s[f"{name}.time"].tolist()
    out, h, c = [], 0, 0
    for (imp_id, user), t, hl, cl in zip(s[f"{name}.ids"], times, s[f"{name}.hist_len"].tolist(),
                                         s[f"{name}.cand_len"].tolist()):
        out.append(ImpressionLog(imp_id, user, t, hist[h:h + hl], list(zip(cand[c:c + cl], labels[c:c + cl]))))
        h += hl
        c += cl
    return out


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_files(train_dir, test_dir, embedding_file=None):
    files = [os.path.join(train_dir, "news.tsv"), os.path.join(train_dir, "behaviors.tsv"),
             os.path.join(test_dir, "news.tsv"), os.path.join(test_dir, "behaviors.tsv")]
    if embedding_file:
        files.append(embedding_file)
    return files


def _source_hashes(files):
    return {os.path.abspath(f): file_hash(f) for f in files}


def cache_save(dataset, path, fingerprint="", sources=()):
    header = {
        "kind": "dataset",
        "fingerprint": fingerprint,
        "sources": _source_hashes(sources),
        "content_hash": dataset.content_hash(),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    container.write_container(path, header, dataset.sections())


def cache_load(path, fingerprint=None, sources=None):
    """Load a cached dataset, refusing it if the config fingerprint or any source file changed."""
    header = container.read_header(path)
    if header.get("kind") != "dataset":
        raise StaleCacheError(f"{path} is not a dataset cache")
    if fingerprint is not None and header.get("fingerprint") != fingerprint:
        raise StaleCacheError(f"{path}: preprocessing config changed; rebuild the cache")
    if sources is not None and header.get("sources") != _source_hashes(sources):
        raise StaleCacheError(f"{path}: source files changed since the cache was written; rebuild it")
    # tens of thousands of small acyclic objects: cyclic GC passes here only cost time
    enabled = gc.isenabled()
    gc.disable()
    try:
        _, sections = container.read_container(path)
        return ProcessedDataset.from_sections(sections)
    finally:
        if enabled:
            gc.enable()


# -- preprocessing ------------------------------------------------------------


def _filter_impressions(impressions, known, stats):
    kept = []
    for imp in impressions:
        hist = [n for n in imp.history if n in known]
        stats.dropped_history_refs += len(imp.history) - len(hist)
        cands = [(n, y) for n, y in imp.candidates if n in known]
        stats.dropped_candidate_refs += len(imp.candidates) - len(cands)
        if not cands:
            stats.dropped_impressions += 1
            continue
        kept.append(ImpressionLog(imp.impression_id, imp.user_id, imp.timestamp, hist, cands))
    return kept


def preprocess(train_dir, test_dir, embed_dim, embedding_file=None, split_mode="random", split_ratio=0.95,
               seed=0, tokenizer=tokenize):
    """Parse, tokenize, build the vocabulary and split the training impressions."""
    stats = PreprocessStats()
    articles = {}
    for d in (train_dir, test_dir):
        rep = ParseReport()
        parsed = parse_news_tsv(os.path.join(d, "news.tsv"), rep)
        stats.news_rows += rep.rows
        stats.rejected_empty_title += rep.rejected_empty_title
        stats.duplicate_ids += rep.duplicates
        for nid, a in parsed.items():
            articles.setdefault(nid, a)
    # titles with no alphanumeric token would be all padding
    for nid in [nid for nid, a in articles.items() if not tokenizer(a.raw_title)]:
        del articles[nid]
        stats.rejected_empty_title += 1
    if not articles:
        raise DataError("no usable articles")

    texts = []
    for a in articles.values():
        texts.append(a.raw_title)
        texts.append(a.raw_abstract)
    vocab = build_vocab(texts, tokenizer)
    embeddings, stats.embedding_hits = build_embedding_matrix(vocab, embed_dim, embedding_file, seed)
    for a in articles.values():
        a.title = [vocab.lookup(t) for t in tokenizer(a.raw_title)]
        a.abstract = [vocab.lookup(t) for t in tokenizer(a.raw_abstract)]

    train_all = _filter_impressions(parse_behaviors_tsv(os.path.join(train_dir, "behaviors.tsv")), articles, stats)
    test = _filter_impressions(parse_behaviors_tsv(os.path.join(test_dir, "behaviors.tsv")), articles, stats)
    train, valid = split_validation(train_all, split_mode, split_ratio, seed)
    if os.path.abspath(train_dir) == os.path.abspath(test_dir):
        raise DataError("train and test directories are the same; test impressions would leak into training")

    categories, subcategories = ["<unk>"], ["<unk>"]
    seen_c, seen_s = set(), set()
    for a in articles.values():
        if a.category not in seen_c:
            seen_c.add(a.category)
            categories.append(a.category)
        if a.subcategory not in seen_s:
            seen_s.add(a.subcategory)
            subcategories.append(a.subcategory)
    users, seen_u = ["<unk>"], set()
    for imp in train:
        if imp.user_id not in seen_u:
            seen_u.add(imp.user_id)
            users.append(imp.user_id)
    split = {"mode": split_mode, "ratio": split_ratio, "seed": seed}
    return ProcessedDataset(articles, train, valid, test, vocab, embeddings, split, categories, subcategories,
                            users, stats)


def preprocess_fingerprint(**params):
    return hashlib.blake2b(json.dumps(params, sort_keys=True).encode(), digest_size=8).hexdigest()


def load_dataset(train_dir, test_dir, embed_dim, embedding_file=None, split_mode="random", split_ratio=0.95,
                 seed=0, cache_path=None):
    """Preprocess, going through ``cache_path`` when given. Returns (dataset, cache_hit)."""
    params = dict(embed_dim=embed_dim, split_mode=split_mode, split_ratio=split_ratio, seed=seed,
                  embedding_file=os.path.abspath(embedding_file) if embedding_file else None)
    fp = preprocess_fingerprint(**params)
    sources = source_files(train_dir, test_dir, embedding_file)
    if cache_path and os.path.exists(cache_path):
        try:
            return cache_load(cache_path, fp, sources), True
        except StaleCacheError as exc:
            log.info("cache rejected (%s); rebuilding", exc)
    ds = preprocess(train_dir, test_dir, embed_dim, embedding_file, split_mode, split_ratio, seed)
    if cache_path:
        cache_save(ds, cache_path, fp, sources)
    return ds, False
