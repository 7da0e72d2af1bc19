"""Tokenization, vocabulary construction and pretrained-embedding loading."""

from __future__ import annotations

import re

import numpy as np

from ..errors import ConfigError, ParseError

PAD, OOV = 0, 1
_WORD = re.compile(r"[^\W_]+")


def tokenize(text):
    """Lowercase and split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Token <-> id map. Id 0 is padding, id 1 is the out-of-vocabulary token."""

    def __init__(self, tokens=()):
        self.itos = ["<pad>", "<oov>"]
        self.stoi = {}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def lookup(self, token):
        return self.stoi.get(token, OOV)

    def encode(self, tokens, length):
        """Token ids truncated / right-padded to ``length``."""
        ids = [self.lookup(t) for t in tokens[:length]]
        return ids + [PAD] * (length - len(ids))

    @property
    def words(self):
        return self.itos[2:]


def build_vocab(texts, tokenizer=tokenize):
    """Vocabulary in order of first occurrence across ``texts``."""
    vocab = Vocabulary()
    for text in texts:
        for tok in tokenizer(text):
            vocab.add(tok)
    return vocab


def load_embedding_file(path, vocab, embed_dim):
    """Read ``token v1 ... vD`` lines, keeping only tokens present in ``vocab``."""
    found = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open embedding file: {exc.strerror}", path) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            token = parts[0]
            if lineno == 1 and len(parts) == 2 and parts[0].isdigit():
                continue  # word2vec-style "count dim" header
            if len(parts) - 1 != embed_dim:
                raise ConfigError(
                    f"{path}:{lineno}: embedding has {len(parts) - 1} dims, config says embed_dim={embed_dim}"
                )
            if token in vocab.stoi and token not in found:
                try:
                    found[token] = np.array(parts[1:], dtype=np.float64)
                except ValueError:
                    raise ParseError("non-numeric embedding value", path, lineno) from None
    return found


def build_embedding_matrix(vocab, embed_dim, embedding_file=None, seed=0):
    """(len(vocab), embed_dim) matrix: file vectors where available, U(-0.1, 0.1) elsewhere, zero padding row."""
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.1, 0.1, size=(len(vocab), embed_dim))
    matrix[PAD] = 0.0
    hits = 0
    if embedding_file is not None:
        vectors = load_embedding_file(embedding_file, vocab, embed_dim)
        for token, vec in vectors.items():
            matrix[vocab.stoi[token]] = vec
        hits = len(vectors)
    return matrix, hits


def build_vocab_and_embeddings(articles, embedding_file, embed_dim, seed=0, tokenizer=tokenize):
    """Vocabulary over titles and abstracts plus the matching embedding matrix."""
    texts = []
    for a in articles:
        texts.append(a.raw_title)
        texts.append(a.raw_abstract)
    vocab = build_vocab(texts, tokenizer)
    matrix, _ = build_embedding_matrix(vocab, embed_dim, embedding_file, seed)
    return vocab, matrix
