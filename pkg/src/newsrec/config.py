"""Layered experiment configuration.

Sources are merged in this order, later ones winning::

    built-in defaults < files named in ``includes`` < the top-level file < ``--set`` overrides

Files are YAML. An ``includes`` list (paths relative to the including file)
may appear at the top of any file and nests. Overrides are ``dotted.path=value``
strings whose value is parsed as YAML, so ``training.batch_size=32`` is an int
and ``model.views=[title,category]`` a list. Every key is checked against the
defaults tree; unknown keys and wrong types are rejected.
"""

from __future__ import annotations

import copy
import difflib
import hashlib
import json
import os

import yaml

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "train_dir": None,
        "test_dir": None,
        "embedding_file": None,
        "embed_dim": 300,
        "cache": None,
    },
    "split": {"mode": "random", "ratio": 0.95},
    "sampling": {"k": 4, "strategy": "shuffled"},
    "model": {
        "family": "nrms",
        "heads": 16,
        "head_dim": 16,
        "d_att": 200,
        "filters": 400,
        "window": 3,
        "max_title_len": 30,
        "max_abstract_len": 50,
        "max_history_len": 50,
        "views": ["title", "abstract", "category", "subcategory"],
        "category_dim": 100,
        "user_embedding": True,
        "lstur_mode": "init",
        "dropout": 0.2,
    },
    "training": {
        "batch_size": 16,
        "learning_rate": 1e-4,
        "epochs": 5,
        "patience": 2,
        "precision": "f32",
        "clip_norm": 5.0,
        "mode": "early_stop",
    },
    "evaluation": {"batch_size": 512, "workers": 1, "top_n": 1, "timing": False, "vector_cache": None},
    "output": {"dir": "runs/default", "analyze": True, "formats": ["csv", "json", "svg"], "png": True},
}

# keys whose default is None still need a declared type
NULLABLE = {
    "dataset.train_dir": str,
    "dataset.test_dir": str,
    "dataset.embedding_file": str,
    "dataset.cache": str,
    "evaluation.vector_cache": str,
    "training.clip_norm": float,
}
REQUIRED = ("dataset.train_dir", "dataset.test_dir")
PATH_KEYS = ("dataset.train_dir", "dataset.test_dir", "dataset.embedding_file", "dataset.cache",
             "evaluation.vector_cache", "output.dir")


def _flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


LEAVES = _flatten(DEFAULTS)
SECTIONS = {p.rsplit(".", 1)[0] for p in LEAVES if "." in p}


def _expected_type(path):
    if path in NULLABLE:
        return NULLABLE[path]
    return type(LEAVES[path])


def _suggest(path):
    near = difflib.get_close_matches(path, list(LEAVES) + sorted(SECTIONS), n=1, cutoff=0.5)
    return f"; did you mean {near[0]!r}?" if near else ""


def _check_value(path, value):
    if path not in LEAVES:
        raise ConfigError(f"unknown config key {path!r}{_suggest(path)}")
    if value is None:
        if path in NULLABLE or LEAVES[path] is None:
            return None
        raise ConfigError(f"{path} may not be null")
    want = _expected_type(path)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is float and isinstance(value, str):
        # YAML 1.1 reads "1e-4" (no dot) as a string
        try:
            return float(value)
        except ValueError:
            pass
    if want is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(value, want):
        raise ConfigError(f"{path}: expected {want.__name__}, got {type(value).__name__} ({value!r})")
    if want is list:
        return list(value)
    return value


def _set_path(tree, path, value):
    node = tree
    parts = path.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _merge_layer(tree, layer, origin):
    """Apply a nested ``layer`` onto ``tree`` after validating every leaf."""
    if not isinstance(layer, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for path, value in _flatten(layer).items():
        if path not in LEAVES and path in SECTIONS:
            raise ConfigError(f"{origin}: {path} must be a mapping")
        try:
            _set_path(tree, path, _check_value(path, value))
        except ConfigError as exc:
            raise ConfigError(f"{origin}: {exc}") from None


def _load_yaml(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return doc or {}


def _absolutize(layer, base_dir):
    flat = _flatten(layer)
    for key in PATH_KEYS:
        v = flat.get(key)
        if isinstance(v, str) and v and not os.path.isabs(v):
            _set_path(layer, key, os.path.normpath(os.path.join(base_dir, v)))
    return layer


def _file_layers(path, seen=()):
    """Layers from ``path`` and its includes, lowest precedence first."""
    path = os.path.abspath(path)
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    doc = _load_yaml(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = doc.pop("includes", []) or []
    if isinstance(includes, str):
        includes = [includes]
    base = os.path.dirname(path)
    layers = []
    for inc in includes:
        layers.extend(_file_layers(os.path.join(base, inc), seen + (path,)))
    layers.append((path, _absolutize(doc, base)))
    return layers


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like path=value")
    path, raw = text.split("=", 1)
    path = path.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value: {exc}") from None
    if path in PATH_KEYS and isinstance(value, str) and value and not os.path.isabs(value):
        value = os.path.abspath(value)
    return path, value


class ExperimentConfig:
    """A fully resolved configuration tree."""

    def __init__(self, tree):
        self.tree = tree

    def __getitem__(self, path):
        node = self.tree
        for p in path.split("."):
            node = node[p]
        return node

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.tree == other.tree

    def to_json(self):
        return json.dumps(self.tree, sort_keys=True, separators=(",", ":"))

    def fingerprint(self):
        return hashlib.blake2b(self.to_json().encode(), digest_size=8).hexdigest()

    def to_yaml(self):
        return yaml.safe_dump(self.tree, sort_keys=True)

    def with_overrides(self, overrides):
        tree = copy.deepcopy(self.tree)
        for path, value in overrides.items():
            _set_path(tree, path, _check_value(path, value))
        return ExperimentConfig(tree)

    def model_kwargs(self):
        m = dict(self.tree["model"])
        m["views"] = tuple(m["views"])
        return m

    def train_config(self):
        from .training import TrainConfig
        t = self.tree["training"]
        return TrainConfig(batch_size=t["batch_size"], learning_rate=t["learning_rate"], epochs=t["epochs"],
                           k=self.tree["sampling"]["k"], patience=t["patience"], seed=self.tree["seed"],
                           precision=t["precision"], clip_norm=t["clip_norm"],
                           strategy=self.tree["sampling"]["strategy"], mode=t["mode"])

    def validate(self):
        flat = _flatten(self.tree)
        for key in REQUIRED:
            if not flat.get(key):
                raise ConfigError(f"missing required config key {key!r}")
        self.train_config()
        if self["split"]["mode"] not in ("random", "chronological"):
            raise ConfigError("split.mode must be 'random' or 'chronological'")
        if not 0 < self["split"]["ratio"] < 1:
            raise ConfigError("split.ratio must be in (0, 1)")
        bad = [f for f in self["output"]["formats"] if f not in ("csv", "json", "svg")]
        if bad:
            raise ConfigError(f"output.formats: unknown format(s) {bad}")
        from .models.zoo import ModelSpec
        ModelSpec(**self.model_kwargs())  # raises ConfigError on bad model settings
        return self


def resolve_config(base_file=None, includes=(), overrides=(), require=True):
    """Merge defaults, ``includes``, ``base_file`` and ``overrides`` into an :class:`ExperimentConfig`.

    ``includes`` are extra files applied before ``base_file`` (after the
    file's own includes). ``overrides`` is a list of ``path=value`` strings or
    a mapping.
    """
    tree = copy.deepcopy(DEFAULTS)
    layers = []
    for inc in includes:
        layers.extend(_file_layers(inc))
    if base_file:
        layers.extend(_file_layers(base_file))
    for origin, layer in layers:
        _merge_layer(tree, layer, origin)
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
    for path, value in items:
        try:
            _set_path(tree, path, _check_value(path, value))
        except ConfigError as exc:
            raise ConfigError(f"--set: {exc}") from None
    _absolutize(tree, os.getcwd())  # defaults such as output.dir are relative to the working directory
    cfg = ExperimentConfig(tree)
    return cfg.validate() if require else cfg
