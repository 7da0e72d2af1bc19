"""Slate training loop: softmax cross-entropy, Adam, early stopping on validation AUC."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .data.sampling import STRATEGIES, Collator, build_samples, make_batches
from .errors import ConfigError, DimensionError, NumericError, StaleCacheError
from .evaluation import Lookup, fast_evaluate
from .metrics import MetricsReport
from .models.zoo import ModelSpec, build_model, create_model
from .numeric import ParamStore, resolve_dtype

log = logging.getLogger(__name__)

MODES = ("early_stop", "fixed")


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 5
    k: int = 4
    patience: int = 2
    seed: int = 0
    precision: str = "f32"
    clip_norm: float = 5.0
    strategy: str = "shuffled"
    mode: str = "early_stop"

    def __post_init__(self):
        for name in ("batch_size", "epochs", "k", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("train.clip_norm must be positive (or null to disable)")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"train.strategy must be one of {STRATEGIES}")
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}")
        resolve_dtype(self.precision)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid: MetricsReport
    seconds: float
    steps: int
    improved: bool = False

    def to_dict(self):
        d = asdict(self)
        d["valid"] = self.valid.to_dict()
        return d

    def key(self):
        """Everything except wall-clock time, for run-to-run comparison."""
        return (self.epoch, self.train_loss, self.valid, self.steps, self.improved)


class TrainingDiverged(NumericError):
    def __init__(self, message, store=None, records=None):
        super().__init__(message)
        self.store = store
        self.records = records or []


# -- loss and optimiser ----------------------------------------------------------


def slate_loss(scores, label_index):
    """Softmax cross-entropy of one slate. Returns (loss, d loss / d scores)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= label_index < scores.shape[-1]:
        raise DimensionError(f"label index {label_index} outside slate of length {scores.shape[-1]}")
    z = scores - scores.max()
    lse = math.log(np.exp(z).sum())
    p = np.exp(z - lse)
    grad = p.copy()
    grad[label_index] -= 1.0
    return float(lse - z[label_index]), grad


def slate_loss_batch(logits, label_index):
    """Mean loss over a batch of slates and its gradient w.r.t. ``logits`` (B, S)."""
    B, S = logits.shape
    label_index = np.asarray(label_index)
    if label_index.shape != (B,) or label_index.min() < 0 or label_index.max() >= S:
        raise DimensionError(f"label indices {label_index} do not fit slates of shape {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(B), label_index]
    p = np.exp(z - lse[:, None])
    p[np.arange(B), label_index] -= 1
    return float(np.mean(losses, dtype=np.float64)), (p / B).astype(logits.dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One Adam update of ``params`` (a ParamStore) in place; returns ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def clip_grads(grads, max_norm):
    """Global-norm clipping in place; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, store, spec, extra=None):
    header = {"kind": "checkpoint", "spec": spec.to_dict(), "dtype": store.dtype.str,
              "fingerprint": store.fingerprint(), "extra": extra or {}}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    container.write_container(path, header, dict(store.items()))


def load_checkpoint(path):
    """Returns (ModelSpec, ParamStore, header)."""
    header, sections = container.read_container(path)
    if header.get("kind") != "checkpoint":
        raise StaleCacheError(f"{path} is not a checkpoint")
    spec_d = dict(header["spec"])
    spec_d["views"] = tuple(spec_d["views"])
    store = ParamStore(np.dtype(header["dtype"]))
    for name, value in sections.items():
        store.add(name, value)
    if store.fingerprint() != header["fingerprint"]:
        raise StaleCacheError(f"{path}: parameter bytes do not match the recorded fingerprint")
    return ModelSpec(**spec_d), store, header


# -- model construction ------------------------------------------------------------


def model_from_dataset(dataset, seed=0, precision="f32", **spec_kw):
    """Build a fresh model whose vocabulary and id tables fit ``dataset``."""
    spec = ModelSpec(vocab_size=len(dataset.vocab), embed_dim=dataset.embeddings.shape[1],
                     n_categories=len(dataset.categories), n_subcategories=len(dataset.subcategories),
                     n_users=len(dataset.users), **spec_kw)
    store = build_model(spec, dataset.embeddings, seed=seed, dtype=resolve_dtype(precision))
    return create_model(spec, store, dataset.features(spec.max_title_len, spec.max_abstract_len))


def model_from_checkpoint(path, dataset):
    """Rebuild a saved model against ``dataset``'s feature tables."""
    spec, store, _ = load_checkpoint(path)
    got = (len(dataset.vocab), dataset.embeddings.shape[1], len(dataset.categories), len(dataset.subcategories),
           len(dataset.users))
    want = (spec.vocab_size, spec.embed_dim, spec.n_categories, spec.n_subcategories, spec.n_users)
    if got != want:
        raise StaleCacheError(f"{path} was trained on a different dataset (tables {want}, dataset has {got})")
    return create_model(spec, store, dataset.features(spec.max_title_len, spec.max_abstract_len))


# -- loop ------------------------------------------------------------------------


def _epoch_seeds(seed, epoch):
    ss = np.random.SeedSequence([seed, epoch])
    sample, shuffle, dropout = ss.spawn(3)
    return (np.random.default_rng(sample), int(shuffle.generate_state(1)[0]), np.random.default_rng(dropout))


def train_epoch(model, samples, collate, config, adam, shuffle_seed, dropout_rng):
    """One pass over ``samples``; returns (mean loss, steps)."""
    store = model.store
    total, steps = 0.0, 0
    for batch in make_batches(samples, config.batch_size, shuffle=True, seed=shuffle_seed, collate=collate):
        store.zero_grad()
        logits, cache = model.forward(batch.cand_rows, batch.hist_rows, batch.hist_mask, batch.user_idx,
                                      dropout_rng)
        loss, dlogits = slate_loss_batch(logits, batch.label_index)
        if not math.isfinite(loss):
            raise NumericError(f"loss became {loss} at step {steps + 1}")
        model.backward(cache, dlogits)
        clip_grads(store.grads, config.clip_norm)
        adam_step(store, store.grads, adam, config.learning_rate)
        total += loss
        steps += 1
    return total / max(steps, 1), steps


def train(model, dataset, config, log_path=None, checkpoint_path=None, eval_batch_size=512):
    """Train ``model`` in place and leave it holding the best parameters.

    Returns (best ParamStore, list of EpochRecord). On a non-finite loss or
    gradient the best parameters seen so far are restored (and written to
    ``checkpoint_path`` if given) before :class:`TrainingDiverged` is raised.
    """
    if not dataset.valid:
        raise ConfigError("training needs a non-empty validation split")
    lookup = Lookup.from_dataset(dataset, model.spec.max_history_len)
    collate = Collator(lookup.news_index, lookup.user_index, lookup.max_history_len)
    adam = AdamState()
    best_store, best_auc, since_best = model.store.copy(), -math.inf, 0
    records = []
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        open(log_path, "w").close()

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sample_rng, shuffle_seed, dropout_rng = _epoch_seeds(config.seed, epoch)
        samples, skipped, filled = build_samples(dataset.train, config.k, config.strategy, sample_rng)
        try:
            loss, steps = train_epoch(model, samples, collate, config, adam, shuffle_seed, dropout_rng)
        except NumericError as exc:
            model.store.load_from(best_store)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, best_store, model.spec, {"epoch": epoch, "diverged": True})
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}; best parameters restored",
                                   best_store, records) from exc
        report = fast_evaluate(model, dataset.valid, lookup, batch_size=eval_batch_size)
        improved = report.auc > best_auc
        if improved:
            best_auc, since_best = report.auc, 0
            best_store = model.store.copy()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, best_store, model.spec, {"epoch": epoch})
        else:
            since_best += 1
        rec = EpochRecord(epoch, loss, report, time.perf_counter() - t0, steps, improved)
        records.append(rec)
        log.info("epoch %d: loss %.4f valid AUC %.4f (%d steps, %.1fs)", epoch, loss, report.auc, steps,
                 rec.seconds)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        if config.mode == "early_stop" and since_best >= config.patience:
            log.info("no validation improvement for %d epoch(s); stopping", since_best)
            break

    model.store.load_from(best_store)
    return best_store, records
