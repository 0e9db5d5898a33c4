"""Mini-batch Adam training with early stopping on validation loss."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import Corpus
from ..errors import InvalidArgument, NumericOverflow, TrainingFailure
from .model import (
    DEFAULT_LOSS_WEIGHTS,
    ArchSpec,
    ModelParams,
    _forward,
    init_params,
    loss_and_gradients,
    multitask_loss,
    transform_aux,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "eps", "clip_norm"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidArgument("beta1 and beta2 must lie in (0, 1)")
        if any(w < 0 for w in self.loss_weights) or not any(w > 0 for w in self.loss_weights):
            raise InvalidArgument("loss weights must be non-negative and not all zero")


@dataclass
class LearningCurves:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
        lr = cfg.learning_rate * math.sqrt(1.0 - cfg.beta2 ** self.t) / (1.0 - cfg.beta1 ** self.t)
        for k, g in grads.items():
            g = g * scale
            m = self.m[k]
            v = self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            params[k] -= lr * m / (np.sqrt(v) + cfg.eps)


def aux_statistics(train: Corpus, feature_set) -> tuple[np.ndarray | None, np.ndarray | None]:
    if not feature_set:
        return None, None
    a = transform_aux(train.aux_matrix(feature_set), feature_set)
    std = a.std(axis=0)
    return a.mean(axis=0), np.where(std > 0, std, 1.0)


def evaluate_loss(model: ModelParams, corpus: Corpus, weights=None, chunk: int = 4096) -> float:
    """Loss over a whole corpus with regression terms averaged over all its positives."""
    weights = model.loss_weights if weights is None else weights
    A = model.prepare_aux(corpus.aux_matrix(model.feature_set) if model.feature_set else None)
    outs = {"detect": [], "position": [], "reflectance": []}
    for s in range(0, len(corpus), chunk):
        o, _ = _forward(model, corpus.features[s:s + chunk],
                        None if A is None else A[s:s + chunk], keep=False)
        for k in outs:
            outs[k].append(o[k])
    pred = tuple(np.concatenate(outs[k]) for k in ("detect", "position", "reflectance"))
    target = (corpus.id_class.astype(float), corpus.position_target, corpus.reflectance_target)
    return float(multitask_loss(pred, target, weights))


def train_model(corpus: Corpus, arch: ArchSpec | None = None, cfg: TrainConfig | None = None,
                feature_set=None, init: ModelParams | None = None):
    """Fit a model on the train split, early-stopping on the val split.

    Returns the parameters of the epoch with the lowest validation loss and
    the per-epoch learning curves.
    """
    cfg = cfg or TrainConfig()
    feature_set = corpus.feature_set if feature_set is None else feature_set
    train = corpus.part("train")
    val = corpus.part("val")
    if len(train) == 0 or len(val) == 0:
        raise InvalidArgument("corpus needs non-empty train and val splits")
    if arch is None:
        arch = ArchSpec(window_len=corpus.window_len, n_aux=len(feature_set))
    if arch.window_len != corpus.window_len:
        raise InvalidArgument("arch.window_len does not match the corpus")
    train = train.with_feature_set(feature_set)
    val = val.with_feature_set(feature_set)
    if init is None:
        mean, std = aux_statistics(train, train.feature_set)
        model = init_params(arch, cfg.seed, train.feature_set, mean, std, cfg.loss_weights)
    else:
        model = init.copy()
        model.loss_weights = tuple(cfg.loss_weights)

    X = train.features
    A = model.prepare_aux(train.aux_matrix() if train.feature_set else None)
    y = train.id_class.astype(float)
    tpos, trefl = train.position_target, train.reflectance_target
    opt = Adam(model.params, cfg)
    rng = np.random.default_rng(cfg.seed)
    curves = LearningCurves()
    best = model.copy()
    best_val = math.inf
    stale = 0
    m = len(train)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(m)
        total = 0.0
        for s in range(0, m, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                loss, grads = loss_and_gradients(model, X[idx], None if A is None else A[idx],
                                                 y[idx], tpos[idx], trefl[idx])
            except NumericOverflow as exc:
                raise TrainingFailure(f"diverged: {exc}", epoch) from exc
            opt.step(model.params, grads)
            total += loss * len(idx)
        val_loss = evaluate_loss(model, val)
        curves.train_loss.append(total / m)
        curves.val_loss.append(val_loss)
        if not math.isfinite(val_loss):
            raise TrainingFailure("validation loss is not finite", epoch)
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            curves.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        log.debug("epoch %d train %.5f val %.5f", epoch, curves.train_loss[-1], val_loss)
    best.provenance = {
        "train_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "best_epoch": curves.best_epoch,
        "epochs_run": len(curves.val_loss),
        "best_val_loss": best_val,
        "corpus_hash": corpus.content_hash(),
    }
    return best, curves
