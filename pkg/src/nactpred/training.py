"""Training loop: pair construction, AdamW, cosine schedule, early stopping.

Each mini-batch contributes a cross-entropy term per volume plus a
contrastive term per pair.  Pairs come from random within-batch sampling
in early epochs and switch to hard-negative mining (nearest opposite-label
embedding, computed with the current model in inference mode) once the
configured epoch is reached; positives stay randomly sampled throughout.

Determinism contract: everything stochastic in an epoch (shuffling,
dropout, pair sampling) is drawn from one generator seeded by
(config seed, epoch), so identical (config, seed, data) reproduce the
training log and the final parameters bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics
from .autodiff import Tensor, backward, no_grad, zero_grads
from .heads import LossConfig, alpha_schedule, contrastive_margin_loss, cross_entropy
from .model import ResponseModel

__all__ = [
    "TrainConfig",
    "PairBatch",
    "OptimizerState",
    "EpochStats",
    "FitResult",
    "sample_random_pairs",
    "mine_hard_negatives",
    "adamw_step",
    "cosine_lr",
    "early_stop_check",
    "train_epoch",
    "fit",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 100
    early_stop_patience: int = 10
    batch_size: int = 8
    weight_decay: float = 0.01
    seed: int = 0
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        loss = LossConfig(**raw.pop("loss", {}))
        return cls(loss=loss, **raw)


@dataclass
class PairBatch:
    """Index pairs for the contrastive term; s=1 iff labels match."""

    anchors: list[int] = field(default_factory=list)
    partners: list[int] = field(default_factory=list)
    same_label: list[int] = field(default_factory=list)

    def __post_init__(self):
        if any(a == p for a, p in zip(self.anchors, self.partners)):
            raise ValueError("a pair may not use the same volume twice")

    def __len__(self) -> int:
        return len(self.anchors)

    def extend(self, other: "PairBatch") -> None:
        self.anchors += other.anchors
        self.partners += other.partners
        self.same_label += other.same_label


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class EpochStats:
    epoch: int
    mean_ce: float
    mean_contrastive: float
    alpha: float
    lr: float
    n_pairs: int
    n_mined: int


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_score: float
    stopped_early: bool


def sample_random_pairs(labels: list[int], batch: list[int],
                        rng: np.random.Generator) -> PairBatch:
    """One pair per anchor, targeting a 50/50 positive/negative mix.

    Partners come from the same batch.  When the coin-flipped pair type has
    no candidate (single-class batch, singleton class) the other type is
    used; batches below two members yield an empty PairBatch.
    """
    out = PairBatch()
    if len(batch) < 2:
        return out
    for anchor in batch:
        same = [j for j in batch if j != anchor and labels[j] == labels[anchor]]
        diff = [j for j in batch if j != anchor and labels[j] != labels[anchor]]
        want_same = rng.random() < 0.5
        pool = (same if want_same else diff) or (diff if want_same else same)
        if not pool:
            continue
        partner = pool[int(rng.integers(len(pool)))]
        out.anchors.append(anchor)
        out.partners.append(partner)
        out.same_label.append(int(labels[partner] == labels[anchor]))
    return out


def _sample_positive_pairs(labels: list[int], batch: list[int],
                           rng: np.random.Generator) -> PairBatch:
    """A random same-label partner for every anchor that has one."""
    out = PairBatch()
    for anchor in batch:
        same = [j for j in batch if j != anchor and labels[j] == labels[anchor]]
        if not same:
            continue
        out.anchors.append(anchor)
        out.partners.append(same[int(rng.integers(len(same)))])
        out.same_label.append(1)
    return out


def mine_hard_negatives(embeddings: list[np.ndarray],
                        labels: list[int]) -> PairBatch:
    """Nearest opposite-label partner per anchor (ties to the lowest index).

    Indices in the result refer to positions in ``embeddings``.  A
    single-class input has no negatives and yields an empty PairBatch.
    """
    out = PairBatch()
    if len(set(labels)) < 2:
        return out
    points = np.stack([np.asarray(e, dtype=np.float64).ravel() for e in embeddings])
    label_arr = np.asarray(labels)
    for i in range(len(embeddings)):
        rival = label_arr != label_arr[i]
        d2 = ((points - points[i]) ** 2).sum(axis=1)
        d2[~rival] = np.inf
        out.anchors.append(i)
        out.partners.append(int(np.argmin(d2)))  # first minimum: lowest index
        out.same_label.append(0)
    return out


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, weight_decay: float = 0.01,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied directly to the parameter (theta -= lr*wd*theta),
    separate from the bias-corrected moment update.  Only the tensors in
    ``params`` are touched; frozen parameters must not be passed in.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match "
                             f"{name} {param.data.shape}")
        m = state.first.setdefault(name, np.zeros_like(param.data))
        v = state.second.setdefault(name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        param.assign_(param.data - lr * weight_decay * param.data - lr * update)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from the base rate to zero across max_epochs."""
    if not 0 <= epoch <= cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))


def early_stop_check(history: list[float], patience: int) -> tuple[bool, int]:
    """(stop?, best epoch): stop after `patience` epochs without a new best.

    Improvement means strictly greater; the best epoch is the earliest
    maximum.
    """
    if not history:
        raise ValueError("early stopping needs a non-empty history")
    best_epoch = int(np.argmax(history))
    stop = (len(history) - 1 - best_epoch) >= patience
    return stop, best_epoch


def _batches(order: np.ndarray, size: int) -> list[list[int]]:
    return [list(map(int, order[i:i + size])) for i in range(0, len(order), size)]


def _batch_pairs(model: ResponseModel, volumes: list[np.ndarray],
                 labels: list[int], batch: list[int], epoch: int,
                 cfg: TrainConfig, rng: np.random.Generator) -> tuple[PairBatch, int]:
    """Pair selection for one batch; returns (pairs, mined-negative count)."""
    if epoch < cfg.loss.hard_mining_start_epoch:
        return sample_random_pairs(labels, batch, rng), 0
    with no_grad():
        embeddings = [model.forward_volume(volumes[i]).projected.data[0]
                      for i in batch]
    mined_local = mine_hard_negatives(embeddings, [labels[i] for i in batch])
    pairs = PairBatch(anchors=[batch[i] for i in mined_local.anchors],
                      partners=[batch[i] for i in mined_local.partners],
                      same_label=list(mined_local.same_label))
    n_mined = len(pairs)
    pairs.extend(_sample_positive_pairs(labels, batch, rng))
    return pairs, n_mined


def train_epoch(model: ResponseModel, data: list, epoch: int, cfg: TrainConfig,
                state: OptimizerState, rng: np.random.Generator) -> EpochStats:
    """One pass over the training volumes; one optimizer step per batch."""
    if not data:
        raise ValueError("training split is empty")
    volumes = [item.voxels for item in data]
    labels = [int(item.label) for item in data]

    alpha = alpha_schedule(epoch, cfg.loss)
    lr = cosine_lr(epoch, cfg)
    trainable = dict(model.trainable_parameters())
    tensors = list(trainable.values())

    order = rng.permutation(len(data))
    ce_total, con_total, pair_total, mined_total = 0.0, 0.0, 0, 0
    for batch in _batches(order, cfg.batch_size):
        pairs = PairBatch()
        if alpha > 0.0:
            pairs, n_mined = _batch_pairs(model, volumes, labels, batch,
                                          epoch, cfg, rng)
            mined_total += n_mined

        outputs = {i: model.forward_volume(volumes[i], training=True, rng=rng)
                   for i in batch}
        ce_terms = [cross_entropy(outputs[i].logits, labels[i]) for i in batch]
        loss = sum(ce_terms[1:], ce_terms[0]) * (1.0 / len(batch))
        ce_total += float(sum(t.data for t in ce_terms))

        if alpha > 0.0 and len(pairs) > 0:
            con_terms = [contrastive_margin_loss(outputs[a].projected,
                                                 outputs[p].projected,
                                                 s, cfg.loss.margin)
                         for a, p, s in zip(pairs.anchors, pairs.partners,
                                            pairs.same_label)]
            con_sum = sum(con_terms[1:], con_terms[0])
            loss = loss + alpha * con_sum * (1.0 / len(pairs))
            con_total += float(con_sum.data)
            pair_total += len(pairs)

        zero_grads(tensors)
        backward(loss)
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in trainable.items()}
        adamw_step(trainable, grads, state, lr, cfg.weight_decay)

    return EpochStats(
        epoch=epoch,
        mean_ce=ce_total / len(data),
        mean_contrastive=(con_total / pair_total) if pair_total else 0.0,
        alpha=alpha,
        lr=lr,
        n_pairs=pair_total,
        n_mined=mined_total,
    )


def _validation_scores(model: ResponseModel, data: list) -> metrics.ScoredCohort:
    rows = []
    for item in data:
        prob, _ = model.predict_proba(item.voxels)
        rows.append({"id": item.patient_id, "probability": prob,
                     "label": int(item.label)})
    return metrics.ScoredCohort.from_records(rows)


def fit(model: ResponseModel, train_data: list, val_data: list,
        cfg: TrainConfig) -> FitResult:
    """Train with per-epoch validation; restores the best-epoch parameters.

    The per-epoch validation metric is F1 at the fixed 0.5 threshold
    (threshold tuning is an evaluation-time concern).  Returns the full
    epoch log; the model is left holding the best epoch's parameters.
    """
    train_ids = {item.patient_id for item in train_data}
    if train_ids & {item.patient_id for item in val_data}:
        raise ValueError("training and validation splits overlap")
    if not train_data or not val_data:
        raise ValueError("both splits must be non-empty")

    state = OptimizerState()
    history: list[dict] = []
    scores: list[float] = []
    best_state: dict[str, np.ndarray] | None = None
    best_score = -math.inf
    stopped = False

    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        stats = train_epoch(model, train_data, epoch, cfg, state, rng)

        cohort = _validation_scores(model, val_data)
        val_f1 = metrics.point_metrics(metrics.confusion(cohort, 0.5)).f1
        try:
            val_auc = metrics.roc_auc(cohort)
        except metrics.UndefinedMetricError:
            val_auc = float("nan")

        record = {"epoch": epoch, "mean_ce": stats.mean_ce,
                  "mean_contrastive": stats.mean_contrastive,
                  "alpha": stats.alpha, "lr": stats.lr,
                  "n_pairs": stats.n_pairs, "n_mined": stats.n_mined,
                  "val_f1": val_f1, "val_auc": val_auc}
        history.append(record)
        scores.append(val_f1)

        if val_f1 > best_score:
            best_score = val_f1
            best_state = model.state_arrays()

        stop, _ = early_stop_check(scores, cfg.early_stop_patience)
        if stop:
            stopped = True
            break

    _, best_epoch = early_stop_check(scores, cfg.early_stop_patience)
    if best_state is not None:
        model.load_state_arrays(best_state)
    return FitResult(history=history, best_epoch=best_epoch,
                     best_score=best_score, stopped_early=stopped)
