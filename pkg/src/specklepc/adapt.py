"""Self-training for unsupervised domain adaptation.

A warm-up model trained on labelled source data generates pseudo labels for
the unlabelled target set. Each round keeps predictions whose confidence
exceeds a threshold that grows by a constant step, selects a subset of them
per predicted class, and trains a *fresh* model on the selected target
samples only; that model generates the next round's labels.

Selection rules:

* ``qbst`` -- class k keeps its ``max(1, ceil(mu_k * L_k))`` most confident
  samples with ``mu_k = 1 - L_k / L``, so sparsely predicted classes keep a
  larger share than dominant ones.
* ``spst`` -- every confident sample.
* ``cbst`` -- the same proportion of every class.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from specklepc.classify import ClassifierModel, LabeledSet, TrainConfig, predict_proba, train

log = logging.getLogger(__name__)

METHODS = ("qbst", "spst", "cbst")


@dataclass(frozen=True)
class SelfTrainConfig:
    theta_0: float = 0.8
    epsilon: float = 5e-3
    rounds: int = 10
    epochs_per_round: int = 10
    inner_learning_rate: float = 1e-3
    inner_batch_size: int = 32
    method: str = "qbst"
    cbst_proportion: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0 < self.theta_0 < 1 or self.epsilon < 0 or self.rounds < 0:
            raise ValueError("need theta_0 in (0, 1), epsilon >= 0, rounds >= 0")
        if self.theta_0 + self.rounds * self.epsilon >= 1:
            raise ValueError("threshold schedule would reach 1")
        if not 0 < self.cbst_proportion <= 1:
            raise ValueError("cbst_proportion must lie in (0, 1]")

    def threshold(self, round_index: int) -> float:
        return self.theta_0 + round_index * self.epsilon


@dataclass
class PseudoLabelSet:
    n_classes: int
    theta: float
    sample_index: np.ndarray  # indices into the target set of confident samples
    label: np.ndarray
    confidence: np.ndarray
    selected: np.ndarray  # bool, aligned with sample_index

    @property
    def counts(self) -> np.ndarray:
        """L_k: confident samples predicted as class k."""
        return np.bincount(self.label, minlength=self.n_classes)

    @property
    def total(self) -> int:
        """L: all confident samples."""
        return int(len(self.label))

    @property
    def weights(self) -> np.ndarray:
        """mu_k = 1 - L_k / L (all ones when nothing is confident)."""
        if self.total == 0:
            return np.ones(self.n_classes)
        return 1.0 - self.counts / self.total

    @property
    def selected_counts(self) -> np.ndarray:
        return np.bincount(self.label[self.selected], minlength=self.n_classes)

    def selected_indices(self) -> np.ndarray:
        return self.sample_index[self.selected]

    def selected_labels(self) -> np.ndarray:
        return self.label[self.selected]

    def with_selection(self, mask: np.ndarray) -> PseudoLabelSet:
        return replace(self, selected=np.asarray(mask, dtype=bool))


def pseudo_labels_from_proba(proba: np.ndarray, theta: float) -> PseudoLabelSet:
    """Assign argmax labels to samples whose top probability is strictly above ``theta``."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    proba = np.atleast_2d(np.asarray(proba, dtype=np.float64))
    conf = proba.max(axis=1)
    lab = proba.argmax(axis=1)
    keep = np.flatnonzero(conf > theta)
    return PseudoLabelSet(proba.shape[1], float(theta), keep, lab[keep], conf[keep],
                          np.zeros(len(keep), dtype=bool))


def generate_pseudo_labels(model: ClassifierModel, target_features: np.ndarray, theta: float) -> PseudoLabelSet:
    return pseudo_labels_from_proba(predict_proba(model, np.atleast_2d(target_features)), theta)


def _top_per_class(pls: PseudoLabelSet, quota: np.ndarray) -> PseudoLabelSet:
    # confidence descending, lower sample index first on ties
    order = np.lexsort((pls.sample_index, -pls.confidence))
    taken = np.zeros(pls.n_classes, dtype=np.int64)
    mask = np.zeros(len(order), dtype=bool)
    for i in order:
        k = pls.label[i]
        if taken[k] < quota[k]:
            taken[k] += 1
            mask[i] = True
    return pls.with_selection(mask)


def qbst_quota(counts: np.ndarray) -> np.ndarray:
    """max(1, ceil(mu_k * L_k)) for non-empty classes, computed exactly as
    ceil(L_k * (L - L_k) / L) in integers."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    quota = np.zeros_like(counts)
    for k, lk in enumerate(counts):
        if lk > 0:
            quota[k] = max(1, -(-(int(lk) * (total - int(lk))) // total))
    return quota


def quasi_balanced_select(pls: PseudoLabelSet) -> PseudoLabelSet:
    return _top_per_class(pls, qbst_quota(pls.counts))


def spst_select(pls: PseudoLabelSet) -> PseudoLabelSet:
    return pls.with_selection(np.ones(pls.total, dtype=bool))


def cbst_quota(counts: np.ndarray, proportion: float) -> np.ndarray:
    # rounding guards against products like 0.3 * 10 = 3.0000000000000004
    return np.array([math.ceil(round(proportion * int(lk), 9)) for lk in counts], dtype=np.int64)


def cbst_select(pls: PseudoLabelSet, proportion: float) -> PseudoLabelSet:
    if not 0 < proportion <= 1:
        raise ValueError("proportion must lie in (0, 1]")
    return _top_per_class(pls, cbst_quota(pls.counts, proportion))


def select(pls: PseudoLabelSet, cfg: SelfTrainConfig) -> PseudoLabelSet:
    if cfg.method == "qbst":
        return quasi_balanced_select(pls)
    if cfg.method == "spst":
        return spst_select(pls)
    return cbst_select(pls, cfg.cbst_proportion)


def label_entropy(labels: np.ndarray, n_classes: int) -> float:
    """Shannon entropy (nats) of the label histogram."""
    c = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    if c.sum() == 0:
        return 0.0
    p = c[c > 0] / c.sum()
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------
# the loop


@dataclass
class UnlabeledSet:
    """Target data as seen by self-training: features (and optionally clouds), no labels."""

    features: np.ndarray
    clouds: list | None = None

    def __len__(self):
        return len(self.features)


@dataclass
class RoundReport:
    round: int
    theta: float
    confident_total: int
    confident_counts: list[int]
    weights: list[float]
    selected_counts: list[int]
    selected_entropy: float
    aborted: bool = False
    pseudo_label_precision: float | None = None
    target_accuracy: float | None = None
    target_per_class_accuracy: list | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SelfTrainResult:
    model: ClassifierModel
    warmup: ClassifierModel
    rounds: list[RoundReport] = field(default_factory=list)
    aborted: bool = False


class SelectionEmpty(RuntimeError):
    pass


def round_train_config(cfg: SelfTrainConfig, train_cfg: TrainConfig, round_index: int) -> TrainConfig:
    """Training settings for the fresh model of a round; the seed depends only on
    (cfg.seed, round_index)."""
    seed = int(np.random.SeedSequence([cfg.seed, 7919, round_index]).generate_state(1)[0])
    return replace(train_cfg, learning_rate=cfg.inner_learning_rate, batch_size=cfg.inner_batch_size,
                   epochs=cfg.epochs_per_round, seed=seed)


def _accuracy(model, features, labels):
    pred = np.argmax(model.logits(features), axis=1)
    k = model.n_classes
    per = []
    for c in range(k):
        m = labels == c
        per.append(float((pred[m] == c).mean()) if m.any() else None)
    return float((pred == labels).mean()), per


def self_train(source: LabeledSet, target: UnlabeledSet, cfg: SelfTrainConfig, train_cfg: TrainConfig,
               n_classes: int, mixup_enabled: bool = False, warmup: ClassifierModel | None = None,
               eval_labels: np.ndarray | None = None) -> SelfTrainResult:
    """Warm up on ``source`` (unless ``warmup`` is given), then run the selection/retraining rounds.

    ``eval_labels`` are target ground truth used for diagnostics only; they never
    reach selection or training.
    """
    if len(target) == 0:
        raise ValueError("target set is empty")
    if warmup is None:
        warmup = train(source, replace(train_cfg, seed=cfg.seed), n_classes, mixup_enabled)
    elif warmup.n_classes != n_classes:
        raise ValueError("warm-up model class count does not match")
    result = SelfTrainResult(model=warmup, warmup=warmup)
    generator = warmup
    feats = np.asarray(target.features, dtype=np.float64)
    for i in range(cfg.rounds):
        theta = cfg.threshold(i)
        pls = select(generate_pseudo_labels(generator, feats, theta), cfg)
        idx = pls.selected_indices()
        labels = pls.selected_labels()
        rep = RoundReport(
            round=i, theta=theta, confident_total=pls.total,
            confident_counts=pls.counts.tolist(), weights=[float(w) for w in pls.weights],
            selected_counts=pls.selected_counts.tolist(),
            selected_entropy=label_entropy(labels, n_classes),
        )
        if eval_labels is not None and len(idx):
            rep.pseudo_label_precision = float((eval_labels[idx] == labels).mean())
        if len(idx) == 0:
            rep.aborted = True
            result.rounds.append(rep)
            result.aborted = True
            log.warning("round %d: empty selection at theta=%.4f, stopping", i, theta)
            break
        clouds = [target.clouds[j] for j in idx] if target.clouds is not None else None
        selected = LabeledSet(feats[idx], labels, clouds)
        generator = train(selected, round_train_config(cfg, train_cfg, i), n_classes,
                          require_all_classes=False)
        if eval_labels is not None:
            rep.target_accuracy, rep.target_per_class_accuracy = _accuracy(generator, feats, eval_labels)
        result.rounds.append(rep)
        log.info("round=%d theta=%.4f L=%d selected=%s entropy=%.4f", i, theta, pls.total,
                 rep.selected_counts, rep.selected_entropy)
    result.model = generator
    return result


def write_round_report(rounds: list[RoundReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in rounds:
            fh.write(r.to_json() + "\n")


def write_selection_csv(pls: PseudoLabelSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("sample_index,label,confidence,selected\n")
        for i, lab, c, s in zip(pls.sample_index, pls.label, pls.confidence, pls.selected):
            fh.write(f"{int(i)},{int(lab)},{float(c)!r},{int(bool(s))}\n")
