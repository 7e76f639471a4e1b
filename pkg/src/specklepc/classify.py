"""Point-cloud classifier: handcrafted rotation-invariant features and a linear softmax head.

The head is trained with softmax cross-entropy, Adam, L2 weight decay and an
epoch-wise cosine learning-rate schedule. Features are standardized with
statistics of the training set, which are stored in the model.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from specklepc.pointcloud import PointCloud, mixup

log = logging.getLogger(__name__)

FEATURE_DIM = 64
FEATURE_NAME = "handcrafted-v2"
KNN_K = 8
N_RADIAL_BINS = 16
N_HEIGHT_BINS = 16
NORMAL_K = 24
N_NORMAL_BINS = 10
SHELLS = (0.0, 0.25, 0.5, 0.75, 1.0 + 1e-9)

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# features


def _soft_histogram(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Histogram with linear splatting onto bin centers; continuous in the inputs."""
    pos = (np.clip(values, lo, hi) - lo) / (hi - lo) * bins - 0.5
    pos = np.clip(pos, 0.0, bins - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, bins - 1)
    w1 = pos - i0
    h = np.bincount(i0, 1 - w1, minlength=bins) + np.bincount(i1, w1, minlength=bins)
    return h / len(values)


def _orientation_block(pts: np.ndarray, tree: cKDTree) -> np.ndarray:
    k = min(NORMAL_K, len(pts))
    _, idx = tree.query(pts, k=k)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    _, vec = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    normal = vec[:, :, 0]
    nz = np.abs(normal[:, 2])
    # sign flips of the normal and rotations about z only change the phase
    horiz = 1.0 - nz ** 2
    phase = np.exp(4j * np.arctan2(normal[:, 1], normal[:, 0]))
    coherence = abs((horiz * phase).sum()) / horiz.sum() if horiz.sum() > 1e-12 else 0.0
    return np.concatenate([_soft_histogram(nz, 0.0, 1.0, N_NORMAL_BINS), [coherence, nz.mean(), nz.std()]])


def extract_features(pc: PointCloud | np.ndarray) -> np.ndarray:
    """64-d descriptor built only from quantities unchanged by rotation about z.

    Layout: sorted covariance eigenvalue ratios (3), radial histogram (16),
    height histogram (16), per-shell mean/std/min/max of the mean 8-NN
    distance (4 shells x 4), and a surface-orientation block (13) from local
    PCA normals: |n_z| histogram (10), 4-fold azimuthal coherence of the
    horizontal normal components, mean and std of |n_z|. The orientation
    block holds up much better than global shape histograms when only the
    camera-facing part of an object is present.
    """
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if len(pts) < KNN_K + 1:
        raise ValueError(f"need at least {KNN_K + 1} points")
    centered = pts - pts.mean(axis=0)
    if not np.abs(centered).max() > 0:
        raise ValueError("degenerate cloud: all points identical")
    eig = np.sort(np.linalg.eigvalsh(np.cov(centered.T)))[::-1]
    eig = eig / eig.sum()
    r = np.sqrt((pts ** 2).sum(axis=1))
    z = pts[:, 2]
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=KNN_K + 1)
    knn = dist[:, 1:].mean(axis=1)
    shell_stats = []
    for a, b in zip(SHELLS[:-1], SHELLS[1:]):
        m = (r >= a) & (r < b)
        if m.any():
            s = knn[m]
            shell_stats += [s.mean(), s.std(), s.min(), s.max()]
        else:
            shell_stats += [0.0, 0.0, 0.0, 0.0]
    feat = np.concatenate([
        eig,
        _soft_histogram(r, 0.0, 1.0, N_RADIAL_BINS),
        _soft_histogram(z, -1.0, 1.0, N_HEIGHT_BINS),
        shell_stats,
        _orientation_block(pts, tree),
    ])
    assert feat.shape == (FEATURE_DIM,)
    return feat


def extract_features_batch(clouds) -> np.ndarray:
    return np.stack([extract_features(c) for c in clouds]) if len(clouds) else np.zeros((0, FEATURE_DIM))


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    batch_size: int = 16
    epochs: int = 200
    cosine: bool = True
    seed: int = 0
    init_scale: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.weight_decay >= 0 and self.batch_size > 0 and self.epochs >= 0):
            raise ValueError("invalid training hyperparameters")


@dataclass
class ClassifierModel:
    weights: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    mean: np.ndarray  # (D,) feature standardization
    scale: np.ndarray  # (D,)
    feature_spec: dict = field(default_factory=lambda: {"name": FEATURE_NAME, "dim": FEATURE_DIM})
    training_meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"feature dimension {x.shape[1]} does not match model ({self.dim})")
        return ((x - self.mean) / self.scale) @ self.weights + self.bias


@dataclass
class LabeledSet:
    """Features with labels (hard class indices); clouds are optional and only used for mixup."""

    features: np.ndarray
    labels: np.ndarray
    clouds: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> LabeledSet:
        idx = np.asarray(idx, dtype=np.int64)
        clouds = [self.clouds[i] for i in idx] if self.clouds is not None else None
        return LabeledSet(self.features[idx], self.labels[idx], clouds)

    @classmethod
    def from_clouds(cls, clouds: list[PointCloud]) -> LabeledSet:
        return cls(extract_features_batch(clouds), np.array([c.label for c in clouds]), list(clouds))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: ClassifierModel, x) -> np.ndarray:
    """Class probabilities for features (n, D) / (D,) or a point cloud."""
    if isinstance(x, PointCloud):
        x = extract_features(x)
    single = np.ndim(x) == 1
    p = softmax(model.logits(x))
    return p[0] if single else p


def cross_entropy_and_grad(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, targets: np.ndarray):
    """Mean soft-target cross-entropy over the batch and its gradient w.r.t. (weights, bias).

    ``x`` holds standardized features; ``targets`` is (B, K) with rows summing to 1."""
    p = softmax(x @ weights + bias)
    loss = -np.mean(np.sum(targets * np.log(np.clip(p, 1e-300, None)), axis=1))
    g = (p - targets) / len(x)
    return loss, x.T @ g, g.sum(axis=0)


def init_model(features: np.ndarray, n_classes: int, cfg: TrainConfig) -> ClassifierModel:
    rng = np.random.default_rng(cfg.seed)
    d = features.shape[1]
    mean = features.mean(axis=0) if len(features) else np.zeros(d)
    scale = features.std(axis=0) if len(features) else np.ones(d)
    scale = np.where(scale > 1e-8, scale, 1.0)
    w = cfg.init_scale * rng.standard_normal((d, n_classes))
    return ClassifierModel(w, np.zeros(n_classes), mean, scale,
                           feature_spec={"name": FEATURE_NAME, "dim": d})


def _mixup_pool(data: LabeledSet, n_classes: int, rng: np.random.Generator):
    """One mixed sample per training sample: (features, soft targets).

    With clouds the pairs are mixed in point space and re-featurized once up
    front; without clouds the features themselves are interpolated."""
    n = len(data)
    partner = rng.permutation(n)
    lam = rng.uniform(0.0, 1.0, n)
    onehot = np.eye(n_classes)
    if data.clouds is not None:
        feats, soft = [], []
        n_pts = min(min(len(c) for c in data.clouds), 1024)
        for i in range(n):
            mixed, y = mixup(data.clouds[i], data.clouds[partner[i]], lam[i], n_pts, n_classes, rng)
            feats.append(extract_features(mixed))
            soft.append(y)
        return np.stack(feats), np.stack(soft)
    x = lam[:, None] * data.features + (1 - lam[:, None]) * data.features[partner]
    y = lam[:, None] * onehot[data.labels] + (1 - lam[:, None]) * onehot[data.labels[partner]]
    return x, y


def train(data: LabeledSet, cfg: TrainConfig, n_classes: int, mixup_enabled: bool = False,
          require_all_classes: bool = True) -> ClassifierModel:
    """Fit the softmax head from a seeded initialization."""
    if len(data) == 0:
        raise TrainingError("empty training set")
    present = np.bincount(data.labels, minlength=n_classes)
    if require_all_classes and (present == 0).any():
        raise TrainingError(f"classes absent from training data: {np.flatnonzero(present == 0).tolist()}")
    model = init_model(data.features, n_classes, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    x = (data.features - model.mean) / model.scale
    y = np.eye(n_classes)[data.labels]
    if mixup_enabled:
        mx, my = _mixup_pool(data, n_classes, rng)
        mx = (mx - model.mean) / model.scale
    w, b = model.weights.copy(), model.bias.copy()
    mw, vw = np.zeros_like(w), np.zeros_like(w)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    step = 0
    losses = []
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs)) if cfg.cosine else 1.0)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            bx, by = x[idx], y[idx]
            if mixup_enabled:
                bx = np.concatenate([bx, mx[idx]])
                by = np.concatenate([by, my[idx]])
            loss, gw, gb = cross_entropy_and_grad(w, b, bx, by)
            if not np.isfinite(loss):
                raise TrainingError(f"diverged: non-finite loss at epoch {epoch}")
            gw = gw + cfg.weight_decay * w
            gb = gb + cfg.weight_decay * b
            step += 1
            c1 = 1 - cfg.beta1 ** step
            c2 = 1 - cfg.beta2 ** step
            mw = cfg.beta1 * mw + (1 - cfg.beta1) * gw
            vw = cfg.beta2 * vw + (1 - cfg.beta2) * gw * gw
            mb = cfg.beta1 * mb + (1 - cfg.beta1) * gb
            vb = cfg.beta2 * vb + (1 - cfg.beta2) * gb * gb
            w -= lr * (mw / c1) / (np.sqrt(vw / c2) + cfg.adam_eps)
            b -= lr * (mb / c1) / (np.sqrt(vb / c2) + cfg.adam_eps)
            total += loss * len(bx)
            count += len(bx)
        losses.append(total / count)
    model.weights, model.bias = w, b
    acc = float((np.argmax(x @ w + b, axis=1) == data.labels).mean())
    model.training_meta = {"seed": cfg.seed, "epochs": cfg.epochs, "mixup": bool(mixup_enabled),
                           "n_train": int(n), "loss_curve": [float(v) for v in losses],
                           "train_accuracy": acc}
    log.debug("trained epochs=%d n=%d train_acc=%.4f", cfg.epochs, n, acc)
    return model


def evaluate(model: ClassifierModel, data: LabeledSet) -> dict:
    """Overall accuracy, per-class accuracy (None for classes without samples) and confusion matrix."""
    k = model.n_classes
    pred = np.argmax(model.logits(data.features), axis=1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (data.labels, pred), 1)
    per_class = [float(conf[c, c] / conf[c].sum()) if conf[c].sum() else None for c in range(k)]
    return {"accuracy": float((pred == data.labels).mean()) if len(data) else 0.0,
            "per_class_accuracy": per_class,
            "confusion": conf.tolist(),
            "n": int(len(data))}


# --------------------------------------------------------------------------
# persistence


def model_to_bytes(model: ClassifierModel) -> bytes:
    meta = json.dumps({"feature_spec": model.feature_spec, "training_meta": model.training_meta},
                      sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIII", CHECKPOINT_VERSION, model.n_classes, model.dim, len(meta)))
    buf.write(meta)
    for a in (model.mean, model.scale, model.weights, model.bias):
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> ClassifierModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a classifier checkpoint")
    version, k, d, n_meta = struct.unpack_from("<IIII", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 20
    meta = json.loads(data[off:off + n_meta])
    off += n_meta
    arrays = []
    for count, shape in ((d, (d,)), (d, (d,)), (d * k, (d, k)), (k, (k,))):
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy())
        off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    mean, scale, w, b = arrays
    return ClassifierModel(w, b, mean, scale, meta["feature_spec"], meta["training_meta"])


def save_model(model: ClassifierModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> ClassifierModel:
    return model_from_bytes(Path(path).read_bytes())


def save_proba_csv(proba: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"p{k}" for k in range(proba.shape[1])])
        for row in proba:
            w.writerow([repr(float(v)) for v in row])


def load_proba_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:] if rows and rows[0] and rows[0][0].startswith("p") else rows
    return np.array([[float(v) for v in r] for r in body], dtype=np.float64)
