"""Linear cosine classifier trained on synthesized style-content features.

Class labels are 1-based throughout the public API, matching the prompt
indices used elsewhere in the package.
"""

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import class_indices, content_features, encode_batch, style_content_prompt
from .errors import EmptyDataset, FormatError, LabelOutOfRange, NotNormalized, ZeroVector
from .sphere import ZERO_EPS, l2_normalize, l2_normalize_rows

ARCFACE = "arcface"
SOFTMAX = "softmax"
LOSS_KINDS = (ARCFACE, SOFTMAX)
COS_CLAMP = 1e-7


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 50
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 128
    loss_kind: str = ARCFACE
    scale: float = 5.0
    margin: float = 0.5
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        return self


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (N, C)
    loss_kind: str = ARCFACE
    scale: float = 5.0
    margin: float = 0.5

    @property
    def num_classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    def normalized_weights(self):
        return l2_normalize_rows(self.weights)


@dataclass
class LabeledFeatureSet:
    features: np.ndarray  # (M, C) unit rows
    labels: np.ndarray  # (M,) in 1..N

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.size == 0 and self.features.ndim != 2:
            self.features = self.features.reshape(0, 0)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features and labels must have matching lengths")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise NotNormalized("every training feature must be unit-norm")

    def __len__(self):
        return len(self.labels)


def synthesize_training_set(encoder, style_bank, class_names):
    """One unit style-content feature per (style, class) pair, style-major."""
    vocab = encoder.vocab
    idx = class_indices(vocab, class_names)
    vectors = np.asarray(style_bank.vectors, dtype=np.float64)
    k, n = len(vectors), len(idx)
    tokens = np.tile(np.array([style_content_prompt(vocab, m) for m in idx]), (k, 1))
    feats = encode_batch(encoder, tokens, np.repeat(vectors, n, axis=0))
    labels = np.tile(np.arange(1, n + 1), k)
    return LabeledFeatureSet(l2_normalize_rows(feats), labels)


# ---------------------------------------------------------------------------
# losses


def _normalize_rows_with_grad(w):
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    if np.any(~(norms > ZERO_EPS)):
        raise ZeroVector("classifier has a zero weight row")
    wn = w / norms

    def pullback(g):
        return (g - wn * np.sum(wn * g, axis=1, keepdims=True)) / norms

    return wn, pullback


def _batch_loss_and_grad(weights, features, labels0, loss_kind, scale, margin):
    """Mean loss over a batch and its gradient w.r.t. the raw weight matrix.

    ``labels0`` are 0-based. For ArcFace the target logit becomes
    scale * cos(theta_y + margin); cosines are clamped away from +-1 first.
    """
    wn, pullback = _normalize_rows_with_grad(weights)
    b = len(labels0)
    rows = np.arange(b)
    cos = features @ wn.T
    if loss_kind == ARCFACE:
        clamped = np.clip(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
        inside = (cos > -1.0 + COS_CLAMP) & (cos < 1.0 - COS_CLAMP)
        cos_y = clamped[rows, labels0]
        theta = np.arccos(cos_y)
        logits = scale * clamped
        logits[rows, labels0] = scale * np.cos(theta + margin)
    elif loss_kind == SOFTMAX:
        inside = np.ones_like(cos, dtype=bool)
        logits = scale * cos
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[rows, labels0]))
    dlogits = np.exp(shifted - logsum[:, None])
    dlogits[rows, labels0] -= 1.0
    dlogits /= b
    dcos = scale * dlogits
    if loss_kind == ARCFACE:
        # d cos(theta + m) / d cos(theta) = sin(theta + m) / sin(theta)
        dcos[rows, labels0] *= np.sin(theta + margin) / np.sin(theta)
        dcos = dcos * inside
    return loss, pullback(dcos.T @ features)


def _check_label(classifier, label):
    if not 1 <= int(label) <= classifier.num_classes:
        raise LabelOutOfRange(f"label {label} outside 1..{classifier.num_classes}")


def arcface_loss(classifier, feature, label):
    """ArcFace loss for one unit feature; returns (loss, dL/dweights)."""
    _check_label(classifier, label)
    x = np.asarray(feature, dtype=np.float64)[None, :]
    return _batch_loss_and_grad(classifier.weights, x, np.array([int(label) - 1]),
                                ARCFACE, classifier.scale, classifier.margin)


def softmax_ce_loss(classifier, feature, label):
    """Softmax cross-entropy on scaled cosine logits; returns (loss, grad)."""
    _check_label(classifier, label)
    x = np.asarray(feature, dtype=np.float64)[None, :]
    return _batch_loss_and_grad(classifier.weights, x, np.array([int(label) - 1]),
                                SOFTMAX, classifier.scale, 0.0)


# ---------------------------------------------------------------------------
# training and inference


def _round32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def train_classifier(dataset, config, num_classes=None):
    """Mini-batch SGD with momentum over seeded per-epoch shuffles.

    The last partial batch of every epoch is kept.
    """
    config = config.validate()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    n = int(num_classes or dataset.labels.max())
    if dataset.labels.min() < 1 or dataset.labels.max() > n:
        raise LabelOutOfRange("dataset labels outside 1..N")
    x = dataset.features
    y0 = dataset.labels - 1
    rng = np.random.default_rng(config.seed)
    # the first draw initialises the weights; shuffles continue from the same stream
    w = _round32(rng.normal(0.0, 0.02, size=(n, x.shape[1])))
    velocity = np.zeros_like(w)
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grad = _batch_loss_and_grad(w, x[batch], y0[batch], config.loss_kind,
                                           config.scale, config.margin)
            velocity = config.momentum * velocity + grad
            w = w - config.learning_rate * velocity
    return LinearClassifier(_round32(w), config.loss_kind, config.scale, config.margin)


def classify(classifier, feature):
    """Cosine scores against each class and the 1-based argmax (lowest index wins ties)."""
    x = l2_normalize(feature)
    scores = classifier.normalized_weights() @ x
    return scores, int(np.argmax(scores)) + 1


def classify_batch(classifier, features):
    x = l2_normalize_rows(features)
    scores = x @ classifier.normalized_weights().T
    return scores, np.argmax(scores, axis=1) + 1


def accuracy(classifier, features, labels):
    _, pred = classify_batch(classifier, features)
    return float(np.mean(pred == np.asarray(labels)))


def zero_shot_classifier(encoder, class_names):
    """Baseline whose rows are the normalized content features themselves."""
    return LinearClassifier(content_features(encoder, class_names), SOFTMAX, 1.0, 0.0)


# ---------------------------------------------------------------------------
# classifier file
#
# layout (little-endian):
#   8s   magic b"PSTYCLF\0"
#   u32  format version (1)
#   i32  N, i32 C
#   u32  loss kind (0 arcface, 1 softmax)
#   f64  scale, f64 margin
#   f32[N*C]  weights, row-major

CLASSIFIER_MAGIC = b"PSTYCLF\0"
CLASSIFIER_VERSION = 1


def save_classifier(classifier, path):
    w32 = classifier.weights.astype("<f4")
    if not np.array_equal(w32.astype(np.float64), classifier.weights):
        raise ValueError("classifier weights are not float32-representable")
    buf = io.BytesIO()
    buf.write(CLASSIFIER_MAGIC)
    buf.write(struct.pack("<I2iI2d", CLASSIFIER_VERSION, classifier.num_classes, classifier.dim,
                          LOSS_KINDS.index(classifier.loss_kind), classifier.scale,
                          classifier.margin))
    buf.write(w32.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_classifier(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CLASSIFIER_MAGIC:
        raise FormatError("not a classifier file")
    header = struct.Struct("<I2iI2d")
    version, n, c, kind, scale, margin = header.unpack_from(data, 8)
    if version != CLASSIFIER_VERSION:
        raise FormatError(f"unsupported classifier version {version}")
    if kind >= len(LOSS_KINDS):
        raise FormatError(f"unknown loss kind code {kind}")
    off = 8 + header.size
    if len(data) != off + 4 * n * c:
        raise FormatError("classifier file has wrong payload size")
    w = np.frombuffer(data, "<f4", n * c, off).astype(np.float64).reshape(n, c)
    return LinearClassifier(w, LOSS_KINDS[kind], scale, margin)
