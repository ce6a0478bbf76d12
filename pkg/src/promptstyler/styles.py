"""Style word vector learning.

Each style vector s_i is optimised so that (a) the feature of its style
prompt is orthogonal to the features of previously learned styles and (b)
style-content prompts built from it still score highest against their own
class's content feature. ``learn_styles`` runs the stages one after
another; ``learn_styles_parallel`` optimises all K vectors jointly and is
kept for the memory comparison.
"""

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import (
    class_indices,
    content_features,
    encode_batch,
    encode_batch_with_grad,
    style_content_prompt,
    style_prompt,
)
from .errors import BadDistribution, DimensionMismatch, FormatError, NonFiniteLoss
from .sphere import l2_normalize_rows, normalize_with_grad, require_unit


@dataclass(frozen=True)
class InitDistribution:
    kind: str = "normal"
    # normal: (mean, std); uniform: (low, high)
    a: float = 0.0
    b: float = 0.02

    def validate(self):
        if self.kind == "normal":
            if not (math.isfinite(self.a) and math.isfinite(self.b) and self.b > 0):
                raise BadDistribution(f"normal needs finite mean and std > 0, got {self}")
        elif self.kind == "uniform":
            if not (math.isfinite(self.a) and math.isfinite(self.b) and self.b > self.a):
                raise BadDistribution(f"uniform needs finite low < high, got {self}")
        else:
            raise BadDistribution(f"unknown distribution kind {self.kind!r}")
        return self

    def __str__(self):
        name = "N" if self.kind == "normal" else "U"
        return f"{name}({self.a:g}, {self.b:g})"


@dataclass(frozen=True)
class TrainConfig:
    K: int = 80
    L: int = 100
    learning_rate: float = 0.002
    momentum: float = 0.9
    init: InitDistribution = field(default_factory=InitDistribution)
    seed: int = 0
    mode: str = "sequential"
    use_style_loss: bool = True
    use_content_loss: bool = True

    def validate(self):
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.init.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["init"] = InitDistribution(**d.get("init", {}))
        return cls(**d)

    def digest(self):
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).digest()


@dataclass(frozen=True)
class LossBreakdown:
    style_loss: float
    content_loss: float
    total: float

    @classmethod
    def of(cls, style_loss, content_loss):
        style_loss = float(style_loss)
        content_loss = float(content_loss)
        return cls(style_loss, content_loss, style_loss + content_loss)


@dataclass
class StyleBank:
    vectors: np.ndarray  # (K, D), float32-representable
    style_losses: np.ndarray  # final L_style per style
    content_losses: np.ndarray  # final L_content per style
    iterations: int
    seed: int
    config: TrainConfig = None
    peak_style_content_features: int = 0

    @property
    def K(self):
        return self.vectors.shape[0]

    @property
    def D(self):
        return self.vectors.shape[1]

    def config_digest(self):
        return self.config.digest() if self.config is not None else bytes(32)


# ---------------------------------------------------------------------------
# losses


def style_diversity_loss(current, previous):
    """Mean absolute cosine between the current style feature and earlier ones.

    The empty mean (first style) is defined as 0.
    """
    current = np.asarray(current, dtype=np.float64)
    previous = [np.asarray(p, dtype=np.float64) for p in previous]
    require_unit(current, *previous)
    if not previous:
        return 0.0
    prev = np.stack(previous)
    if prev.shape[1] != current.shape[0]:
        raise DimensionMismatch("style features differ in dimension")
    return float(np.mean(np.abs(prev @ current)))


def _style_loss_and_grad(u, prev):
    # prev: (P, C) unit rows; gradient of mean |u . p_j| w.r.t. u
    if prev.shape[0] == 0:
        return 0.0, np.zeros_like(u)
    c = prev @ u
    return float(np.mean(np.abs(c))), (np.sign(c) @ prev) / prev.shape[0]


def content_consistency_loss(z):
    """Row-wise softmax cross-entropy with the diagonal as target."""
    z = np.asarray(z, dtype=np.float64)
    loss, _ = _content_loss_and_grad(z)
    return loss


def _content_loss_and_grad(z):
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - np.diag(shifted)))
    probs = np.exp(shifted - logsum[:, None])
    grad = (probs - np.eye(n)) / n
    return loss, grad


class PromptObjective:
    """Prompt loss for one class set over a frozen encoder.

    Content features depend on no style vector, so they are encoded once
    here and reused by every stage.
    """

    def __init__(self, encoder, class_names, use_style_loss=True, use_content_loss=True):
        vocab = encoder.vocab
        idx = class_indices(vocab, class_names)
        self.encoder = encoder
        self.class_names = tuple(class_names)
        self.use_style_loss = use_style_loss
        self.use_content_loss = use_content_loss
        self.style_tokens = np.array([style_prompt(vocab)])
        self.style_content_tokens = np.array([style_content_prompt(vocab, m) for m in idx])
        self.content_features = content_features(encoder, self.class_names)
        # instrumentation: most style-content features alive in one step
        self.peak_style_content_features = 0

    @property
    def N(self):
        return len(self.class_names)

    def style_features(self, vectors):
        """Unit style-prompt features for a (K, D) stack of style vectors."""
        vectors = np.atleast_2d(vectors)
        tokens = np.repeat(self.style_tokens, len(vectors), axis=0)
        return l2_normalize_rows(encode_batch(self.encoder, tokens, vectors))

    def similarity_matrix(self, style_vector):
        tokens = self.style_content_tokens
        feats = encode_batch(self.encoder, tokens, np.asarray(style_vector, dtype=np.float64))
        return l2_normalize_rows(feats) @ self.content_features.T

    def _content_term(self, vectors):
        # vectors: (B, D) -> per-style losses (B,), grads (B, D)
        b, n = len(vectors), self.N
        tokens = np.tile(self.style_content_tokens, (b, 1))
        styles = np.repeat(vectors, n, axis=0)
        self.peak_style_content_features = max(self.peak_style_content_features, b * n)
        feats, pullback = encode_batch_with_grad(self.encoder, tokens, styles)
        u, norm_pb = normalize_with_grad(feats)
        z = (u @ self.content_features.T).reshape(b, n, n)
        losses = np.empty(b)
        du = np.empty((b, n, self.content_features.shape[1]))
        for k in range(b):
            losses[k], dz = _content_loss_and_grad(z[k])
            du[k] = dz @ self.content_features
        ds = pullback(norm_pb(du.reshape(b * n, -1)))
        return losses, ds.reshape(b, n, -1).sum(axis=1)

    def _style_forward(self, vectors):
        tokens = np.repeat(self.style_tokens, len(vectors), axis=0)
        feats, pullback = encode_batch_with_grad(self.encoder, tokens, vectors)
        u, norm_pb = normalize_with_grad(feats)
        return u, lambda g: pullback(norm_pb(g))

    def loss(self, style_vector, previous_features):
        """LossBreakdown and gradient w.r.t. ``style_vector`` for one stage."""
        s = np.asarray(style_vector, dtype=np.float64)[None, :]
        grad = np.zeros_like(s)
        style_loss = content_loss = 0.0
        if self.use_style_loss:
            prev = np.asarray(previous_features, dtype=np.float64).reshape(-1, self.content_features.shape[1])
            u, pb = self._style_forward(s)
            style_loss, du = _style_loss_and_grad(u[0], prev)
            grad += pb(du[None, :])
        if self.use_content_loss:
            losses, g = self._content_term(s)
            content_loss = losses[0]
            grad += g
        return LossBreakdown.of(style_loss, content_loss), grad[0]

    def joint_loss(self, vectors):
        """Per-style prompt losses when all K vectors move at once.

        Style i's diversity term is the mean |cos| against every other
        current style feature, and s_i descends only its own prompt loss:
        the other features enter as constants, exactly as earlier styles do
        in the sequential stages. Returns per-style (style, content) losses
        and the stacked (K, D) gradients.
        """
        vectors = np.asarray(vectors, dtype=np.float64)
        k = len(vectors)
        grad = np.zeros_like(vectors)
        style_losses = np.zeros(k)
        content_losses = np.zeros(k)
        if self.use_style_loss and k > 1:
            u, pb = self._style_forward(vectors)
            c = u @ u.T
            off = ~np.eye(k, dtype=bool)
            style_losses = np.abs(c)[off].reshape(k, k - 1).mean(axis=1)
            sgn = np.where(off, np.sign(c), 0.0)
            grad += pb((sgn @ u) / (k - 1))
        if self.use_content_loss:
            content_losses, g = self._content_term(vectors)
            grad += g
        return style_losses, content_losses, grad


def content_similarity_matrix(encoder, style_vector, class_names):
    """z[m, n]: cosine between style-content feature m and content feature n."""
    return PromptObjective(encoder, class_names).similarity_matrix(style_vector)


def prompt_loss(encoder, style_vector, previous_style_features, class_names,
                use_style_loss=True, use_content_loss=True):
    """Total prompt loss for one style vector.

    Returns ``(LossBreakdown, gradient)`` where the gradient is taken with
    respect to ``style_vector``.
    """
    obj = PromptObjective(encoder, class_names, use_style_loss, use_content_loss)
    return obj.loss(style_vector, previous_style_features)


# ---------------------------------------------------------------------------
# optimisation


def init_style_vectors(config, D):
    """K seeded draws of dimension D, rounded to float32 values."""
    dist = config.init.validate()
    rng = np.random.default_rng(config.seed)
    if dist.kind == "normal":
        raw = rng.normal(dist.a, dist.b, size=(config.K, D))
        with np.errstate(over="ignore"):
            return raw.astype(np.float32).astype(np.float64)
    raw = rng.uniform(dist.a, dist.b, size=(config.K, D)).astype(np.float32)
    # float32 rounding can land on the open upper bound
    top = np.nextafter(np.float32(dist.b), np.float32(-np.inf))
    return np.minimum(raw, top).astype(np.float64)


def _round32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _check_state(s, iteration, style_index):
    if not np.all(np.isfinite(s)):
        raise NonFiniteLoss(
            f"non-finite style vector at iteration {iteration} of style {style_index}",
            iteration=iteration,
            style_index=style_index,
        )


def _check_finite(breakdown_total, grad, iteration, style_index):
    if not (math.isfinite(breakdown_total) and np.all(np.isfinite(grad))):
        raise NonFiniteLoss(
            f"non-finite loss or gradient at iteration {iteration} of style {style_index}",
            iteration=iteration,
            style_index=style_index,
        )


def learn_styles(encoder, class_names, config, on_stage_end=None):
    """Learn K style vectors one after another.

    Stage i starts from its own initial draw, keeps the features of styles
    1..i-1 fixed, and runs exactly L SGD-momentum steps
    (v <- momentum * v + g; s <- s - lr * v, with v = 0 at stage start).
    ``on_stage_end(i, bank_vectors)`` is called after each stage.
    """
    config = config.validate()
    if config.mode != "sequential":
        raise ValueError("learn_styles requires mode='sequential'")
    obj = PromptObjective(encoder, class_names, config.use_style_loss, config.use_content_loss)
    init = init_style_vectors(config, encoder.arch.width)
    vectors = np.zeros_like(init)
    style_losses = np.zeros(config.K)
    content_losses = np.zeros(config.K)
    prev = np.zeros((0, encoder.arch.out_dim))
    for i in range(config.K):
        s = init[i].copy()
        velocity = np.zeros_like(s)
        for it in range(config.L):
            _check_state(s, it + 1, i + 1)
            breakdown, grad = obj.loss(s, prev)
            _check_finite(breakdown.total, grad, it + 1, i + 1)
            velocity = config.momentum * velocity + grad
            s = s - config.learning_rate * velocity
        s = _round32(s)
        _check_state(s, config.L, i + 1)
        final, grad = obj.loss(s, prev)
        _check_finite(final.total, grad, config.L, i + 1)
        vectors[i] = s
        style_losses[i] = final.style_loss
        content_losses[i] = final.content_loss
        prev = np.vstack([prev, obj.style_features(s)])
        if on_stage_end is not None:
            on_stage_end(i + 1, vectors[: i + 1].copy())
    return StyleBank(
        vectors=vectors,
        style_losses=style_losses,
        content_losses=content_losses,
        iterations=config.L,
        seed=config.seed,
        config=config,
        peak_style_content_features=obj.peak_style_content_features,
    )


def learn_styles_parallel(encoder, class_names, config):
    """Optimise all K style vectors jointly for L steps."""
    config = config.validate()
    if config.mode != "parallel":
        raise ValueError("learn_styles_parallel requires mode='parallel'")
    obj = PromptObjective(encoder, class_names, config.use_style_loss, config.use_content_loss)
    s = init_style_vectors(config, encoder.arch.width)
    velocity = np.zeros_like(s)
    for it in range(config.L):
        _check_state(s, it + 1, 0)
        sl, cl, grad = obj.joint_loss(s)
        _check_finite(float(np.sum(sl) + np.sum(cl)), grad, it + 1, 0)
        velocity = config.momentum * velocity + grad
        s = s - config.learning_rate * velocity
    s = _round32(s)
    _check_state(s, config.L, 0)
    sl, cl, grad = obj.joint_loss(s)
    _check_finite(float(np.sum(sl) + np.sum(cl)), grad, config.L, 0)
    return StyleBank(
        vectors=s,
        style_losses=sl,
        content_losses=cl,
        iterations=config.L,
        seed=config.seed,
        config=config,
        peak_style_content_features=obj.peak_style_content_features,
    )


def run_style_learning(encoder, class_names, config):
    """Dispatch on ``config.mode``."""
    if config.mode == "parallel":
        return learn_styles_parallel(encoder, class_names, config)
    return learn_styles(encoder, class_names, config)


def pairwise_abs_cosines(features):
    f = np.asarray(features, dtype=np.float64)
    c = np.abs(f @ f.T)
    return c[np.triu_indices(len(f), 1)]


# ---------------------------------------------------------------------------
# style bank file
#
# layout (little-endian):
#   8s   magic b"PSTYSTB\0"
#   u32  format version (1)
#   i32  K, i32 D, i32 L (iterations per style), i64 seed
#   32s  SHA-256 digest of the training config (zeros if unknown)
#   f32[K*D]  style vectors, row-major
#   f64[K]    final style-diversity loss per style
#   f64[K]    final content-consistency loss per style
#   u32 + bytes  training config as UTF-8 JSON (length 0 if unknown)

BANK_MAGIC = b"PSTYSTB\0"
BANK_VERSION = 1


def save_style_bank(bank, path):
    vec32 = bank.vectors.astype("<f4")
    if not np.array_equal(vec32.astype(np.float64), bank.vectors):
        raise ValueError("style vectors are not float32-representable")
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    buf.write(struct.pack("<I3iq", BANK_VERSION, bank.K, bank.D, bank.iterations, bank.seed))
    buf.write(bank.config_digest())
    buf.write(vec32.tobytes())
    buf.write(np.asarray(bank.style_losses, dtype="<f8").tobytes())
    buf.write(np.asarray(bank.content_losses, dtype="<f8").tobytes())
    cfg = b"" if bank.config is None else json.dumps(bank.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_style_bank(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != BANK_MAGIC:
        raise FormatError("not a style bank file")
    version, k, d, iters, seed = struct.unpack_from("<I3iq", data, 8)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported style bank version {version}")
    off = 8 + struct.calcsize("<I3iq")
    digest = data[off:off + 32]
    off += 32
    need = off + 4 * k * d + 16 * k + 4
    if len(data) < need:
        raise FormatError("truncated style bank file")
    vectors = np.frombuffer(data, "<f4", k * d, off).astype(np.float64).reshape(k, d)
    off += 4 * k * d
    style_losses = np.frombuffer(data, "<f8", k, off).copy()
    off += 8 * k
    content_losses = np.frombuffer(data, "<f8", k, off).copy()
    off += 8 * k
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    config = None
    if clen:
        config = TrainConfig.from_dict(json.loads(data[off:off + clen].decode()))
        if config.digest() != digest:
            raise FormatError("config digest mismatch")
    if off + clen != len(data):
        raise FormatError("trailing bytes in style bank file")
    bank = StyleBank(vectors, style_losses, content_losses, iters, seed, config)
    return bank


__all__ = [
    "InitDistribution", "TrainConfig", "LossBreakdown", "StyleBank", "PromptObjective",
    "style_diversity_loss", "content_similarity_matrix", "content_consistency_loss",
    "prompt_loss", "init_style_vectors", "learn_styles", "learn_styles_parallel",
    "run_style_learning", "pairwise_abs_cosines", "save_style_bank", "load_style_bank",
]
