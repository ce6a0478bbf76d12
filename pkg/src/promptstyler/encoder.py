"""Frozen miniature text encoder.

A pre-layer-norm causal transformer over a whole-word micro vocabulary.
The ⟨S⟩ placeholder's embedding row is replaced by a caller-supplied style
word vector, and :func:`encode_with_grad` returns the exact pullback of
the output feature with respect to that vector. Encoder parameters never
receive gradients.

All arithmetic runs in float64. Parameters are initialised as float32
values (then widened) so the binary weight file round-trips bitwise.
"""

import enum
import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadArchitecture,
    FormatError,
    MissingIndex,
    MissingStyleSlot,
    MissingStyleVector,
    SequenceTooLong,
    UnknownClass,
)
from .sphere import l2_normalize_rows

BOS = "<bos>"
EOS = "<eos>"
PLACEHOLDER = "<S>"
TEMPLATE_WORDS = ("a", "style", "of")
RESERVED = (BOS, EOS, *TEMPLATE_WORDS, PLACEHOLDER)

LN_EPS = 1e-5
INIT_STD = 0.02
# class-name tokens dominate their own residual stream; template words do not
CLASS_STD = 1.0
POSITIONAL_STD = 0.01


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    class_names: tuple

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if self.tokens.count(PLACEHOLDER) != 1:
            raise ValueError("vocabulary must contain the placeholder exactly once")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, class_names):
        names = tuple(str(c) for c in class_names)
        clash = [c for c in names if c in RESERVED]
        if clash:
            raise ValueError(f"class names collide with reserved tokens: {clash}")
        if len(set(names)) != len(names):
            raise ValueError("class names must be distinct")
        return cls(tokens=RESERVED + names, class_names=names)

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownClass(token) from None

    def class_id(self, name):
        if name not in self.class_names:
            raise UnknownClass(name)
        return self._ids[name]

    @property
    def placeholder_id(self):
        return self._ids[PLACEHOLDER]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


class PromptKind(enum.Enum):
    STYLE = "style"
    CONTENT = "content"
    STYLE_CONTENT = "style_content"


@dataclass(frozen=True)
class PromptSpec:
    kind: PromptKind
    style_index: int = None
    class_index: int = None

    def __post_init__(self):
        needs_style = self.kind in (PromptKind.STYLE, PromptKind.STYLE_CONTENT)
        needs_class = self.kind in (PromptKind.CONTENT, PromptKind.STYLE_CONTENT)
        if needs_style and self.style_index is None:
            raise MissingIndex(f"{self.kind.value} prompt requires style_index")
        if needs_class and self.class_index is None:
            raise MissingIndex(f"{self.kind.value} prompt requires class_index")
        if not needs_style and self.style_index is not None:
            raise MissingIndex("content prompt takes no style_index")
        if not needs_class and self.class_index is not None:
            raise MissingIndex("style prompt takes no class_index")
        if self.style_index is not None and self.style_index < 1:
            raise MissingIndex("style_index is 1-based")
        if self.class_index is not None and self.class_index < 1:
            raise MissingIndex("class_index is 1-based")


def build_prompt(spec, vocab):
    """Token ids for a prompt, framed by BOS/EOS.

    Style:         a <S> style of a
    Content:       [class]
    StyleContent:  a <S> style of a [class]
    """
    words = []
    if spec.kind in (PromptKind.STYLE, PromptKind.STYLE_CONTENT):
        words += ["a", PLACEHOLDER, "style", "of", "a"]
    if spec.kind in (PromptKind.CONTENT, PromptKind.STYLE_CONTENT):
        if spec.class_index > len(vocab.class_names):
            raise UnknownClass(f"class index {spec.class_index} has no token")
        words.append(vocab.class_names[spec.class_index - 1])
    return [vocab.id(BOS)] + [vocab.id(w) for w in words] + [vocab.id(EOS)]


def class_indices(vocab, class_names):
    """1-based vocabulary class indices; UnknownClass for any missing name."""
    return [vocab.class_names.index(name) + 1 for name in class_names
            if vocab.class_id(name) is not None]


def style_prompt(vocab):
    return build_prompt(PromptSpec(PromptKind.STYLE, style_index=1), vocab)


def content_prompt(vocab, class_index):
    return build_prompt(PromptSpec(PromptKind.CONTENT, class_index=class_index), vocab)


def style_content_prompt(vocab, class_index):
    spec = PromptSpec(PromptKind.STYLE_CONTENT, style_index=1, class_index=class_index)
    return build_prompt(spec, vocab)


# longest template: BOS a <S> style of a [class] EOS
LONGEST_TEMPLATE = 8


@dataclass(frozen=True)
class Arch:
    blocks: int = 2
    heads: int = 2
    width: int = 32
    out_dim: int = 16
    max_len: int = 16
    mlp_ratio: int = 4
    # "last_word": position before EOS; "eos": final position;
    # "slot": <S> (or the last word when absent)
    pooling: str = "last_word"
    final_norm: bool = True

    def validate(self):
        problems = []
        if self.blocks < 0:
            problems.append("blocks must be >= 0")
        if self.heads < 1 or self.width < 1 or self.out_dim < 1:
            problems.append("heads, width and out_dim must be positive")
        elif self.width % self.heads:
            problems.append(f"width {self.width} not divisible by heads {self.heads}")
        if self.max_len < LONGEST_TEMPLATE:
            problems.append(f"max_len {self.max_len} shorter than longest template")
        if self.mlp_ratio < 1:
            problems.append("mlp_ratio must be >= 1")
        if self.pooling not in POOLINGS:
            problems.append(f"unknown pooling {self.pooling!r}")
        if problems:
            raise BadArchitecture("; ".join(problems))
        return self

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def hidden(self):
        return self.width * self.mlp_ratio


POOLINGS = ("eos", "last_word", "slot")

LAYER_PARAMS = (
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o",
    "ln2_gain", "ln2_bias", "w_fc1", "b_fc1", "w_fc2", "b_fc2",
)


def _layer_shapes(arch):
    d, h = arch.width, arch.hidden
    return {
        "ln1_gain": (d,), "ln1_bias": (d,),
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "ln2_gain": (d,), "ln2_bias": (d,),
        "w_fc1": (d, h), "b_fc1": (h,), "w_fc2": (h, d), "b_fc2": (d,),
    }


@dataclass(frozen=True)
class EncoderWeights:
    vocab: Vocabulary
    arch: Arch
    token_embedding: np.ndarray
    positional_embedding: np.ndarray
    layers: tuple
    ln_final_gain: np.ndarray
    ln_final_bias: np.ndarray
    projection: np.ndarray

    def __post_init__(self):
        for _, arr in self.named_parameters():
            arr.flags.writeable = False

    def named_parameters(self):
        """Parameters in the fixed serialization order."""
        yield "token_embedding", self.token_embedding
        yield "positional_embedding", self.positional_embedding
        for i, layer in enumerate(self.layers):
            for name in LAYER_PARAMS:
                yield f"layers.{i}.{name}", layer[name]
        yield "ln_final_gain", self.ln_final_gain
        yield "ln_final_bias", self.ln_final_bias
        yield "projection", self.projection

    def content_hash(self):
        """SHA-256 over the architecture and every parameter's bytes."""
        h = hashlib.sha256()
        h.update(repr(self.arch).encode())
        h.update("\n".join(self.vocab.tokens).encode())
        for name, arr in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.named_parameters())


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_encoder(seed, arch, vocab, init_std=INIT_STD, class_std=CLASS_STD,
                 positional_std=POSITIONAL_STD, matrix_std=None):
    """Deterministic pseudo-random weights.

    Template and special token rows are drawn from N(0, init_std^2) and
    class-name rows from N(0, class_std^2); positional rows use
    ``positional_std``. Weight matrices use ``matrix_std`` when given, else
    fan-in scaling N(0, 1/fan_in). Layer-norm gains start at one, biases
    at zero.
    """
    arch = arch.validate()
    rng = np.random.default_rng(seed)

    def normal(*shape, std=None):
        if std is None:
            std = matrix_std if matrix_std is not None else 1.0 / np.sqrt(shape[0])
        return _f32(rng.normal(0.0, std, size=shape))

    d = arch.width
    n_reserved = len(RESERVED)
    tok = np.vstack([
        normal(n_reserved, d, std=init_std),
        normal(len(vocab) - n_reserved, d, std=class_std),
    ])
    pos = normal(arch.max_len, d, std=positional_std)
    layers = []
    for _ in range(arch.blocks):
        layer = {}
        for name, shape in _layer_shapes(arch).items():
            if name.endswith("gain"):
                layer[name] = np.ones(shape)
            elif name.startswith("w_"):
                layer[name] = normal(*shape)
            else:
                layer[name] = np.zeros(shape)
        layers.append(layer)
    return EncoderWeights(
        vocab=vocab,
        arch=arch,
        token_embedding=tok,
        positional_embedding=pos,
        layers=tuple(layers),
        ln_final_gain=np.ones(d),
        ln_final_bias=np.zeros(d),
        projection=normal(d, arch.out_dim),
    )


def identity_encoder(vocab, width=8, seed=0, init_std=INIT_STD):
    """Degenerate configuration for analytic tests.

    Zero blocks, no positional embeddings, no final norm, identity
    projection and slot pooling: the feature of any prompt containing <S>
    is the style vector itself, and a content prompt's feature is its class
    token's embedding row.
    """
    arch = Arch(blocks=0, heads=1, width=width, out_dim=width, max_len=LONGEST_TEMPLATE,
                pooling="slot", final_norm=False).validate()
    rng = np.random.default_rng(seed)
    return EncoderWeights(
        vocab=vocab,
        arch=arch,
        token_embedding=_f32(rng.normal(0.0, init_std, size=(len(vocab), width))),
        positional_embedding=np.zeros((arch.max_len, width)),
        layers=(),
        ln_final_gain=np.ones(width),
        ln_final_bias=np.zeros(width),
        projection=np.eye(width),
    )


# ---------------------------------------------------------------------------
# forward / backward


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layer_norm_back(dy, cache):
    xhat, inv, gain = cache
    dxhat = dy * gain
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _quick_gelu(h):
    sig = 1.0 / (1.0 + np.exp(-1.702 * h))
    return h * sig, sig


def _quick_gelu_back(dy, h, sig):
    return dy * (sig + 1.702 * h * sig * (1.0 - sig))


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _check_tokens(weights, token_batch, style_batch):
    tokens = np.asarray(token_batch, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError("token batch must be 1-D or 2-D")
    if tokens.shape[1] > weights.arch.max_len:
        raise SequenceTooLong(
            f"sequence length {tokens.shape[1]} exceeds max_len {weights.arch.max_len}"
        )
    if np.any(tokens < 0) or np.any(tokens >= len(weights.vocab)):
        raise ValueError("token id out of vocabulary range")
    is_slot = tokens == weights.vocab.placeholder_id
    counts = is_slot.sum(axis=1)
    if np.any(counts > 1):
        raise ValueError("placeholder may appear at most once per prompt")
    has_slot = counts == 1
    if style_batch is None:
        if np.any(has_slot):
            raise MissingStyleVector("prompt contains <S> but no style vector was given")
        return tokens, None, is_slot
    style = np.asarray(style_batch, dtype=np.float64)
    if style.ndim == 1:
        style = np.broadcast_to(style, (tokens.shape[0], style.shape[0]))
    if style.shape != (tokens.shape[0], weights.arch.width):
        raise ValueError(
            f"style vectors must have shape ({tokens.shape[0]}, {weights.arch.width}), "
            f"got {style.shape}"
        )
    if not np.all(has_slot):
        raise MissingStyleSlot("a style vector was supplied for a prompt without <S>")
    return tokens, style, is_slot


def _pool_index(weights, tokens, is_slot):
    b, t = tokens.shape
    if weights.arch.pooling == "eos":
        return np.full(b, t - 1)
    if weights.arch.pooling == "last_word":
        return np.full(b, t - 2)
    # slot pooling: the <S> position, or the last word before EOS
    return np.where(is_slot.any(axis=1), is_slot.argmax(axis=1), t - 2)


def _forward(weights, tokens, style, is_slot, keep_cache):
    arch = weights.arch
    b, t = tokens.shape
    x = weights.token_embedding[tokens] + weights.positional_embedding[:t]
    if style is not None:
        rows, cols = np.nonzero(is_slot)
        x[rows, cols] = style[rows] + weights.positional_embedding[cols]
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    scale = 1.0 / np.sqrt(arch.head_dim)
    caches = []
    for layer in weights.layers:
        a_in, ln1 = _layer_norm(x, layer["ln1_gain"], layer["ln1_bias"])
        q = _split_heads(a_in @ layer["w_q"], arch.heads)
        k = _split_heads(a_in @ layer["w_k"], arch.heads)
        v = _split_heads(a_in @ layer["w_v"], arch.heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + mask
        scores = scores - scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(att @ v)
        x = x + ctx @ layer["w_o"]
        m_in, ln2 = _layer_norm(x, layer["ln2_gain"], layer["ln2_bias"])
        hpre = m_in @ layer["w_fc1"] + layer["b_fc1"]
        hact, sig = _quick_gelu(hpre)
        x = x + hact @ layer["w_fc2"] + layer["b_fc2"]
        if keep_cache:
            caches.append((ln1, q, k, v, att, ctx, a_in, ln2, m_in, hpre, sig, hact))
    pool = _pool_index(weights, tokens, is_slot)
    pooled = x[np.arange(b), pool]
    lnf = None
    if arch.final_norm:
        pooled, lnf = _layer_norm(pooled, weights.ln_final_gain, weights.ln_final_bias)
    out = pooled @ weights.projection
    return out, (caches, pool, lnf, scale)


def _backward(weights, tokens, is_slot, state, grad_out):
    arch = weights.arch
    caches, pool, lnf, scale = state
    b, t = tokens.shape
    g = grad_out @ weights.projection.T
    if lnf is not None:
        g = _layer_norm_back(g, lnf)
    dx = np.zeros((b, t, arch.width))
    dx[np.arange(b), pool] = g
    for layer, cache in zip(reversed(weights.layers), reversed(caches)):
        ln1, q, k, v, att, ctx, a_in, ln2, m_in, hpre, sig, hact = cache
        # MLP branch
        dh = _quick_gelu_back(dx @ layer["w_fc2"].T, hpre, sig)
        dx = dx + _layer_norm_back(dh @ layer["w_fc1"].T, ln2)
        # attention branch
        dctx = _split_heads(dx @ layer["w_o"].T, arch.heads)
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        da_in = (
            _merge_heads(dq) @ layer["w_q"].T
            + _merge_heads(dk) @ layer["w_k"].T
            + _merge_heads(dv) @ layer["w_v"].T
        )
        dx = dx + _layer_norm_back(da_in, ln1)
    rows, cols = np.nonzero(is_slot)
    grad_style = np.zeros((b, arch.width))
    grad_style[rows] = dx[rows, cols]
    return grad_style


def encode_batch(weights, token_batch, style_batch=None):
    """Encode a batch of equal-length prompts. Returns a (batch, C) array."""
    tokens, style, is_slot = _check_tokens(weights, token_batch, style_batch)
    out, _ = _forward(weights, tokens, style, is_slot, keep_cache=False)
    return out


def encode(weights, tokens, style_vector=None):
    """Unnormalized C-dim feature of one prompt."""
    return encode_batch(weights, [list(tokens)], style_vector)[0]


def content_features(weights, class_names):
    """Unit features of the bare class-name prompts, one row per class."""
    tokens = np.array([content_prompt(weights.vocab, m)
                       for m in class_indices(weights.vocab, class_names)])
    return l2_normalize_rows(encode_batch(weights, tokens))


def encode_batch_with_grad(weights, token_batch, style_batch):
    """Batched features plus a pullback from (batch, C) to (batch, D)."""
    tokens, style, is_slot = _check_tokens(weights, token_batch, style_batch)
    if not np.all(is_slot.any(axis=1)):
        raise MissingStyleSlot("every prompt must contain <S> exactly once")
    out, state = _forward(weights, tokens, style, is_slot, keep_cache=True)

    def pullback(grad_out):
        grad_out = np.asarray(grad_out, dtype=np.float64).reshape(out.shape)
        return _backward(weights, tokens, is_slot, state, grad_out)

    return out, pullback


def encode_with_grad(weights, tokens, style_vector):
    if style_vector is None:
        raise MissingStyleVector("encode_with_grad needs a style vector")
    tokens = list(tokens)
    if weights.vocab.placeholder_id not in tokens:
        raise MissingStyleSlot("prompt has no <S> slot")
    out, pb = encode_batch_with_grad(weights, [tokens], np.asarray(style_vector)[None, :])
    return out[0], lambda g: pb(np.asarray(g, dtype=np.float64)[None, :])[0]


# ---------------------------------------------------------------------------
# weight file
#
# layout (little-endian):
#   8s   magic b"PSTYENC\0"
#   u32  format version (1)
#   6*i32  B, H, D, C, V, Lmax
#   3*i32  mlp_ratio, pooling (index into POOLINGS: 0 eos, 1 last_word, 2 slot),
#          final_norm (0/1)
#   u32  byte length of the vocabulary block, then UTF-8 tokens joined by "\n"
#        (the class-name tokens are those after the reserved prefix)
#   f32[]  parameters in EncoderWeights.named_parameters() order, row-major

ENCODER_MAGIC = b"PSTYENC\0"
ENCODER_VERSION = 1


def save_encoder(weights, path):
    arch = weights.arch
    buf = io.BytesIO()
    buf.write(ENCODER_MAGIC)
    buf.write(struct.pack("<I", ENCODER_VERSION))
    buf.write(struct.pack("<6i", arch.blocks, arch.heads, arch.width, arch.out_dim,
                          len(weights.vocab), arch.max_len))
    buf.write(struct.pack("<3i", arch.mlp_ratio, POOLINGS.index(arch.pooling),
                          int(arch.final_norm)))
    vocab_bytes = "\n".join(weights.vocab.tokens).encode("utf-8")
    buf.write(struct.pack("<I", len(vocab_bytes)))
    buf.write(vocab_bytes)
    for name, arr in weights.named_parameters():
        as32 = arr.astype("<f4")
        if not np.array_equal(as32.astype(np.float64), arr):
            raise ValueError(f"parameter {name} is not float32-representable")
        buf.write(as32.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_encoder(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != ENCODER_MAGIC:
        raise FormatError("not an encoder weight file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != ENCODER_VERSION:
        raise FormatError(f"unsupported encoder format version {version}")
    blocks, heads, width, out_dim, v, max_len = struct.unpack_from("<6i", data, 12)
    mlp_ratio, pooling, final_norm = struct.unpack_from("<3i", data, 36)
    (vlen,) = struct.unpack_from("<I", data, 48)
    tokens = tuple(data[52:52 + vlen].decode("utf-8").split("\n"))
    if len(tokens) != v:
        raise FormatError("vocabulary size does not match header")
    arch = Arch(blocks, heads, width, out_dim, max_len, mlp_ratio,
                POOLINGS[pooling] if 0 <= pooling < len(POOLINGS) else "?",
                bool(final_norm)).validate()
    vocab = Vocabulary.build(tokens[len(RESERVED):])
    if vocab.tokens != tokens:
        raise FormatError("vocabulary block has unexpected reserved prefix")
    offset = 52 + vlen

    def take(*shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise FormatError("truncated encoder file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset = end
        return arr.astype(np.float64).reshape(shape)

    tok = take(v, width)
    pos = take(max_len, width)
    shapes = _layer_shapes(arch)
    layers = tuple({name: take(*shapes[name]) for name in LAYER_PARAMS} for _ in range(blocks))
    gain = take(width)
    bias = take(width)
    proj = take(width, out_dim)
    if offset != len(data):
        raise FormatError("trailing bytes in encoder file")
    return EncoderWeights(vocab, arch, tok, pos, layers, gain, bias, proj)
