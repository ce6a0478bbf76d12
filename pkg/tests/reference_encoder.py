"""Loop-based float64 re-evaluation of the encoder forward pass.

Deliberately written position-by-position and head-by-head with no code
shared with the batched implementation, so it can serve as an oracle.
"""

import math

import numpy as np


def _ln(vec, gain, bias, eps=1e-5):
    mu = sum(vec) / len(vec)
    var = sum((v - mu) ** 2 for v in vec) / len(vec)
    inv = 1.0 / math.sqrt(var + eps)
    return np.array([(v - mu) * inv * g + b for v, g, b in zip(vec, gain, bias)])


def _gelu(v):
    return v / (1.0 + math.exp(-1.702 * v))


def reference_encode(weights, tokens, style_vector=None):
    arch = weights.arch
    slot_id = weights.vocab.placeholder_id
    rows = []
    for pos, tok in enumerate(tokens):
        base = style_vector if tok == slot_id else weights.token_embedding[tok]
        rows.append(np.array([base[j] + weights.positional_embedding[pos][j] for j in range(arch.width)]))
    dh = arch.width // arch.heads
    for layer in weights.layers:
        normed = [_ln(r, layer["ln1_gain"], layer["ln1_bias"]) for r in rows]
        q = [n @ layer["w_q"] for n in normed]
        k = [n @ layer["w_k"] for n in normed]
        v = [n @ layer["w_v"] for n in normed]
        new_rows = []
        for i in range(len(rows)):
            ctx = np.zeros(arch.width)
            for h in range(arch.heads):
                sl = slice(h * dh, (h + 1) * dh)
                logits = [float(q[i][sl] @ k[j][sl]) / math.sqrt(dh) for j in range(i + 1)]
                top = max(logits)
                ex = [math.exp(l - top) for l in logits]
                total = sum(ex)
                for j in range(i + 1):
                    ctx[sl] += (ex[j] / total) * v[j][sl]
            new_rows.append(rows[i] + ctx @ layer["w_o"])
        rows = new_rows
        out = []
        for r in rows:
            n = _ln(r, layer["ln2_gain"], layer["ln2_bias"])
            hidden = np.array([_gelu(x) for x in (n @ layer["w_fc1"] + layer["b_fc1"])])
            out.append(r + hidden @ layer["w_fc2"] + layer["b_fc2"])
        rows = out
    if arch.pooling == "eos":
        pooled = rows[-1]
    elif arch.pooling == "last_word":
        pooled = rows[-2]
    else:
        pooled = rows[list(tokens).index(slot_id)] if slot_id in tokens else rows[-2]
    if arch.final_norm:
        pooled = _ln(pooled, weights.ln_final_gain, weights.ln_final_bias)
    return pooled @ weights.projection
