"""Layered bag-of-embeddings encoder with a Linear or a domain-regularized (DRM) head.

Encoder: mean of token embeddings -> (n-1) ReLU dense blocks -> tanh pooler.
The pooler output is the hidden state ``h`` fed to the head and is also the
last scorable feature layer.
"""
from dataclasses import dataclass, field

import numpy as np

from drmood.errors import DimensionMismatch, TokenOutOfRange

DEFAULT_DELTA = 3.0
DIVISOR_EPS = 1e-6


@dataclass
class EncoderParams:
    embedding: np.ndarray
    blocks: list
    pooler: tuple

    def __post_init__(self):
        dim = self.embedding.shape[1]
        for i, (w, b) in enumerate(self.blocks):
            if w.shape[1] != dim or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"block {i} has shape {w.shape} but input dim is {dim}")
            dim = w.shape[0]
        w, b = self.pooler
        if w.shape[1] != dim or b.shape != (w.shape[0],):
            raise DimensionMismatch(f"pooler has shape {w.shape} but input dim is {dim}")

    @property
    def n_layers(self):
        return len(self.blocks) + 1

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    @property
    def hidden_dim(self):
        return self.pooler[0].shape[0]

    def named_arrays(self):
        out = [("embedding", self.embedding)]
        for i, (w, b) in enumerate(self.blocks):
            out += [(f"block{i}.W", w), (f"block{i}.b", b)]
        out += [("pooler.W", self.pooler[0]), ("pooler.b", self.pooler[1])]
        return out


@dataclass
class LinearHead:
    W: np.ndarray
    b: np.ndarray

    kind = "linear"

    @property
    def n_classes(self):
        return self.W.shape[0]

    def named_arrays(self):
        return [("head.W", self.W), ("head.b", self.b)]


@dataclass
class DRMHead:
    W_c: np.ndarray
    b_c: np.ndarray
    W_d: np.ndarray  # (1, |h|)
    b_d: np.ndarray  # shape (1,) so that optimizers can update it in place
    delta: float = DEFAULT_DELTA
    symmetric_clamp: bool = False

    kind = "drm"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.W_c.shape[0] < 2:
            raise ValueError("DRM head needs at least 2 classes")

    @property
    def n_classes(self):
        return self.W_c.shape[0]

    def named_arrays(self):
        return [("head.W_c", self.W_c), ("head.b_c", self.b_c), ("head.W_d", self.W_d), ("head.b_d", self.b_d)]


@dataclass
class LayerFeatures:
    per_layer: list
    pooled: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pooled = self.per_layer[-1]


@dataclass
class DRMOutput:
    f_c: np.ndarray
    f_d_raw: float
    f_d_clamped: float
    f: np.ndarray


def _xavier(rng, fan_out, fan_in, scale=1.0):
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_encoder(vocab_size, rng, d_emb=32, width=64, n_layers=4):
    if n_layers < 1:
        raise ValueError("encoder needs at least one layer")
    embedding = rng.normal(0.0, 1.0 / np.sqrt(d_emb), size=(vocab_size, d_emb))
    blocks = []
    dim = d_emb
    for _ in range(n_layers - 1):
        # He-style scale keeps ReLU activations from dying out with depth
        blocks.append((_xavier(rng, width, dim, scale=np.sqrt(2.0)), np.zeros(width)))
        dim = width
    pooler = (_xavier(rng, width, dim), np.zeros(width))
    return EncoderParams(embedding, blocks, pooler)


def init_linear_head(hidden_dim, n_classes, rng):
    return LinearHead(_xavier(rng, n_classes, hidden_dim), np.zeros(n_classes))


def init_drm_head(hidden_dim, n_classes, rng, delta=DEFAULT_DELTA, symmetric_clamp=False):
    # W_d near zero and b_d = 1 start the divisor at 1, i.e. as a plain linear head
    return DRMHead(
        _xavier(rng, n_classes, hidden_dim),
        np.zeros(n_classes),
        _xavier(rng, 1, hidden_dim, scale=0.01),
        np.ones(1),
        float(delta),
        symmetric_clamp,
    )


def bag_matrix(token_lists, vocab_size):
    """(m, V) matrix whose rows average one-hot token vectors; row @ E is the mean embedding."""
    a = np.zeros((len(token_lists), vocab_size))
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise ValueError("token list must be non-empty")
        toks = np.asarray(toks, dtype=np.int64)
        if toks.min() < 0 or toks.max() >= vocab_size:
            raise TokenOutOfRange(f"token id out of range [0, {vocab_size})")
        np.add.at(a[i], toks, 1.0 / len(toks))
    return a


@dataclass
class BatchFeatures:
    """Per-layer activations for a batch plus what backprop needs."""

    bag: np.ndarray
    inputs: list  # input to every dense layer (x0 = mean embedding, then block outputs)
    layers: list  # f^1..f^n, each (m, width)

    @property
    def hidden(self):
        return self.layers[-1]


def encoder_forward_batch(token_lists, params):
    bag = bag_matrix(token_lists, params.vocab_size)
    x = bag @ params.embedding
    inputs, layers = [], []
    for w, b in params.blocks:
        inputs.append(x)
        x = np.maximum(x @ w.T + b, 0.0)
        layers.append(x)
    inputs.append(x)
    w, b = params.pooler
    layers.append(np.tanh(x @ w.T + b))
    return BatchFeatures(bag, inputs, layers)


def encoder_forward(tokens, params):
    if len(tokens) == 0:
        raise ValueError("token list must be non-empty")
    batch = encoder_forward_batch([tokens], params)
    return LayerFeatures([layer[0] for layer in batch.layers])


def clamp_fd(f_d, delta, symmetric=False):
    """Clamp the domain logit before it divides the class logits.

    The literal rule keeps values strictly inside (-delta, delta) and sends
    both tails to +delta. ``symmetric=True`` clips to [-delta, delta] instead.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    f_d = np.asarray(f_d, dtype=np.float64)
    if symmetric:
        out = np.clip(f_d, -delta, delta)
    else:
        out = np.where((f_d > -delta) & (f_d < delta), f_d, delta)
    return out if out.ndim else float(out)


def clamp_interior(f_d, delta, symmetric=False):
    """Mask of entries where clamp_fd is the identity (its derivative is 1 there, 0 elsewhere)."""
    f_d = np.asarray(f_d)
    return (f_d > -delta) & (f_d < delta)


def guard_divisor(f_d):
    f_d = np.asarray(f_d, dtype=np.float64)
    out = np.where(np.abs(f_d) >= DIVISOR_EPS, f_d, np.where(f_d < 0, -DIVISOR_EPS, DIVISOR_EPS))
    return out if out.ndim else float(out)


def drm_forward_batch(hidden, head):
    """Returns (f_c, f_d_raw, f_d_clamped, f) for a (m, |h|) batch."""
    if hidden.shape[-1] != head.W_c.shape[1]:
        raise DimensionMismatch(f"hidden dim {hidden.shape[-1]} vs head input {head.W_c.shape[1]}")
    f_c = hidden @ head.W_c.T + head.b_c
    f_d = hidden @ head.W_d[0] + head.b_d[0]
    f_dc = clamp_fd(f_d, head.delta, head.symmetric_clamp)
    f = f_c / guard_divisor(f_dc)[..., None]
    return f_c, f_d, f_dc, f


def drm_forward(h, head):
    h = np.asarray(h, dtype=np.float64)
    f_c, f_d, f_dc, f = drm_forward_batch(h[None, :], head)
    return DRMOutput(f_c[0], float(f_d[0]), float(f_dc[0]), f[0])


def linear_forward(h, head):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.W.shape[1]:
        raise DimensionMismatch(f"hidden dim {h.shape[-1]} vs head input {head.W.shape[1]}")
    return h @ head.W.T + head.b


def head_logits(hidden, head):
    """(class logits used for scoring, final logits used for prediction)."""
    if isinstance(head, DRMHead):
        f_c, _, _, f = drm_forward_batch(hidden, head)
        return f_c, f
    logits = linear_forward(hidden, head)
    return logits, logits


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(probs):
    # np.argmax returns the first maximal index, which is the tie-break we want
    return np.argmax(np.asarray(probs), axis=-1)
