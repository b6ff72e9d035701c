"""Losses, manual backpropagation, optimizers, the training loop and model files."""
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from drmood import model as M
from drmood.dataset import IND, Vocab, build_vocab, encode
from drmood.errors import (
    CorruptFile,
    Diverged,
    InvalidConfig,
    NonFiniteGradient,
    OODInTraining,
    VersionMismatch,
)

log = logging.getLogger(__name__)

MAGIC = b"OODS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    head_kind: str = "drm"
    delta: float = M.DEFAULT_DELTA
    symmetric_clamp: bool = False
    clamp_in_domain_loss: bool = False
    min_freq: int = 1
    d_emb: int = 32
    width: int = 64
    n_layers: int = 4

    def validate(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise InvalidConfig("epochs must be an integer >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidConfig("batch_size and learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if self.head_kind not in ("linear", "drm"):
            raise InvalidConfig(f"unknown head kind {self.head_kind!r}")
        if not self.delta > 0:
            raise InvalidConfig("delta must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise InvalidConfig("invalid Adam constants")
        if min(self.d_emb, self.width, self.n_layers, self.min_freq) < 1:
            raise InvalidConfig("architecture sizes must be positive")
        return self


@dataclass
class TrainedModel:
    encoder: M.EncoderParams
    head: object
    vocab: Vocab
    classes: tuple
    train_meta: dict = field(default_factory=dict)

    def named_arrays(self):
        return self.encoder.named_arrays() + self.head.named_arrays()

    def tokenize(self, texts):
        return [encode(t, self.vocab) for t in texts]

    def features(self, texts):
        return M.encoder_forward_batch(self.tokenize(texts), self.encoder)

    def logits(self, texts):
        """(class logits f_c, final logits f) for a list of texts."""
        return M.head_logits(self.features(texts).hidden, self.head)

    def predict(self, texts):
        return M.predict(self.logits(texts)[1])


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def classification_loss(f, y):
    return float(-M.log_softmax(f)[y])


def domain_loss(f_d):
    """(1 - sigmoid(f_d))^2, using 1 - sigmoid(x) = sigmoid(-x) to keep precision."""
    s = sigmoid(-np.asarray(f_d, dtype=np.float64))
    out = s * s
    return out if np.ndim(out) else float(out)


@dataclass
class Batch:
    tokens: list
    labels: np.ndarray

    @classmethod
    def from_dataset(cls, ds, vocab):
        if ds.domain_tag != IND or any(u.label is None for u in ds.utterances):
            raise OODInTraining("training batches must be labeled IND data")
        return cls([encode(t, vocab) for t in ds.texts], ds.label_indices())

    def subset(self, idx):
        return Batch([self.tokens[i] for i in idx], self.labels[idx])

    def __len__(self):
        return len(self.tokens)


def _check_batch(batch):
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    if batch.labels is None or len(batch.labels) != len(batch.tokens) or np.any(batch.labels < 0):
        raise OODInTraining("every training sample needs an IND label")


def _forward(batch, model, cfg):
    feats = M.encoder_forward_batch(batch.tokens, model.encoder)
    m = len(batch)
    rows = np.arange(m)
    head = model.head
    if isinstance(head, M.DRMHead):
        f_c, f_d, f_dc, f = M.drm_forward_batch(feats.hidden, head)
        logp = M.log_softmax(f)
        cls = -logp[rows, batch.labels]
        dom = domain_loss(f_dc if cfg.clamp_in_domain_loss else f_d)
        per_sample = cls + dom
        cache = (feats, logp, f_c, f_d, f_dc)
    else:
        f = M.linear_forward(feats.hidden, head)
        logp = M.log_softmax(f)
        per_sample = -logp[rows, batch.labels]
        cache = (feats, logp)
    return per_sample, cache


def per_sample_losses(batch, model, cfg=TrainConfig()):
    """Per-sample classification (+ domain, for DRM) losses."""
    _check_batch(batch)
    return _forward(batch, model, cfg)[0]


def total_loss(batch, model, cfg=TrainConfig()):
    """Batch mean of classification loss, plus domain loss for the DRM head."""
    return float(np.mean(per_sample_losses(batch, model, cfg)))


def backward(batch, model, cfg=TrainConfig()):
    """Exact gradients of ``total_loss``; returns (loss, {param name: gradient})."""
    _check_batch(batch)
    per_sample, cache = _forward(batch, model, cfg)
    m = len(batch)
    rows = np.arange(m)
    feats, logp = cache[0], cache[1]
    d_f = np.exp(logp)
    d_f[rows, batch.labels] -= 1.0
    d_f /= m
    head = model.head
    h = feats.hidden
    grads = {}
    if isinstance(head, M.DRMHead):
        f_c, f_d, f_dc = cache[2:]
        divisor = M.guard_divisor(f_dc)
        d_fc = d_f / divisor[:, None]
        d_div = -np.sum(d_f * f_c, axis=1) / divisor**2
        # the guard replaces tiny divisors by a constant
        d_fdc = np.where(np.abs(f_dc) >= M.DIVISOR_EPS, d_div, 0.0)
        # d/dx (sigmoid(-x))^2 = -2 sigmoid(-x)^2 sigmoid(x)
        s_neg = sigmoid(-(f_dc if cfg.clamp_in_domain_loss else f_d))
        d_dom = -2.0 * s_neg**2 * (1.0 - s_neg) / m
        if cfg.clamp_in_domain_loss:
            d_fdc = d_fdc + d_dom
            d_fd = np.where(M.clamp_interior(f_d, head.delta, head.symmetric_clamp), d_fdc, 0.0)
        else:
            d_fd = np.where(M.clamp_interior(f_d, head.delta, head.symmetric_clamp), d_fdc, 0.0) + d_dom
        grads["head.W_c"] = d_fc.T @ h
        grads["head.b_c"] = d_fc.sum(axis=0)
        grads["head.W_d"] = (d_fd @ h)[None, :]
        grads["head.b_d"] = np.array([d_fd.sum()])
        d_h = d_fc @ head.W_c + d_fd[:, None] * head.W_d[0]
    else:
        grads["head.W"] = d_f.T @ h
        grads["head.b"] = d_f.sum(axis=0)
        d_h = d_f @ head.W

    enc = model.encoder
    w, _ = enc.pooler
    d_z = d_h * (1.0 - h * h)
    grads["pooler.W"] = d_z.T @ feats.inputs[-1]
    grads["pooler.b"] = d_z.sum(axis=0)
    d_x = d_z @ w
    for i in range(len(enc.blocks) - 1, -1, -1):
        w, _ = enc.blocks[i]
        d_z = d_x * (feats.layers[i] > 0.0)
        grads[f"block{i}.W"] = d_z.T @ feats.inputs[i]
        grads[f"block{i}.b"] = d_z.sum(axis=0)
        d_x = d_z @ w
    grads["embedding"] = feats.bag.T @ d_x

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    return float(np.mean(per_sample)), grads


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, p in params:
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


def optimizer_step(params, grads, optimizer):
    """Update ``params`` (a list of (name, array) pairs) in place."""
    optimizer.step(params, grads)


def _copy_arrays(model):
    return [a.copy() for _, a in model.named_arrays()]


def _restore(model, arrays):
    for (_, dst), src in zip(model.named_arrays(), arrays):
        dst[...] = src


def accuracy(model, batch):
    _, f = M.head_logits(M.encoder_forward_batch(batch.tokens, model.encoder).hidden, model.head)
    return float(np.mean(M.predict(f) == batch.labels))


def init_model(vocab, classes, cfg, rng):
    encoder = M.init_encoder(vocab.size, rng, cfg.d_emb, cfg.width, cfg.n_layers)
    if cfg.head_kind == "drm":
        head = M.init_drm_head(encoder.hidden_dim, len(classes), rng, cfg.delta, cfg.symmetric_clamp)
    else:
        head = M.init_linear_head(encoder.hidden_dim, len(classes), rng)
    return TrainedModel(encoder, head, vocab, tuple(classes))


def train(ind_train, ind_dev, cfg=TrainConfig()):
    """Train on IND data only; keeps the epoch with the best dev accuracy."""
    cfg.validate()
    ind_train.require_ind()
    ind_dev.require_ind()
    if tuple(ind_dev.classes) != tuple(ind_train.classes):
        raise InvalidConfig("train and dev class lists differ")
    rng = np.random.default_rng(cfg.seed)
    vocab = build_vocab(ind_train, cfg.min_freq)
    model = init_model(vocab, ind_train.classes, cfg, rng)
    train_batch = Batch.from_dataset(ind_train, vocab)
    dev_batch = Batch.from_dataset(ind_dev, vocab)
    params = model.named_arrays()
    opt = make_optimizer(cfg)

    best_acc, best_loss, best_epoch, best = -1.0, np.inf, 0, _copy_arrays(model)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_batch))
        for start in range(0, len(order), cfg.batch_size):
            loss, grads = backward(train_batch.subset(order[start:start + cfg.batch_size]), model, cfg)
            if not np.isfinite(loss):
                raise Diverged(f"loss became non-finite in epoch {epoch}")
            opt.step(params, grads)
        train_loss = total_loss(train_batch, model, cfg)
        dev_loss = total_loss(dev_batch, model, cfg)
        if not (np.isfinite(train_loss) and np.isfinite(dev_loss)):
            raise Diverged(f"loss became non-finite in epoch {epoch}")
        dev_acc = accuracy(model, dev_batch)
        history.append([epoch, train_loss, dev_loss, dev_acc])
        log.debug("epoch %d train_loss=%.6f dev_loss=%.6f dev_acc=%.4f", epoch, train_loss, dev_loss, dev_acc)
        # accuracy ties go to the lower IND dev loss
        if dev_acc > best_acc or (dev_acc == best_acc and dev_loss < best_loss):
            best_acc, best_loss, best_epoch, best = dev_acc, dev_loss, epoch, _copy_arrays(model)
    _restore(model, best)
    model.train_meta = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "format_version": FORMAT_VERSION,
        "best_epoch": best_epoch,
        "dev_accuracy": best_acc,
        "final_train_loss": total_loss(train_batch, model, cfg),
        "final_dev_loss": total_loss(dev_batch, model, cfg),
        "history": history,
    }
    return model


def config_from_meta(meta):
    cfg = meta.get("config", {})
    return replace(TrainConfig(), **{k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__})


# --- persistence -------------------------------------------------------------

def pack_blob(meta, arrays):
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(meta_bytes))
    body += meta_bytes
    for a in arrays:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return bytes(body)


def unpack_blob(data):
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptFile("not a model file (bad magic or too short)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"file format version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptFile("checksum mismatch (truncated or corrupted file)")
    end = 12 + meta_len
    try:
        meta = json.loads(data[12:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable metadata block: {exc}") from None
    arrays = {}
    offset = end
    for name, shape in meta["arrays"]:
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(data) - 4:
            raise CorruptFile("array data shorter than declared")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data) - 4:
        raise CorruptFile("trailing bytes after array data")
    return meta, arrays


def model_to_bytes(m):
    named = m.named_arrays()
    head = m.head
    meta = {
        "kind": "model",
        "head": head.kind,
        "n_blocks": len(m.encoder.blocks),
        "vocab": m.vocab.tokens(),
        "classes": list(m.classes),
        "train_meta": m.train_meta,
        "arrays": [[n, list(a.shape)] for n, a in named],
    }
    if isinstance(head, M.DRMHead):
        meta["delta"] = head.delta
        meta["symmetric_clamp"] = head.symmetric_clamp
    return pack_blob(meta, [a for _, a in named])


def model_from_bytes(data):
    meta, arrays = unpack_blob(data)
    if meta.get("kind") != "model":
        raise CorruptFile("file does not hold a model")
    blocks = [(arrays[f"block{i}.W"], arrays[f"block{i}.b"]) for i in range(meta["n_blocks"])]
    encoder = M.EncoderParams(arrays["embedding"], blocks, (arrays["pooler.W"], arrays["pooler.b"]))
    if meta["head"] == "drm":
        head = M.DRMHead(
            arrays["head.W_c"], arrays["head.b_c"], arrays["head.W_d"], arrays["head.b_d"],
            meta["delta"], meta["symmetric_clamp"],
        )
    else:
        head = M.LinearHead(arrays["head.W"], arrays["head.b"])
    return TrainedModel(encoder, head, Vocab.from_tokens(meta["vocab"]), tuple(meta["classes"]), meta["train_meta"])


def save_model(m, path):
    Path(path).write_bytes(model_to_bytes(m))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
