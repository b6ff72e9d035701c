"""Utterance corpora: JSONL loading, vocabulary, tokenization, synthesis and splitting."""
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drmood.errors import (
    EmptyVocab,
    InvalidConfig,
    MixedLabeling,
    OODInTraining,
    ParseError,
    TooFewSamples,
)

IND = "IND"
OOD = "OOD"
OOV_ID = 0


@dataclass(frozen=True)
class Utterance:
    id: str
    text: str
    label: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ParseError(f"utterance {self.id!r} has empty text")


@dataclass(frozen=True)
class Dataset:
    utterances: tuple
    classes: tuple
    domain_tag: str

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.domain_tag not in (IND, OOD):
            raise ValueError(f"domain_tag must be IND or OOD, got {self.domain_tag!r}")
        if self.domain_tag == OOD:
            if any(u.label is not None for u in self.utterances):
                raise MixedLabeling("OOD datasets must not carry labels")
        else:
            known = set(self.classes)
            for u in self.utterances:
                if u.label is None:
                    raise MixedLabeling(f"IND utterance {u.id!r} has no label")
                if u.label not in known:
                    raise ParseError(f"label {u.label!r} not in class list")

    def __len__(self):
        return len(self.utterances)

    @property
    def texts(self):
        return [u.text for u in self.utterances]

    @property
    def ids(self):
        return [u.id for u in self.utterances]

    def label_indices(self):
        if self.domain_tag != IND:
            raise OODInTraining("OOD dataset has no labels")
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[u.label] for u in self.utterances], dtype=np.int64)

    def require_ind(self):
        if self.domain_tag != IND:
            raise OODInTraining("operation accepts IND data only")
        return self


def load_jsonl(path):
    path = Path(path)
    utterances = []
    labeled = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                raise ParseError("expected an object with a string 'text' field", line=lineno)
            label = obj.get("label")
            if label is not None and not isinstance(label, str):
                raise ParseError("'label' must be a string", line=lineno)
            uid = obj.get("id", f"row{lineno - 1}")
            if not obj["text"].strip():
                raise ParseError("empty text", line=lineno)
            utterances.append(Utterance(str(uid), obj["text"], label))
            labeled.append(label is not None)
    if not utterances:
        raise ParseError(f"EmptyDataset: {path} has no utterances")
    if any(labeled) and not all(labeled):
        first = labeled.index(not labeled[0]) + 1
        raise MixedLabeling(f"{path}: utterance {first} breaks the labeling of the file")
    if labeled[0]:
        classes = sorted({u.label for u in utterances})
        return Dataset(utterances, classes, IND)
    return Dataset(utterances, (), OOD)


def write_jsonl(ds, path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u in ds.utterances:
            obj = {"id": u.id, "text": u.text}
            if u.label is not None:
                obj["label"] = u.label
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def tokenize(text):
    return text.lower().split()


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict = field(default_factory=dict)

    @property
    def size(self):
        return len(self.token_to_id) + 1

    def tokens(self):
        """Tokens ordered by id (id 0, the OOV slot, excluded)."""
        return sorted(self.token_to_id, key=self.token_to_id.__getitem__)

    @classmethod
    def from_tokens(cls, tokens):
        return cls({t: i for i, t in enumerate(tokens, start=1)})


def build_vocab(ds, min_freq=1):
    ds.require_ind()
    counts = Counter(tok for text in ds.texts for tok in tokenize(text))
    kept = sorted(t for t, n in counts.items() if n >= min_freq)
    if not kept:
        raise EmptyVocab(f"no token occurs at least {min_freq} times")
    return Vocab.from_tokens(kept)


def encode(text, vocab):
    ids = [vocab.token_to_id.get(tok, OOV_ID) for tok in tokenize(text)]
    return ids or [OOV_ID]


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 4
    vocab_per_class: int = 30
    utterance_length_range: tuple = (4, 10)
    samples_per_class: int = 300
    ood_samples: int = 200
    vocab_overlap_fraction: float = 0.1
    seed: int = 0
    # fraction of every class block taken from a pool common to all IND classes
    class_shared_fraction: float = 0.2

    def validate(self):
        lo, hi = self.utterance_length_range
        counts = (self.n_classes, self.vocab_per_class, self.samples_per_class, self.ood_samples, lo, hi)
        if any(int(c) != c or c <= 0 for c in counts):
            raise InvalidConfig("synth counts must be positive integers")
        if lo > hi:
            raise InvalidConfig("utterance_length_range must be (min, max) with min <= max")
        if self.n_classes < 2:
            raise InvalidConfig("need at least 2 IND classes")
        for name in ("vocab_overlap_fraction", "class_shared_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        if self.class_shared_fraction >= 1.0:
            raise InvalidConfig("class_shared_fraction must leave class-specific tokens")
        return self


def synth_blocks(cfg):
    """Vocabulary blocks: one per IND class plus the OOD block."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    v = cfg.vocab_per_class
    n_shared = int(round(cfg.class_shared_fraction * v))
    shared = [f"com{j}" for j in range(n_shared)]
    class_blocks = [[f"c{k}w{j}" for j in range(v - n_shared)] + shared for k in range(cfg.n_classes)]
    ind_vocab = sorted({t for block in class_blocks for t in block})
    n_overlap = int(round(cfg.vocab_overlap_fraction * v))
    picked = rng.choice(len(ind_vocab), size=min(n_overlap, len(ind_vocab)), replace=False)
    borrowed = [ind_vocab[i] for i in sorted(picked)]
    ood_block = borrowed + [f"ood{j}" for j in range(v - len(borrowed))]
    return class_blocks, ood_block


def _draw(rng, block, lo, hi):
    length = int(rng.integers(lo, hi + 1))
    idx = rng.integers(0, len(block), size=length)
    return " ".join(block[i] for i in idx)


def synth_generate(cfg):
    """Generate (ind, ood) corpora; deterministic in ``cfg.seed``."""
    class_blocks, ood_block = synth_blocks(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    lo, hi = cfg.utterance_length_range
    classes = [f"intent{k}" for k in range(cfg.n_classes)]
    ind = []
    for k, block in enumerate(class_blocks):
        for i in range(cfg.samples_per_class):
            ind.append(Utterance(f"ind{k}-{i:05d}", _draw(rng, block, lo, hi), classes[k]))
    ood = [Utterance(f"ood-{i:05d}", _draw(rng, ood_block, lo, hi)) for i in range(cfg.ood_samples)]
    return Dataset(ind, classes, IND), Dataset(ood, (), OOD)


def split(ds, ratios=(0.8, 0.1, 0.1), seed=0):
    """Stratified (train, dev, test) split; unlabeled data is treated as one stratum."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidConfig(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    groups = {}
    for i, u in enumerate(ds.utterances):
        groups.setdefault(u.label, []).append(i)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for key in sorted(groups, key=lambda k: (k is not None, k or "")):
        members = groups[key]
        if len(members) < 3:
            raise TooFewSamples(f"class {key!r} has {len(members)} examples; need at least 3")
        order = [members[j] for j in rng.permutation(len(members))]
        n = len(order)
        n_train = max(1, int(round(ratios[0] * n)))
        n_dev = max(1, int(round(ratios[1] * n)))
        n_train = min(n_train, n - 2)
        n_dev = min(n_dev, n - n_train - 1)
        parts[0].extend(order[:n_train])
        parts[1].extend(order[n_train:n_train + n_dev])
        parts[2].extend(order[n_train + n_dev:])
    return tuple(
        Dataset([ds.utterances[i] for i in sorted(p)], ds.classes, ds.domain_tag) for p in parts
    )
