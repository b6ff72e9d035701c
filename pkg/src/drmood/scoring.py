"""OOD detectors: softmax confidence, ODIN, entropy, last-layer and multi-layer Mahalanobis.

Every detector is oriented so that a higher score means "more in-domain".
Confidence-style scores use the class logits f_c of a DRM head (the raw
logits of a Linear head) unless ``score_on_f`` is set.
"""
import csv
from dataclasses import dataclass

import numpy as np

from drmood import model as M
from drmood.dataset import IND
from drmood.errors import (
    ClassTooSmall,
    DimensionMismatch,
    FitFailed,
    MissingStats,
    NotSPD,
    OODInTraining,
    ParseError,
)
from drmood.numerics import CholeskyFactor, cholesky, class_quad_forms

DEFAULT_TEMPERATURE = 1000.0
DEFAULT_LAMBDA_REL = 1e-3

DETECTOR_NAMES = ("confidence", "odin", "entropy", "maha_last", "l_maha")
MAHALANOBIS_KINDS = ("maha_last", "l_maha")


@dataclass(frozen=True)
class Detector:
    kind: str
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.kind not in DETECTOR_NAMES:
            raise ValueError(f"unknown detector {self.kind!r}; choose from {', '.join(DETECTOR_NAMES)}")
        if not self.temperature > 0:
            raise ValueError("ODIN temperature must be positive")

    @property
    def name(self):
        return self.kind

    @property
    def needs_stats(self):
        return self.kind in MAHALANOBIS_KINDS


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    detector: str
    score: float
    true_domain: str


@dataclass(frozen=True)
class GaussianLayerStats:
    means: tuple  # per layer, (C, dim)
    factors: tuple  # per layer, CholeskyFactor of Sigma + ridge * I
    ridges: tuple
    lambda_rel: float

    @property
    def n_layers(self):
        return len(self.means)


def layer_feature_maps(layers):
    """tanh for every layer but the last, identity for the last."""
    n = len(layers)
    return [np.tanh(z) if i < n - 1 else z for i, z in enumerate(layers)]


def fit_tied_gaussian(features, labels, n_classes, lambda_rel=DEFAULT_LAMBDA_REL):
    """Class means and the ridge-regularized Cholesky factor of the shared covariance."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts < 2):
        raise ClassTooSmall(f"every class needs >= 2 samples, got counts {counts.tolist()}")
    means = np.stack([features[labels == c].mean(axis=0) for c in range(n_classes)])
    centered = features - means[labels]
    cov = centered.T @ centered / features.shape[0]
    cov = 0.5 * (cov + cov.T)
    dim = cov.shape[0]
    ridge = lambda_rel * np.trace(cov) / dim
    if not ridge > 0:
        # zero scatter: fall back to a ridge on the feature scale
        ridge = lambda_rel * max(float(np.mean(means**2)), 1.0)
    try:
        factor = cholesky(cov + ridge * np.eye(dim))
    except NotSPD as exc:
        raise FitFailed(f"{exc}; raise lambda_rel above {lambda_rel}") from None
    return means, factor, ridge


def fit_gaussian_stats(model, ind_train, lambda_rel=DEFAULT_LAMBDA_REL):
    """Fit per-layer tied-covariance Gaussians on IND training features."""
    if ind_train.domain_tag != IND:
        raise OODInTraining("Gaussian statistics may only be fitted on IND data")
    labels = ind_train.label_indices()
    layers = layer_feature_maps(model.features(ind_train.texts).layers)
    means, factors, ridges = [], [], []
    for z in layers:
        mu, fac, ridge = fit_tied_gaussian(z, labels, len(model.classes), lambda_rel)
        means.append(mu)
        factors.append(fac)
        ridges.append(ridge)
    return GaussianLayerStats(tuple(means), tuple(factors), tuple(ridges), lambda_rel)


def maha_layer_scores(features, stats, layer):
    """Batched max over classes of the negative Mahalanobis distance at one layer."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not 0 <= layer < stats.n_layers:
        raise DimensionMismatch(f"layer {layer} outside 0..{stats.n_layers - 1}")
    d = class_quad_forms(features, stats.means[layer], stats.factors[layer])
    return -d.min(axis=1)


def maha_layer_score(features, stats, layer):
    return float(maha_layer_scores(np.asarray(features)[None, :], stats, layer)[0])


def _confidence_logits(model, texts, score_on_f):
    f_c, f = model.logits(texts)
    return f if score_on_f else f_c


def confidence_scores(model, texts, score_on_f=False):
    return M.softmax(_confidence_logits(model, texts, score_on_f)).max(axis=1)


def odin_scores(model, texts, temperature=DEFAULT_TEMPERATURE, score_on_f=False):
    return M.softmax(_confidence_logits(model, texts, score_on_f) / temperature).max(axis=1)


def entropy_scores(model, texts, score_on_f=False):
    logp = M.log_softmax(_confidence_logits(model, texts, score_on_f))
    # negated entropy: sum p log p
    return np.sum(np.exp(logp) * logp, axis=1)


def maha_last_scores(model, stats, texts):
    _require_stats(stats, model)
    hidden = model.features(texts).hidden
    return maha_layer_scores(hidden, stats, stats.n_layers - 1)


def l_maha_scores(model, stats, texts):
    _require_stats(stats, model)
    layers = layer_feature_maps(model.features(texts).layers)
    total = np.zeros(len(texts))
    for i, z in enumerate(layers):
        total = total + maha_layer_scores(z, stats, i)
    return total


def _require_stats(stats, model):
    if stats is None:
        raise MissingStats("Mahalanobis detectors need fitted Gaussian statistics")
    if stats.n_layers != model.encoder.n_layers:
        raise DimensionMismatch(f"stats cover {stats.n_layers} layers, model has {model.encoder.n_layers}")


def confidence_score(model, x, score_on_f=False):
    return float(confidence_scores(model, [x], score_on_f)[0])


def odin_score(model, x, temperature=DEFAULT_TEMPERATURE, score_on_f=False):
    return float(odin_scores(model, [x], temperature, score_on_f)[0])


def entropy_score(model, x, score_on_f=False):
    return float(entropy_scores(model, [x], score_on_f)[0])


def maha_last_score(model, stats, x):
    return float(maha_last_scores(model, stats, [x])[0])


def l_maha_score(model, stats, x):
    return float(l_maha_scores(model, stats, [x])[0])


def detector_scores(model, stats, detector, texts, score_on_f=False):
    if not texts:
        return np.zeros(0)
    kind = detector.kind
    if kind == "confidence":
        return confidence_scores(model, texts, score_on_f)
    if kind == "odin":
        return odin_scores(model, texts, detector.temperature, score_on_f)
    if kind == "entropy":
        return entropy_scores(model, texts, score_on_f)
    if kind == "maha_last":
        return maha_last_scores(model, stats, texts)
    return l_maha_scores(model, stats, texts)


def score_dataset(model, stats, detector, ds, score_on_f=False, label=None):
    """One ScoreRecord per utterance, ordered by sample id."""
    if detector.needs_stats and stats is None:
        raise MissingStats(f"detector {detector.name} needs fitted Gaussian statistics")
    order = sorted(range(len(ds)), key=lambda i: ds.utterances[i].id)
    texts = [ds.utterances[i].text for i in order]
    scores = detector_scores(model, stats, detector, texts, score_on_f)
    name = f"{label}/{detector.name}" if label else detector.name
    return [
        ScoreRecord(ds.utterances[i].id, name, float(s), ds.domain_tag)
        for i, s in zip(order, scores)
    ]


SCORE_HEADER = ["sample_id", "detector", "score", "domain"]


def write_scores_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in records:
            w.writerow([r.sample_id, r.detector, f"{r.score:.17g}", r.true_domain])


def read_scores_csv(path):
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ParseError(f"{path}: expected header {','.join(SCORE_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}: expected 4 columns", line=lineno)
            try:
                score = float(row[2])
            except ValueError:
                raise ParseError(f"{path}: bad score {row[2]!r}", line=lineno) from None
            if row[3] not in ("IND", "OOD") or not np.isfinite(score):
                raise ParseError(f"{path}: bad domain or non-finite score", line=lineno)
            records.append(ScoreRecord(row[0], row[1], score, row[3]))
    return records


def stats_arrays(stats):
    out = []
    for i, (mu, fac) in enumerate(zip(stats.means, stats.factors)):
        out += [(f"layer{i}.means", mu), (f"layer{i}.chol", np.asarray(fac.lower))]
    return out


def stats_from_arrays(arrays, ridges, lambda_rel):
    n = len(ridges)
    means = tuple(arrays[f"layer{i}.means"] for i in range(n))
    factors = []
    for i in range(n):
        lower = arrays[f"layer{i}.chol"]
        lower.setflags(write=False)
        factors.append(CholeskyFactor(lower))
    return GaussianLayerStats(means, tuple(factors), tuple(ridges), lambda_rel)
