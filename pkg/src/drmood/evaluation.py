"""Threshold-free OOD metrics, IND accuracy, multi-seed statistics and analysis exports.

IND is the positive class throughout: a sample is accepted as IND when its
score clears the threshold, FPR counts accepted OOD samples and FNR rejected
IND samples.
"""
import csv
import math
import statistics
from dataclasses import dataclass

import numpy as np

from drmood.dataset import IND, OOD
from drmood.errors import DegenerateData, MixedDetectors, OneClassOnly, UnlabeledData
from drmood.numerics import pca_2d

METRIC_NAMES = ("eer", "fpr95", "detection_error", "detection_error_at_tpr95", "auroc", "aupr_in", "aupr_out")


def split_scores(records):
    ind = np.array([r.score for r in records if r.true_domain == IND], dtype=np.float64)
    ood = np.array([r.score for r in records if r.true_domain == OOD], dtype=np.float64)
    if ind.size == 0 or ood.size == 0:
        raise OneClassOnly(f"need IND and OOD records, got {ind.size} IND / {ood.size} OOD")
    return ind, ood


def _sweep(ind, ood):
    """Rates at every distinct score used as an inclusive threshold, highest first.

    Returns (thresholds, tp, fp) where tp/fp count scores >= threshold.
    """
    thresholds = np.unique(np.concatenate([ind, ood]))[::-1]
    ind_sorted = np.sort(ind)
    ood_sorted = np.sort(ood)
    tp = ind.size - np.searchsorted(ind_sorted, thresholds, side="left")
    fp = ood.size - np.searchsorted(ood_sorted, thresholds, side="left")
    return thresholds, tp, fp


def auroc_scores(ind, ood):
    ood_sorted = np.sort(ood)
    below = np.searchsorted(ood_sorted, ind, side="left")
    ties = np.searchsorted(ood_sorted, ind, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (ind.size * ood.size))


def aupr_scores(pos, neg):
    """Average precision with tied scores processed as one block."""
    _, tp, fp = _sweep(pos, neg)
    gained = np.diff(np.concatenate([[0], tp]))
    precision = tp / (tp + fp)
    return float(np.sum(gained * precision) / pos.size)


def fpr_at_tpr_scores(ind, ood, tpr_target=0.95):
    _, tp, fp = _sweep(ind, ood)
    tpr = tp / ind.size
    # highest threshold whose TPR reaches the target
    k = int(np.argmax(tpr >= tpr_target))
    return float(fp[k] / ood.size)


def detection_error_scores(ind, ood):
    """min over thresholds of 0.5 * P_IND(s <= t) + 0.5 * P_OOD(s > t)."""
    values = np.unique(np.concatenate([ind, ood]))
    candidates = np.concatenate([[-np.inf], 0.5 * (values[:-1] + values[1:]), [np.inf]])
    fnr = np.searchsorted(np.sort(ind), candidates, side="right") / ind.size
    fpr = 1.0 - np.searchsorted(np.sort(ood), candidates, side="right") / ood.size
    return float(np.min(0.5 * fnr + 0.5 * fpr))


def eer_scores(ind, ood):
    _, tp, fp = _sweep(ind, ood)
    fpr = np.concatenate([[0.0], fp / ood.size])
    fnr = np.concatenate([[1.0], 1.0 - tp / ind.size])
    diff = fpr - fnr
    exact = np.flatnonzero(diff == 0.0)
    if exact.size:
        return float(fpr[exact[0]])
    k = int(np.argmax(diff > 0.0))
    # diff goes from negative at k-1 to positive at k; both rates are linear along the segment
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(fpr[k - 1] + lam * (fpr[k] - fpr[k - 1]))


def auroc(records):
    return auroc_scores(*split_scores(records))


def aupr(records, positive=IND):
    ind, ood = split_scores(records)
    if positive == IND:
        return aupr_scores(ind, ood)
    if positive == OOD:
        return aupr_scores(-ood, -ind)
    raise ValueError(f"positive must be IND or OOD, got {positive!r}")


def fpr_at_tpr(records, tpr_target=0.95):
    return fpr_at_tpr_scores(*split_scores(records), tpr_target)


def detection_error(records):
    return detection_error_scores(*split_scores(records))


def eer(records):
    return eer_scores(*split_scores(records))


@dataclass(frozen=True)
class MetricReport:
    detector: str
    eer: float
    fpr95: float
    detection_error: float
    detection_error_at_tpr95: float
    auroc: float
    aupr_in: float
    aupr_out: float
    n_ind: int
    n_ood: int


def metric_report(records, detector=None):
    if detector is None:
        names = {r.detector for r in records}
        if len(names) != 1:
            raise MixedDetectors(f"records mix detectors {sorted(names)}")
        detector = names.pop()
    ind, ood = split_scores(records)
    fpr95 = fpr_at_tpr_scores(ind, ood, 0.95)
    return MetricReport(
        detector=detector,
        eer=eer_scores(ind, ood),
        fpr95=fpr95,
        detection_error=detection_error_scores(ind, ood),
        detection_error_at_tpr95=0.5 * (1.0 - 0.95) + 0.5 * fpr95,
        auroc=auroc_scores(ind, ood),
        aupr_in=aupr_scores(ind, ood),
        aupr_out=aupr_scores(-ood, -ind),
        n_ind=int(ind.size),
        n_ood=int(ood.size),
    )


def reports_by_detector(records):
    groups = {}
    for r in records:
        groups.setdefault(r.detector, []).append(r)
    return [metric_report(groups[name], name) for name in sorted(groups)]


REPORT_HEADER = ["detector", "eer", "fpr95", "det_err", "det_err_tpr95", "auroc", "aupr_in", "aupr_out", "n_ind", "n_ood"]


def report_row(rep):
    vals = [rep.eer, rep.fpr95, rep.detection_error, rep.detection_error_at_tpr95, rep.auroc, rep.aupr_in, rep.aupr_out]
    return [rep.detector] + [f"{v:.6f}" for v in vals] + [str(rep.n_ind), str(rep.n_ood)]


def write_reports_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for rep in reports:
            w.writerow(report_row(rep))


def ind_accuracy(model, ind_test):
    if ind_test.domain_tag != IND or any(u.label is None for u in ind_test.utterances):
        raise UnlabeledData("accuracy needs a labeled IND test set")
    if len(ind_test) == 0:
        raise UnlabeledData("empty test set")
    labels = ind_test.label_indices()
    pred = model.predict(ind_test.texts)
    return float(np.mean(pred == labels))


# --- significance testing ------------------------------------------------------

def _betacf(a, b, x, tol=1e-15, max_iter=1000):
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    if math.isinf(t):
        return 0.0
    return betainc_regularized(0.5 * df, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    degenerate: bool = False


def welch_ttest(sample_a, sample_b):
    """Welch's unequal-variance t-test with a two-sided p-value.

    When both samples are constant the statistic is undefined; the result is
    flagged ``degenerate`` with p = 1 for equal means and p = 0 otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    ma, mb = float(a.mean()), float(b.mean())
    va = float(a.var(ddof=1)) / a.size
    vb = float(b.var(ddof=1)) / b.size
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return TTestResult(0.0, 1.0, float("nan"), degenerate=True)
        return TTestResult(math.copysign(math.inf, ma - mb), 0.0, float("nan"), degenerate=True)
    t = (ma - mb) / math.sqrt(se2)
    # Welch-Satterthwaite, written with variance shares so tiny variances cannot underflow
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra * ra / (a.size - 1) + rb * rb / (b.size - 1))
    return TTestResult(t, student_t_two_sided_p(t, df), df)


# --- multi-seed aggregation ----------------------------------------------------

@dataclass(frozen=True)
class SeedAggregate:
    detector: str
    reports: tuple
    mean: dict
    std: dict

    @property
    def n_seeds(self):
        return len(self.reports)


def aggregate_seeds(reports):
    reports = tuple(reports)
    if len(reports) < 2:
        raise ValueError("aggregation needs at least 2 reports")
    names = {r.detector for r in reports}
    if len(names) != 1:
        raise MixedDetectors(f"reports mix detectors {sorted(names)}")
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [float(getattr(r, name)) for r in reports]
        # statistics works in exact arithmetic: identical values give std exactly 0
        mean[name] = statistics.mean(vals)
        std[name] = statistics.stdev(vals)
    return SeedAggregate(names.pop(), reports, mean, std)


AGGREGATE_HEADER = ["detector", "n_seeds"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]


def write_aggregates_csv(aggs, path, comparisons=()):
    """Aggregate table; ``comparisons`` are (name_a, name_b, metric, TTestResult) rows appended below."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for agg in aggs:
            row = [agg.detector, str(agg.n_seeds)]
            for m in METRIC_NAMES:
                row += [f"{agg.mean[m]:.6f}", f"{agg.std[m]:.6f}"]
            w.writerow(row)
        if comparisons:
            w.writerow([])
            w.writerow(["detector_a", "detector_b", "metric", "t", "df", "p_value", "degenerate"])
            for a, b, metric, res in comparisons:
                w.writerow([a, b, metric, f"{res.t:.6f}", f"{res.df:.6f}", f"{res.p:.6g}", str(res.degenerate).lower()])


# --- analysis exports -----------------------------------------------------------

HISTOGRAM_HEADER = ["bin_lo", "bin_hi", "count_ind", "count_ood"]


def histogram_export(records, n_bins=20):
    """Equal-width bins over [min, max] of all scores, counts split by domain."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if not records:
        return []
    scores = np.array([r.score for r in records])
    is_ind = np.array([r.true_domain == IND for r in records])
    lo, hi = float(scores.min()), float(scores.max())
    edges = np.linspace(lo, hi, n_bins + 1)
    if hi > lo:
        idx = np.clip(((scores - lo) / (hi - lo) * n_bins).astype(np.int64), 0, n_bins - 1)
    else:
        idx = np.zeros(scores.size, dtype=np.int64)
    c_ind = np.bincount(idx[is_ind], minlength=n_bins)
    c_ood = np.bincount(idx[~is_ind], minlength=n_bins)
    return [(float(edges[i]), float(edges[i + 1]), int(c_ind[i]), int(c_ood[i])) for i in range(n_bins)]


PROJECTION_HEADER = ["sample_id", "x", "y", "domain"]


def projection_export(model, ind_test, ood_test):
    """2-D PCA of pooled hidden states of both sets, projected jointly."""
    utts = list(ind_test.utterances) + list(ood_test.utterances)
    domains = [ind_test.domain_tag] * len(ind_test) + [ood_test.domain_tag] * len(ood_test)
    if len(utts) < 3:
        raise DegenerateData("projection needs at least 3 samples")
    hidden = model.features([u.text for u in utts]).hidden
    xy = pca_2d(hidden)
    return [(u.id, float(p[0]), float(p[1]), d) for u, p, d in zip(utts, xy, domains)]


def write_rows_csv(header, rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
