"""Desk-scale comparison recipe: synthetic IND/OOD corpus, Linear vs DRM heads, all detectors."""
from dataclasses import dataclass, field, replace

import numpy as np

from drmood import dataset as D
from drmood.model import drm_forward_batch
from drmood.evaluation import aggregate_seeds, ind_accuracy, metric_report
from drmood.scoring import DETECTOR_NAMES, Detector, fit_gaussian_stats, score_dataset
from drmood.training import TrainConfig, sigmoid, train

DEFAULT_SPLIT = (2 / 3, 1 / 6, 1 / 6)


@dataclass(frozen=True)
class Recipe:
    synth: D.SynthConfig = D.SynthConfig()
    train: TrainConfig = TrainConfig()
    split: tuple = DEFAULT_SPLIT
    detectors: tuple = DETECTOR_NAMES
    temperature: float = 1000.0
    lambda_rel: float = 1e-3
    heads: tuple = ("linear", "drm")


@dataclass
class SeedResult:
    seed: int
    accuracy: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)  # (head, detector) -> MetricReport
    domain_sigmoid: dict = field(default_factory=dict)  # head -> (mean on IND train, mean on OOD)


def make_corpus(recipe, seed):
    ind, ood = D.synth_generate(replace(recipe.synth, seed=seed))
    train_ds, dev_ds, test_ds = D.split(ind, recipe.split, seed=seed)
    return train_ds, dev_ds, test_ds, ood


def mean_domain_sigmoid(model, ds):
    hidden = model.features(ds.texts).hidden
    _, f_d, _, _ = drm_forward_batch(hidden, model.head)
    return float(np.mean(sigmoid(f_d)))


def run_seed(recipe, seed):
    train_ds, dev_ds, test_ds, ood = make_corpus(recipe, seed)
    out = SeedResult(seed)
    for head in recipe.heads:
        model = train(train_ds, dev_ds, replace(recipe.train, head_kind=head, seed=seed))
        out.accuracy[head] = ind_accuracy(model, test_ds)
        needs_stats = any(Detector(k).needs_stats for k in recipe.detectors)
        stats = fit_gaussian_stats(model, train_ds, recipe.lambda_rel) if needs_stats else None
        for kind in recipe.detectors:
            det = Detector(kind, recipe.temperature)
            records = score_dataset(model, stats, det, test_ds) + score_dataset(model, stats, det, ood)
            out.reports[(head, kind)] = metric_report(records, f"{head}/{kind}")
        if head == "drm":
            out.domain_sigmoid[head] = (mean_domain_sigmoid(model, train_ds), mean_domain_sigmoid(model, ood))
    return out


def run_recipe(recipe=Recipe(), seeds=range(5)):
    return [run_seed(recipe, s) for s in seeds]


def summarize(results):
    """Aggregate per (head, detector) over seeds plus mean accuracies per head."""
    keys = results[0].reports.keys()
    aggs = {k: aggregate_seeds([r.reports[k] for r in results]) for k in keys}
    acc = {h: float(np.mean([r.accuracy[h] for r in results])) for h in results[0].accuracy}
    return aggs, acc
