"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed in the
"acceptance criteria" section at the end of the session.
"""
import contextlib
import io
import math
import re
import time

import numpy as np
import pytest

from drmood import cli
from drmood import dataset as D
from drmood import evaluation as E
from drmood import scoring as S
from drmood import training as T
from drmood.errors import CorruptFile, VersionMismatch
from drmood.experiment import Recipe, run_seed
from drmood.numerics import CholeskyFactor

import gradcheck as G
import metric_oracles as O
from conftest import ACCEPTANCE_LINES

N_SEEDS = 10


def record(key, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return ok


def default_recipe():
    cp = cli.load_config()
    score = cli.detectors_from(cli._get(cp, "score", "detectors", cli._list), cli._get(cp, "score", "temperature", float))
    return Recipe(
        synth=cli.synth_config(cp),
        train=cli.train_config(cp),
        split=cli._get(cp, "synth", "split", cli._ratios),
        detectors=tuple(d.kind for d in score),
        temperature=score[0].temperature,
        lambda_rel=cli._get(cp, "score", "lambda_rel", float),
    )


@pytest.fixture(scope="module")
def experiment():
    recipe = default_recipe()
    t0 = time.perf_counter()
    results = [run_seed(recipe, s) for s in range(N_SEEDS)]
    return recipe, results, time.perf_counter() - t0


def test_criterion_1_overconfidence_demo():
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = cli.main(["demo-overconfidence"])
    elapsed = time.perf_counter() - t0
    out = buf.getvalue()
    p_c = [float(v) for v in re.findall(r"([\d.]+)%", out.split("softmax(f_c)")[1].splitlines()[0])]
    p = [float(v) for v in re.findall(r"([\d.]+)%", out.split("softmax(f) ")[1].splitlines()[0])]
    ok = (
        code == 0
        and all(abs(a - b) <= 0.5 for a, b in zip(p_c, (42.6, 57.4)))
        and all(abs(a - b) <= 0.5 for a, b in zip(p, (4.7, 95.3)))
        and len(p_c) == len(p) == 2
        and elapsed < 1.0
    )
    record(1, ok, f"softmax(f_c)={p_c}% softmax(f)={p}% in {elapsed:.3f}s (need 42.6/57.4, 4.7/95.3 +-0.5, <1s)")
    assert ok


def test_criterion_2_gradient_correctness():
    t0 = time.perf_counter()
    worst, branches, kinds = G.run_gradient_checks(n_cases=50, seed=2024)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and branches == {"interior", "upper", "lower"} and elapsed < 60
    record(2, ok, f"50 cases, max rel err {worst:.2e} (<=1e-4), clamp branches {sorted(branches)}, "
                  f"heads {sorted(kinds)}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(31337)
    t0 = time.perf_counter()
    worst = {"auroc": 0.0, "aupr_in": 0.0, "aupr_out": 0.0, "fpr95": 0.0, "detection_error": 0.0, "eer": 0.0}
    complement_exact = monotone_exact = True
    n_ties = 0
    for _ in range(200):
        ind, ood = O.random_score_set(rng)
        li, lo = list(ind), list(ood)
        n_ties += len(set(li) | set(lo)) < len(li) + len(lo)
        got = {
            "auroc": E.auroc_scores(ind, ood),
            "aupr_in": E.aupr_scores(ind, ood),
            "aupr_out": E.aupr_scores(-ood, -ind),
            "fpr95": E.fpr_at_tpr_scores(ind, ood),
            "detection_error": E.detection_error_scores(ind, ood),
            "eer": E.eer_scores(ind, ood),
        }
        want = {
            "auroc": O.auroc(li, lo),
            "aupr_in": O.aupr(li, lo),
            "aupr_out": O.aupr([-s for s in lo], [-s for s in li]),
            "fpr95": O.fpr_at_tpr(li, lo),
            "detection_error": O.detection_error(li, lo),
            "eer": O.eer_grid(ind, ood),
        }
        for k in worst:
            worst[k] = max(worst[k], abs(got[k] - want[k]))
        complement_exact &= got["auroc"] + E.auroc_scores(ood, ind) == 1.0
        f = lambda x: np.exp(0.5 * x) - 3.0
        transformed = (
            E.auroc_scores(f(ind), f(ood)), E.aupr_scores(f(ind), f(ood)), E.aupr_scores(-f(ood), -f(ind)),
            E.fpr_at_tpr_scores(f(ind), f(ood)), E.detection_error_scores(f(ind), f(ood)),
            E.eer_scores(f(ind), f(ood)),
        )
        monotone_exact &= transformed == tuple(got[k] for k in
                                               ("auroc", "aupr_in", "aupr_out", "fpr95", "detection_error", "eer"))
    elapsed = time.perf_counter() - t0
    within = all(v <= 1e-9 for k, v in worst.items() if k != "eer") and worst["eer"] <= 1e-3
    ok = within and complement_exact and monotone_exact and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, ok, f"200 sets ({n_ties} with ties), max |err| {detail}; complement exact={complement_exact}, "
                  f"monotone exact={monotone_exact}, {elapsed:.1f}s")
    assert ok


def _mean(results, head, kind):
    return float(np.mean([r.reports[(head, kind)].auroc for r in results]))


def test_criterion_4_directional_replication(experiment):
    recipe, results, elapsed = experiment
    acc = {h: float(np.mean([r.accuracy[h] for r in results])) for h in ("drm", "linear")}
    conf = {h: _mean(results, h, "confidence") for h in ("drm", "linear")}
    lm = {h: _mean(results, h, "l_maha") for h in ("drm", "linear")}
    last = {h: _mean(results, h, "maha_last") for h in ("drm", "linear")}
    a = acc["drm"] >= acc["linear"] - 0.005
    b = conf["drm"] >= conf["linear"]
    c = all(lm[h] >= last[h] for h in lm)
    d = all(lm[h] >= 0.90 for h in lm) and recipe.synth.vocab_overlap_fraction == 0.1
    ok = a and b and c and d and elapsed < 300
    record(4, ok, f"(a) acc drm {acc['drm']:.4f} vs linear {acc['linear']:.4f} [{a}]; "
                  f"(b) conf AUROC drm {conf['drm']:.4f} vs linear {conf['linear']:.4f} [{b}]; "
                  f"(c) L-Maha vs last drm {lm['drm']:.4f}/{last['drm']:.4f}, "
                  f"linear {lm['linear']:.4f}/{last['linear']:.4f} [{c}]; (d) L-Maha >= 0.90 [{d}]; "
                  f"{N_SEEDS} seeds in {elapsed:.1f}s")
    assert ok


def test_criterion_5_domain_loss_effect(experiment):
    _, results, _ = experiment
    ind = [r.domain_sigmoid["drm"][0] for r in results]
    ood = [r.domain_sigmoid["drm"][1] for r in results]
    high = all(v > 0.9 for v in ind)
    lower = sum(o < i for i, o in zip(ind, ood))
    ok = high and lower == N_SEEDS
    record(5, ok, f"mean sigmoid(f_d) on IND train min {min(ind):.4f} (>0.9: {high}); "
                  f"OOD strictly lower in {lower}/{N_SEEDS} seeds (need {N_SEEDS}/{N_SEEDS}); "
                  f"IND {np.round(ind, 4).tolist()} OOD {np.round(ood, 4).tolist()}")
    assert ok


def _rejects(data, error):
    try:
        T.model_from_bytes(data)
    except error:
        return True
    return False


def test_criterion_6_determinism_and_persistence(tmp_path):
    recipe = default_recipe()
    ind, ood = D.synth_generate(recipe.synth)
    train_ds, dev_ds, test_ds = D.split(ind, recipe.split, seed=recipe.synth.seed)
    models = [T.train(train_ds, dev_ds, recipe.train) for _ in range(2)]
    blobs = [T.model_to_bytes(m) for m in models]
    same_model = blobs[0] == blobs[1]

    csvs = []
    for i, m in enumerate(models):
        stats = S.fit_gaussian_stats(m, train_ds, recipe.lambda_rel)
        recs = []
        for kind in recipe.detectors:
            det = S.Detector(kind, recipe.temperature)
            recs += S.score_dataset(m, stats, det, test_ds) + S.score_dataset(m, stats, det, ood)
        S.write_scores_csv(recs, tmp_path / f"s{i}.csv")
        csvs.append((tmp_path / f"s{i}.csv").read_bytes())
    same_scores = csvs[0] == csvs[1]

    T.save_model(models[0], tmp_path / "m.oods")
    back = T.load_model(tmp_path / "m.oods")
    bitwise = all(
        na == nb and a.tobytes() == b.tobytes()
        for (na, a), (nb, b) in zip(models[0].named_arrays(), back.named_arrays())
    ) and back.train_meta == models[0].train_meta and T.model_to_bytes(back) == blobs[0]

    truncated = blobs[0][:-7]
    short = blobs[0][:40]
    flipped = bytearray(blobs[0])
    flipped[len(flipped) // 3] ^= 0x01
    bumped = bytearray(blobs[0])
    bumped[4] = 2
    cases = [(truncated, CorruptFile), (short, CorruptFile), (bytes(flipped), CorruptFile),
             (bytes(bumped), VersionMismatch)]
    rejected = sum(_rejects(data, err) for data, err in cases)
    ok = same_model and same_scores and bitwise and rejected == 4
    record(6, ok, f"model bytes identical={same_model}, score CSV identical={same_scores}, "
                  f"round-trip bitwise={bitwise}, corrupted files rejected {rejected}/4")
    assert ok


def test_criterion_7_mahalanobis_correctness():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(20):
        dim, n_cls = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        mu = rng.normal(scale=2.0, size=(n_cls, dim))
        stats = S.GaussianLayerStats((mu,), (CholeskyFactor(np.eye(dim)),), (0.0,), 0.0)
        x = rng.normal(scale=3.0, size=(40, dim))
        oracle = -np.min(((x[:, None, :] - mu[None]) ** 2).sum(-1), axis=1)
        worst = max(worst, float(np.max(np.abs(S.maha_layer_scores(x, stats, 0) - oracle))))

    n = 2000
    true_means = np.array([[0.0, 0.0], [3.0, -1.0]])
    labels = np.repeat([0, 1], n // 2)
    feats = true_means[labels] + rng.normal(size=(n, 2))
    means, fac, ridge = S.fit_tied_gaussian(feats, labels, 2, S.DEFAULT_LAMBDA_REL)
    mean_err = float(np.max(np.abs(means - true_means)))
    bound = 3.0 / math.sqrt(n // 2)
    cov_err = float(np.linalg.norm(fac.reconstruct() - ridge * np.eye(2) - np.eye(2)))
    ok = worst <= 1e-9 and mean_err <= bound and cov_err <= 0.1
    record(7, ok, f"identity-covariance max |err| {worst:.1e} (<=1e-9); mean err {mean_err:.4f} "
                  f"(<= 3/sqrt(N_k) = {bound:.4f}); covariance Frobenius err {cov_err:.4f} (<=0.1)")
    assert ok


def _welford(values):
    n, mean, m2 = 0, 0.0, 0.0
    for v in values:
        n += 1
        d = v - mean
        mean += d / n
        m2 += d * (v - mean)
    return mean, math.sqrt(m2 / (n - 1))


def test_criterion_8_statistical_machinery(experiment):
    _, results, _ = experiment
    same = E.welch_ttest([0.91, 0.93, 0.92, 0.95], [0.91, 0.93, 0.92, 0.95])
    sep = E.welch_ttest([2.1, 2.0, 1.9, 2.2], [1.1, 1.0, 0.9, 1.2])
    worst = 0.0
    for key in results[0].reports:
        reps = [r.reports[key] for r in results]
        agg = E.aggregate_seeds(reps)
        for metric in E.METRIC_NAMES:
            m, s = _welford(getattr(r, metric) for r in reps)
            worst = max(worst, abs(agg.mean[metric] - m), abs(agg.std[metric] - s))
    ok = same.t == 0.0 and same.p == 1.0 and sep.p < 0.01 and worst <= 1e-12
    record(8, ok, f"identical samples t={same.t} p={same.p}; separated fixture p={sep.p:.2e} (<0.01); "
                  f"{N_SEEDS}-seed aggregation max |diff| vs streaming oracle {worst:.1e} (<=1e-12)")
    assert ok
