"""Command-line interface: synth, train, score, eval, export, experiment, demo-overconfidence.

Exit codes: 0 success, 2 config/validation error, 3 data error, 4 numeric failure.
"""
import argparse
import configparser
import csv
import hashlib
import logging
import os
import sys
import zlib
from dataclasses import asdict, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from drmood import dataset as D
from drmood import evaluation as E
from drmood import model as M
from drmood import scoring as S
from drmood import training as T
from drmood.experiment import Recipe, run_seed
from drmood.errors import InvalidConfig, MissingStats, OODSError, ParseError

log = logging.getLogger("drmood")

DATA_FILES = {
    "train": "ind_train.jsonl",
    "dev": "ind_dev.jsonl",
    "test": "ind_test.jsonl",
    "ood": "ood_test.jsonl",
}


# --- configuration -----------------------------------------------------------

def default_config_text():
    return resources.files("drmood").joinpath("recipes/default.ini").read_text(encoding="utf-8")


def load_config(path=None):
    cp = configparser.ConfigParser()
    cp.read_string(default_config_text())
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise InvalidConfig(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        # relative data paths resolve against the config file
        if cp.has_section("data"):
            for key, value in cp.items("data"):
                p = Path(value)
                if not p.is_absolute():
                    cp.set("data", key, str((path.parent / p).resolve()))
    return cp


def _get(cp, section, key, conv, fallback=None):
    try:
        raw = cp.get(section, key, fallback=None)
        if raw is None:
            return fallback
        return conv(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise InvalidConfig(f"[{section}] {key}: {exc}") from None


def _bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(raw):
    return [p.strip() for p in raw.split(",") if p.strip()]


def _ratios(raw):
    return tuple(float(Fraction(p)) for p in _list(raw))


def synth_config(cp, seed=None):
    s = "synth"
    cfg = D.SynthConfig(
        n_classes=_get(cp, s, "n_classes", int),
        vocab_per_class=_get(cp, s, "vocab_per_class", int),
        utterance_length_range=(_get(cp, s, "length_min", int), _get(cp, s, "length_max", int)),
        samples_per_class=_get(cp, s, "samples_per_class", int),
        ood_samples=_get(cp, s, "ood_samples", int),
        vocab_overlap_fraction=_get(cp, s, "overlap", float),
        seed=seed if seed is not None else _get(cp, s, "seed", int),
        class_shared_fraction=_get(cp, s, "shared_fraction", float),
    )
    return cfg.validate()


def train_config(cp, seed=None, head=None, delta=None):
    s = "train"
    kw = {}
    for name, field in T.TrainConfig.__dataclass_fields__.items():
        key = "head" if name == "head_kind" else name
        if cp.has_option(s, key):
            conv = {bool: _bool, int: int, float: float, str: str}[type(field.default)]
            kw[name] = _get(cp, s, key, conv)
    cfg = replace(T.TrainConfig(), **kw)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if head is not None:
        cfg = replace(cfg, head_kind=head)
    if delta is not None:
        cfg = replace(cfg, delta=delta)
    return cfg.validate()


def detectors_from(names, temperature):
    out = []
    for name in names:
        try:
            out.append(S.Detector(name.strip().lower(), temperature))
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from None
    if not out:
        raise InvalidConfig("no detectors requested")
    return out


def write_resolved_config(cp, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "resolved_config.ini").open("w", encoding="utf-8") as fh:
        cp.write(fh)


def _set(cp, section, key, value):
    if not cp.has_section(section):
        cp.add_section(section)
    cp.set(section, key, str(value))


# --- commands ----------------------------------------------------------------

def synth_to_dir(scfg, ratios, out_dir):
    ind, ood = D.synth_generate(scfg)
    parts = D.split(ind, ratios, seed=scfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, ds in zip(("train", "dev", "test", "ood"), parts + (ood,)):
        paths[key] = out_dir / DATA_FILES[key]
        D.write_jsonl(ds, paths[key])
    return paths, parts + (ood,)


def cmd_synth(args):
    cp = load_config(args.config)
    scfg = synth_config(cp, args.seed)
    _set(cp, "synth", "seed", scfg.seed)
    ratios = _get(cp, "synth", "split", _ratios)
    paths, sets = synth_to_dir(scfg, ratios, args.out)
    write_resolved_config(cp, args.out)
    for key, ds in zip(("train", "dev", "test", "ood"), sets):
        print(f"{paths[key].name}: {len(ds)} utterances")
    return 0


def _data_paths(cp, data_dir):
    if data_dir is not None:
        return {k: Path(data_dir) / f for k, f in DATA_FILES.items()}
    if cp.has_section("data"):
        return {k: Path(v) for k, v in cp.items("data") if k in DATA_FILES}
    raise InvalidConfig("no data: pass --data-dir or give a [data] section")


def cmd_train(args):
    cp = load_config(args.config)
    cfg = train_config(cp, args.seed, args.head, args.delta)
    paths = _data_paths(cp, args.data_dir)
    for key in ("train", "dev"):
        if key not in paths:
            raise InvalidConfig(f"[data] needs a '{key}' path")
    train_ds = D.load_jsonl(paths["train"])
    dev_ds = D.load_jsonl(paths["dev"])
    model = T.train(train_ds, dev_ds, cfg)
    out = Path(args.out)
    # stored relative to the model file so that data and model can move together
    model.train_meta["train_data"] = os.path.relpath(Path(paths["train"]).resolve(), out.parent.resolve())
    out.parent.mkdir(parents=True, exist_ok=True)
    T.save_model(model, out)
    for k, v in asdict(cfg).items():
        _set(cp, "train", "head" if k == "head_kind" else k, v)
    write_resolved_config(cp, out.parent)
    meta = model.train_meta
    print(f"head={cfg.head_kind} best_epoch={meta['best_epoch']} dev_accuracy={meta['dev_accuracy']:.6f}")
    print(f"final_train_loss={meta['final_train_loss']:.6f} final_dev_loss={meta['final_dev_loss']:.6f}")
    print(f"model written to {out}")
    return 0


def _recorded_train_data(model, model_path):
    rel = model.train_meta.get("train_data")
    return None if rel is None else Path(model_path).parent / rel


def _stats_cache_path(model_path):
    return Path(str(model_path) + ".stats")


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stats_for(model, model_path, train_path, lambda_rel):
    """Fit Gaussian stats, reusing the checksummed cache beside the model when it matches."""
    model_crc = zlib.crc32(Path(model_path).read_bytes()) & 0xFFFFFFFF
    digest = _file_digest(train_path)
    cache = _stats_cache_path(model_path)
    if cache.is_file():
        try:
            meta, arrays = T.unpack_blob(cache.read_bytes())
            if (meta.get("kind"), meta.get("model_crc"), meta.get("train_digest"), meta.get("lambda_rel")) == (
                "stats", model_crc, digest, lambda_rel
            ):
                return S.stats_from_arrays(arrays, meta["ridges"], lambda_rel)
        except OODSError:
            log.info("ignoring unreadable stats cache %s", cache)
    stats = S.fit_gaussian_stats(model, D.load_jsonl(train_path), lambda_rel)
    named = S.stats_arrays(stats)
    meta = {
        "kind": "stats",
        "model_crc": model_crc,
        "train_digest": digest,
        "lambda_rel": lambda_rel,
        "ridges": list(stats.ridges),
        "arrays": [[n, list(a.shape)] for n, a in named],
    }
    cache.write_bytes(T.pack_blob(meta, [a for _, a in named]))
    return stats


def cmd_score(args):
    cp = load_config(args.config)
    names = _list(args.detectors) if args.detectors else _get(cp, "score", "detectors", _list)
    temperature = args.temperature if args.temperature is not None else _get(cp, "score", "temperature", float)
    lambda_rel = args.lambda_rel if args.lambda_rel is not None else _get(cp, "score", "lambda_rel", float)
    score_on_f = _get(cp, "score", "score_on_f", _bool, False)
    detectors = detectors_from(names, temperature)
    model = T.load_model(args.model)
    stats = None
    if any(d.needs_stats for d in detectors):
        train_path = args.train_data or _recorded_train_data(model, args.model)
        if not train_path or not Path(train_path).is_file():
            raise MissingStats("Mahalanobis detectors need the IND training set; pass --train-data")
        stats = stats_for(model, args.model, train_path, lambda_rel)
    datasets = [D.load_jsonl(p) for p in args.datasets]
    records = []
    for det in detectors:
        for ds in datasets:
            records += S.score_dataset(model, stats, det, ds, score_on_f, label=args.label)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    S.write_scores_csv(records, out)
    _set(cp, "score", "detectors", ", ".join(d.name for d in detectors))
    _set(cp, "score", "temperature", temperature)
    _set(cp, "score", "lambda_rel", lambda_rel)
    write_resolved_config(cp, out.parent)
    print(f"{len(records)} score records written to {out}")
    return 0


def _seed_runs(seeds_dir):
    files = sorted(Path(seeds_dir).glob("*.csv"))
    if len(files) < 2:
        raise ParseError(f"{seeds_dir}: need at least 2 score CSVs to aggregate seeds")
    return [E.reports_by_detector(S.read_scores_csv(f)) for f in files]


def cmd_eval(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.seeds_dir is None:
        if args.scores is None:
            raise InvalidConfig("pass --scores CSV or --seeds-dir DIR")
        reports = E.reports_by_detector(S.read_scores_csv(args.scores))
        E.write_reports_csv(reports, out)
        for rep in reports:
            print(",".join(E.report_row(rep)))
        return 0
    runs = _seed_runs(args.seeds_dir)
    by_det = {}
    for reports in runs:
        for rep in reports:
            by_det.setdefault(rep.detector, []).append(rep)
    aggs = [E.aggregate_seeds(by_det[name]) for name in sorted(by_det)]
    comparisons = []
    if args.compare:
        a, b = args.compare
        for name in (a, b):
            if name not in by_det:
                raise InvalidConfig(f"unknown detector {name!r} in --compare; have {sorted(by_det)}")
        res = E.welch_ttest([getattr(r, args.metric) for r in by_det[a]], [getattr(r, args.metric) for r in by_det[b]])
        comparisons.append((a, b, args.metric, res))
    E.write_aggregates_csv(aggs, out, comparisons)
    for agg in aggs:
        print(f"{agg.detector}: auroc {agg.mean['auroc']:.4f} +- {agg.std['auroc']:.4f} over {agg.n_seeds} runs")
    for a, b, metric, res in comparisons:
        print(f"welch t-test {a} vs {b} on {metric}: t={res.t:.4f} p={res.p:.4g}")
    return 0


def cmd_export(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "histogram":
        if args.scores:
            records = S.read_scores_csv(args.scores)
            if args.detectors:
                keep = set(_list(args.detectors))
                records = [r for r in records if r.detector in keep or r.detector.split("/")[-1] in keep]
        else:
            if not args.model or not args.datasets:
                raise InvalidConfig("histogram needs --scores or --model with --datasets")
            model = T.load_model(args.model)
            det = detectors_from(_list(args.detectors or "confidence")[:1], args.temperature)[0]
            stats = None
            if det.needs_stats:
                train_path = args.train_data or _recorded_train_data(model, args.model)
                stats = stats_for(model, args.model, train_path, S.DEFAULT_LAMBDA_REL)
            records = []
            for p in args.datasets:
                records += S.score_dataset(model, stats, det, D.load_jsonl(p))
        names = {r.detector for r in records}
        if len(names) > 1:
            raise InvalidConfig(f"histogram over several detectors {sorted(names)}; filter with --detectors")
        rows = E.histogram_export(records, args.bins)
        E.write_rows_csv(E.HISTOGRAM_HEADER, rows, out)
    else:
        if not args.model or not args.datasets or len(args.datasets) != 2:
            raise InvalidConfig("projection needs --model and --datasets IND_TEST OOD_TEST")
        model = T.load_model(args.model)
        ind, ood = (D.load_jsonl(p) for p in args.datasets)
        rows = E.projection_export(model, ind, ood)
        E.write_rows_csv(E.PROJECTION_HEADER, rows, out)
    print(f"{len(rows)} rows written to {out}")
    return 0


def overconfidence_table(f_c=(0.5, 0.8), f_d=0.1):
    """The two-class walk-through: small class logits divided by a small domain logit."""
    head = M.DRMHead(
        np.array([[f_c[0]], [f_c[1]]]), np.zeros(2), np.array([[f_d]]), np.zeros(1)
    )
    out = M.drm_forward(np.ones(1), head)
    return {
        "f_c": out.f_c,
        "p_c": M.softmax(out.f_c),
        "f_d": out.f_d_clamped,
        "f": out.f,
        "p": M.softmax(out.f),
    }


def cmd_demo(args):
    t = overconfidence_table()
    fmt = lambda v: "[" + ", ".join(f"{x:g}" for x in v) + "]"
    pct = lambda v: "  ".join(f"{100 * x:.1f}%" for x in v)
    print("OOD utterance, two IND classes")
    print(f"  class logits f_c          : {fmt(t['f_c'])}")
    print(f"  softmax(f_c)              : {pct(t['p_c'])}")
    print(f"  domain logit f_d          : {t['f_d']:g}")
    print(f"  final logits f = f_c/f_d  : {fmt(t['f'])}")
    print(f"  softmax(f)                : {pct(t['p'])}")
    print(f"  -> class #{int(M.predict(t['p'])) + 1} with {100 * t['p'].max():.1f}% confidence")
    return 0


def cmd_experiment(args):
    cp = load_config(args.config)
    seeds = [int(s) for s in _get(cp, "eval", "seeds", _list)] if args.seeds is None else args.seeds
    out_dir = Path(args.out or cp.get("eval", "out_dir"))
    score = detectors_from(_get(cp, "score", "detectors", _list), _get(cp, "score", "temperature", float))
    recipe = Recipe(
        synth=synth_config(cp),
        train=train_config(cp),
        split=_get(cp, "synth", "split", _ratios),
        detectors=tuple(d.kind for d in score),
        temperature=score[0].temperature,
        lambda_rel=_get(cp, "score", "lambda_rel", float),
    )
    seeds_dir = out_dir / "seeds"
    seeds_dir.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        res = run_seed(recipe, seed)
        E.write_reports_csv([res.reports[k] for k in sorted(res.reports)], seeds_dir / f"seed{seed:03d}.reports.csv")
        accs = " ".join(f"{h}={a:.4f}" for h, a in sorted(res.accuracy.items()))
        print(f"seed {seed}: accuracy {accs}")
    write_resolved_config(cp, out_dir)
    reports = {}
    for seed in seeds:
        for row in _read_report_rows(seeds_dir / f"seed{seed:03d}.reports.csv"):
            reports.setdefault(row.detector, []).append(row)
    aggs = [E.aggregate_seeds(reports[k]) for k in sorted(reports)] if len(seeds) > 1 else []
    comparisons = []
    compare = _get(cp, "eval", "compare", _list, [])
    if len(seeds) > 1 and len(compare) == 2:
        a, b = compare
        comparisons.append((a, b, "auroc", E.welch_ttest([r.auroc for r in reports[a]], [r.auroc for r in reports[b]])))
    if aggs:
        E.write_aggregates_csv(aggs, out_dir / "aggregate.csv", comparisons)
        for agg in aggs:
            print(f"{agg.detector}: auroc {agg.mean['auroc']:.4f} +- {agg.std['auroc']:.4f}")
    for a, b, metric, res in comparisons:
        print(f"welch t-test {a} vs {b} on {metric}: t={res.t:.4f} p={res.p:.4g}")
    return 0


def _read_report_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            E.MetricReport(
                detector=r["detector"],
                eer=float(r["eer"]),
                fpr95=float(r["fpr95"]),
                detection_error=float(r["det_err"]),
                detection_error_at_tpr95=float(r["det_err_tpr95"]),
                auroc=float(r["auroc"]),
                aupr_in=float(r["aupr_in"]),
                aupr_out=float(r["aupr_out"]),
                n_ind=int(r["n_ind"]),
                n_ood=int(r["n_ood"]),
            )
            for r in reader
        ]


def build_parser():
    p = argparse.ArgumentParser(prog="drmood", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="INI config; defaults to the bundled recipe")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic IND/OOD corpus")
    common(sp)
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a classifier on IND data")
    common(sp)
    sp.add_argument("--head", choices=("linear", "drm"))
    sp.add_argument("--delta", type=float, help="clamp bound for the domain logit (default 3.0)")
    sp.add_argument("--data-dir", type=Path, help="directory holding ind_train/ind_dev jsonl files")
    sp.add_argument("--out", type=Path, required=True, help="model file")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="score datasets with OOD detectors")
    common(sp)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--datasets", nargs="+", required=True)
    sp.add_argument("--detectors", help="comma list of " + ",".join(S.DETECTOR_NAMES))
    sp.add_argument("--temperature", type=float, help="ODIN temperature (default 1000)")
    sp.add_argument("--lambda-rel", type=float)
    sp.add_argument("--train-data", help="IND training set for Mahalanobis statistics")
    sp.add_argument("--label", help="prefix detector names as LABEL/detector")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval", help="compute OOD metrics from score CSVs")
    sp.add_argument("--scores", type=Path)
    sp.add_argument("--seeds-dir", type=Path, help="directory of per-seed score CSVs to aggregate")
    sp.add_argument("--compare", nargs=2, metavar=("DET_A", "DET_B"))
    sp.add_argument("--metric", default="auroc", choices=E.METRIC_NAMES)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="histogram or 2-D projection CSVs")
    sp.add_argument("--kind", choices=("histogram", "projection"), required=True)
    sp.add_argument("--model", type=Path)
    sp.add_argument("--datasets", nargs="+")
    sp.add_argument("--scores", type=Path)
    sp.add_argument("--detectors")
    sp.add_argument("--temperature", type=float, default=S.DEFAULT_TEMPERATURE)
    sp.add_argument("--train-data")
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("experiment", help="multi-seed Linear vs DRM comparison on synthetic data")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("demo-overconfidence", help="print the two-class overconfidence example")
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None):
    level = os.environ.get("OODS_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OODSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
