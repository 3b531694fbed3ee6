"""Command-line front end.

Each subcommand writes into an ``--out`` directory (``emd`` prints to
stdout) and records the exact arguments it ran with in ``run_config.json``.
Failures print one line ``ERR <code>: <message>`` to stderr and exit with 2
(bad input), 3 (solver failure) or 4 (invalid configuration).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .emd_core import (default_k, emd_balanced, ground_from_prototypes,
                       index_ground_distance)
from .errors import ConfigError, InputError, ScemdError
from .evaluation import (accuracy, ova_fit, ova_predict, pr_curve, retrieve,
                         roc_curve)
from .mil_pipeline import (SynthSpec, fit_prototypes, quantize_bags,
                           stratified_split, synth_dataset)
from .scemd import FitConfig, encode_batch, fit

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _positive(name, value):
    if value is None or value < 1:
        raise ConfigError(f"--{name} must be a positive integer")


def _nonneg(name, value):
    if value is None or not math.isfinite(value) or value < 0:
        raise ConfigError(f"--{name} must be a finite number >= 0")


def _run_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _config_hash(doc) -> str:
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "run_config.json", _run_config(args))
    return out


# commands ------------------------------------------------------------------


def cmd_synth(args):
    try:
        fields = json.loads(Path(args.spec).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {args.spec}") from exc
    except ValueError as exc:
        raise InputError(f"{args.spec}: not JSON") from exc
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown synth spec fields: {sorted(unknown)}")
    if args.seed is not None:
        fields["seed"] = args.seed
    spec = SynthSpec(**fields)
    spec.validate()
    ds = synth_dataset(spec)
    out = _prepare_out(args)
    io.write_bags(out / "bags.jsonl", ds.bags)
    io.atomic_write(out / "true_dictionary.csv",
                    io.format_matrix(ds.true_dictionary.T))
    io.atomic_write(out / "locations.csv", io.format_matrix(ds.locations))


def cmd_quantize(args):
    bags = io.read_bags(args.bags)
    if args.prototypes:
        protos = io.read_prototypes(args.prototypes)
    else:
        _positive("D", args.D)
        _positive("max-iter", args.max_iter)
        protos = fit_prototypes(bags, args.D, args.seed, args.max_iter)
    X = quantize_bags(bags, protos)
    out = _prepare_out(args)
    io.write_prototypes(out / "prototypes.csv", protos)
    io.write_histograms(out / "histograms.csv", X)
    io.write_ground_distance(out / "ground_distance.csv",
                             ground_from_prototypes(protos))
    if all(b.label is not None for b in bags):
        io.write_labels(out / "labels.csv", [b.label for b in bags])


def _load_gd(path, D):
    if path is None:
        return index_ground_distance(D)
    gd = io.read_ground_distance(path)
    if gd.size != D:
        raise InputError(f"ground distance is {gd.size}x{gd.size}, "
                         f"histograms have {D} bins")
    return gd


def cmd_fit(args):
    _positive("M", args.M)
    _positive("T", args.T)
    _positive("jobs", args.jobs)
    _nonneg("gamma", args.gamma)
    X = io.read_histograms(args.histograms)
    N, D = X.shape
    K = default_k(D) if args.K is None else args.K
    if not 1 <= K <= D:
        raise ConfigError(f"--K must lie in [1, {D}]")
    config = FitConfig(M=args.M, T=args.T, gamma=args.gamma, K=K,
                       seed=args.seed, jobs=args.jobs)
    config.validate(N, D)
    gd = _load_gd(args.gd, D)
    model = fit(X, config, gd)
    out = _prepare_out(args)
    io.write_model(out / "model.json", model)
    io.atomic_write(out / "fit_trace.csv",
                    "half_step,objective\n" + "".join(
                        f"{i},{v!r}\n" for i, v in enumerate(model.fit_trace)))
    io.write_codes(out / "codes.csv", model.codes,
                   io.sha256_file(out / "model.json"))


def cmd_encode(args):
    _positive("jobs", args.jobs)
    model = io.read_model(args.model)
    X = io.read_histograms(args.histograms)
    if X.shape[1] != model.D:
        raise InputError(f"histograms have {X.shape[1]} bins, model {model.D}")
    results = encode_batch(X, model, args.jobs)
    out = _prepare_out(args)
    io.write_codes(out / "codes.csv", np.array([r.code for r in results]),
                   io.sha256_file(args.model))


def cmd_emd(args):
    a = io.read_histogram(args.a)
    b = io.read_histogram(args.b)
    if a.size != b.size:
        raise InputError("histograms differ in length")
    gd = _load_gd(args.gd, a.size)
    print(f"{emd_balanced(a, b, gd):.12f}")


def _write_curves(out, prefix, scores, relevant):
    roc = roc_curve(scores, relevant)
    io.write_curve(out / f"roc_{prefix}.csv", roc, "fpr", "tpr")
    io.write_curve(out / f"pr_{prefix}.csv", pr_curve(scores, relevant),
                   "recall", "precision")
    return roc.auc


def _classify(args, out, F, y):
    if args.test_features:
        Ftr, ytr = F, y
        Fte = io.read_codes(args.test_features)
        yte = io.read_labels(args.test_labels)
        split = "given"
    else:
        tr, te = stratified_split(y, 0.5, args.seed)
        Ftr, ytr, Fte, yte = F[tr], y[tr], F[te], y[te]
        split = "holdout"
    if Fte.shape[1] != Ftr.shape[1] or len(Fte) != len(yte):
        raise InputError("test features/labels do not match training shape")
    model = ova_fit(Ftr, ytr, args.ridge)
    scores, pred = ova_predict(model, Fte)
    aucs = {}
    for k, c in enumerate(model.classes):
        rel = yte == c
        if rel.all() or not rel.any():
            aucs[str(c)] = None
            continue
        aucs[str(c)] = _write_curves(out, f"class{c}", scores[:, k], rel)
    return {"accuracy": accuracy(pred, yte), "auc_per_class": aucs,
            "n_train": int(len(ytr)), "n_test": int(len(yte)), "split": split}


def _retrieve(args, out, F, y):
    model = io.read_model(args.model) if args.distance == "emd" else None
    if model is not None and F.shape[1] != model.M:
        raise InputError("codes do not match the model's dictionary size")
    all_scores, all_rel, per_query = [], [], []
    for q in range(len(F)):
        others = np.delete(np.arange(len(F)), q)
        ranked = retrieve(F[q], F[others], args.distance, model,
                          ids=others, query_id=q,
                          relevance=y[others] == y[q])
        all_scores.append(ranked.scores)
        all_rel.append(ranked.relevance)
        if ranked.relevance.any() and not ranked.relevance.all():
            per_query.append((y[q], roc_curve(ranked.scores,
                                              ranked.relevance).auc))
    pooled = _write_curves(out, "pooled", np.concatenate(all_scores),
                           np.concatenate(all_rel))
    classes = np.unique(y)
    aucs = {str(c): float(np.mean([a for lab, a in per_query if lab == c]))
            for c in classes if any(lab == c for lab, _ in per_query)}
    return {"mean_query_auc": float(np.mean([a for _, a in per_query])),
            "pooled_auc": pooled, "auc_per_class": aucs}


def cmd_eval(args):
    _nonneg("ridge", args.ridge)
    if args.mode == "retrieve" and args.distance == "emd" and not args.model:
        raise ConfigError("--distance emd needs --model")
    if bool(args.test_features) != bool(args.test_labels):
        raise ConfigError("--test-features and --test-labels go together")
    F = io.read_codes(args.features)
    y = io.read_labels(args.labels)
    if len(F) != len(y):
        raise InputError(f"{len(F)} feature rows but {len(y)} labels")
    out = _prepare_out(args)
    summary = (_classify if args.mode == "classify" else _retrieve)(
        args, out, F, y)
    summary["mode"] = args.mode
    summary["config_hash"] = _config_hash(_run_config(args))
    io.write_json(out / "summary.json", summary)


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scemd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True,
                           parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic bag dataset")
    s.add_argument("--spec", required=True, help="JSON file of SynthSpec fields")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("quantize", help="bags -> prototypes and histograms")
    s.add_argument("--bags", required=True)
    s.add_argument("--D", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--prototypes", default=None,
                   help="reuse existing prototypes instead of clustering")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("fit", help="learn basic histograms")
    s.add_argument("--histograms", required=True)
    s.add_argument("--gd", default=None, help="ground distance CSV")
    s.add_argument("--M", type=int, required=True)
    s.add_argument("--K", type=int, default=None)
    s.add_argument("--gamma", type=float, default=0.1)
    s.add_argument("--T", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("encode", help="sparse codes under a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--histograms", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("emd", help="balanced EMD between two histograms")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--gd", default=None)
    s.set_defaults(func=cmd_emd)

    s = sub.add_parser("eval", help="classification or retrieval metrics")
    s.add_argument("--features", required=True, help="codes or histograms CSV")
    s.add_argument("--labels", required=True)
    s.add_argument("--mode", choices=["classify", "retrieve"],
                   default="classify")
    s.add_argument("--test-features", default=None)
    s.add_argument("--test-labels", default=None)
    s.add_argument("--ridge", type=float, default=1e-3)
    s.add_argument("--distance", choices=["l2", "emd"], default="l2")
    s.add_argument("--model", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SCEMD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "quantize" and not args.prototypes and args.D is None:
            raise ConfigError("--D is required unless --prototypes is given")
        args.func(args)
    except ScemdError as exc:
        code = getattr(exc, "code", "error")
        print(f"ERR {code}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
