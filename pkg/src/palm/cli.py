"""Command-line surface: gen, train, score, eval, hist.

Exit codes: 0 success, 2 usage or contract violation, 3 numerical
failure. All randomness flows from explicit seeds; no ambient entropy.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import encoder as enc
from . import formats, metrics
from .errors import NumericalError, PalmError
from .geometry import SyntheticSpec, gen_synthetic
from .scoring import fit_gaussian, knn_score, mahalanobis_score, posterior_score
from .trainer import config_from_dict, train


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def cmd_gen(args) -> int:
    raw = _load_json(args.spec)
    valid = set(SyntheticSpec.__dataclass_fields__)
    unknown = set(raw) - valid
    if unknown:
        raise PalmError(f"unknown spec keys: {sorted(unknown)}")
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec(**raw)
    splits = gen_synthetic(spec)

    base = args.out[:-5] if args.out.endswith(".palm") else args.out
    paths = {name: f"{base}.{short}.palm" for name, short in
             (("id_train", "train"), ("id_test", "test"), ("ood_test", "ood"))}
    for name, path in paths.items():
        formats.write_embeddings(path, splits[name])
    manifest = {
        "spec": {k: getattr(spec, k) for k in valid},
        "files": paths,
        "counts": {name: len(splits[name]) for name in paths},
        "sha256": {name: _sha256(path) for name, path in paths.items()},
    }
    with open(f"{base}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    print(f"wrote {', '.join(paths.values())}")
    return 0


def cmd_train(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if args.mode is not None:
        raw["mode"] = args.mode
    config = config_from_dict(raw)

    data = formats.read_embeddings(args.train)
    if config.mode == "supervised" and data.labels is None:
        raise PalmError("supervised mode requires labeled training data")

    ckpt, history = train(config, data)

    log_path = args.log or f"{args.out}.log.csv"
    if history:
        keys = list(history[0])
        lines = [",".join(keys)]
        lines += [",".join(repr(row[k]) if isinstance(row[k], float)
                           else str(row[k]) for k in keys) for row in history]
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    h, z, _ = enc.forward(ckpt.model, data.x)
    fit_labels = data.labels if config.mode == "supervised" else \
        np.zeros(len(data), dtype=np.int64)
    fit = fit_gaussian(h, fit_labels)
    bundle = formats.ModelBundle(model=ckpt.model, bank=ckpt.bank,
                                 config=config, gaussian_fit=fit,
                                 optimizer=ckpt.optimizer, reference_z=z)
    formats.write_model(args.out, bundle)
    final = history[-1]["loss"] if history else float("nan")
    print(f"trained {config.epochs} epochs; final loss {final:.6f}; "
          f"model -> {args.out}")
    return 0


def cmd_score(args) -> int:
    bundle = formats.read_model(args.model)
    data = formats.read_embeddings(args.data)
    h, z, _ = enc.forward(bundle.model, data.x)

    if args.metric == "mahalanobis":
        if bundle.gaussian_fit is None:
            raise PalmError("model file has no gaussian fit for mahalanobis")
        scores = mahalanobis_score(bundle.gaussian_fit, h)
    elif args.metric == "knn":
        if bundle.reference_z is None:
            raise PalmError("model file has no reference embeddings for knn")
        scores = knn_score(bundle.reference_z, z, args.k)
    else:
        scores = posterior_score(z, bundle.bank, bundle.config.tau)

    formats.write_scores_csv(args.out, np.asarray(scores, dtype=np.float64))
    print(f"wrote {len(data)} {args.metric} scores -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ids = formats.read_scores_csv(args.id)
    oods = formats.read_scores_csv(args.ood)
    report = metrics.make_report(ids, oods, bins=args.bins)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(f"AUROC {report.auroc:.6f}  FPR95 {report.fpr95:.6f}")
    return 0


def cmd_hist(args) -> int:
    ids = formats.read_scores_csv(args.id)
    oods = formats.read_scores_csv(args.ood)
    edges, p_id, p_ood = metrics.overlap_histograms(ids, oods, bins=args.bins)
    overlap = float(np.minimum(p_id, p_ood).sum())
    lines = ["bin_left,bin_right,p_id,p_ood"]
    lines += [f"{edges[i]!r},{edges[i + 1]!r},{p_id[i]!r},{p_ood[i]!r}"
              for i in range(len(p_id))]
    lines.append(f"# overlap_area,{overlap!r}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"overlap_area {overlap:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palm",
        description="Mixture-of-prototypes hyperspherical training and OOD scoring")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic ID/OOD dataset")
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--out", required=True, help="output base path")
    p.add_argument("--seed", type=int, default=None, help="override spec seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--train", required=True, help="training data (.palm or .csv)")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--mode", choices=["supervised", "unsupervised"], default=None)
    p.add_argument("--log", default=None, help="per-epoch CSV log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score samples against a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", required=True,
                   choices=["mahalanobis", "knn", "posterior"])
    p.add_argument("--k", type=int, default=10, help="neighbor rank for knn")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute detection metrics from score CSVs")
    p.add_argument("--id", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hist", help="export joint score histograms")
    p.add_argument("--id", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (PalmError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
