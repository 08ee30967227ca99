"""Command-line entry point: ``lgdgcn {synth,train,eval,export,correlate}``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
``train`` prints one JSON line on stdout (schema in ``JSON_SCHEMA``).
"""
from __future__ import annotations

import argparse
from dataclasses import asdict
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import presets
from .analysis import STAGES, export_embeddings, feature_correlation, layer_units, write_correlation
from .autodiff import NumericalError
from .datagen import (TABLE5_P, TABLE5_Q, BundleFormatError, SynthSpec, ValidationError, bundle_read,
                      bundle_write, split_fraction, synth_generate)
from .graphcore import ParameterError
from .model import GCNBaseline, LGDGCN, ModelConfig
from .train import (DivergenceError, TrainConfig, evaluate, load_checkpoint, primary_metric, save_checkpoint,
                    train_run)

JSON_SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"split must be three comma-separated numbers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"split must have three parts, got {text!r}")
    return parts


def _seed(args) -> int:
    env = os.environ.get("LGD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"LGD_SEED must be an integer, got {env!r}")
    return args.seed


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    seed = _seed(args)
    if args.p is None:
        if args.factors not in TABLE5_P:
            raise UsageError(f"--factors {args.factors} has no tabulated p "
                             f"(known: {sorted(TABLE5_P)}); pass --p explicitly")
        p = TABLE5_P[args.factors]
    else:
        p = args.p
    spec = SynthSpec(factors=args.factors, p=p, q=args.q, nodes=args.nodes, classes=args.classes, seed=seed)
    bundle = synth_generate(spec)
    if args.split is not None:
        bundle = split_fraction(bundle, args.split, seed=seed)
    bundle_write(bundle, args.output)
    print(f"average degree {bundle.graph.average_degree():.4f}", file=sys.stderr)
    _emit({"schema": JSON_SCHEMA, "output": str(args.output), "nodes": bundle.n,
           "average_degree": bundle.graph.average_degree(), "p": p, "q": args.q, "seed": seed})
    return EXIT_OK


def _train_settings(args) -> dict:
    overrides = {name: getattr(args, name) for name in presets.DEFAULTS if hasattr(args, name)}
    if args.no_lgagg:
        overrides["lgagg"] = False
    try:
        return presets.resolve(args.preset, overrides)
    except KeyError as exc:
        raise UsageError(exc.args[0])


def build_model(settings: dict, d_in: int, num_classes: int, seed: int):
    if settings["model"] == "gcn":
        widths = [d_in] + [settings["hidden"]] * (settings["layers"] - 1) + [num_classes]
        return GCNBaseline(widths, settings["dropout"], seed=seed)
    cfg = ModelConfig(M=settings["M"], T=settings["T"], L=settings["layers"], d_out=settings["d_out"],
                      dropout=settings["dropout"], rule=settings["rule"], k=settings["k"],
                      lgagg=settings["lgagg"])
    return LGDGCN(d_in, num_classes, cfg, seed=seed)


def train_config(settings: dict, seed: int) -> TrainConfig:
    return TrainConfig(epochs=settings["epochs"], patience=settings["patience"], lr=settings["lr"],
                       weight_decay=settings["weight_decay"], update_rate=settings["update_rate"],
                       lambda_space=settings["lambda_space"], lambda_div=settings["lambda_div"], seed=seed)


def _test_report(model, bundle, result) -> dict:
    metric = primary_metric(bundle)
    report = {"schema": JSON_SCHEMA, "best_epoch": result.best_epoch, "epochs_run": len(result.history),
              f"val_{metric}": result.best_val}
    if bundle.test_mask.any():
        test = evaluate(model, bundle, bundle.test_mask)
        report.update({f"test_{k}": v for k, v in test.items()})
    return report


def cmd_train(args) -> int:
    seed = _seed(args)
    settings = _train_settings(args)
    bundle = bundle_read(args.data)
    model = build_model(settings, bundle.d0, bundle.num_classes, seed)
    tcfg = train_config(settings, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema": JSON_SCHEMA, "seed": seed, "preset": args.preset, "settings": settings,
                "train_config": asdict(tcfg), "dataset": {"path": str(args.data), "name": bundle.name,
                "sha256": _sha256(args.data), "nodes": bundle.n, "label_mode": bundle.label_mode}}
    if isinstance(model, LGDGCN):
        manifest["model_config"] = model.cfg.to_dict()
    else:
        manifest["model_config"] = {"widths": model.widths, "dropout": model.dropout}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    status = EXIT_OK
    try:
        result = train_run(bundle, model, tcfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        result = exc.result
        status = EXIT_NUMERIC
    (out / "history.csv").write_text(result.history_csv())
    save_checkpoint(model, out / "model.ckpt", extra={"seed": seed, "data_sha256": manifest["dataset"]["sha256"]})
    if status == EXIT_OK:
        _emit(_test_report(model, bundle, result) | {"model": settings["model"]})
    return status


def _load_pair(args):
    bundle = bundle_read(args.data)
    model, header = load_checkpoint(args.checkpoint)
    spec = header["model"]
    d_in = spec["d_in"] if header["kind"] == "lgd" else spec["widths"][0]
    classes = spec["num_classes"] if header["kind"] == "lgd" else spec["widths"][-1]
    if d_in != bundle.d0 or classes != bundle.num_classes:
        raise UsageError(f"checkpoint expects {d_in} features and {classes} classes, "
                         f"bundle has {bundle.d0} features and {bundle.num_classes} classes")
    return model, bundle


def _mask(bundle, name: str) -> np.ndarray:
    mask = {"train": bundle.train_mask, "val": bundle.val_mask, "test": bundle.test_mask,
            "all": np.ones(bundle.n, dtype=bool)}[name]
    if not mask.any():
        raise UsageError(f"the {name} mask of this bundle is empty")
    return mask


def cmd_eval(args) -> int:
    model, bundle = _load_pair(args)
    metrics = evaluate(model, bundle, _mask(bundle, args.mask))
    _emit({"schema": JSON_SCHEMA, "mask": args.mask} | metrics)
    return EXIT_OK


def _require_lgd(model) -> None:
    if not isinstance(model, LGDGCN):
        raise UsageError("this command needs a disentangled (lgd) checkpoint")


def cmd_export(args) -> int:
    model, bundle = _load_pair(args)
    _require_lgd(model)
    units, nodes = export_embeddings(model, bundle, args.layer, args.stage, args.output)
    _emit({"schema": JSON_SCHEMA, "channels": str(units), "nodes": str(nodes), "rows": bundle.n * model.cfg.M})
    return EXIT_OK


def cmd_correlate(args) -> int:
    model, bundle = _load_pair(args)
    _require_lgd(model)
    feats = np.concatenate(layer_units(model, bundle, args.layer, args.stage), axis=1)
    corr = feature_correlation(feats, _mask(bundle, args.mask))
    write_correlation(corr, args.output)
    off = corr[~np.eye(len(corr), dtype=bool)]
    _emit({"schema": JSON_SCHEMA, "output": str(args.output), "mean_abs_offdiag": float(np.abs(off).mean())})
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lgdgcn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-factor graph bundle")
    s.add_argument("--factors", type=int, required=True, help="number of latent factors")
    s.add_argument("--p", type=float, help="intra-class edge probability (tabulated for 4..12 factors)")
    s.add_argument("--q", type=float, default=TABLE5_Q, help="inter-class edge probability")
    s.add_argument("--nodes", type=int, default=1000)
    s.add_argument("--classes", type=int, default=16)
    s.add_argument("--split", type=_fractions, default=(0.6, 0.2, 0.2),
                   help="train,val,test fractions (default 0.6,0.2,0.2)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a bundle")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", choices=sorted(presets.PRESETS))
    t.add_argument("--model", choices=["lgd", "gcn"])
    t.add_argument("--M", type=int)
    t.add_argument("--T", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--d-out", dest="d_out", type=int)
    t.add_argument("--hidden", type=int, help="hidden width of the gcn baseline")
    t.add_argument("--k", type=int)
    t.add_argument("--rule", choices=["knn", "cknn"])
    t.add_argument("--no-lgagg", action="store_true", help="skip latent-graph aggregation")
    t.add_argument("--dropout", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--update-rate", dest="update_rate", type=float)
    t.add_argument("--lambda-space", dest="lambda_space", type=float)
    t.add_argument("--lambda-div", dest="lambda_div", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="run", help="output directory")
    t.set_defaults(func=cmd_train)

    def with_model(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a bundle mask")
    with_model(e)
    e.add_argument("--mask", choices=["train", "val", "test", "all"], default="test")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write per-channel and per-node embedding TSVs")
    with_model(x)
    x.add_argument("--layer", type=int, default=0)
    x.add_argument("--stage", choices=STAGES, default="post_routing")
    x.add_argument("-o", "--output", required=True)
    x.set_defaults(func=cmd_export)

    c = sub.add_parser("correlate", help="feature correlation matrix as CSV")
    with_model(c)
    c.add_argument("--layer", type=int, default=0)
    c.add_argument("--stage", choices=STAGES, default="post_routing")
    c.add_argument("--mask", choices=["train", "val", "test", "all"], default="test")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_correlate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ParameterError, ValidationError, BundleFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
