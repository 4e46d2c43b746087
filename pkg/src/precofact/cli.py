"""Operator command line: train, eval, predict, ensemble, synthetic data,
and artifact inspection.

Exit codes: 0 success, 2 missing input file, 3 configuration error,
4 data-contract violation, 5 flag-contract violation. Every failure prints
one line to stderr of the form ``ERROR <category>: <detail>``; stdout
carries only line-oriented, parseable output.
"""
from __future__ import annotations

import argparse
import configparser
import itertools
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import dataio, ensemble, metrics, training
from .errors import (
    ConfigError,
    ContractError,
    DatasetFormatError,
    DimensionError,
    InvalidInputError,
    InvalidMaskError,
    JoinError,
    NonFiniteError,
    TrainingAborted,
)
from .model import ModelConfig, SampleEmbeddings
from .training import TrainConfig

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_CONFIG = 3
EXIT_DATA_CONTRACT = 4
EXIT_FLAG_CONTRACT = 5


class CliError(Exception):
    def __init__(self, code: int, category: str, detail: str):
        super().__init__(detail)
        self.code = code
        self.category = category
        self.detail = detail


def _fail(code: int, category: str, detail: str):
    raise CliError(code, category, detail)


# ---------------------------------------------------------------------------
# run configuration files (INI sections: model / train / paths)
# ---------------------------------------------------------------------------

_MODEL_TYPES = {
    "input_width_text": int, "input_width_image": int, "d": int, "heads": int,
    "d_ff": int, "d_m1": int, "classes": int, "dropout": float,
    "activation": str, "variant": str, "use_biases": bool, "ln_eps": float,
    "dtype": str,
}
_TRAIN_TYPES = {
    "batch_size": int, "epochs": int, "learning_rate": float, "seed": int,
    "beta1": float, "beta2": float, "adam_eps": float, "checkpoint_every": int,
}
_PATH_KEYS = ("train_data", "val_data", "out_dir")


def _coerce(raw: str, kind, key: str):
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected {kind.__name__}, got {raw!r}")


def load_run_config(path) -> Dict[str, dict]:
    """Parse a sectioned run-config file; unknown sections or keys are
    rejected by name."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise
    except (configparser.Error, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}")

    known = {"model": _MODEL_TYPES, "train": _TRAIN_TYPES,
             "paths": {k: str for k in _PATH_KEYS}}
    result: Dict[str, dict] = {"model": {}, "train": {}, "paths": {}}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section {section!r}")
        for key, raw in parser.items(section):
            if key not in known[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")
            result[section][key] = _coerce(raw, known[section][key], key)
    return result


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _require_file(path, what: str):
    if path is None:
        _fail(EXIT_FLAG_CONTRACT, "missing-flag", f"no {what} given")
    if not os.path.exists(path):
        _fail(EXIT_MISSING_INPUT, "data-not-found", f"{what} {path} does not exist")
    return path


def _read_dataset(path, what: str):
    _require_file(path, what)
    return dataio.read_dataset(path)


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _worker_count() -> int:
    raw = os.environ.get("PRECOFACT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PRECOFACT_THREADS must be an integer, got {raw!r}")


def _labels_for(members: List[ensemble.PredictionSet],
                samples: List[SampleEmbeddings]) -> List[int]:
    by_id = {s.sample_id: s.label for s in samples}
    missing = [sid for sid in members[0].sample_ids if sid not in by_id]
    if missing:
        raise JoinError(
            f"{len(missing)} prediction ids missing from the labeled set "
            f"(first: {missing[0]!r})"
        )
    return [by_id[sid] for sid in members[0].sample_ids]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    sections = (load_run_config(args.config) if args.config
                else {"model": {}, "train": {}, "paths": {}})
    train_path = args.train_data or sections["paths"].get("train_data")
    val_path = args.val_data or sections["paths"].get("val_data")
    out_dir = args.out or sections["paths"].get("out_dir")
    header, samples = _read_dataset(train_path, "training data")

    model_kwargs = dict(sections["model"])
    # the dataset declares its own embedding widths; explicit config wins
    model_kwargs.setdefault("input_width_text", header.text_width)
    model_kwargs.setdefault("input_width_image", header.image_width)
    model_config = ModelConfig.from_dict(model_kwargs)
    if (model_config.input_width_text != header.text_width
            or model_config.input_width_image != header.image_width):
        raise ContractError(
            f"configured widths ({model_config.input_width_text}, "
            f"{model_config.input_width_image}) do not match the dataset "
            f"({header.text_width}, {header.image_width})"
        )

    train_kwargs = dict(sections["train"])
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    train_config = TrainConfig.from_dict(train_kwargs)

    val_samples = None
    if val_path:
        _, val_samples = _read_dataset(val_path, "validation data")

    result = training.train(
        samples, model_config, train_config,
        val_samples=val_samples, out_dir=out_dir,
        resume_from=args.resume_from, log_stream=sys.stdout,
    )
    _emit({
        "event": "trained",
        "epochs": len(result.log),
        "best_epoch": result.best_epoch,
        "best_val_weighted_f1": result.best_val_f1,
        "out_dir": out_dir,
    })
    return EXIT_OK


def _load_model(path):
    _require_file(path, "model checkpoint")
    return dataio.load_checkpoint(path)


def cmd_eval(args) -> int:
    params = _load_model(args.model)
    header, samples = _read_dataset(args.data, "evaluation data")
    if not header.has_labels:
        _fail(EXIT_DATA_CONTRACT, "unlabeled-data",
              f"{args.data} carries no labels; eval needs them")
    probs = training.predict_probs(samples, params)
    preds = metrics.argmax_predict(probs)
    report = metrics.evaluate(preds, [s.label for s in samples])
    print(metrics.render_report(report))
    if args.dump_preds:
        pset = ensemble.PredictionSet(
            sample_ids=tuple(s.sample_id for s in samples),
            probabilities=probs.astype(np.float32),
            model_tag=os.path.splitext(os.path.basename(args.model))[0],
        )
        ensemble.write_predictions(pset, args.dump_preds)
    return EXIT_OK


def cmd_predict(args) -> int:
    params = _load_model(args.model)
    _, samples = _read_dataset(args.data, "input data")
    probs = training.predict_probs(samples, params)
    pset = ensemble.PredictionSet(
        sample_ids=tuple(s.sample_id for s in samples),
        probabilities=probs.astype(np.float32),
        model_tag=os.path.splitext(os.path.basename(args.model))[0],
    )
    ensemble.write_predictions(pset, args.out)
    _emit({"event": "predicted", "samples": len(samples), "out": args.out})
    return EXIT_OK


def cmd_ensemble(args) -> int:
    members = []
    for path in args.preds:
        _require_file(path, "prediction file")
        members.append(ensemble.read_predictions(path))

    labeled_samples = None
    if args.labels:
        header, labeled_samples = _read_dataset(args.labels, "label data")
        if not header.has_labels:
            _fail(EXIT_DATA_CONTRACT, "unlabeled-data",
                  f"{args.labels} carries no labels")

    if args.grid:
        if labeled_samples is None:
            _fail(EXIT_FLAG_CONTRACT, "missing-flag",
                  "--grid needs --labels to score the grid")
        values = [float(v) for v in args.grid_weight_values.split(",") if v]
        powers = [float(v) for v in args.grid_powers.split(",") if v]
        if not values or not powers:
            _fail(EXIT_FLAG_CONTRACT, "bad-flag", "empty grid values")
        weight_grid = list(itertools.product(values, repeat=len(members)))
        if len(weight_grid) * len(powers) > 200_000:
            _fail(EXIT_FLAG_CONTRACT, "bad-flag",
                  f"grid of {len(weight_grid) * len(powers)} points is too large")
        labels = _labels_for(members, labeled_samples)
        config, table = ensemble.grid_search(
            members, weight_grid, powers, labels, workers=_worker_count()
        )
        for weights, power, score in table:
            _emit({"event": "grid-point", "weights": list(weights),
                   "power": power, "weighted_f1": score})
        _emit({"event": "grid-best", "weights": list(config.weights),
               "power": config.power})
    else:
        if args.weights is None:
            _fail(EXIT_FLAG_CONTRACT, "missing-flag", "--weights required")
        if len(args.weights) != len(members):
            _fail(EXIT_FLAG_CONTRACT, "bad-flag",
                  f"{len(args.weights)} weights for {len(members)} prediction files")
        config = ensemble.EnsembleConfig(
            weights=tuple(args.weights), power=args.power
        )

    combined = ensemble.combine(members, config)
    if args.out:
        ensemble.write_predictions(combined, args.out)
    if labeled_samples is not None:
        labels = _labels_for(members, labeled_samples)
        preds = metrics.argmax_predict(combined.probabilities)
        print(metrics.render_report(metrics.evaluate(preds, labels)))
    _emit({
        "event": "ensembled", "members": len(members),
        "weights": list(config.weights), "power": config.power,
        "out": args.out,
    })
    return EXIT_OK


def cmd_generate_synthetic(args) -> int:
    """One invocation draws one pool (class means/topics are seed-specific),
    optionally split into a training file and a held-out file so both share
    the same distribution."""
    holdout = args.holdout_per_class
    if (args.holdout_out is None) != (holdout == 0):
        _fail(EXIT_FLAG_CONTRACT, "bad-flag",
              "--holdout-out and --holdout-per-class go together")
    per_class = args.samples_per_class + holdout
    common = dict(
        samples_per_class=per_class,
        text_width=args.text_width,
        image_width=args.image_width,
        separation=args.separation,
        noise=args.noise,
        seed=args.seed,
    )
    if args.mode == "plain":
        samples = dataio.generate_synthetic(
            token_range=(args.token_min, args.token_max),
            labeled=not args.unlabeled, **common,
        )
    else:
        if args.unlabeled:
            _fail(EXIT_FLAG_CONTRACT, "bad-flag",
                  "cross-modal generation is always labeled")
        samples = dataio.generate_cross_modal(
            tokens_per_source=args.tokens_per_source,
            agreement_prob=args.agreement_prob, **common,
        )
    # generation is round-robin over classes, so a prefix split stays balanced
    split = 5 * args.samples_per_class
    dataio.write_dataset(samples[:split], args.out)
    if holdout:
        dataio.write_dataset(samples[split:], args.holdout_out)
    _emit({"event": "generated", "samples": split, "holdout": len(samples) - split,
           "mode": args.mode, "out": args.out})
    return EXIT_OK


def cmd_inspect(args) -> int:
    _require_file(args.path, "artifact")
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == dataio.DATASET_MAGIC:
        header, samples = dataio.read_dataset(args.path)
        stats = dataio.dataset_stats(samples)
        _emit({
            "kind": "dataset",
            "version": header.version,
            "text_width": header.text_width,
            "image_width": header.image_width,
            "samples": header.sample_count,
            "has_labels": header.has_labels,
            "class_counts": list(stats.class_counts) if stats.class_counts else None,
            "token_stats": {
                name: {"min": s.min_tokens, "mean": s.mean_tokens, "max": s.max_tokens}
                for name, s in stats.source_stats.items()
            },
        })
    elif magic == dataio.CHECKPOINT_MAGIC:
        params = dataio.load_checkpoint(args.path)
        _emit({
            "kind": "checkpoint",
            "config": params.config.to_dict(),
            "parameters": params.parameter_count(),
            "matrices": len(params.named),
        })
    elif magic == ensemble.PREDICTIONS_MAGIC:
        preds = ensemble.read_predictions(args.path)
        _emit({
            "kind": "predictions",
            "model_tag": preds.model_tag,
            "samples": len(preds),
        })
    else:
        _fail(EXIT_DATA_CONTRACT, "bad-magic",
              f"unrecognized magic {magic!r} in {args.path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="precofact",
        description="Multi-modal fact-verification fusion engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a PCF1 dataset")
    p.add_argument("--config", help="run-config file (sections model/train/paths)")
    p.add_argument("--train-data", help="PCF1 training set")
    p.add_argument("--val-data", help="PCF1 validation set")
    p.add_argument("--out", help="output directory for checkpoints and logs")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--resume-from", help="training-state snapshot to resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dump-preds", help="also write predictions to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-sample class probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="power-weighted combination of predictions")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--power", type=float, default=0.5)
    p.add_argument("--labels", help="labeled PCF1 file for scoring")
    p.add_argument("--out", help="write the combined predictions here")
    p.add_argument("--grid", action="store_true", help="grid-search weights/power")
    p.add_argument("--grid-weight-values", default="0.1,0.2,0.3,0.6,1.0")
    p.add_argument("--grid-powers", default="0.5,1.0")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("generate-synthetic", help="write a synthetic PCF1 dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-class", type=int, default=20)
    p.add_argument("--holdout-out", help="write a held-out split from the same pool")
    p.add_argument("--holdout-per-class", type=int, default=0)
    p.add_argument("--token-min", type=int, default=2)
    p.add_argument("--token-max", type=int, default=6)
    p.add_argument("--tokens-per-source", type=int, default=3,
                   help="token count per source in cross-modal mode")
    p.add_argument("--text-width", type=int, default=16)
    p.add_argument("--image-width", type=int, default=16)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("plain", "cross-modal"), default="plain")
    p.add_argument("--agreement-prob", type=float, default=0.75)
    p.add_argument("--unlabeled", action="store_true")
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("inspect", help="describe a PCF1/PCFM/PCFP file")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"ERROR {e.category}: {e.detail}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"ERROR data-not-found: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ConfigError as e:
        print(f"ERROR config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetFormatError as e:
        print(f"ERROR {e.category}: {e.detail}", file=sys.stderr)
        return EXIT_DATA_CONTRACT
    except (ContractError, DimensionError, InvalidInputError, InvalidMaskError,
            NonFiniteError, JoinError, TrainingAborted) as e:
        print(f"ERROR data-contract: {e}", file=sys.stderr)
        return EXIT_DATA_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
