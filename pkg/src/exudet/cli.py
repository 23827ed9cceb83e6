"""Command-line front end: split, augment, train, eval, sweep, params, gradcheck.

Every command takes the global flags ``--seed``, ``--out``, ``--config`` and
``--precision``.  A config file is a flat key = value sequence (strings
quoted, numbers and true/false bare, ``#`` comments) whose keys mirror the
long flag names; explicit flags always win over file values.  All outputs
land under the ``--out`` directory.

Exit codes: 0 on success, 1 on runtime failures (bad data, bad files,
gradient-check failure), 2 on usage/configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import augment as augment_mod
from . import dataio, plots
from .errors import ConfigError, ExudetError, FormatError
from .metrics import report
from .model import ModelSpec, build_model, count_parameters, load_checkpoint, save_checkpoint
from .trainer import (
    TrainConfig,
    evaluate,
    fit,
    grad_check,
    sweep_dropout,
    write_epoch_log,
)

# Ablation presets: each selects a distinct (batchnorm, dropout, dataset
# flavor) triple.  The dataset flavor is advisory — the command trains on
# whatever manifest it is given — and is recorded so runs are self-describing.
EXPERIMENTS = {
    "original": {"use_batchnorm": False, "dropout_rate": 0.0, "dataset": "original"},
    "augmented": {"use_batchnorm": False, "dropout_rate": 0.0, "dataset": "augmented"},
    "batchnorm": {"use_batchnorm": True, "dropout_rate": 0.0, "dataset": "augmented"},
    "dropout": {"use_batchnorm": False, "dropout_rate": 0.5, "dataset": "augmented"},
    "batchnorm+dropout": {"use_batchnorm": True, "dropout_rate": 0.5, "dataset": "augmented"},
}

# Published parameter totals of the architectures this model is usually
# compared against, for the `params --compare` footer.
COMPARISON_MODELS = [
    ("GoogleNet", 13_000_000),
    ("ResNet-18", 11_690_000),
    ("Prior exudate CNN", 6_420_000),
]

DEFAULT_SWEEP_RATES = "0.3,0.4,0.5,0.6,0.7"


# --- config file ---------------------------------------------------------------


def read_config(path: str) -> dict:
    """Parse a flat key = value config file (strings, numbers, booleans)."""
    values: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, rest = line.partition("=")
        key = key.strip()
        if not eq or not key or not all(c.isalnum() or c == "_" for c in key):
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        values[key] = _parse_config_value(rest.strip(), path, lineno)
    return values


def _parse_config_value(text: str, path: str, lineno: int):
    if text.startswith('"'):
        end = text.find('"', 1)
        if end < 0:
            raise ConfigError(f"{path}:{lineno}: unterminated string")
        trailing = text[end + 1:].strip()
        if trailing and not trailing.startswith("#"):
            raise ConfigError(f"{path}:{lineno}: unexpected text after string: {trailing!r}")
        return text[1:end]
    if "#" in text:
        text = text[: text.index("#")].strip()
    if not text:
        raise ConfigError(f"{path}:{lineno}: missing value")
    if text in ("true", "false"):
        return text == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    raise ConfigError(
        f"{path}:{lineno}: cannot parse {text!r} (quote strings, bare numbers/booleans)")


def _setting(args, config: dict, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key, None)
    if value is None:
        value = config.get(key)
    return default if value is None else value


def _require(args, config: dict, key: str, flag: str):
    value = _setting(args, config, key)
    if value is None:
        raise ConfigError(f"{flag} is required (as a flag or config key {key!r})")
    return value


def _parse_floats(text) -> list:
    if isinstance(text, (int, float)):
        return [float(text)]
    try:
        return [float(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


# --- shared assembly -----------------------------------------------------------


def _out_dir(args, config) -> Path:
    out = Path(_setting(args, config, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_setup(args, config):
    """Resolve (ModelSpec, TrainConfig, experiment name) from flags + config."""
    experiment = _setting(args, config, "experiment")
    preset = {}
    if experiment is not None:
        if experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {experiment!r}; choose from {sorted(EXPERIMENTS)}")
        preset = EXPERIMENTS[experiment]
    use_batchnorm = _setting(args, config, "batchnorm",
                             preset.get("use_batchnorm", True))
    dropout = float(_setting(args, config, "dropout",
                             preset.get("dropout_rate", 0.0)))
    spec = ModelSpec(use_batchnorm=bool(use_batchnorm), dropout_rate=dropout)
    train_config = TrainConfig(
        batch_size=int(_setting(args, config, "batch_size", 32)),
        epochs=int(_setting(args, config, "epochs", 40)),
        learning_rate=float(_setting(args, config, "learning_rate", 0.02)),
        momentum=float(_setting(args, config, "momentum", 0.9)),
        dropout_rate=dropout,
        use_batchnorm=bool(use_batchnorm),
        seed=int(_setting(args, config, "seed", 0)),
        precision=_setting(args, config, "precision", "single"),
    )
    return spec, train_config, experiment


def _load_manifest_split(args, config, default_split: str):
    manifest = _require(args, config, "manifest", "--manifest")
    if not Path(manifest).is_file():
        raise ConfigError(f"manifest {manifest} does not exist")
    split_name = _setting(args, config, "split", default_split)
    parts = dataio.read_split_manifest(manifest)
    if split_name not in parts:
        raise ConfigError(f"--split must be one of {dataio.SPLIT_NAMES}, got {split_name!r}")
    return parts, split_name


def _decode_items(pairs, standardize: bool = False) -> list:
    items = []
    for path, label in pairs:
        chw = dataio.decode_image(path)
        if standardize:
            mean = chw.mean(axis=(1, 2), keepdims=True)
            std = chw.std(axis=(1, 2), keepdims=True)
            chw = (chw - mean) / (std + 1e-8)
        items.append(dataio.LabeledImage(path=path, chw=chw, label=label))
    return items


# --- commands --------------------------------------------------------------------


def cmd_split(args, config) -> int:
    labels = _require(args, config, "labels", "--labels")
    if not Path(labels).is_file():
        raise ConfigError(f"labels CSV {labels} does not exist")
    root = Path(_require(args, config, "images", "--images"))
    if not root.is_dir():
        raise ConfigError(f"image root {root} is not a directory")
    fractions = _parse_floats(_setting(args, config, "fractions", "0.7,0.2,0.1"))
    seed = int(_setting(args, config, "seed", 0))
    stratify = bool(_setting(args, config, "stratify", True))
    allow_empty = bool(_setting(args, config, "allow_empty", False))
    out = _out_dir(args, config)

    pairs = dataio.read_labels_csv(labels)
    for name, _ in pairs:
        if not (root / name).is_file():
            raise ConfigError(f"labels reference missing image {root / name}")
    split = dataio.stratified_split(pairs, fractions, seed, stratify=stratify,
                                    allow_empty=allow_empty,
                                    label_of=lambda pair: pair[1])
    dest = out / "split.csv"
    dataio.write_split_manifest(split, str(dest),
                                path_of=lambda pair: str(root / pair[0]),
                                label_of=lambda pair: pair[1])
    print(f"split {len(pairs)} items -> {split.counts()} "
          f"(train/val/test), manifest {dest}")
    return 0


def cmd_augment(args, config) -> int:
    parts, split_name = _load_manifest_split(args, config, "train")
    sources = parts[split_name]
    if not sources:
        raise ConfigError(f"manifest has no rows for split {split_name!r}")
    seed = int(_setting(args, config, "seed", 0))
    out = _out_dir(args, config)

    ops_text = _setting(args, config, "ops")
    if ops_text is not None:
        try:
            ops = [augment_mod.parse_op(part)
                   for part in str(ops_text).split(",") if part.strip()]
        except FormatError as exc:
            raise ConfigError(
                f"{exc}; valid ops: hflip, rotate(degrees), "
                "brightness(factor), blur(radius)") from None
        recipe = augment_mod.Recipe(
            augment_mod.RecipeEntry(op, 1.0) for op in ops)
    else:
        factors = _parse_floats(_setting(args, config, "brightness", "1.38,1.20"))
        if len(factors) != 2:
            raise ConfigError(f"brightness needs two factors, got {factors}")
        recipe = augment_mod.default_recipe(
            brightness_factors=tuple(factors),
            blur_radius=int(_setting(args, config, "blur_radius", 3)),
            probability=float(_setting(args, config, "probability", 0.7)),
        )
    dest = out / "augmented"
    rows = augment_mod.build_augmented_dataset(sources, recipe, seed, str(dest))
    emitted = sum(1 for row in rows if row[0])
    failed = len(rows) - emitted
    print(f"augmented {len(sources)} sources -> {emitted} images "
          f"({failed} failed), manifest {dest / 'manifest.csv'}")
    return 0


def cmd_train(args, config) -> int:
    spec, train_config, experiment = _train_setup(args, config)
    parts, _ = _load_manifest_split(args, config, "train")
    if not parts["train"] or not parts["val"]:
        raise ConfigError("manifest must provide non-empty train and val splits")
    out = _out_dir(args, config)
    standardize = bool(_setting(args, config, "standardize", False))

    train_items = _decode_items(parts["train"], standardize)
    val_items = _decode_items(parts["val"], standardize)
    model = build_model(spec, seed=train_config.seed, precision=train_config.precision)
    if experiment:
        print(f"experiment {experiment}: batchnorm={spec.use_batchnorm} "
              f"dropout={spec.dropout_rate:g} "
              f"dataset={EXPERIMENTS[experiment]['dataset']}")
    model, logs = fit(model, train_items, val_items, train_config,
                      best_checkpoint=str(out / "best.exck"), progress=print)

    save_checkpoint(model, str(out / "checkpoint.exck"), seed=train_config.seed)
    write_epoch_log(logs, str(out / "epochs.csv"))
    final_val = evaluate(model, val_items, train_config.batch_size)
    final = report(final_val.confusion, train_accuracy=logs[-1].train_acc,
                   val_accuracy=final_val.accuracy)
    (out / "metrics.json").write_text(final.to_json() + "\n")
    plots.accuracy_curve(logs, str(out / "accuracy.png"))
    plots.confusion_png(final.confusion, str(out / "confusion.png"))
    print(f"final: train_acc {logs[-1].train_acc:.4f} val_f1 {final.f1:.4f} "
          f"-> {out / 'checkpoint.exck'}")
    return 0


def cmd_eval(args, config) -> int:
    checkpoint = _require(args, config, "checkpoint", "--checkpoint")
    if not Path(checkpoint).is_file():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    parts, split_name = _load_manifest_split(args, config, "val")
    pairs = parts[split_name]
    if not pairs:
        raise ConfigError(f"manifest has no rows for split {split_name!r}")
    out = _out_dir(args, config)

    model = load_checkpoint(checkpoint)
    items = _decode_items(pairs, bool(_setting(args, config, "standardize", False)))
    result = evaluate(model, items)
    (out / "metrics.json").write_text(result.to_json() + "\n")
    plots.confusion_png(result.confusion, str(out / "confusion.png"))
    print(result.to_json())
    return 0


def cmd_sweep(args, config) -> int:
    spec, train_config, _ = _train_setup(args, config)
    rates = _parse_floats(_setting(args, config, "rates", DEFAULT_SWEEP_RATES))
    parts, _ = _load_manifest_split(args, config, "train")
    if not parts["train"] or not parts["val"]:
        raise ConfigError("manifest must provide non-empty train and val splits")
    out = _out_dir(args, config)
    standardize = bool(_setting(args, config, "standardize", False))

    train_items = _decode_items(parts["train"], standardize)
    val_items = _decode_items(parts["val"], standardize)
    result = sweep_dropout(spec, train_config, train_items, val_items, rates,
                           progress=print)
    dest = out / "sweep.csv"
    result.write_csv(str(dest))
    for row in result.rows:
        print(",".join(row.percent_cells()))
    print(f"sweep -> {dest}")
    return 0


def cmd_params(args, config) -> int:
    use_batchnorm = bool(_setting(args, config, "batchnorm", True))
    dropout = float(_setting(args, config, "dropout", 0.0))
    spec = ModelSpec(use_batchnorm=use_batchnorm, dropout_rate=dropout)
    model = build_model(spec, seed=int(_setting(args, config, "seed", 0)))
    rep = count_parameters(model)
    print(rep.format_table())
    if getattr(args, "compare", False) or config.get("compare"):
        print("\nParameter comparison:")
        for name, count in COMPARISON_MODELS:
            print(f"  {name:<20} {count:>12,}")
        print(f"  {'This model':<20} {rep.total:>12,}")
    return 0


def cmd_gradcheck(args, config) -> int:
    tolerance = float(_setting(args, config, "tolerance", 1e-4))
    seed = int(_setting(args, config, "seed", 0))
    rep = grad_check(seed=seed, tolerance=tolerance)
    for line in rep.format_lines():
        print(line)
    return 0 if rep.passed else 1


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root RNG seed (default 0)")
    common.add_argument("--out", help="output directory (default .)")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--precision", choices=("single", "double"),
                        help="float width for model math (default single)")

    parser = argparse.ArgumentParser(
        prog="exudet",
        description="Exudate/normal fundus classifier: data prep, training, "
                    "evaluation and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common],
                       help="stratified train/val/test split of a labels CSV")
    p.add_argument("--labels", help="CSV with header image,grade or image,label")
    p.add_argument("--images", help="directory the CSV's image names resolve against")
    p.add_argument("--fractions", help="train,val,test fractions (default 0.7,0.2,0.1)")
    p.add_argument("--stratify", action=argparse.BooleanOptionalAction,
                   help="preserve class balance per split (default on)")
    p.add_argument("--allow-empty", dest="allow_empty",
                   action=argparse.BooleanOptionalAction,
                   help="permit empty splits, e.g. fractions 1,0,0")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", parents=[common],
                       help="write augmented PNG variants of one manifest split")
    p.add_argument("--manifest", help="split manifest from the split command")
    p.add_argument("--split", help="which split to augment (default train)")
    p.add_argument("--ops", help="comma-separated ops applied deterministically, "
                                 "e.g. 'hflip,rotate(45)'; default is the full recipe")
    p.add_argument("--probability", type=float,
                   help="per-op apply probability for the default recipe (0.7)")
    p.add_argument("--brightness", help="two brightness factors (default 1.38,1.20)")
    p.add_argument("--blur-radius", dest="blur_radius", type=int,
                   help="blur radius in pixels (default 3)")
    p.set_defaults(func=cmd_augment)

    def add_train_flags(p):
        p.add_argument("--manifest", help="split manifest from the split command")
        p.add_argument("--experiment", help=f"preset: {', '.join(sorted(EXPERIMENTS))}")
        p.add_argument("--batchnorm", action=argparse.BooleanOptionalAction,
                       help="batch normalization after each conv (default on)")
        p.add_argument("--dropout", type=float, help="dropout rate (default 0)")
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--standardize", action=argparse.BooleanOptionalAction,
                       help="per-channel standardization of inputs (default off)")

    p = sub.add_parser("train", parents=[common],
                       help="train on a manifest's train split, validate on val")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", help="checkpoint file from train")
    p.add_argument("--manifest", help="split manifest")
    p.add_argument("--split", help="split to score (default val)")
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common],
                       help="train once per dropout rate and tabulate the gaps")
    add_train_flags(p)
    p.add_argument("--rates", help=f"comma-separated rates (default {DEFAULT_SWEEP_RATES})")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("params", parents=[common],
                       help="per-layer parameter table for the architecture")
    p.add_argument("--batchnorm", action=argparse.BooleanOptionalAction,
                   help="include batch-norm layers (default on)")
    p.add_argument("--dropout", type=float, help="dropout rate (affects rows only)")
    p.add_argument("--compare", action="store_true",
                   help="append published totals of comparable architectures")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every backward pass")
    p.add_argument("--tolerance", type=float, help="max relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = read_config(args.config) if args.config else {}
        return args.func(args, config)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ExudetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
