"""Command-line entry point: reproducible fetch/train/eval/corrupt runs plus
the gradcheck, oracle-check, and compare subcommands.

Every run resolves its configuration (flags > config file > defaults) into a
manifest written next to the outputs; replaying a manifest reproduces the
model and metrics files byte for byte.  Exit codes: 0 success, 1 usage or
config, 2 data, 3 non-finite numerics.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__, seeding
from .checks import run_gradient_checks, run_oracle_checks
from .data import (
    MNIST_FILES,
    NoiseProfile,
    fetch_mnist,
    load_mnist_split,
    sha256_file,
    write_idx_images,
    write_idx_labels,
)
from .errors import ConfigError, DataError, IntFFError, NumericalOverflowError
from .evaluate import emit_metrics_csv, evaluate
from .model import load_model, save_model
from .training import TrainConfig, resolve_arch, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="intff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download the four MNIST IDX files")
    p.add_argument("--out", default="data/mnist")
    p.add_argument("--mirror", default=None,
                   help="base URL (default: $INTFF_DATA_MIRROR or the public mirror)")

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--algo", dest="algorithm", choices=["intff", "ff", "bp"], default=None)
    p.add_argument("--arch", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--schedule", dest="update_schedule",
                   choices=["per-batch", "per-unit"], default=None)
    p.add_argument("--val-fraction", dest="validation_fraction", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--min-delta", dest="min_delta", type=float, default=None)
    p.add_argument("--noise-profile", dest="noise_profile", default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--manifest", default=None, help="replay a previous run's manifest")
    p.add_argument("--data-dir", default=None, help="IDX directory (default data/mnist)")
    p.add_argument("--limit", type=int, default=None,
                   help="train on the first N images only")
    p.add_argument("--out", default="model.json")
    p.add_argument("--metrics", default="metrics.csv")

    p = sub.add_parser("eval", help="evaluate a model on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--report", default="report.csv")

    p = sub.add_parser("corrupt", help="corrupt a training set and write it back as IDX")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--profile", default=None, help="noise profile JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10)

    p = sub.add_parser("oracle-check", help="stop-gradient equality on random small models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=20)

    p = sub.add_parser("compare", help="train intff/ff/bp on one dataset and summarize")
    p.add_argument("--arch", required=True)
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", dest="batch_size", type=int, default=64)
    p.add_argument("--val-fraction", dest="validation_fraction", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--noise-profile", dest="noise_profile", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default=None, help="also write the summary as CSV")
    return parser


def load_config(path) -> dict:
    """Config file values for TrainConfig; empty file means all defaults."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"config file: {exc}") from None
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file: expected a JSON object")
    for key in doc:
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"config file: unknown key {key!r}")
    return doc


def load_noise_profile(path) -> NoiseProfile:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"noise profile: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"noise profile: invalid JSON: {exc}") from None
    try:
        return NoiseProfile.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"noise profile: {exc}") from None


def resolve_train_config(args) -> tuple:
    """Merge manifest/config-file/flag layers into a TrainConfig.

    Precedence: explicit flags > config file (or manifest) > defaults.
    Returns (config, data_dir).
    """
    file_values = {}
    manifest_dir = None
    manifest_limit = None
    if args.manifest:
        try:
            with open(args.manifest, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
            file_values = dict(manifest["config"])
            manifest_dir = manifest.get("dataset", {}).get("dir")
            manifest_limit = manifest.get("dataset", {}).get("limit")
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"manifest: {exc}") from None
        for key in file_values:
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"manifest: unknown config key {key!r}")
    elif args.config:
        file_values = load_config(args.config)

    merged = {}
    merged.update(file_values)
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    config = TrainConfig(**merged)
    try:
        config.validate()
        resolve_arch(config)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    data_dir = args.data_dir if args.data_dir is not None else (manifest_dir or "data/mnist")
    limit = args.limit if args.limit is not None else manifest_limit
    return config, data_dir, limit


def write_manifest(path, config: TrainConfig, data_dir, limit, file_checksums, outputs):
    manifest = {
        "tool_version": __version__,
        "config": dataclasses.asdict(config),
        "seeds": {
            "master": config.seed,
            "init": [seeding.DOMAIN_INIT, config.seed],
            "shuffle": [seeding.DOMAIN_SHUFFLE, config.seed],
            "negatives": [seeding.DOMAIN_NEGATIVES, config.seed],
            "noise": [seeding.DOMAIN_NOISE, config.seed],
            "split": [seeding.DOMAIN_SPLIT, config.seed],
        },
        "dataset": {"dir": str(data_dir), "limit": limit, "checksums": file_checksums},
        "outputs": outputs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _dataset_checksums(data_dir, split: str) -> dict:
    key = "train" if split == "train" else "test"
    sums = {}
    for role in (f"{key}_images", f"{key}_labels"):
        name = MNIST_FILES[role]
        for cand in (os.path.join(data_dir, name), os.path.join(data_dir, name[:-3])):
            if os.path.exists(cand):
                sums[os.path.basename(cand)] = sha256_file(cand)
                break
    return sums


def _manifest_path(out_path) -> str:
    root, _ = os.path.splitext(str(out_path))
    return root + ".manifest.json"


def cmd_fetch_data(args) -> int:
    checksums = fetch_mnist(args.out, args.mirror)
    for name, digest in checksums.items():
        print(f"{name} sha256={digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, data_dir, limit = resolve_train_config(args)
    profile = load_noise_profile(config.noise_profile) if config.noise_profile else None
    images, labels = load_mnist_split(data_dir, "train")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    model, log = train(config, images, labels, noise_profile=profile)
    save_model(model, args.out)
    log.write_csv(args.metrics)
    write_manifest(_manifest_path(args.out), config, data_dir, limit,
                   _dataset_checksums(data_dir, "train"),
                   {"model": str(args.out), "metrics": str(args.metrics)})
    final_losses = log.unit_losses(max(r.epoch for r in log.rows))
    summary = " ".join(f"unit{k}={v:.4f}" for k, v in sorted(final_losses.items()))
    print(f"trained {config.algorithm} {config.arch!r}: final mean losses {summary}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    images, labels = load_mnist_split(args.test_dir, "test")
    report = evaluate(model, images, labels)
    emit_metrics_csv(report, args.report)
    print(f"accuracy={report.accuracy:.4f} error={report.error_rate:.4f} "
          f"n={report.sample_count}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .data import corrupt_dataset

    profile = load_noise_profile(args.profile) if args.profile else NoiseProfile()
    if args.seed is not None:
        profile = dataclasses.replace(profile, seed=args.seed)
    images, labels = load_mnist_split(args.in_dir, "train")
    corrupted, out_labels, types = corrupt_dataset(images, labels, profile)
    os.makedirs(args.out, exist_ok=True)
    write_idx_images(os.path.join(args.out, MNIST_FILES["train_images"][:-3]), corrupted)
    write_idx_labels(os.path.join(args.out, MNIST_FILES["train_labels"][:-3]), out_labels)
    counts = np.bincount(types, minlength=4)
    print("corrupted {} images (types: {} clean, {} gaussian, {} dropout, {} pure)".format(
        images.shape[0], *counts))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(seed=args.seed, instances=args.instances)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel err {r.worst:.3e} (threshold {r.threshold:g})")
        failed = failed or not r.passed
    return EXIT_USAGE if failed else EXIT_OK


def cmd_oracle_check(args) -> int:
    results = run_oracle_checks(seed=args.seed, n_models=args.models)
    failed = False
    worst = 0.0
    for r in results:
        worst = max(worst, r.worst)
        if not r.passed:
            print(f"FAIL {r.name}: max abs diff {r.worst:.3e} (threshold {r.threshold:g})")
            failed = True
    print(f"checked {args.models} models: worst deviation {worst:.3e}")
    return EXIT_USAGE if failed else EXIT_OK


def cmd_compare(args) -> int:
    profile = load_noise_profile(args.noise_profile) if args.noise_profile else None
    images, labels = load_mnist_split(args.data_dir, "train")
    if args.limit is not None:
        images, labels = images[:args.limit], labels[:args.limit]
    test_images, test_labels = load_mnist_split(args.data_dir, "test")
    rows = []
    for algorithm in ("intff", "ff", "bp"):
        config = TrainConfig(
            algorithm=algorithm, arch=args.arch, epochs=args.epochs,
            seed=args.seed, lr=args.lr, batch_size=args.batch_size,
            validation_fraction=args.validation_fraction, patience=args.patience)
        config.validate()
        model, _ = train(config, images, labels, noise_profile=profile)
        report = evaluate(model, test_images, test_labels)
        rows.append((algorithm, "Dense", resolve_arch(config).to_string(),
                     report.accuracy))
    print(f"{'algorithm':<10} {'type':<6} {'network size':<36} accuracy")
    for algorithm, kind, size, acc in rows:
        print(f"{algorithm:<10} {kind:<6} {size:<36} {acc:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write("algorithm,network_type,network_size,testing_accuracy\n")
            for algorithm, kind, size, acc in rows:
                fh.write(f"{algorithm},{kind},\"{size}\",{acc!r}\n")
    return EXIT_OK


_HANDLERS = {
    "fetch-data": cmd_fetch_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "corrupt": cmd_corrupt,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "compare": cmd_compare,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return _HANDLERS[args.command](args)


def main(argv=None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except NumericalOverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, IntFFError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
