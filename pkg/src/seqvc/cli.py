"""Command-line entry point: data generation, training, conversion,
evaluation, and attention export as reproducible batch commands.

Configuration is a flat "key = value" file merged with --key value flag
overrides; defaults are the published hyperparameters.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .data import (SyntheticTaskConfig, compute_norm, gen_synthetic, load_pairs,
                   normalize_pairs, read_features, read_groundtruth,
                   write_dataset, write_features)
from .errors import (ConfigError, DimensionError, EmptyInputError,
                     InvalidMaskError)
from .evaluation import evaluate_dataset, write_report
from .inference import convert, export_attention, read_attention_csv
from .model import ModelConfig
from .training import TrainingConfig, load_checkpoint, train


def _scalar_fields(cls):
    for f in dataclasses.fields(cls):
        if isinstance(f.default, (int, float)):
            yield f.name, type(f.default), f.default


def _build_schema():
    """Union of all scalar config fields; shared names must agree on defaults."""
    schema: dict = {}
    for cls in (SyntheticTaskConfig, ModelConfig, TrainingConfig):
        for name, kind, default in _scalar_fields(cls):
            if name in schema and schema[name] != (kind, default):
                raise AssertionError(f"conflicting defaults for config key {name!r}")
            schema[name] = (kind, default)
    schema["max_ratio"] = (float, 3.0)
    schema["stop_threshold"] = (float, 0.5)
    return schema


_SCHEMA = _build_schema()


@dataclasses.dataclass
class RunConfig:
    values: dict

    def synthetic(self) -> SyntheticTaskConfig:
        names = [n for n, _, _ in _scalar_fields(SyntheticTaskConfig)]
        return SyntheticTaskConfig(**{n: self.values[n] for n in names})

    def model(self) -> ModelConfig:
        names = [n for n, _, _ in _scalar_fields(ModelConfig)]
        return ModelConfig(**{n: self.values[n] for n in names})

    def training(self) -> TrainingConfig:
        names = [n for n, _, _ in _scalar_fields(TrainingConfig)]
        return TrainingConfig(**{n: self.values[n] for n in names})

    def validate(self) -> "RunConfig":
        # every field checked against its owner's invariants up front,
        # regardless of which subcommand will consume it
        self.synthetic()
        self.model()
        self.training()
        if not self.values["max_ratio"] > 0:
            raise ConfigError(f"max_ratio must be positive, "
                              f"got {self.values['max_ratio']}")
        if not 0.0 < self.values["stop_threshold"] < 1.0:
            raise ConfigError(f"stop_threshold must lie in (0, 1), "
                              f"got {self.values['stop_threshold']}")
        return self

    def __getitem__(self, key):
        return self.values[key]


def _parse_value(key: str, raw: str):
    kind, _ = _SCHEMA[key]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind.__name__}, "
                          f"got {raw!r}") from None


def parse_config(path=None, overrides=None) -> RunConfig:
    """File values first, then flag overrides, on top of the defaults."""
    values = {name: default for name, (_, default) in _SCHEMA.items()}

    def set_key(key: str, raw: str, where: str):
        if key not in _SCHEMA:
            valid = ", ".join(sorted(_SCHEMA))
            raise ConfigError(f"unknown config key {key!r} ({where}); "
                              f"valid keys: {valid}")
        values[key] = _parse_value(key, raw)

    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {line!r}")
            key, _, raw = stripped.partition("=")
            set_key(key.strip(), raw.strip(), f"{path}:{lineno}")
    for key, raw in overrides or []:
        set_key(key, raw, "command line")
    return RunConfig(values)


class _Parser(argparse.ArgumentParser):
    # spec requires usage errors to exit 1 with an "error:"-prefixed line
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="flat key = value file")
    for name in sorted(_SCHEMA):
        parser.add_argument(f"--{name}", default=None, metavar="V",
                            help=argparse.SUPPRESS)


def _config_from(args) -> RunConfig:
    overrides = [(name, getattr(args, name)) for name in _SCHEMA
                 if getattr(args, name) is not None]
    return parse_config(args.config, overrides).validate()


def _build_parser() -> _Parser:
    parser = _Parser(prog="seqvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a conversion model")
    p.add_argument("--data", required=True, help="dataset dir with manifest.tsv")
    p.add_argument("--out", required=True, help="run dir for checkpoint and log")
    _add_config_flags(p)

    p = sub.add_parser("convert", help="convert a source feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--attention", default=None,
                   help="optional attention dump (.pgm or .csv by suffix)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default="report.txt")
    _add_config_flags(p)

    p = sub.add_parser("export-attention", help="re-export an attention CSV")
    p.add_argument("--input", required=True, help="attention matrix CSV")
    p.add_argument("--output", required=True)
    p.add_argument("--format", default=None, choices=("pgm", "csv"))
    _add_config_flags(p)

    return parser


def _cmd_gen_data(args) -> int:
    cfg = _config_from(args).synthetic()
    pairs, gt = gen_synthetic(cfg)
    write_dataset(args.out, pairs, gt)
    return 0


def _cmd_train(args) -> int:
    run = _config_from(args)
    pairs = load_pairs(Path(args.data) / "manifest.tsv")
    norm = compute_norm(pairs)
    normalized = normalize_pairs(pairs, norm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(normalized, run.model(), run.training(), norm=norm,
                   checkpoint_path=out / "final.as2s", log_path=out / "train.log")
    if result.aborted:
        print(f"error: non-finite loss after epoch {result.epochs_run}, "
              "last good checkpoint retained", file=sys.stderr)
        return 2
    return 0


def _attention_format(path, explicit):
    if explicit is not None:
        return explicit
    suffix = Path(path).suffix.lower().lstrip(".")
    return suffix if suffix in ("pgm", "csv") else "pgm"


def _cmd_convert(args) -> int:
    run = _config_from(args)
    ckpt = load_checkpoint(args.checkpoint)
    x = read_features(args.input)
    result = convert(x, ckpt, max_ratio=run["max_ratio"],
                     stop_threshold=run["stop_threshold"])
    write_features(args.output, result.y_hat)
    if args.attention is not None:
        export_attention(result.attention, args.attention,
                         fmt=_attention_format(args.attention, None))
    return 0


def _cmd_eval(args) -> int:
    run = _config_from(args)
    ckpt = load_checkpoint(args.checkpoint)
    pairs = load_pairs(Path(args.data) / "manifest.tsv")
    gt_path = Path(args.data) / "groundtruth.tsv"
    rhos = read_groundtruth(gt_path).rhos if gt_path.exists() else None
    report = evaluate_dataset(pairs, ckpt, rhos=rhos, max_ratio=run["max_ratio"])
    write_report(report, args.report)
    return 0


def _cmd_export_attention(args) -> int:
    attention = read_attention_csv(args.input)
    export_attention(attention, args.output,
                     fmt=_attention_format(args.output, args.format))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "convert": _cmd_convert,
    "eval": _cmd_eval,
    "export-attention": _cmd_export_attention,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 1
    except (ConfigError, EmptyInputError, DimensionError, InvalidMaskError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
