"""Command-line entry point: ``qase <command> [flags]``.

Exit status is 0 on success, 1 when inputs fail validation and 2 when a run
fails after validation. Diagnostics go to stderr; data goes to stdout or to
the files named by flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from typing import Sequence

from . import __version__
from .checkpoint import CheckpointError
from .data import PRESETS, DataError, generate_corpus, load, preset, write_jsonl
from .head import HEAD_KINDS, HeadError
from .metrics import KINDS, MetricError, evaluate, infer_kind, read_predictions, write_predictions
from .plm import ModelError
from .prompts import ORDERINGS, PromptError, tokenize
from .spans import CharSpan, SpanError, format_tags, spans_to_tags
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingError,
    closed_form_delta,
    load_generator,
    parse_grid,
    report_params,
    sweep_beta,
    train,
)

log = logging.getLogger("qase")

VALIDATION_ERRORS = (ConfigError, DataError, PromptError, MetricError, CheckpointError, ModelError, HeadError, SpanError)

# config fields whose flag name differs from the field name
_FLAG_NAMES = {"head_kind": "head", "prompt_ordering": "ordering", "lora_enabled": "lora"}
_CHOICES = {"head_kind": HEAD_KINDS, "prompt_ordering": ORDERINGS, "dtype": ("float32", "float64")}
_HELP = {
    "beta": "weight of the tagging loss",
    "head_kind": "tagging head",
    "prompt_ordering": "where the question sits in the prompt",
    "lora_enabled": "train LoRA adapters instead of the full generator",
    "head_width": "head projection width (default: d_model)",
    "head_heads": "attention heads inside the tagging head",
    "multi_span_prompt": "force the multi-span prompt on or off (default: auto from data)",
    "patience": "early-stop after this many epochs without improvement",
    "min_delta": "smallest epoch-loss decrease counted as improvement",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (flags override --config, which overrides defaults)")
    g.add_argument("--config", help="JSON file of config keys")
    for key, default in TrainConfig().to_flat().items():
        flag = "--" + _FLAG_NAMES.get(key, key).replace("_", "-")
        kind = type(default)
        if key == "lora_enabled":
            g.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=_HELP[key])
            continue
        if key == "multi_span_prompt":
            g.add_argument(flag, dest=key, type=_bool, default=None, metavar="BOOL", help=_HELP[key])
            continue
        text = _HELP.get(key, key.replace("_", " "))
        if default is None:
            kind = int
        else:
            text += f" (default: {default})"
        g.add_argument(flag, dest=key, type=kind, default=None, choices=_CHOICES.get(key), help=text)


def _config(args) -> TrainConfig:
    flat = TrainConfig().to_flat()
    if args.config:
        flat = TrainConfig.load(args.config).to_flat()
    for key in flat:
        value = getattr(args, key, None)
        if value is not None:
            flat[key] = value
    return TrainConfig.from_flat(flat)


def _load_data(path, fmt):
    examples = load(path, fmt)
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples


def _write_text(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    overrides = {}
    if args.n_examples is not None:
        overrides["n_examples"] = args.n_examples
    if args.multi_span_fraction is not None:
        overrides["multi_span_fraction"] = args.multi_span_fraction
    corpus = generate_corpus(preset(args.preset, seed=args.seed, **overrides))
    if args.dev_size:
        if not 0 < args.dev_size < len(corpus):
            raise DataError(f"--dev-size must be between 1 and {len(corpus) - 1}")
        if not args.dev_out:
            raise DataError("--dev-size needs --dev-out")
        write_jsonl(corpus[: -args.dev_size], args.out)
        write_jsonl(corpus[-args.dev_size :], args.dev_out)
    else:
        write_jsonl(corpus, args.out)


def cmd_train(args) -> None:
    config = _config(args)
    corpus = _load_data(args.data, args.format)
    sink = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout

    def on_epoch(rec):
        sink.write(json.dumps(rec, sort_keys=True) + "\n")
        sink.flush()

    try:
        result = train(corpus, config, on_epoch=on_epoch)
    finally:
        if sink is not sys.stdout:
            sink.close()
    result.model.save(args.out)
    log.info("wrote %s after %d epochs (%d steps)", args.out, len(result.history), result.steps)


def cmd_infer(args) -> None:
    examples = _load_data(args.data, args.format)
    generator = load_generator(args.ckpt, args.ordering)
    write_predictions(generator.predict(examples), args.out)


def cmd_eval(args) -> None:
    examples = _load_data(args.data, args.format)
    if bool(args.ckpt) == bool(args.pred):
        raise ConfigError("eval needs exactly one of --ckpt or --pred")
    if args.pred:
        preds = read_predictions(args.pred)
    else:
        preds = load_generator(args.ckpt, args.ordering).predict(examples)
    kind = args.kind or ("quoref" if args.format == "quoref" else infer_kind(examples))
    _write_text(evaluate(preds, examples, kind).to_text(), args.report)


def cmd_tag(args) -> None:
    context = args.context
    offsets = [(t.start, t.end) for t in tokenize(context)]
    spans = []
    for item in args.spans:
        try:
            start, end = (int(x) for x in item.split(":"))
        except ValueError:
            raise SpanError(f"bad span {item!r}; expected start:end character offsets") from None
        spans.append(CharSpan.of(context, start, end))
    print(format_tags(spans_to_tags(offsets, spans, len(context))))


def cmd_params(args) -> None:
    config = _config(args)
    base, with_head, delta = report_params(config, args.vocab_size)
    print(f"base={base}\nwith_head={with_head}\ndelta={delta}")
    expected = closed_form_delta(config)
    if delta != expected:
        raise TrainingError(f"instantiated head has {delta} parameters, closed form gives {expected}")


SWEEP_COLUMNS = ("beta", "head", "ordering", "epochs", "kind", "n_examples")


def cmd_sweep(args) -> None:
    config = _config(args)
    corpus = _load_data(args.data, args.format)
    dev = _load_data(args.dev, args.format)
    grid = parse_grid(args.beta_grid) if args.beta_grid else [config.beta]
    heads = [h.strip() for h in args.heads.split(",")] if args.heads else None
    for h in heads or []:
        if h not in HEAD_KINDS:
            raise ConfigError(f"unknown head {h!r} in --heads; expected {HEAD_KINDS}")
    kind = args.kind or ("quoref" if args.format == "quoref" else None)
    rows = sweep_beta(corpus, dev, config, grid, heads, kind)
    cols = list(SWEEP_COLUMNS) + [k for k in rows[0] if k not in SWEEP_COLUMNS]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    _write_text("\n".join(lines) + "\n", args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qase", description="Question-attended span extraction on a toy encoder-decoder.")
    parser.add_argument("--version", action="version", version=f"qase {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    formats = ("jsonl", "squad", "multispan", "quoref")

    p = sub.add_parser("gen-data", help="write a seeded synthetic corpus as JSONL")
    p.add_argument("--preset", default="default", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-examples", type=int)
    p.add_argument("--multi-span-fraction", type=float)
    p.add_argument("--out", required=True, help="output JSONL (training part when --dev-size is set)")
    p.add_argument("--dev-size", type=int, default=0, help="hold out the last N examples")
    p.add_argument("--dev-out", help="output JSONL for the held-out examples")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fine-tune generator and head, write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--format", default="jsonl", choices=formats)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch JSONL log (default: stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate answers with the generator only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", default="jsonl", choices=formats)
    p.add_argument("--ordering", choices=ORDERINGS, help="override the checkpoint's prompt ordering")
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--format", default="jsonl", choices=formats)
    p.add_argument("--ckpt")
    p.add_argument("--pred", help="predictions JSONL instead of --ckpt")
    p.add_argument("--ordering", choices=ORDERINGS)
    p.add_argument("--kind", choices=KINDS, help="metric family (default: from data)")
    p.add_argument("--report", help="report file (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tag", help="print IO tags for character spans of a context")
    p.add_argument("--context", required=True)
    p.add_argument("--spans", nargs="*", default=[], metavar="START:END")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("params", help="trainable parameter counts with and without the head")
    p.add_argument("--vocab-size", type=int, default=256)
    _add_config_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("sweep", help="train and evaluate over a beta grid and head kinds")
    p.add_argument("--data", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--format", default="jsonl", choices=formats)
    p.add_argument("--beta-grid", help="lo:hi:step or comma list (default: config beta)")
    p.add_argument("--heads", help="comma list of head kinds to compare (default: config head)")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--out", help="TSV table (default: stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    start = time.perf_counter()
    try:
        args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"qase {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, ValueError) as e:
        print(f"qase {args.command}: failed: {e}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
