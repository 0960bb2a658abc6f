"""Command-line entry point: ``fundmatch <command> [flags]``.

Every command writes its artifacts under ``--out`` and its progress to
standard error. Exit status: 0 success, 1 usage or configuration error,
2 data or schema error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .datagen import FILES, SyntheticSpec, generate, read_dataset, write_dataset
from .errors import (
    ConfigError,
    DomainError,
    GenerationError,
    NumericError,
    SchemaError,
    UnsupportedDatasetError,
)
from .evaluator import DEFAULT_KS, evaluate, export_embeddings, probe_disentanglement
from .fundgraph import build_graph, read_triples
from .model import Checkpoint, ModelInputs
from .trainer import VARIANTS, TrainConfig, fit, run_ablation

log = logging.getLogger("fundmatch")

CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fundmatch", description="Fund recommendation with disentangled user aspects.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="directory for this command's artifacts")
        p.add_argument("--seed", type=int, default=None, help="overrides the seed in --spec/--config")
        if "data" in flags:
            p.add_argument("--data", required=True, help="dataset directory written by gen-data")
        if "spec" in flags:
            p.add_argument("--spec", help="JSON synthetic data spec (defaults if omitted)")
        if "config" in flags:
            p.add_argument("--config", help="JSON training config (defaults if omitted)")
        if "variant" in flags:
            p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation variant to train")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        if "k" in flags:
            p.add_argument("--k", type=_ks, default=DEFAULT_KS, help="metric cutoffs, e.g. 5,10,15,20")
        return p

    command("gen-data", "write a synthetic dataset with planted latents", "spec")
    command("build-graph", "validate the fund graph and write its summary", "data")
    command("train", "train one model variant", "data", "config", "variant")
    command("eval", "compute ranking metrics for a checkpoint", "data", "checkpoint", "k")
    command("ablate", "train and evaluate all four variants on one dataset", "data", "config", "k")
    command("probe", "linear probes on the user aspect embeddings", "data", "checkpoint")
    command("export-emb", "write per-user aspect embeddings as TSV", "data", "checkpoint")
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, body: dict) -> None:
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "variant", None):
        config = config.with_variant(args.variant)
    return config


def _log_epoch(record: dict) -> None:
    log.info("epoch %d  total %.4f  val recall@10 %.4f", record["epoch"], record.get("total", float("nan")),
             record.get("val_recall@10", float("nan")))


def cmd_gen_data(args) -> None:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    spec.validate()
    log.info("generating %d users x %d funds (seed %d)", spec.users, spec.funds, spec.seed)
    bundle = generate(spec)
    out = write_dataset(bundle, _out_dir(args), spec)
    log.info("wrote %d interactions to %s", len(bundle.interactions), out)


def cmd_build_graph(args) -> None:
    data = read_dataset(args.data)
    graph = build_graph(read_triples(Path(args.data) / FILES["graph"]), data.entity_counts())
    _write_json(_out_dir(args) / "graph_summary.json", graph.summary())
    log.info("graph: %d entities, %d edges", graph.num_entities, len(graph.edges))


def cmd_train(args) -> None:
    config = _config(args)
    data = read_dataset(args.data)
    log.info("training variant %s for %d epochs", config.variant, config.epochs)
    ckpt = fit(data, config, progress=_log_epoch)
    out = _out_dir(args)
    ckpt.save(out / CHECKPOINT_NAME)
    _write_json(out / "train_metrics.json", ckpt.metrics)
    log.info("kept epoch %d (val recall@10 %.4f)", ckpt.epoch, ckpt.metrics["val_recall@10"])


def cmd_eval(args) -> None:
    ckpt = Checkpoint.load(args.checkpoint)
    report = evaluate(ckpt, read_dataset(args.data), "test", args.k)
    report.write(_out_dir(args) / "metrics.json")
    log.info("%s: %s", report.variant, ", ".join(f"{k} {v:.4f}" for k, v in sorted(report.metrics.items())))


def cmd_ablate(args) -> None:
    config = _config(args)
    data = read_dataset(args.data)
    out = _out_dir(args)
    inputs = ModelInputs.from_dataset(data, config.n_max)

    def done(name, report):
        log.info("%s: recall@10 %.4f ndcg@10 %.4f", name, report.metrics.get("recall@10", float("nan")),
                 report.metrics.get("ndcg@10", float("nan")))

    for name in VARIANTS:
        log.info("training variant %s", name)
        results = run_ablation(data, config, (name,), args.k, done, inputs)
        ckpt, report = results[name]
        ckpt.save(out / f"{name}.ckpt")
        report.write(out / f"metrics_{name}.json")


def cmd_probe(args) -> None:
    ckpt = Checkpoint.load(args.checkpoint)
    seed = args.seed if args.seed is not None else int(ckpt.config.get("seed", 0))
    report = probe_disentanglement(ckpt, read_dataset(args.data), seed)
    (_out_dir(args) / "probe.json").write_text(report.to_json() + "\n", encoding="utf-8")
    log.info("probe accuracy %s; shuffled %s", report.accuracy, report.shuffled_accuracy)


def cmd_export_emb(args) -> None:
    ckpt = Checkpoint.load(args.checkpoint)
    path = export_embeddings(ckpt, read_dataset(args.data), _out_dir(args) / "embeddings.tsv")
    log.info("wrote %s", path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
    "export-emb": cmd_export_emb,
}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (SchemaError, GenerationError, UnsupportedDatasetError, DomainError, OSError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
