"""Command-line entry point: ``msda-lab <command> [flags]``.

Every command resolves its configuration (JSON file, then flags), writes
``resolved_config.json`` next to its outputs under ``<out>/<command>/`` and
exits non-zero with a one-line diagnostic on failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import RunConfig, parse_config
from .cotrain import generate_pseudo_labels, write_partition
from .datagen import read_dataset, write_dataset
from .errors import DomainError, ParseError, PreconditionError

COMMANDS = ("gen-data", "train-source", "select", "adapt", "evaluate", "baseline", "ablate", "export-embeddings")
log = logging.getLogger("msda_lab")


class MissingArtifact(PreconditionError):
    pass


def _weights(text: str) -> dict:
    try:
        g, a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--weights expects three comma-separated numbers gamma,alpha,beta, got {text!r}")
    return {"gamma": g, "alpha": a, "beta": b}


def _targets(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root (default: $MSDA_LAB_OUT or ./msda_out)")
    common.add_argument("--tau-ss", dest="tau_ss", type=float)
    common.add_argument("--tau-pl", dest="tau_pl", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--weights", type=_weights, help="gamma,alpha,beta")
    common.add_argument("--targets", type=_targets, help="comma-separated target subject ids")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="msda-lab", description="Multimodal multi-source domain adaptation lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "baseline":
            p.add_argument("--kind", choices=P.BASELINES, action="append",
                           help="baseline to run (repeatable; default: all configured)")
        if name == "ablate":
            p.add_argument("--kind", choices=("tau_ss_sweep", "tau_pl_sweep", "loss_weights", "loss_components"))
            p.add_argument("--grid", help="JSON list of grid points")
        if name == "export-embeddings":
            p.add_argument("--checkpoint", help="bundle to export (default: the source-stage checkpoint)")
    return parser


def resolve(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in ("seed", "out", "tau_ss", "tau_pl", "epochs", "weights", "targets")}
    if getattr(args, "kind", None) and args.command == "ablate":
        overrides["ablate_kind"] = args.kind
    if getattr(args, "grid", None):
        try:
            overrides["ablate_grid"] = json.loads(args.grid)
        except json.JSONDecodeError as exc:
            raise ParseError(f"--grid: invalid JSON ({exc})") from None
    if getattr(args, "kind", None) and args.command == "baseline":
        overrides["baselines"] = list(args.kind)
    return parse_config(args.config, overrides)


# -- artifact layout ---------------------------------------------------------

def run_dir(cfg: RunConfig, command: str) -> Path:
    d = Path(cfg.out) / command
    d.mkdir(parents=True, exist_ok=True)
    cfg.write(d / "resolved_config.json")
    return d


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "gen-data" / "data"


def source_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "train-source" / "source_checkpoint.json"


def adapted_checkpoint(cfg: RunConfig, target: str) -> Path:
    return Path(cfg.out) / "adapt" / f"checkpoint_{target}.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path} (run `msda-lab {hint}` first)")
    return path


def load_subjects(cfg: RunConfig):
    if cfg.data_dir:
        return read_dataset(cfg.data_dir)
    if data_dir(cfg).exists():
        return read_dataset(data_dir(cfg))
    return P.load_subjects(cfg)


def _context(cfg: RunConfig):
    ckpt = _require(source_checkpoint(cfg), "train-source")
    bundle = P.ModelBundle.load(ckpt, cfg)
    sources, targets = P.partition_roles(load_subjects(cfg), cfg)
    train, held = P.split_sources(sources, cfg)
    if [s.subject_id for s in train] != bundle.source_ids:
        raise PreconditionError(f"{ckpt} was trained on sources {bundle.source_ids}, data has "
                                f"{[s.subject_id for s in train]}")
    return P.Prepared(train, held, targets, bundle, P.RunMetrics())


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> None:
    run_dir(cfg, "gen-data")
    write_dataset(P.load_subjects(cfg), data_dir(cfg))


def cmd_train_source(cfg: RunConfig) -> None:
    d = run_dir(cfg, "train-source")
    sources, _ = P.partition_roles(load_subjects(cfg), cfg)
    train, held = P.split_sources(sources, cfg)
    bundle, metrics = P.train_source_stage(train, cfg)
    bundle.save(source_checkpoint(cfg))
    P.write_rows(metrics.epochs, d / "source_metrics.csv")
    P.write_rows([P.probe_disentanglement(bundle, train, held, cfg.seed)], d / "probe.csv")


def cmd_select(cfg: RunConfig) -> None:
    ctx = _context(cfg)
    d = run_dir(cfg, "select")
    for target in ctx.targets:
        split = P.make_split(target, cfg)
        selected, table = P.choose_sources(ctx.bundle, ctx.sources, split, cfg)
        table.write_csv(d / f"selection_{target.subject_id}.csv", [s.subject_id for s in selected])


def cmd_adapt(cfg: RunConfig) -> None:
    ctx = _context(cfg)
    d = run_dir(cfg, "adapt")
    for target in ctx.targets:
        split = P.make_split(target, cfg)
        adapted, metrics, selected, table = P.run_msaco(ctx.bundle, ctx.sources, split, cfg)
        table.write_csv(d / f"selection_{target.subject_id}.csv", [s.subject_id for s in selected])
        metrics.write_csv(d / f"metrics_{target.subject_id}.csv")
        write_partition(generate_pseudo_labels(adapted.backbones, adapted.heads, split.train, cfg.tau_pl),
                        d / f"pseudo_labels_{target.subject_id}.csv")
        adapted.save(adapted_checkpoint(cfg, target.subject_id))


def cmd_evaluate(cfg: RunConfig) -> None:
    _, targets = P.partition_roles(load_subjects(cfg), cfg)
    d = run_dir(cfg, "evaluate")
    rows = []
    for target in targets:
        bundle = P.ModelBundle.load(_require(adapted_checkpoint(cfg, target.subject_id), "adapt"), cfg)
        rows.append({"method": "msaco", "target": target.subject_id,
                     "accuracy": P.evaluate(bundle, P.make_split(target, cfg))})
    P.write_rows(rows, d / "results.csv")


def cmd_baseline(cfg: RunConfig) -> None:
    ctx = _context(cfg)
    d = run_dir(cfg, "baseline")
    rows = []
    for kind in cfg.baselines:
        for target in ctx.targets:
            m = P.run_baseline(kind, ctx.bundle, ctx.sources, P.make_split(target, cfg), cfg)
            rows.append({"method": kind, "target": target.subject_id, "accuracy": m.final["test_acc"]})
            if m.epochs:
                m.write_csv(d / f"metrics_{kind}_{target.subject_id}.csv")
    P.write_rows(rows, d / "results.csv")


def cmd_ablate(cfg: RunConfig) -> None:
    ctx = _context(cfg)
    d = run_dir(cfg, "ablate")
    grid = cfg.ablate_grid if cfg.ablate_grid is not None else P.default_grid(cfg.ablate_kind)
    rows = P.ablate(cfg.ablate_kind, grid, cfg, ctx)
    P.write_rows(rows, d / f"ablation_{cfg.ablate_kind}.csv")


def cmd_export_embeddings(cfg: RunConfig, checkpoint: str | None = None) -> None:
    ckpt = Path(checkpoint) if checkpoint else source_checkpoint(cfg)
    bundle = P.ModelBundle.load(_require(ckpt, "train-source"), cfg)
    subjects = load_subjects(cfg)
    d = run_dir(cfg, "export-embeddings")
    pls = {}
    for s in subjects:
        if s.role == "target":
            part = generate_pseudo_labels(bundle.backbones, bundle.heads, s, cfg.tau_pl)
            pls[s.subject_id] = dict(zip(part.confident.tolist(), part.labels.tolist()))
    P.export_embeddings(bundle, subjects, d / "embeddings.csv", pls)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command == "export-embeddings":
            cmd_export_embeddings(cfg, args.checkpoint)
        else:
            globals()["cmd_" + args.command.replace("-", "_")](cfg)
    except (PreconditionError, DomainError, ParseError, OSError) as exc:
        print(f"msda-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
