"""Command-line entry point: prepare -> pretrain -> train-cometa -> evaluate -> report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import beg, checkpoint, cometa, plotting
from .config import (ConfigError, load_config, load_data, protocol_config, set_value, split_spec,
                     validate)
from .dataio import DataError, split, write_manifest
from .evalharness import PHASES, pretrain_backbone, prepare_seed, run_protocol
from .recmodel import FeatureSchema, ModelParams
from .report import emit_report, reports_from_json

logger = logging.getLogger("cometa_lab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class RefusedError(RuntimeError):
    pass


class SchemaMismatchError(ConfigError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="seed to run (repeatable); overrides run.seeds")
    common.add_argument("--out", help="output directory; overrides run.out")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--kinds", help="comma-separated initializer kinds; overrides run.kinds")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config value, e.g. model.pretrain_epochs=3")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cometa-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="split the data and write the manifest")
    sub.add_parser("pretrain", parents=[common], help="pre-train the backbone on old items")
    sub.add_parser("train-cometa", parents=[common], help="train the embedding generators")
    ev = sub.add_parser("evaluate", parents=[common], help="run the cold/warm protocol")
    ev.add_argument("--phase", choices=["all", "cold"], help="'cold' stops after the cold phase")
    ev.add_argument("--parallel-seeds", type=int, help="worker processes for seeds")
    sub.add_parser("report", parents=[common], help="re-render report files from report.json")
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_value(cfg, key, value)
    if args.seeds:
        cfg["run"]["seeds"] = list(args.seeds)
    if args.out:
        cfg["run"]["out"] = args.out
    if args.kinds:
        cfg["run"]["kinds"] = [k.strip() for k in args.kinds.split(",") if k.strip()]
    if getattr(args, "phase", None):
        cfg["run"]["phase"] = args.phase
    if getattr(args, "parallel_seeds", None) is not None:
        cfg["run"]["parallel_seeds"] = args.parallel_seeds
    return validate(cfg)


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise RefusedError(f"{path} exists; rerun with --force to overwrite")


def _paths(cfg: dict) -> dict[str, Path]:
    out = Path(cfg["run"]["out"])
    return {"out": out, "ckpt": out / "checkpoints", "manifest": out / "split_manifest.json"}


def model_ckpt(cfg, seed) -> Path:
    return _paths(cfg)["ckpt"] / f"model_seed{seed}.ckpt"


def seg_ckpt(cfg, seed) -> Path:
    return _paths(cfg)["ckpt"] / f"cometa_seed{seed}.ckpt"


def _load_split(cfg):
    log = load_data(cfg)
    return log, split(log, split_spec(cfg))


def _expected_schema(cfg, log) -> FeatureSchema:
    p = protocol_config(cfg)
    return FeatureSchema.from_log(log, p.dim, p.hidden)


def _load_model(cfg, log, seed) -> ModelParams | None:
    path = model_ckpt(cfg, seed)
    if not path.exists():
        return None
    model = checkpoint.model_from(checkpoint.load(path))
    if model.schema != _expected_schema(cfg, log):
        raise SchemaMismatchError(f"{path}: checkpoint schema does not match the configured data/model")
    return model


def _load_generators(cfg, model: ModelParams, seed) -> dict:
    path = seg_ckpt(cfg, seed)
    if not path.exists():
        return {}
    sections = checkpoint.load(path)
    gens = {}
    for tag, (meta, _) in sections.items():
        if meta.get("model_digest") != model.digest():
            raise SchemaMismatchError(f"{path}: generators were trained on a different backbone")
        gens[tag.split(".", 1)[1]] = checkpoint.seg_from(sections, tag)
    return gens


# commands ------------------------------------------------------------------

def cmd_prepare(cfg, force=False) -> Path:
    paths = _paths(cfg)
    _guard(paths["manifest"], force)
    log, result = _load_split(cfg)
    paths["out"].mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(paths["manifest"], log, result, split_spec(cfg))
    logger.info("split: %s", json.dumps(manifest["counts"], sort_keys=True))
    return paths["manifest"]


def cmd_pretrain(cfg, force=False) -> list[Path]:
    log, result = _load_split(cfg)
    pcfg = protocol_config(cfg)
    written = []
    for seed in cfg["run"]["seeds"]:
        path = model_ckpt(cfg, seed)
        _guard(path, force)
        logger.info("pretraining seed %d", seed)
        model, losses = pretrain_backbone(log, result, pcfg, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, {"model": checkpoint.model_section(model, seed=seed, losses=losses)})
        written.append(path)
    return written


def cmd_train_cometa(cfg, force=False) -> list[Path]:
    log, result = _load_split(cfg)
    pcfg = protocol_config(cfg)
    variants = cometa.needed_generators(cfg["run"]["kinds"]) or ["full"]
    written = []
    for seed in cfg["run"]["seeds"]:
        model = _load_model(cfg, log, seed)
        if model is None:
            raise FileNotFoundError(f"missing checkpoint: {model_ckpt(cfg, seed)} (run `pretrain` first)")
        path = seg_ckpt(cfg, seed)
        _guard(path, force)
        before = model.digest()
        ctx = cometa.build_context(model, log, result, pcfg.k, pcfg.positive_only)
        trained = cometa.train_generators(ctx, result, pcfg.seg, seed, variants)
        assert model.digest() == before, "backbone changed during generator training"
        checkpoint.save(path, {f"seg.{v}": checkpoint.seg_section(s, model_digest=before, seed=seed)
                               for v, (s, _) in trained.items()})
        out = _paths(cfg)["out"]
        nl = [beg.top_k_neighbors(ctx.index, i, ctx.old_items, pcfg.k)
              for i in sorted(ctx.old_items) if i in ctx.index.item_users]
        beg.dump_neighbors(nl, out / f"neighbors_seed{seed}.tsv")
        curves = {v: h.epochs for v, (_, h) in trained.items()}
        with open(out / f"episode_loss_seed{seed}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "epoch", "loss_a", "loss_b", "loss_seg"])
            for v, rows in curves.items():
                for r in rows:
                    w.writerow([v, r["epoch"], repr(r["loss_a"]), repr(r["loss_b"]), repr(r["loss_seg"])])
        plotting.loss_curve_figure(curves, out / f"episode_loss_seed{seed}.png")
        written.append(path)
    return written


def _seed_reports(cfg: dict, seed: int):
    log, result = _load_split(cfg)
    pcfg = protocol_config(cfg)
    kinds = cfg["run"]["kinds"]
    model = _load_model(cfg, log, seed)
    gens = _load_generators(cfg, model, seed) if model is not None else {}
    art = prepare_seed(log, result, pcfg, seed, kinds, model=model, generators=gens)
    phases = PHASES if cfg["run"]["phase"] == "all" else ("cold",)
    return run_protocol(log, result, pcfg, kinds, [seed], phases, artifacts={seed: art})


def cmd_evaluate(cfg, force=False) -> dict[str, Path]:
    out = _paths(cfg)["out"]
    _guard(out / "report.json", force)
    seeds = cfg["run"]["seeds"]
    workers = min(int(cfg["run"]["parallel_seeds"]), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_seed_reports, [cfg] * len(seeds), seeds))
    else:
        chunks = [_seed_reports(cfg, s) for s in seeds]
    reports = [r for chunk in chunks for r in chunk]
    paths = emit_report(reports, out)
    logger.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return paths


def cmd_report(cfg, force=False) -> dict[str, Path]:
    out = _paths(cfg)["out"]
    src = out / "report.json"
    if not src.exists():
        raise FileNotFoundError(f"missing report data: {src} (run `evaluate` first)")
    return emit_report(reports_from_json(src), out)


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "train-cometa": cmd_train_cometa,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, force=args.force)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RefusedError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort exit code mapping
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
