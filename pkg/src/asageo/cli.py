"""Command line entry point: ``asageo {synth,train,eval,ablate,export-attn}``."""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import config_of, load_model, read_checkpoint
from .config import RunConfig, apply_overrides
from .errors import CheckpointError, ConfigError, DatasetError, NumericError, PartitionError
from .export import image_attention, save_heatmaps, write_attention_csv
from .retrieval import DIRECTIONS, evaluate, format_table, write_rankings_csv
from .training import Trainer, configure_threads

log = logging.getLogger("asageo")

ABLATION_FIELDS = ["variant", "strategy", "num_parts", "uav_to_sat_recall@1", "uav_to_sat_ap",
                   "sat_to_uav_recall@1", "sat_to_uav_ap"]


class CommandError(Exception):
    pass


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    apply_overrides(cfg, args.overrides or [])
    if getattr(args, "seed", None) is not None and args.command != "synth":
        cfg.train.seed = args.seed
    if getattr(args, "data", None):
        cfg.data.root = args.data
    return cfg


def prepare_output(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CommandError(f"output {out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_train_data(cfg: RunConfig):
    if not cfg.data.root:
        raise CommandError("no dataset given; pass --data DIR or set data.root (try `asageo synth`)")
    if not Path(cfg.data.root).is_dir():
        raise CommandError(f"dataset {cfg.data.root} not found; generate one with `asageo synth`")
    manifest = D.load_university1652(cfg.data.root, "train")
    store = D.ImageStore(cfg.data.root, (cfg.backbone.image_height, cfg.backbone.image_width))
    return manifest, store


def load_eval_data(cfg: RunConfig, split: str):
    """Returns ``{direction: (query, gallery)}`` manifests."""
    root = cfg.data.root
    if split == "train":
        m = D.load_university1652(root, "train")
        return {d: (m, m) for d in DIRECTIONS}
    pairs = {
        "uav_to_sat": (D.load_university1652(root, "query_uav"), D.load_university1652(root, "gallery_sat")),
        "sat_to_uav": (D.load_university1652(root, "query_sat"), D.load_university1652(root, "gallery_uav")),
    }
    if (Path(root) / "train").is_dir():
        train = D.load_university1652(root, "train")
        D.assert_disjoint(train, *[m for pair in pairs.values() for m in pair])
    return pairs


def run_training(cfg: RunConfig, out: Path | None, resume=None) -> Trainer:
    manifest, store = load_train_data(cfg)
    n_classes = len(manifest.locations())
    if cfg.head.num_classes != n_classes:
        log.info("head.num_classes set to %d from the training split", n_classes)
        cfg.head.num_classes = n_classes
    cfg.validate()
    if out is not None:
        cfg.save(out / "config.json")
    val = None
    if cfg.train.eval_every and (Path(cfg.data.root) / "test").is_dir():
        q, g = load_eval_data(cfg, "test")["uav_to_sat"]
        val = (q, g, D.ImageStore(cfg.data.root, (cfg.backbone.image_height, cfg.backbone.image_width)))
    trainer = Trainer(cfg, manifest, store, output_dir=out, val=val)
    if resume:
        trainer.load_state(read_checkpoint(resume))
    trainer.fit()
    if out is not None:
        trainer.write_metrics(out / "metrics.csv")
        trainer.save(out / "last.pt")
    return trainer


def run_eval(model, cfg: RunConfig, norm, split: str, directions) -> list:
    store = D.ImageStore(cfg.data.root, (cfg.backbone.image_height, cfg.backbone.image_width))
    pairs = load_eval_data(cfg, split)
    return [evaluate(model, *pairs[d], store, norm, d) for d in directions]


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    if args.locations < 2:
        raise CommandError("--locations must be >= 2 (retrieval needs at least two classes)")
    out = prepare_output(args.output, args.force)
    seed = 7 if args.seed is None else args.seed
    manifests = D.materialize_synthetic(out, args.locations, args.uav_views, seed, args.size,
                                        args.test_locations)
    n = sum(len(m.entries) for m in manifests.values())
    print(f"wrote {n} images for {args.locations} training locations to {out}")


def cmd_train(args) -> None:
    cfg = resolve_config(args)
    if args.resume:
        # the checkpoint usually lives in the output directory; keep it
        if not Path(args.resume).is_file():
            raise CommandError(f"checkpoint {args.resume} not found")
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_output(args.output, args.force)
    trainer = run_training(cfg, out, args.resume)
    last = trainer.state.history[-1] if trainer.state.history else None
    if last:
        print(f"trained {trainer.state.step} steps; final loss {last['loss_total']:.4f}")


def cmd_eval(args) -> None:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CommandError(f"checkpoint {ckpt} not found")
    requested = None
    if args.config or args.overrides:
        # overrides apply on top of the stored config unless a full config is given
        requested = RunConfig.load(args.config) if args.config else config_of(read_checkpoint(ckpt))
        apply_overrides(requested, args.overrides)
    model, cfg, payload = load_model(ckpt, requested)
    if args.data:
        cfg.data.root = args.data
    norm = (np.asarray(payload["norm"]["mean"]), np.asarray(payload["norm"]["std"]))
    directions = DIRECTIONS if args.direction == "both" else (args.direction,)
    reports = run_eval(model, cfg, norm, args.split or cfg.data.eval_split, directions)
    out = prepare_output(args.output, args.force)
    for r in reports:
        (out / f"report_{r.direction}.json").write_text(r.to_json() + "\n")
        write_rankings_csv(out / f"rankings_{r.direction}.csv", r)
    table = format_table(reports)
    (out / "summary.txt").write_text(table + "\n")
    print(table)


def cmd_ablate(args) -> None:
    base = resolve_config(args)
    out = prepare_output(args.output, args.force)
    base.save(out / "config.json")
    sweeps = ["strategy", "parts"] if args.sweep == "both" else [args.sweep]
    for sweep in sweeps:
        if sweep == "strategy":
            variants = [("strategy", s) for s in ("hard_uniform", "hard_kmeans", "soft_kmeans")]
        else:
            variants = [("num_parts", k) for k in (1, 2, 3, 4)]
        rows = []
        for key, value in variants:
            cfg = RunConfig.from_dict(base.to_dict())
            apply_overrides(cfg, [f"asa.{key}={value}"])
            log.info("ablation %s=%s", key, value)
            trainer = run_training(cfg, None)
            reports = {r.direction: r for r in run_eval(trainer.model, cfg, trainer.norm, args.split, DIRECTIONS)}
            rows.append({
                "variant": f"{key}={value}",
                "strategy": cfg.asa.strategy,
                "num_parts": cfg.asa.num_parts,
                "uav_to_sat_recall@1": repr(reports["uav_to_sat"].recall_at[1]),
                "uav_to_sat_ap": repr(reports["uav_to_sat"].mean_ap),
                "sat_to_uav_recall@1": repr(reports["sat_to_uav"].recall_at[1]),
                "sat_to_uav_ap": repr(reports["sat_to_uav"].mean_ap),
            })
        path = out / f"ablation_{sweep}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=ABLATION_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {path}")


def cmd_export_attn(args) -> None:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CommandError(f"checkpoint {ckpt} not found")
    model, cfg, payload = load_model(ckpt)
    norm = (np.asarray(payload["norm"]["mean"]), np.asarray(payload["norm"]["std"]))
    image = D.load_image(args.image)
    attention, anchors = image_attention(model, image, norm)
    out = prepare_output(args.output, args.force)
    write_attention_csv(out / "attention.csv", attention)
    paths = save_heatmaps(attention, cfg.backbone.grid, out, args.upscale)
    if anchors is not None:
        (out / "anchors.txt").write_text(" ".join(str(int(a)) for a in anchors) + "\n")
    print(f"wrote {len(paths)} heatmaps and attention.csv to {out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asageo", description=__doc__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_required=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--output", required=output_required, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--overrides", nargs="*", default=[], metavar="KEY=VALUE")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic dataset in University-1652 layout"))
    p.add_argument("--locations", type=int, default=8)
    p.add_argument("--uav-views", type=int, default=6)
    p.add_argument("--test-locations", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint in both retrieval directions"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (defaults to the one stored in the checkpoint)")
    p.add_argument("--split", choices=["test", "train"], help="test: query/gallery folders; train: training images")
    p.add_argument("--direction", choices=["both", *DIRECTIONS], default="both")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="partition-strategy and part-count sweeps"))
    p.add_argument("--data", help="dataset root")
    p.add_argument("--sweep", choices=["strategy", "parts", "both"], default="both")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("export-attn", help="export per-part attention heatmaps for one image"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--upscale", type=int, default=1)
    p.set_defaults(func=cmd_export_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        args.func(args)
    except (CommandError, ConfigError, DatasetError, CheckpointError, NumericError, PartitionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
