"""Two-branch training: batch construction, SGD schedule, train step and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import data as D
from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .errors import ConfigError, DatasetError, NumericError
from .heads import batch_triplet_loss, ce_loss, total_loss
from .model import GeoLocalizer

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "epoch", "loss_ce", "loss_triplet", "loss_total", "lr_backbone", "lr_new"]


def configure_threads() -> None:
    n = os.environ.get("ASA_NUM_THREADS")
    if n:
        torch.set_num_threads(int(n))


def lr_at(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Step schedule: both group rates decay once per passed decay epoch."""
    passed = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    scale = cfg.lr_decay_factor ** passed
    return cfg.base_lr_backbone * scale, cfg.base_lr_new * scale


def build_optimizer(model: GeoLocalizer, cfg: TrainConfig) -> torch.optim.SGD:
    backbone, new = model.param_groups()
    return torch.optim.SGD(
        [
            {"params": backbone, "lr": cfg.base_lr_backbone, "name": "backbone"},
            {"params": new, "lr": cfg.base_lr_new, "name": "new"},
        ],
        lr=cfg.base_lr_new,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def set_lr(optimizer, lrs: tuple[float, float]) -> None:
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr


@dataclass
class Batch:
    images: torch.Tensor  # (2P, C, H, W): P UAV images then P satellite images
    labels: torch.Tensor
    locations: torch.Tensor
    views: torch.Tensor  # 0 = uav, 1 = satellite
    sample_ids: list[str]


def to_tensor(images: list[np.ndarray], mean, std) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32)
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class BatchBuilder:
    """Pairs each oversampled satellite draw with a uniformly drawn UAV view."""

    def __init__(self, manifest: D.DatasetManifest, store: D.ImageStore, cfg: RunConfig, norm):
        self.manifest = manifest
        self.store = store
        self.cfg = cfg
        self.norm = norm
        self.class_ids = manifest.locations()
        self.label_of = {c: i for i, c in enumerate(self.class_ids)}
        self.uav_by_loc: dict[str, list[D.ManifestEntry]] = {}
        for e in manifest.by_view("uav"):
            self.uav_by_loc.setdefault(e.location_id, []).append(e)
        sat_locs = {e.location_id for e in manifest.by_view("satellite")}
        self.locations = sorted(sat_locs & set(self.uav_by_loc))
        self.pairs_per_batch = cfg.train.batch_size // 2
        if len(self.locations) < self.pairs_per_batch:
            raise DatasetError(
                f"batch_size {cfg.train.batch_size} needs {self.pairs_per_batch} locations with both "
                f"views, found {len(self.locations)}"
            )

    def epoch_plan(self, rng: np.random.Generator) -> list[list[tuple]]:
        """Draw one epoch of batches as ``[(uav_entry, sat_item), ...]`` lists."""
        dc = self.cfg.data
        stream = D.oversample_satellite(
            self.manifest, dc.satellite_factor, rng, augment_images=dc.augment,
            flip=dc.flip, max_rotation=dc.max_rotation, crop_scale_min=dc.crop_scale_min,
        )
        stream = [s for s in stream if s.entry.location_id in self.uav_by_loc]
        plan = []
        for r in range(dc.satellite_factor):
            items = [s for s in stream if s.repeat == r]
            order = rng.permutation(len(items))
            p = self.pairs_per_batch
            for start in range(0, len(order) - p + 1, p):
                chunk = [items[i] for i in order[start:start + p]]
                if len({s.entry.location_id for s in chunk}) < p:
                    continue
                pairs = []
                for s in chunk:
                    uavs = self.uav_by_loc[s.entry.location_id]
                    pairs.append((uavs[int(rng.integers(len(uavs)))], s))
                plan.append(pairs)
        return plan

    def samples(self, pairs) -> list[tuple[D.GeoSample, D.GeoSample]]:
        out = []
        for uav, sat in pairs:
            sat_img = self.store.get(sat.entry)
            if sat.augment is not None:
                sat_img = D.augment(sat_img, sat.augment)
            label = self.label_of[uav.location_id]
            out.append((
                D.GeoSample(self.store.get(uav), uav.location_id, "uav", label, uav.sample_id),
                D.GeoSample(sat_img, sat.entry.location_id, "satellite", label, sat.entry.sample_id),
            ))
        return out

    def collate(self, pairs) -> Batch:
        samples = self.samples(pairs)
        ordered = [u for u, _ in samples] + [s for _, s in samples]
        labels = torch.tensor([s.label for s in ordered], dtype=torch.long)
        return Batch(
            images=to_tensor([s.image for s in ordered], *self.norm),
            labels=labels,
            locations=labels.clone(),
            views=torch.tensor([0 if s.view == "uav" else 1 for s in ordered]),
            sample_ids=[s.sample_id for s in ordered],
        )


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best_recall: float = -1.0


class Trainer:
    def __init__(self, cfg: RunConfig, manifest: D.DatasetManifest, store: D.ImageStore,
                 output_dir=None, norm=None, val=None):
        cfg.validate()
        configure_threads()
        self.cfg = cfg
        self.output_dir = Path(output_dir) if output_dir else None
        if norm is None:
            norm = (D.channel_stats(store, manifest.entries) if cfg.data.normalize
                    else (np.full(3, 0.5), np.full(3, 0.5)))
        self.norm = (np.asarray(norm[0], dtype=np.float64), np.asarray(norm[1], dtype=np.float64))
        self.builder = BatchBuilder(manifest, store, cfg, self.norm)
        if cfg.head.num_classes != len(self.builder.class_ids):
            raise ConfigError(
                f"head.num_classes={cfg.head.num_classes} but the training split has "
                f"{len(self.builder.class_ids)} locations"
            )
        torch.manual_seed(cfg.train.seed)
        self.model = GeoLocalizer(cfg)
        self.optimizer = build_optimizer(self.model, cfg.train)
        self.rng = np.random.default_rng(cfg.train.seed)
        self.state = TrainState()
        self.val = val  # optional (query, gallery, store) for best-checkpoint tracking

    # ---------------------------------------------------------------- steps

    def train_step(self, batch: Batch) -> dict:
        model = self.model
        assert model.uav_branch is model.satellite_branch
        model.train()
        out = model(batch.images)
        hc = self.cfg.head
        ce = ce_loss(out, batch.labels, hc.include_global_head)
        tri = batch_triplet_loss(out.f, batch.locations, batch.views, hc.margin, hc.include_global_head)
        loss = total_loss(ce, tri)
        if not torch.isfinite(loss):
            self._dump_divergence(batch, ce, tri)
            raise NumericError(f"non-finite loss at step {self.state.step}; batch: {batch.sample_ids}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.train.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        lrs = [g["lr"] for g in self.optimizer.param_groups]
        record = {
            "step": self.state.step,
            "epoch": self.state.epoch,
            "loss_ce": float(ce.detach()),
            "loss_triplet": float(tri.detach()),
            "loss_total": float(loss.detach()),
            "lr_backbone": lrs[0],
            "lr_new": lrs[1],
        }
        self.state.step += 1
        self.state.history.append(record)
        return record

    def _dump_divergence(self, batch: Batch, ce, tri) -> None:
        if self.output_dir is None:
            return
        self.output_dir.mkdir(parents=True, exist_ok=True)
        info = {"step": self.state.step, "epoch": self.state.epoch, "sample_ids": batch.sample_ids,
                "loss_ce": float(ce.detach()), "loss_triplet": float(tri.detach())}
        (self.output_dir / "divergence.json").write_text(json.dumps(info, indent=1) + "\n")

    def run_epoch(self) -> list[dict]:
        set_lr(self.optimizer, lr_at(self.state.epoch, self.cfg.train))
        plan = self.builder.epoch_plan(self.rng)
        records = []
        max_steps = self.cfg.train.max_steps
        for pairs in plan:
            if max_steps and self.state.step >= max_steps:
                break
            records.append(self.train_step(self.builder.collate(pairs)))
        self.state.epoch += 1
        return records

    def fit(self, epochs: int | None = None) -> list[dict]:
        epochs = self.cfg.train.epochs if epochs is None else epochs
        max_steps = self.cfg.train.max_steps
        while self.state.epoch < epochs:
            if max_steps and self.state.step >= max_steps:
                break
            self.run_epoch()
            self._after_epoch()
        return self.state.history

    def _after_epoch(self) -> None:
        if self.output_dir is None:
            return
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.write_metrics(self.output_dir / "metrics.csv")
        self.save(self.output_dir / "last.pt")
        every = self.cfg.train.eval_every
        if self.val is not None and every and self.state.epoch % every == 0:
            from .retrieval import evaluate

            query, gallery, store = self.val
            report = evaluate(self.model, query, gallery, store, self.norm, "uav_to_sat")
            r1 = report.recall_at[1]
            if r1 > self.state.best_recall:
                self.state.best_recall = r1
                self.save(self.output_dir / "best.pt")
            log.info("epoch %d val Recall@1 %.4f", self.state.epoch, r1)

    # ---------------------------------------------------------------- state

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
            writer.writeheader()
            for rec in self.state.history:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})

    def train_state(self) -> dict:
        return {
            "epoch": self.state.epoch,
            "step": self.state.step,
            "history": list(self.state.history),
            "best_recall": self.state.best_recall,
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.cfg, self.builder.class_ids, self.norm, self.train_state())

    def load_state(self, payload: dict) -> None:
        self.model.load_state_dict(payload["model"])
        ts = payload["train_state"]
        self.optimizer.load_state_dict(ts["optimizer"])
        self.rng.bit_generator.state = ts["rng"]
        torch.set_rng_state(ts["torch_rng"])
        self.state = TrainState(ts["epoch"], ts["step"], list(ts["history"]), ts.get("best_recall", -1.0))
        self.norm = (np.asarray(payload["norm"]["mean"]), np.asarray(payload["norm"]["std"]))
        self.builder.norm = self.norm
