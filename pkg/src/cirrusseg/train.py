"""Training, evaluation, inference and benchmarking harness.

A run is fully described by a TrainConfig (serializable to a plain-text
``key = value`` file) and is deterministic in its seed: data order,
augmentation, and weight init all derive from it. Each run directory receives
a config snapshot, a per-epoch metrics CSV, and best/last checkpoints.
"""

import csv
import dataclasses
import math
import os
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import track_affinity
from .data import DatasetManifest, SplitView
from .gridding import GriddedMultiScaleAttention, attention_cost
from .losses import LossConfig, rounded_focal_loss, total_loss
from .metrics import coverage_kl, dice, iou, prediction_coverage, target_coverage
from .model import CirrusSegModel, ensemble_predict
from .synth import augment

DETERMINISTIC_ENV = "CIRRUSSEG_DETERMINISTIC"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_dir: str = "data"
    run_dir: str = "runs/run0"
    model: str = "full"            # "full" or "control"
    loss: str = "sml"              # "sml" or "focal_rounded"
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-7
    lr_decay: float = 0.98         # multiplicative, applied after every epoch
    seed: int = 0
    image_size: int | None = 256   # None trains at native resolution
    width: int = 32
    scales: tuple = (1.0, 0.5, 0.25)
    tile_size: int | None = 16     # None disables gridding
    orientations: int = 4
    gabor_kernel_size: int = 5
    tile_batch: int = 1            # tiles per attention call; 0 = all at once
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    boost: float = 1.25
    soft_targets: bool = False
    ensemble_size: int = 5
    augment: bool = True
    noise_var: float = 0.1
    max_shift: int = 8
    threshold: float = 0.5
    device: str = "cpu"

    def loss_config(self) -> LossConfig:
        return LossConfig(boost=self.boost, focal_gamma=self.focal_gamma,
                          focal_alpha=self.focal_alpha, soft_targets=self.soft_targets)

    def model_kwargs(self) -> dict:
        include_gabor = self.model == "full"
        tile_size = self.tile_size if self.model == "full" else None
        return {
            "in_channels": 1,
            "width": self.width,
            "scales": tuple(self.scales),
            "tile_size": tile_size,
            "orientations": self.orientations,
            "gabor_kernel_size": self.gabor_kernel_size,
            "include_gabor": include_gabor,
            "tile_batch": self.tile_batch,
        }


def _field_types():
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name, annotation, raw):
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    if annotation in ("int | None", int | None):
        return None if raw.lower() in ("none", "") else int(raw)
    if annotation in ("tuple", tuple) or origin is tuple:
        return tuple(float(v) for v in raw.replace("(", "").replace(")", "").split(","))
    if annotation in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if annotation in ("int", int):
        return int(raw)
    if annotation in ("float", float):
        return float(raw)
    return raw


def load_config(path, **overrides) -> TrainConfig:
    """Parse a ``key = value`` config file ('#' starts a comment)."""
    types = _field_types()
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    values.update(overrides)
    return TrainConfig(**values)


def save_config(config: TrainConfig, path):
    lines = ["# cirrusseg training configuration"]
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def apply_determinism_env():
    if os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0"):
        torch.use_deterministic_algorithms(True)


def build_model(config: TrainConfig) -> CirrusSegModel:
    if config.model not in ("full", "control"):
        raise ValueError(f"unknown model kind {config.model!r}")
    return CirrusSegModel(**config.model_kwargs())


def _resize_pair(image, consensus, size):
    if size is None or image.shape[-1] == size:
        return image, consensus
    image = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)
    consensus = F.interpolate(consensus, size=(size, size), mode="bilinear",
                              align_corners=False).clamp(0.0, 1.0)
    return image, consensus


def _load_batch(view, indices, config: TrainConfig, epoch=None, train=False):
    images, targets = [], []
    for idx in indices:
        img, cons = view[idx]
        if train and config.augment:
            rng = np.random.default_rng((config.seed, epoch, int(idx)))
            img, cons = augment(img, cons, rng, noise_var=config.noise_var,
                                max_shift=config.max_shift)
        images.append(torch.from_numpy(np.ascontiguousarray(img)).float())
        targets.append(torch.from_numpy(np.ascontiguousarray(cons)).float())
    image = torch.stack(images).unsqueeze(1)
    target = torch.stack(targets).unsqueeze(1)
    return _resize_pair(image, target, config.image_size)


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list
    best_val_iou: float
    best_epoch: int


def save_checkpoint(path, model, optimizer, scheduler, epoch, config, history):
    torch.save({
        "model_state": model.state_dict(),
        "model_kwargs": config.model_kwargs(),
        "model_kind": config.model,
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "scheduler_state": scheduler.state_dict() if scheduler else None,
        "epoch": epoch,
        "config": dataclasses.asdict(config),
        "history": history,
    }, path)


def load_checkpoint(path, map_location="cpu"):
    payload = torch.load(path, map_location=map_location, weights_only=False)
    model = CirrusSegModel(**payload["model_kwargs"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    config_dict = dict(payload["config"])
    config_dict["scales"] = tuple(config_dict["scales"])
    config = TrainConfig(**config_dict)
    return model, config, payload


def _epoch_indices(n, seed, epoch):
    rng = np.random.default_rng((seed, epoch))
    return rng.permutation(n)


def _batch_iou(outputs, target, threshold):
    probs = torch.stack([torch.sigmoid(l) for l in outputs.attention_logits]).mean(dim=0)
    scores = [iou(probs[i, 0], target[i, 0], threshold) for i in range(probs.shape[0])]
    return float(np.mean(scores))


def validate(model, view, config: TrainConfig):
    """Mean per-image IoU of predict() over a split."""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(view), config.batch_size):
            idx = range(start, min(start + config.batch_size, len(view)))
            image, target = _load_batch(view, idx, config)
            probs = model.predict(image.to(config.device))
            for i in range(probs.shape[0]):
                scores.append(iou(probs[i, 0].cpu(), target[i, 0], config.threshold))
    return float(np.mean(scores)) if scores else 0.0


def train(config: TrainConfig, log=print) -> TrainResult:
    apply_determinism_env()
    manifest = DatasetManifest(config.data_dir)
    train_view = SplitView(manifest, "train")
    val_view = SplitView(manifest, "val")
    if len(train_view) == 0:
        raise ValueError(f"dataset at {config.data_dir} has an empty train split")

    torch.manual_seed(config.seed)
    model = build_model(config).to(config.device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr,
                                 weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_decay)
    loss_fn = total_loss if config.loss == "sml" else rounded_focal_loss
    if config.loss not in ("sml", "focal_rounded"):
        raise ValueError(f"unknown loss {config.loss!r}")
    loss_cfg = config.loss_config()

    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.txt")
    best_path = run_dir / "best.pt"
    last_path = run_dir / "last.pt"

    history = []
    best_val = -1.0
    best_epoch = -1
    for epoch in range(1, config.epochs + 1):
        model.train()
        lr_now = optimizer.param_groups[0]["lr"]
        order = _epoch_indices(len(train_view), config.seed, epoch)
        epoch_loss = 0.0
        epoch_iou = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            indices = order[start:start + config.batch_size]
            image, target = _load_batch(train_view, indices, config,
                                        epoch=epoch, train=True)
            image = image.to(config.device)
            target = target.to(config.device)
            outputs = model(image)
            loss = loss_fn(outputs, target, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            with torch.no_grad():
                epoch_iou += _batch_iou(outputs, target, config.threshold)
            n_batches += 1
        scheduler.step()

        val_iou = validate(model, val_view, config) if len(val_view) else float("nan")
        record = {
            "epoch": epoch,
            "lr": lr_now,
            "train_loss": epoch_loss / max(n_batches, 1),
            "train_iou": epoch_iou / max(n_batches, 1),
            "val_iou": val_iou,
        }
        history.append(record)
        log(f"epoch {epoch:3d}  lr {lr_now:.3e}  loss {record['train_loss']:.4f}  "
            f"train_iou {record['train_iou']:.3f}  val_iou {val_iou:.3f}")

        if not math.isnan(val_iou) and val_iou > best_val:
            best_val = val_iou
            best_epoch = epoch
            save_checkpoint(best_path, model, optimizer, scheduler, epoch, config, history)
        save_checkpoint(last_path, model, optimizer, scheduler, epoch, config, history)
        _write_metrics_csv(run_dir / "metrics.csv", history)

    if not best_path.exists():  # no val split: fall back to the final weights
        save_checkpoint(best_path, model, optimizer, scheduler, config.epochs,
                        config, history)
        best_val = history[-1]["train_iou"] if history else 0.0
        best_epoch = config.epochs
    return TrainResult(best_path=best_path, last_path=last_path, history=history,
                       best_val_iou=best_val, best_epoch=best_epoch)


def train_ensemble(config: TrainConfig, size=None, log=print):
    """Train ``size`` models differing only in seed (and run subdirectory)."""
    size = size or config.ensemble_size
    results = []
    for k in range(size):
        member = dataclasses.replace(
            config, seed=config.seed + k,
            run_dir=str(Path(config.run_dir) / f"member_{k}"))
        log(f"--- ensemble member {k} (seed {member.seed}) ---")
        results.append(train(member, log=log))
    return results


def _write_metrics_csv(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "lr", "train_loss",
                                               "train_iou", "val_iou"])
        writer.writeheader()
        writer.writerows(history)


def evaluate(checkpoint_path, split="test", data_dir=None, batch_size=None):
    """Per-image IoU/Dice plus coverage statistics over one split."""
    model, config, _ = load_checkpoint(checkpoint_path)
    manifest = DatasetManifest(data_dir or config.data_dir)
    view = SplitView(manifest, split)
    if len(view) == 0:
        raise ValueError(f"split {split!r} is empty")
    bs = batch_size or config.batch_size
    rows = []
    preds, targets = [], []
    with torch.no_grad():
        for start in range(0, len(view), bs):
            idx = list(range(start, min(start + bs, len(view))))
            image, target = _load_batch(view, idx, config)
            probs = model.predict(image)
            for i, record_idx in enumerate(idx):
                p = probs[i, 0]
                t = target[i, 0]
                preds.append(p)
                targets.append(t)
                rows.append({
                    "image_id": view.records[record_idx]["id"],
                    "iou": iou(p, t, config.threshold),
                    "dice": dice(p, t, config.threshold),
                    "coverage_pred": prediction_coverage(p, config.threshold),
                    "coverage_target": target_coverage(t),
                })
    summary = {
        "split": split,
        "n": len(rows),
        "mean_iou": float(np.mean([r["iou"] for r in rows])),
        "mean_dice": float(np.mean([r["dice"] for r in rows])),
        "coverage_kl": coverage_kl(preds, targets, threshold=config.threshold),
    }
    return rows, summary


def aggregate_splits(values):
    """Mean and standard error across k split scores."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no split scores to aggregate")
    stderr = values.std(ddof=1) / math.sqrt(values.size) if values.size > 1 else 0.0
    return float(values.mean()), float(stderr)


def write_report_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["image_id", "iou", "dice",
                                               "coverage_pred", "coverage_target"])
        writer.writeheader()
        writer.writerows(rows)


def load_image_file(path):
    """Read a grayscale image from .npz (dataset container), .npy, or a
    raster file, as float32 [H, W] scaled to [0, 1] for integer formats."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as f:
            return np.asarray(f["image"], dtype=np.float32)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img.convert("F"), dtype=np.float32)
    if arr.max() > 1.5:  # 8/16-bit rasters come in at integer ranges
        arr = arr / 255.0 if arr.max() <= 255 else arr / 65535.0
    return arr


def infer(checkpoint_paths, image_paths, out_dir, threshold=0.5, overlay=False):
    """Write probability (.npy) and thresholded mask (.png) files per image;
    multiple checkpoints are ensembled by probability averaging."""
    from PIL import Image

    models = []
    for p in checkpoint_paths:
        model, _, _ = load_checkpoint(p)
        models.append(model)
    if not models:
        raise ValueError("need at least one checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with torch.no_grad():
        for image_path in image_paths:
            arr = load_image_file(image_path)
            tensor = torch.from_numpy(arr)[None, None]
            probs = ensemble_predict(models, tensor)[0, 0].numpy()
            stem = Path(image_path).stem
            prob_path = out / f"{stem}_prob.npy"
            mask_path = out / f"{stem}_mask.png"
            np.save(prob_path, probs)
            mask = (probs > threshold).astype(np.uint8) * 255
            Image.fromarray(mask, mode="L").save(mask_path)
            written.extend([prob_path, mask_path])
            if overlay:
                overlay_path = out / f"{stem}_overlay.png"
                _write_overlay(arr, probs, threshold, overlay_path)
                written.append(overlay_path)
    return written


def _write_overlay(image, probs, threshold, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    axes[0].imshow(image, cmap="gray")
    axes[0].set_title("input")
    axes[1].imshow(probs, cmap="magma", vmin=0, vmax=1)
    axes[1].set_title("probability")
    axes[2].imshow(image, cmap="gray")
    axes[2].contour(probs > threshold, levels=[0.5], colors="red", linewidths=0.8)
    axes[2].set_title("mask overlay")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def benchmark(side, scales=(1.0, 0.5, 0.25), tile_size=16, channels=8,
              measure=True):
    """Analytic affinity cost plus, optionally, the measured peak of live
    affinity elements during a branch-sequential gridded forward pass."""
    cost = attention_cost(side, scales, tile_size)
    row = {
        "side": side,
        "scales": ",".join(str(s) for s in scales),
        "tile_size": tile_size,
        "tiles": cost.tile_count,
        "gridded_entries": cost.gridded_entries,
        "full_entries": cost.full_entries,
        "ratio": cost.ratio,
    }
    if measure:
        module = GriddedMultiScaleAttention(channels, scales=scales,
                                            tile_size=tile_size, tile_batch=1)
        module.eval()
        maps = [torch.randn(1, channels, round(side * s), round(side * s))
                for s in scales]
        with torch.no_grad(), track_affinity() as meter:
            module(maps)
        row["measured_peak_entries"] = meter.peak
    return row


def write_benchmark_csv(path_or_file, rows):
    fieldnames = ["side", "scales", "tile_size", "tiles", "gridded_entries",
                  "full_entries", "ratio"]
    if rows and "measured_peak_entries" in rows[0]:
        fieldnames.append("measured_peak_entries")
    close = False
    if isinstance(path_or_file, (str, Path)):
        f = open(path_or_file, "w", newline="")
        close = True
    else:
        f = path_or_file
    try:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if close:
            f.close()
