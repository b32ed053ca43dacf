"""Evaluation metrics, classification-map rendering, channel-variance
diagnostics, feature export and parameter counting."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from hsida.data import HsiCube, PatchSet, patches_at
from hsida.disentangle import (apply_mask, channel_scores, gap,
                               invariant_mask, specific_mask)
from hsida.ssam import pooled_channel_variances
from hsida.trainer import TrainedModel

# Fixed class palette (RGB), class 1 = first entry; wraps past 12 classes.
PALETTE = [
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (170, 110, 40), (128, 128, 128), (255, 250, 200),
]


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray      # rows = truth, cols = prediction (1-based classes)
    per_class_acc: np.ndarray
    overall_accuracy: float
    kappa: float

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_acc": self.per_class_acc.tolist(),
            "overall_accuracy": self.overall_accuracy,
            "kappa": self.kappa,
        }


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts matrix, rows = truth, cols = prediction; labels are 1-based."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        conf[t - 1, p - 1] += 1
    return conf


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    n = conf.sum()
    if n == 0:
        raise ValueError("empty confusion matrix")
    oa = np.trace(conf) / n
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    p_e = float((row * col).sum()) / (n * n)
    kappa = (oa - p_e) / (1.0 - p_e) if p_e < 1.0 else 1.0
    with np.errstate(invalid="ignore"):
        per_class = np.where(row > 0, np.diag(conf) / np.maximum(row, 1), np.nan)
    return MetricsReport(conf, per_class, float(oa), float(kappa))


def _evaluation_masks(model: TrainedModel, pooled_di: torch.Tensor,
                      pooled_ds: torch.Tensor, is_source: torch.Tensor,
                      mask_mode: str):
    width = model.network.width
    budget = model.final_budget
    if mask_mode == "frozen":
        return (model.final_masks.get("di", np.ones(width, dtype=np.float32)),
                model.final_masks.get("ds", np.ones(width, dtype=np.float32)))
    if mask_mode != "recompute":
        raise ValueError(f"mask_mode must be 'recompute' or 'frozen', got {mask_mode!r}")
    if budget == 0:
        ones = np.ones(width, dtype=np.float32)
        return ones, ones
    disc = model.network.discriminator
    u = invariant_mask(channel_scores(disc, pooled_di, is_source), budget)
    v = specific_mask(channel_scores(disc, pooled_ds, is_source), budget)
    return u, v


def _forward_pooled(model: TrainedModel, patches: np.ndarray,
                    batch_size: int = 256):
    """(backbone, invariant, specific) feature maps over a whole set."""
    net = model.network
    net.eval()
    fb_all, fdi_all, fds_all = [], [], []
    with torch.no_grad():
        for start in range(0, patches.shape[0], batch_size):
            x = torch.from_numpy(patches[start:start + batch_size])
            fb, f_di, f_ds = net.features(x)
            fb_all.append(fb)
            fdi_all.append(f_di)
            fds_all.append(f_ds)
    return torch.cat(fb_all), torch.cat(fdi_all), torch.cat(fds_all)


def predict(model: TrainedModel, patch_set: PatchSet,
            mask_mode: str = "recompute") -> np.ndarray:
    """Predicted 1-based class labels for every patch in the set."""
    if len(patch_set) == 0:
        raise ValueError("patch set is empty")
    _, f_di, f_ds = _forward_pooled(model, patch_set.patches)
    is_source = torch.full((len(patch_set),),
                           1.0 if patch_set.domain == "source" else 0.0)
    u, _ = _evaluation_masks(model, gap(f_di), gap(f_ds), is_source, mask_mode)
    with torch.no_grad():
        logits = model.network.classifier(apply_mask(f_di, u))
    return (logits.argmax(dim=1).numpy() + 1).astype(np.int64)


def evaluate(model: TrainedModel, patch_set: PatchSet,
             mask_mode: str = "recompute") -> MetricsReport:
    """Metrics over a labeled patch set."""
    if patch_set.num_classes != model.network.num_classes:
        raise ValueError(
            f"class count mismatch: model has {model.network.num_classes}, "
            f"set has {patch_set.num_classes}")
    preds = predict(model, patch_set, mask_mode)
    conf = confusion_matrix(patch_set.class_labels, preds,
                            patch_set.num_classes)
    return metrics_from_confusion(conf)


def classification_map(model: TrainedModel, cube: HsiCube, out_path: str,
                       mask_mode: str = "recompute",
                       patch_size: int | None = None) -> np.ndarray:
    """Classify every pixel (labeled or not) and write a P6 PPM image.

    Returns the (H, W) map of predicted 1-based classes.
    """
    p = patch_size or model.config.patch_size
    rows, cols = np.meshgrid(np.arange(cube.height), np.arange(cube.width),
                             indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    patches = patches_at(cube, coords, p)
    # map rendering targets deployment scenes, so pixels count as target
    fake_set = PatchSet(patches, np.ones(len(coords), dtype=np.int64), coords,
                        "target", cube.num_classes)
    preds = predict(model, fake_set, mask_mode).reshape(cube.height, cube.width)
    _write_ppm(preds, out_path)
    return preds


def _write_ppm(class_map: np.ndarray, out_path: str):
    h, w = class_map.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for cls in np.unique(class_map):
        rgb[class_map == cls] = PALETTE[(cls - 1) % len(PALETTE)]
    with open(out_path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def pooled_feature_stds(model: TrainedModel, src: PatchSet, tgt: PatchSet,
                        stage: str = "masked_di") -> np.ndarray:
    """Per-channel pooled std of pooled features over both domains.

    stage: "masked_di" (refined invariant branch), "di" (unmasked invariant)
    or "backbone" (raw backbone output).
    """
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("both patch sets must be non-empty")
    fb_s, fdi_s, _ = _forward_pooled(model, src.patches)
    fb_t, fdi_t, _ = _forward_pooled(model, tgt.patches)
    if stage == "backbone":
        p_s, p_t = gap(fb_s), gap(fb_t)
    elif stage == "di":
        p_s, p_t = gap(fdi_s), gap(fdi_t)
    elif stage == "masked_di":
        u = model.final_masks.get("di",
                                  np.ones(model.network.width, dtype=np.float32))
        p_s = gap(apply_mask(fdi_s, u))
        p_t = gap(apply_mask(fdi_t, u))
    else:
        raise ValueError(f"unknown stage {stage!r}")
    variances = pooled_channel_variances(p_s.numpy(), p_t.numpy())
    return np.sqrt(variances)


def channel_variance_report(model: TrainedModel, src: PatchSet, tgt: PatchSet,
                            out_path: str | None = None,
                            stage: str = "masked_di") -> np.ndarray:
    """Per-channel inter-domain pooled stds plus their mean, optionally as CSV.

    The CSV has one row per channel and a final "mean" row.
    """
    stds = pooled_feature_stds(model, src, tgt, stage)
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "pooled_std"])
            for c, value in enumerate(stds):
                writer.writerow([c, f"{value:.8g}"])
            writer.writerow(["mean", f"{stds.mean():.8g}"])
    return stds


def export_features(model: TrainedModel, patch_set: PatchSet,
                    out_path: str) -> int:
    """Write pooled invariant features to CSV: domain, label, then channels.

    Returns the number of data rows written.
    """
    if len(patch_set) == 0:
        raise ValueError("patch set is empty")
    _, f_di, _ = _forward_pooled(model, patch_set.patches)
    pooled = gap(f_di).numpy()
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "label"] +
                        [f"c{c}" for c in range(pooled.shape[1])])
        for i in range(pooled.shape[0]):
            writer.writerow([patch_set.domain, int(patch_set.class_labels[i])] +
                            [f"{x:.8g}" for x in pooled[i]])
    return pooled.shape[0]


def count_parameters(model, groups: list[str] | None = None) -> int:
    """Total scalar parameters; optionally restricted to named submodules."""
    net = model.network if isinstance(model, TrainedModel) else model
    if groups is None:
        return sum(p.numel() for p in net.parameters())
    total = 0
    for name in groups:
        module = net
        for part in name.split("."):
            module = getattr(module, part)
        total += sum(p.numel() for p in module.parameters())
    return total
