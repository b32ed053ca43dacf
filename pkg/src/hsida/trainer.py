"""End-to-end training loop, learning-rate schedule and checkpointing.

One optimizer step per paired source/target batch; the adaptive monitor is
advanced once per epoch from pooled invariant features accumulated over the
epoch, and the resulting suppression budget governs the next epoch's masks.
Epoch 1 always runs with budget 0 because no spread measurement exists yet.

Checkpoint layout (directory): ``manifest.json`` carries format version,
config echo, monitor state, final masks and tensor metadata; each state
tensor is stored in its own raw little-endian file (float32 for parameters
and running statistics, int64 for counters).  Telemetry lives next to it as
``losses.csv``, ``ssam.csv`` and ``masks.csv``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from hsida.backbone import BackboneConfig, ReversibleBackbone
from hsida.data import PatchSet, pair_batch_indices
from hsida.disentangle import (ClassifierHead, DomainDiscriminator,
                               DomainInvariantEncoder, apply_mask,
                               channel_scores, gap, invariant_mask,
                               specific_mask)
from hsida.objective import (LossWeights, cls_loss, domain_adv_loss,
                             ortho_loss, total_loss)
from hsida.ssam import ShiftState, mask_count, pooled_channel_variance

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised on checkpoint version mismatch or corrupt files."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    seed: int = 0
    lambda_ortho: float = 0.1
    lambda_domain: float = 1.0
    sigmoid_slope: float = 1.5      # k
    sigmoid_offset: float = 2.5     # s
    ema_momentum: float = 0.1
    r_max: float = 0.5
    stem_out_channels: int = 64
    num_blocks: int = 4
    hidden_channels: int | None = None
    disc_hidden: int = 64
    patch_size: int = 11
    val_fraction: float = 0.1
    adaptive_masks: bool = True     # False pins the suppression budget to 0
    num_runs: int = 3               # multi-seed averaging, used by sweeps

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 0:
            raise ValueError("plateau_patience must be >= 0")

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.stem_out_channels, self.num_blocks,
                              self.hidden_channels)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ortho, self.lambda_domain)

    def shift_state(self) -> ShiftState:
        return ShiftState(k=self.sigmoid_slope, s=self.sigmoid_offset,
                          m=self.ema_momentum, r_max=self.r_max)


class Network(nn.Module):
    """Backbone + invariant encoder + discriminator + classifier head."""

    def __init__(self, in_channels: int, num_classes: int, config: TrainConfig):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.backbone = ReversibleBackbone(in_channels, config.backbone_config())
        width = config.stem_out_channels
        self.die = DomainInvariantEncoder(width)
        self.discriminator = DomainDiscriminator(width, config.disc_hidden)
        self.classifier = ClassifierHead(width, num_classes)

    @property
    def width(self) -> int:
        return self.backbone.config.stem_out_channels

    def features(self, patches: torch.Tensor):
        """Return (backbone, invariant, specific) feature maps."""
        fb = self.backbone(patches)
        f_di, f_ds = self.die.split(fb)
        return fb, f_di, f_ds


class PlateauScheduler:
    """Reduce the learning rate after `patience` consecutive non-improving
    monitored values (so with patience 2, the third flat epoch already runs
    at the reduced rate)."""

    def __init__(self, optimizer, factor: float = 0.1, patience: int = 2):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, value: float):
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


@dataclass
class TrainedModel:
    network: Network
    config: TrainConfig
    shift_state: ShiftState
    history: list = field(default_factory=list)  # one dict per completed epoch
    final_budget: int = 0
    final_masks: dict = field(default_factory=dict)  # {"di": array, "ds": array}
    final_epoch_masks: list = field(default_factory=list)  # per-batch (u, v)


def stratified_split(labels: np.ndarray, fraction: float, seed: int):
    """(train_idx, val_idx) with `fraction` of each class held out."""
    rng = np.random.default_rng([seed, 7919])
    train, val = [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        idx = rng.permutation(idx)
        n_val = int(round(len(idx) * fraction))
        if len(idx) > 1:
            n_val = min(max(n_val, 0), len(idx) - 1)
        else:
            n_val = 0
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(
        np.asarray(val, dtype=np.int64))


def _ones_masks(width: int):
    return np.ones(width, dtype=np.float32), np.ones(width, dtype=np.float32)


def _batch_masks(net: Network, p_di: torch.Tensor, p_ds: torch.Tensor,
                 is_source: torch.Tensor, budget: int):
    if budget == 0:
        return _ones_masks(net.width)
    w_di = channel_scores(net.discriminator, p_di, is_source)
    w_ds = channel_scores(net.discriminator, p_ds, is_source)
    return invariant_mask(w_di, budget), specific_mask(w_ds, budget)


def train(cfg: TrainConfig, src: PatchSet, tgt: PatchSet,
          out_dir: str | None = None) -> TrainedModel:
    """Train the full pipeline; deterministic given (cfg, data).

    Writes losses.csv / ssam.csv / masks.csv under out_dir when given.
    """
    if len(src) == 0:
        raise ValueError("source patch set is empty")
    if len(tgt) == 0:
        raise ValueError("target patch set is empty")

    torch.manual_seed(cfg.seed)
    net = Network(src.patches.shape[1], src.num_classes, cfg)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    scheduler = PlateauScheduler(optimizer, cfg.plateau_factor,
                                 cfg.plateau_patience)
    state = cfg.shift_state()

    train_idx, val_idx = stratified_split(src.class_labels, cfg.val_fraction,
                                          cfg.seed)
    x_val = torch.from_numpy(src.patches[val_idx])
    y_val = torch.from_numpy(src.class_labels[val_idx] - 1)

    weights = cfg.loss_weights()
    width = net.width
    budget = 0  # epoch 1 runs unmasked: no spread measurement exists yet
    history: list[dict] = []
    mask_rows: list[dict] = []
    final_epoch_masks: list[tuple] = []

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        batches = pair_batch_indices(len(train_idx), len(tgt), cfg.batch_size,
                                     cfg.seed, epoch)
        sums = {"cls": 0.0, "ortho": 0.0, "dom": 0.0, "total": 0.0}
        acc_src, acc_tgt = [], []
        last_u, last_v = _ones_masks(width)

        for src_sel, tgt_sel in batches:
            xs = torch.from_numpy(src.patches[train_idx[src_sel]])
            ys = torch.from_numpy(src.class_labels[train_idx[src_sel]] - 1)
            xt = torch.from_numpy(tgt.patches[tgt_sel])

            _, fdi_s, fds_s = net.features(xs)
            _, fdi_t, fds_t = net.features(xt)
            p_di_s, p_di_t = gap(fdi_s), gap(fdi_t)
            p_ds_s, p_ds_t = gap(fds_s), gap(fds_t)

            is_source = torch.cat([torch.ones(xs.shape[0]),
                                   torch.zeros(xt.shape[0])])
            u, v = _batch_masks(net, torch.cat([p_di_s, p_di_t]),
                                torch.cat([p_ds_s, p_ds_t]), is_source, budget)
            last_u, last_v = u, v
            if epoch == cfg.epochs:
                final_epoch_masks.append((u, v))

            fdi_m_s = apply_mask(fdi_s, u)
            fdi_m_t = apply_mask(fdi_t, u)
            fds_m_s = apply_mask(fds_s, v)
            fds_m_t = apply_mask(fds_t, v)

            cls = cls_loss(net.classifier(fdi_m_s), ys)
            ortho = ortho_loss(torch.cat([fdi_m_s, fdi_m_t]),
                               torch.cat([fds_m_s, fds_m_t]))
            if weights.domain > 0:
                dom = domain_adv_loss(net.discriminator, p_di_s, p_di_t,
                                      p_ds_s, p_ds_t)
            else:
                dom = torch.zeros(())
            loss = total_loss(cls, ortho, dom, weights)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            sums["cls"] += cls.item()
            sums["ortho"] += ortho.item()
            sums["dom"] += float(dom.detach())
            sums["total"] += loss.item()
            acc_src.append(p_di_s.detach().numpy())
            acc_tgt.append(p_di_t.detach().numpy())

        mu = pooled_channel_variance(np.concatenate(acc_src),
                                     np.concatenate(acc_tgt))
        r_prime, r = state.update(mu)
        next_budget = mask_count(r, width, state.r_max) if cfg.adaptive_masks else 0

        val_ce, val_acc = _validate(net, x_val, y_val, budget)
        scheduler.step(val_ce)

        n_batches = len(batches)
        history.append({
            "epoch": epoch,
            "cls": sums["cls"] / n_batches,
            "ortho": sums["ortho"] / n_batches,
            "dom": sums["dom"] / n_batches,
            "total": sums["total"] / n_batches,
            "mu": mu,
            "r_prime": r_prime,
            "r": r,
            "K_used": budget,
            "K_next": next_budget,
            "val_ce": val_ce,
            "val_acc": val_acc,
            "lr": scheduler.lr,
        })
        mask_rows.append({"epoch": epoch, "branch": "di", "K": budget,
                          "suppressed": _suppressed(last_u)})
        mask_rows.append({"epoch": epoch, "branch": "ds", "K": budget,
                          "suppressed": _suppressed(last_v)})
        budget = next_budget

    model = TrainedModel(network=net, config=cfg, shift_state=state,
                         history=history, final_budget=budget,
                         final_epoch_masks=final_epoch_masks)
    model.final_masks = _final_masks(model, src, tgt)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_telemetry(out_dir, history, mask_rows)
    return model


def _suppressed(mask: np.ndarray) -> str:
    return ";".join(str(i) for i in np.nonzero(mask == 0)[0])


def _validate(net: Network, x_val, y_val, budget: int):
    if x_val.shape[0] == 0:
        return float("nan"), float("nan")
    net.eval()
    with torch.no_grad():
        _, f_di, _ = net.features(x_val)
    # held-out split is all source, so domain labels are known
    if budget > 0:
        p_di = gap(f_di)
        w = channel_scores(net.discriminator, p_di,
                           torch.ones(p_di.shape[0]))
        u = invariant_mask(w, budget)
    else:
        u = np.ones(net.width, dtype=np.float32)
    with torch.no_grad():
        logits = net.classifier(apply_mask(f_di, u))
        ce = cls_loss(logits, y_val).item()
        acc = (logits.argmax(dim=1) == y_val).float().mean().item()
    net.train()
    return ce, acc


def _final_masks(model: TrainedModel, src: PatchSet, tgt: PatchSet) -> dict:
    """Masks from final-state scores over the full training data."""
    net = model.network
    if model.final_budget == 0:
        u, v = _ones_masks(net.width)
        return {"di": u, "ds": v}
    net.eval()
    with torch.no_grad():
        p_di, p_ds, dom = [], [], []
        for patches, flag in ((src.patches, 1.0), (tgt.patches, 0.0)):
            for start in range(0, patches.shape[0], 256):
                x = torch.from_numpy(patches[start:start + 256])
                _, f_di, f_ds = net.features(x)
                p_di.append(gap(f_di))
                p_ds.append(gap(f_ds))
                dom.append(torch.full((x.shape[0],), flag))
    p_di = torch.cat(p_di)
    p_ds = torch.cat(p_ds)
    dom = torch.cat(dom)
    w_di = channel_scores(net.discriminator, p_di, dom)
    w_ds = channel_scores(net.discriminator, p_ds, dom)
    return {"di": invariant_mask(w_di, model.final_budget),
            "ds": specific_mask(w_ds, model.final_budget)}


def write_telemetry(out_dir: str, history: list, mask_rows: list):
    with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "cls", "ortho", "dom", "total"])
        for row in history:
            writer.writerow([row["epoch"], row["cls"], row["ortho"],
                             row["dom"], row["total"]])
    with open(os.path.join(out_dir, "ssam.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        # K column = budget derived from this epoch's ratio (used next epoch)
        writer.writerow(["epoch", "mu", "r_prime", "r", "K"])
        for row in history:
            writer.writerow([row["epoch"], row["mu"], row["r_prime"],
                             row["r"], row["K_next"]])
    with open(os.path.join(out_dir, "masks.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "branch", "K", "suppressed"])
        for row in mask_rows:
            writer.writerow([row["epoch"], row["branch"], row["K"],
                             row["suppressed"]])


def save_checkpoint(model: TrainedModel, path: str):
    """Persist a trained model as a directory; see the module docstring."""
    os.makedirs(path, exist_ok=True)
    tensors = []
    for name, tensor in model.network.state_dict().items():
        fname = name.replace(".", "__") + ".bin"
        array = tensor.detach().cpu().numpy()
        if array.dtype.kind == "f":
            array.astype("<f4").tofile(os.path.join(path, fname))
            dtype = "f32le"
        else:
            array.astype("<i8").tofile(os.path.join(path, fname))
            dtype = "i64le"
        tensors.append({"name": name, "shape": list(tensor.shape),
                        "dtype": dtype, "file": fname})
    state = model.shift_state
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "in_channels": model.network.in_channels,
        "num_classes": model.network.num_classes,
        "shift_state": {"k": state.k, "s": state.s, "m": state.m,
                        "r_max": state.r_max, "r_current": state.r_current,
                        "epoch": state.epoch, "mu_history": state.mu_history},
        "final_budget": model.final_budget,
        "final_masks": {k: v.tolist() for k, v in model.final_masks.items()},
        "history": model.history,
        "tensors": tensors,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(path: str) -> TrainedModel:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")

    cfg = TrainConfig(**manifest["config"])
    net = Network(manifest["in_channels"], manifest["num_classes"], cfg)
    state_dict = {}
    for meta in manifest["tensors"]:
        file_path = os.path.join(path, meta["file"])
        dtype = np.dtype("<f4") if meta["dtype"] == "f32le" else np.dtype("<i8")
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        if not os.path.exists(file_path):
            raise CheckpointError(f"missing tensor file {file_path}")
        array = np.fromfile(file_path, dtype=dtype)
        if array.size != count:
            raise CheckpointError(
                f"tensor file {file_path} truncated: {array.size} of {count} values")
        tensor = torch.from_numpy(array.reshape(meta["shape"]).copy())
        if meta["dtype"] == "i64le":
            tensor = tensor.to(torch.int64)
        state_dict[meta["name"]] = tensor
    net.load_state_dict(state_dict)

    ss = manifest["shift_state"]
    state = ShiftState(k=ss["k"], s=ss["s"], m=ss["m"], r_max=ss["r_max"],
                       r_current=ss["r_current"], epoch=ss["epoch"],
                       mu_history=list(ss["mu_history"]))
    masks = {k: np.asarray(v, dtype=np.float32)
             for k, v in manifest["final_masks"].items()}
    return TrainedModel(network=net, config=cfg, shift_state=state,
                        history=manifest["history"],
                        final_budget=manifest["final_budget"],
                        final_masks=masks)
