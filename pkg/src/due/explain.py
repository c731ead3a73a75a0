"""Volumetric classifier, 3D Grad-CAM, and the joint prediction + explanation objective.

Training modes:

``baseline``
    cross-entropy only.
``baseline_plus``
    cross-entropy plus explanation loss against the raw interpolated masks.
``due``
    cross-entropy plus explanation loss against uncertainty-weighted masks.

The explanation term is evaluated for positive samples only, on the
saliency of the positive class, at the resolution of the explained layer
(targets are average-pooled down to it).
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError
from .seeding import derive_seed

MODES = ("baseline", "baseline_plus", "due")
LOSS_KINDS = ("l1", "bce", "mse")


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    widths: tuple = (16, 32, 64)
    blocks: tuple = (2, 2, 2)
    stem_stride: int = 2
    stage_strides: tuple = (1, 2, 2)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if not self.widths or any(w < 1 for w in self.widths) or any(b < 1 for b in self.blocks):
            raise ConfigError("widths and block counts must be positive")
        if not (len(self.widths) == len(self.blocks) == len(self.stage_strides)):
            raise ConfigError("widths, blocks and stage_strides need one entry per stage")

    @property
    def downsampling(self):
        return int(self.stem_stride * np.prod(self.stage_strides))


class BasicBlock3d(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, 1, stride, bias=False), nn.BatchNorm3d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet3D(nn.Module):
    """Residual 3D CNN: stem, stages of basic blocks, global average pool, 2-way linear head."""

    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or ClassifierConfig()
        self.stem = nn.Sequential(
            nn.Conv3d(1, cfg.widths[0], 3, cfg.stem_stride, 1, bias=False),
            nn.BatchNorm3d(cfg.widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = cfg.widths[0]
        for w, b, s in zip(cfg.widths, cfg.blocks, cfg.stage_strides):
            layers = [BasicBlock3d(cin, w, s)] + [BasicBlock3d(w, w) for _ in range(b - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(cin, 2)

    @property
    def layer_names(self):
        return ["stem"] + [f"stage{i + 1}" for i in range(len(self.stages))]

    @property
    def explanation_layer(self):
        return self.layer_names[-1]

    def forward(self, x, return_layer=None):
        if return_layer is not None and return_layer not in self.layer_names:
            raise ValidationError(f"unknown layer {return_layer!r}; have {self.layer_names}")
        h = self.stem(x)
        act = h if return_layer == "stem" else None
        for name, stage in zip(self.layer_names[1:], self.stages):
            h = stage(h)
            if name == return_layer:
                act = h
        logits = self.fc(h.mean(dim=(2, 3, 4)))
        return logits if return_layer is None else (logits, act)

    def forward_from(self, layer, act):
        """Logits computed from the activation of ``layer`` onwards."""
        k = self.layer_names.index(layer)
        h = act
        for stage in self.stages[k:]:
            h = stage(h)
        return self.fc(h.mean(dim=(2, 3, 4)))


def check_input_shape(config, shape):
    f = config.downsampling
    if any(s < f or s % f for s in shape):
        raise ConfigError(f"input shape {tuple(shape)} incompatible with {f}x downsampling")


def build_classifier(config=None, seed=0, input_shape=None):
    config = config or ClassifierConfig()
    if input_shape is not None:
        check_input_shape(config, input_shape)
    torch.manual_seed(derive_seed(seed, "classifier-init"))
    return ResNet3D(config)


def _as_batch(volumes):
    x = getattr(volumes, "data", volumes)
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValidationError(f"expected (D, H, W) or (N, D, H, W) input, got {tuple(x.shape)}")
    return x[:, None]


@torch.no_grad()
def predict(model, volumes):
    """Class probabilities, shape ``(N, 2)``."""
    x = _as_batch(volumes)
    if isinstance(model, ResNet3D):
        check_input_shape(model.config, x.shape[2:])
    model.eval()
    return torch.softmax(model(x).double(), dim=1).numpy()


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Saliency:
    values: np.ndarray
    target_class: int
    layer: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValidationError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def channel_weights_and_cam(model, x, target_class, layer, create_graph=False):
    """Grad-CAM pieces for a batch: ``(logits, activation, channel weights, rectified coarse map)``.

    Scores are summed over the batch before differentiation, which yields
    per-sample gradients as long as no batch-coupled layer follows ``layer``.
    """
    logits, act = model(x, return_layer=layer)
    grads, = torch.autograd.grad(logits[:, target_class].sum(), act,
                                 create_graph=create_graph, retain_graph=True)
    weights = grads.mean(dim=(2, 3, 4), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1))
    return logits, act, weights[:, :, 0, 0, 0], cam


def minmax(cam, eps=0.0):
    """Per-sample min-max over all but the first axis; all-zero maps stay zero."""
    flat = cam.reshape(cam.shape[0], -1)
    lo = flat.min(dim=1).values.view(-1, *[1] * (cam.ndim - 1))
    hi = flat.max(dim=1).values.view(-1, *[1] * (cam.ndim - 1))
    span = hi - lo
    # a constant map has no range: positive constants become ones, zeros stay zeros
    constant = torch.where(hi > 0, torch.ones_like(cam), torch.zeros_like(cam))
    return torch.where(span > 0, (cam - lo) / (span + eps).clamp_min(1e-30), constant)


def gradcam3d(model, volume, target_class=1, layer=None):
    """Full-resolution saliency in ``[0, 1]`` for one volume."""
    if target_class not in (0, 1):
        raise ValidationError(f"target class must be 0 or 1, got {target_class}")
    layer = layer or model.explanation_layer
    x = _as_batch(volume)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            _, _, _, cam = channel_weights_and_cam(model, x, target_class, layer)
    finally:
        model.train(was_training)
    up = F.interpolate(cam[:, None].detach(), size=tuple(x.shape[2:]), mode="trilinear", align_corners=False)
    sal = minmax(up[:, 0].clamp_min(0))[0]
    return Saliency(sal.numpy(), target_class, layer)


def gradcam_batch(model, volumes, target_class=1, layer=None, batch_size=4):
    """Saliency arrays ``(N, D, H, W)`` for many volumes."""
    vols = np.asarray(volumes, dtype=np.float32)
    out = np.zeros_like(vols)
    for s in range(0, len(vols), batch_size):
        chunk = vols[s:s + batch_size]
        for k, v in enumerate(chunk):
            out[s + k] = gradcam3d(model, v, target_class, layer).values
    return out


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def explanation_loss(saliency, target, kind="l1", weights=None, eps=1e-6, reduce=True):
    """Mean voxel-wise discrepancy between saliency and target.

    With ``reduce=False`` returns one value per leading-axis sample.
    ``weights`` rescales each voxel's contribution (loss-side weighting).
    """
    if isinstance(saliency, Saliency):
        saliency = saliency.values
    if hasattr(target, "mask") and not isinstance(target, torch.Tensor):
        target = target.mask
    s = torch.as_tensor(saliency, dtype=torch.float32)
    m = torch.as_tensor(target, dtype=torch.float32)
    if s.shape != m.shape:
        raise ValidationError(f"saliency {tuple(s.shape)} and target {tuple(m.shape)} differ in shape")
    if kind == "l1":
        per = (s - m).abs()
    elif kind == "mse":
        per = (s - m) ** 2
    elif kind == "bce":
        sc = s.clamp(eps, 1 - eps)
        per = -(m * torch.log(sc) + (1 - m) * torch.log(1 - sc))
    else:
        raise ValidationError(f"unknown explanation loss {kind!r}")
    if weights is not None:
        per = per * torch.as_tensor(weights, dtype=torch.float32)
    if reduce:
        return per.mean()
    return per.reshape(per.shape[0], -1).mean(dim=1)


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 4
    loss: str = "l1"
    mode: str = "due"
    weighting: str = "target"  # "target": scale the target; "loss": scale per-voxel loss
    seed: int = 0
    arch: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ClassifierConfig(**self.arch)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.weighting not in ("target", "loss"):
            raise ConfigError(f"weighting must be 'target' or 'loss', got {self.weighting!r}")


@dataclass
class TrainingData:
    """Arrays for training. ``masks``/``weights`` are only read for positive samples."""

    volumes: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.volumes) != len(self.labels):
            raise ValidationError("volumes and labels differ in length")
        for name in ("masks", "weights"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float32)
                if arr.shape != self.volumes.shape:
                    raise ValidationError(f"{name} shape {arr.shape} != volumes {self.volumes.shape}")
                setattr(self, name, arr)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return TrainingData(self.volumes[idx], self.labels[idx], pick(self.masks), pick(self.weights))


def explanation_targets(data, config):
    """(target, per-voxel loss weights) arrays for the configured mode, or (None, None)."""
    if config.mode == "baseline":
        return None, None
    if data.masks is None:
        raise ConfigError(f"mode {config.mode} needs interpolated annotation masks")
    if config.mode == "baseline_plus":
        return data.masks, None
    if data.weights is None:
        raise ConfigError("due mode needs uncertainty weight maps")
    if config.weighting == "loss":
        return data.masks, data.weights
    return data.weights * data.masks, None


def _pool_to(t, size):
    return F.adaptive_avg_pool3d(t[:, None], size)[:, 0]


def train(data, config=None, val_data=None, log=None):
    """Minimise ``sum CE + lam * sum_pos L_exp`` (both normalised by batch size).

    Returns ``(model, history)``; ``history`` has one dict per epoch with
    the mean prediction loss over all samples and the mean explanation
    loss over positives.
    """
    config = config or TrainConfig()
    target, loss_w = explanation_targets(data, config)
    model = build_classifier(config.arch, config.seed, data.volumes.shape[1:])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(derive_seed(config.seed, "classifier-order"))
    layer = model.explanation_layer
    supervise = target is not None
    history = []
    for epoch in range(config.epochs):
        model.train()
        t0 = time.time()
        order = rng.permutation(len(data))
        pred_sum, exp_sum, n_pos = 0.0, 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = np.sort(order[s:s + config.batch_size])
            x = torch.from_numpy(data.volumes[idx])[:, None]
            y = torch.from_numpy(data.labels[idx])
            pos = (y == 1).numpy()
            logits, act = model(x, return_layer=layer)
            ce = F.cross_entropy(logits, y, reduction="sum")
            loss = ce
            if supervise and pos.any():
                active = config.lam > 0
                grads, = torch.autograd.grad(logits[:, 1].sum(), act, create_graph=active, retain_graph=True)
                cam = F.relu((grads.mean(dim=(2, 3, 4), keepdim=True) * act).sum(dim=1))[pos]
                cam = minmax(cam, eps=1e-8)
                size = tuple(cam.shape[1:])
                tgt = _pool_to(torch.from_numpy(target[idx[pos]]), size)
                w = None if loss_w is None else _pool_to(torch.from_numpy(loss_w[idx[pos]]), size)
                per = explanation_loss(cam, tgt, config.loss, w, reduce=False)
                if active:
                    loss = ce + config.lam * per.sum()
                exp_sum += per.detach().sum().item()
                n_pos += int(pos.sum())
            loss = loss / len(idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            pred_sum += ce.item()
        rec = {
            "epoch": epoch + 1,
            "prediction_loss": pred_sum / len(data),
            "explanation_loss": exp_sum / n_pos if n_pos else 0.0,
            "seconds": round(time.time() - t0, 3),
        }
        if val_data is not None and epoch == config.epochs - 1:
            rec["validation"] = quick_validation(model, val_data)
        history.append(rec)
        if log:
            log(f"[{config.mode} seed={config.seed}] epoch {epoch + 1}/{config.epochs} "
                f"pred {rec['prediction_loss']:.4f} exp {rec['explanation_loss']:.4f}")
    model.eval()
    return model, history


def quick_validation(model, data):
    from .metrics import accuracy, roc_auc

    probs = predict(model, data.volumes)[:, 1]
    out = {"accuracy": accuracy(probs, data.labels)}
    if 0 < data.labels.sum() < len(data.labels):
        out["roc_auc"] = roc_auc(probs, data.labels)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_classifier(directory, model, config, history, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "model.pt")
    meta = {
        "arch": asdict(model.config),
        "mode": config.mode,
        "lambda": config.lam,
        "seed": config.seed,
        "epochs": config.epochs,
        "loss": config.loss,
        "weighting": config.weighting,
        "lr": config.lr,
        "batch_size": config.batch_size,
    }
    meta.update(extra or {})
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(directory / "history.json", "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2)


def load_classifier(directory):
    directory = Path(directory)
    with open(directory / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = ResNet3D(ClassifierConfig(**meta["arch"]))
    model.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    model.eval()
    return model, meta
