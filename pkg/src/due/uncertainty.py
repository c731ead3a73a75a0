"""Per-voxel uncertainty of interpolated annotations and its supervision weights.

Two sources of uncertainty are provided:

* Monte-Carlo: the population variance over repeated stochastic
  interpolations of the same sparse annotation.
* A neural-process style variational predictor trained on those variances.
  It maps the two bounding annotation slices, their depth spacing and a
  target depth fraction to a variance image, without any diffusion
  sampling.

Uncertainty becomes a weight through ``w = 1 / (1 + exp(u))`` followed by
min-max normalisation over the generated voxels of the volume.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import expit

from .diffusion import interpolate_many, to_signal
from .errors import TrainingError, ValidationError
from .seeding import derive_seed, torch_generator
from .volume_data import DenseAnnotation, load_array, save_array


@dataclass(frozen=True)
class UncertaintyMap:
    values: np.ndarray
    source: str = "monte_carlo"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if self.source not in ("monte_carlo", "predicted"):
            raise ValidationError(f"unknown uncertainty source {self.source!r}")
        if not np.all(np.isfinite(v)) or (v.size and v.min() < 0):
            raise ValidationError("uncertainty values must be finite and non-negative")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class WeightMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValidationError("weights must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def save_uncertainty(path, umap):
    save_array(path, umap.values, "<f4", source=umap.source)


def load_uncertainty(path):
    from .volume_data import read_header

    return UncertaintyMap(load_array(path), read_header(path).get("source", "monte_carlo"))


def save_weights(path, wmap):
    save_array(path, wmap.values, "<f4", kind="weights")


def load_weights(path):
    return WeightMap(load_array(path))


# ---------------------------------------------------------------------------
# Monte-Carlo variance
# ---------------------------------------------------------------------------


def run_seed(root_seed, run):
    return derive_seed(root_seed, "mc-run", run)


def population_variance(runs):
    """Per-voxel variance over the leading axis, normalised by the number of runs."""
    runs = np.asarray(runs, dtype=np.float64)
    mean = runs.mean(axis=0)
    return ((runs - mean) ** 2).mean(axis=0)


def mc_variance_many(denoiser, sparses, depths, schedule, T_runs=8, root_seeds=(0,), block_size=2,
                     return_runs=False):
    """Monte-Carlo variance for several annotations; all runs share one batched sampler.

    Run ``r`` of annotation ``v`` is exactly ``interpolate_volume(...,
    seed=run_seed(root_seeds[v], r))``.
    """
    if T_runs < 2:
        raise ValidationError(f"T_runs must be >= 2, got {T_runs}")
    flat_sparse, flat_depth, flat_seed = [], [], []
    for sparse, depth, root in zip(sparses, depths, root_seeds):
        for r in range(T_runs):
            flat_sparse.append(sparse)
            flat_depth.append(depth)
            flat_seed.append(run_seed(root, r))
    dense = interpolate_many(denoiser, flat_sparse, flat_depth, schedule, flat_seed, block_size)
    out, all_runs = [], []
    for v, sparse in enumerate(sparses):
        runs = np.stack([d.mask for d in dense[v * T_runs:(v + 1) * T_runs]])
        var = population_variance(runs).astype(np.float32)
        var[list(sparse.indices)] = 0.0
        out.append(UncertaintyMap(var, "monte_carlo"))
        all_runs.append(runs)
    return (out, all_runs) if return_runs else out


def mc_variance(denoiser, sparse, depth, schedule, T_runs=8, root_seed=0, block_size=2,
                return_runs=False):
    """Variance of ``T_runs`` independent interpolations of one sparse annotation."""
    res = mc_variance_many(denoiser, [sparse], [depth], schedule, T_runs, [root_seed], block_size,
                           return_runs)
    if return_runs:
        return res[0][0], res[1][0]
    return res[0]


# ---------------------------------------------------------------------------
# Weights and supervision targets
# ---------------------------------------------------------------------------


def generated_depths(known_depths, depth):
    """Depths strictly inside the annotated extent that were not annotated."""
    known = sorted(set(int(k) for k in known_depths))
    if not known:
        return list(range(depth))
    return [z for z in range(known[0] + 1, known[-1]) if z not in set(known)]


def uncertainty_to_weights(u, known_depths, generated=None):
    """Flipped sigmoid of the uncertainty, min-max normalised over generated voxels.

    Known slices get weight 1, as do depths outside the annotated extent
    (nothing was generated there). A constant uncertainty over the
    generated voxels yields weight 1 everywhere.
    """
    values = np.asarray(u.values if isinstance(u, UncertaintyMap) else u, dtype=np.float64)
    D = values.shape[0]
    gen = generated_depths(known_depths, D) if generated is None else list(generated)
    weights = np.ones_like(values)
    if gen:
        raw = expit(-values[gen])
        lo, hi = raw.min(), raw.max()
        weights[gen] = 1.0 if hi == lo else (raw - lo) / (hi - lo)
    return WeightMap(weights.astype(np.float32))


def build_supervision_target(interpolated, weights, sparse):
    """Element-wise ``weights * interpolated`` with known slices copied exactly."""
    mask = interpolated.mask if isinstance(interpolated, DenseAnnotation) else np.asarray(interpolated)
    w = weights.values if isinstance(weights, WeightMap) else np.asarray(weights)
    if mask.shape != w.shape:
        raise ValidationError(f"mask {mask.shape} and weights {w.shape} differ in shape")
    target = (w.astype(np.float32) * mask.astype(np.float32))
    for z, m in sparse.slices:
        target[z] = m
    return DenseAnnotation(np.clip(target, 0.0, 1.0), "interpolated")


# ---------------------------------------------------------------------------
# Neural-process uncertainty predictor
# ---------------------------------------------------------------------------


@dataclass
class NPContext:
    past: np.ndarray
    past_index: int
    future: np.ndarray
    future_index: int
    targets: tuple

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float32)
        self.future = np.asarray(self.future, dtype=np.float32)
        self.targets = tuple(float(t) for t in self.targets)
        if self.past.shape != self.future.shape:
            raise ValidationError("context slices differ in shape")
        if self.future_index <= self.past_index:
            raise ValidationError("future index must exceed past index")
        if any(not 0 < t < 1 for t in self.targets):
            raise ValidationError(f"target fractions must lie in (0, 1): {self.targets}")
        if any(b <= a for a, b in zip(self.targets, self.targets[1:])):
            raise ValidationError("target fractions must be strictly increasing")

    @property
    def gap(self):
        return self.future_index - self.past_index

    @classmethod
    def for_interval(cls, past, a, future, b):
        return cls(past, a, future, b, tuple((z - a) / (b - a) for z in range(a + 1, b)))


@dataclass
class UQPair:
    context: NPContext
    targets: np.ndarray  # (n_targets, H, W) Monte-Carlo variance

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float32)
        if self.targets.shape[0] != len(self.context.targets):
            raise ValidationError("one target map per target fraction required")


def pairs_from_mc(sparse, umap):
    """Training pairs for every interval with interior slices."""
    pairs = []
    for a, b, ma, mb in sparse.intervals():
        if b - a < 2:
            continue
        pairs.append(UQPair(NPContext.for_interval(ma, a, mb, b), umap.values[a + 1:b]))
    return pairs


@dataclass
class UQConfig:
    latent_dim: int = 32
    hidden: int = 32
    gap_scale: float = 8.0
    variance_scale: float = 4.0  # maps [0, 0.25] variances into [0, 1] for the encoder
    output_scale: float = 32.0  # decoder regresses variance * output_scale


class PointEncoder(nn.Module):
    def __init__(self, hidden, rdim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(4, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, 2, 1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 4, 2, 1), nn.SiLU(),
        )
        self.proj = nn.Linear(2 * hidden, rdim)

    def forward(self, x):
        return self.proj(self.net(x).mean(dim=(2, 3)))


class UQPredictor(nn.Module):
    """Latent-variable encoder-decoder over annotation intervals.

    Points are ``(image, depth fraction)`` pairs: the two bounding slices
    form the context, variance maps at interior fractions the targets. A
    mean-aggregated representation parameterises a diagonal Gaussian over
    ``z``; the decoder is spatial, conditioned on both bounding slices, the
    query fraction, the spacing and ``z``. Its output is linear in scaled
    variance units during training (a saturating head collapses to zero on
    these small targets) and clamped at zero by :meth:`variance`.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or UQConfig()
        h = cfg.hidden
        self.encoder = PointEncoder(h, 2 * h)
        self.latent = nn.Sequential(nn.Linear(2 * h, 2 * h), nn.SiLU(), nn.Linear(2 * h, 2 * cfg.latent_dim))
        self.z_proj = nn.Linear(cfg.latent_dim, 8)
        self.dec_in = nn.Conv2d(4 + 8, h, 3, padding=1)
        self.dec_down = nn.Conv2d(h, 2 * h, 4, 2, 1)
        self.dec_mid = nn.Sequential(
            nn.Conv2d(2 * h, 2 * h, 3, padding=2, dilation=2), nn.SiLU(),
            nn.Conv2d(2 * h, 2 * h, 3, padding=2, dilation=2), nn.SiLU(),
        )
        self.dec_up = nn.ConvTranspose2d(2 * h, h, 4, 2, 1)
        self.dec_out = nn.Sequential(nn.Conv2d(2 * h, h, 3, padding=1), nn.SiLU(), nn.Conv2d(h, 1, 3, padding=1))
        nn.init.zeros_(self.dec_out[-1].weight)
        nn.init.zeros_(self.dec_out[-1].bias)

    def _gap_feature(self, gap):
        return gap.float() / self.config.gap_scale

    def encode_points(self, images, fractions, gaps, kind):
        """``images`` (N, H, W) in signal space; ``kind`` -1 for context, +1 for targets."""
        n, H, W = images.shape
        ch = [images,
              fractions.view(-1, 1, 1).expand(n, H, W),
              self._gap_feature(gaps).view(-1, 1, 1).expand(n, H, W),
              torch.full((n, H, W), float(kind))]
        return self.encoder(torch.stack(ch, dim=1))

    def latent_dist(self, r):
        stats = self.latent(r)
        mu, raw = stats.chunk(2, dim=-1)
        return mu, 0.1 + 0.9 * torch.sigmoid(raw)

    def decode(self, past, future, fractions, gaps, z):
        """Unclamped scaled variance ``(N, H, W)``."""
        n, H, W = past.shape
        zc = self.z_proj(z).view(n, -1, 1, 1).expand(n, 8, H, W)
        x = torch.cat([
            past[:, None], future[:, None],
            fractions.view(-1, 1, 1, 1).expand(n, 1, H, W),
            self._gap_feature(gaps).view(-1, 1, 1, 1).expand(n, 1, H, W),
            zc,
        ], dim=1)
        h0 = F.silu(self.dec_in(x))
        h = self.dec_mid(F.silu(self.dec_down(h0)))
        h = F.silu(self.dec_up(h))
        return self.dec_out(torch.cat([h, h0], dim=1))[:, 0]

    def variance(self, raw):
        return raw.clamp(min=0) / self.config.output_scale


def _mean_by_group(r, group, n_groups):
    sums = torch.zeros(n_groups, r.shape[1]).index_add_(0, group, r)
    counts = torch.zeros(n_groups).index_add_(0, group, torch.ones(len(group)))
    return sums / counts[:, None]


@dataclass
class _Batch:
    past: torch.Tensor  # (B, H, W) signal space
    future: torch.Tensor
    gaps: torch.Tensor  # (B,)
    t_frac: torch.Tensor  # (N_t,)
    t_group: torch.Tensor  # (N_t,) interval index of every target
    t_maps: torch.Tensor | None  # (N_t, H, W)


def _collate(contexts, target_maps=None):
    past = torch.stack([to_signal(torch.from_numpy(c.past)) for c in contexts])
    future = torch.stack([to_signal(torch.from_numpy(c.future)) for c in contexts])
    gaps = torch.tensor([c.gap for c in contexts], dtype=torch.float32)
    frac = torch.tensor([t for c in contexts for t in c.targets], dtype=torch.float32)
    group = torch.tensor([i for i, c in enumerate(contexts) for _ in c.targets], dtype=torch.long)
    maps = None
    if target_maps is not None:
        maps = torch.from_numpy(np.concatenate([np.asarray(m, np.float32) for m in target_maps]))
    return _Batch(past, future, gaps, frac, group, maps)


def kl_diag_gaussian(mu_q, sd_q, mu_p, sd_p):
    return (torch.log(sd_p / sd_q) + (sd_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sd_p ** 2) - 0.5).sum(-1)


def np_objective(net, batch, kl_weight, generator=None, sample_latent=True):
    """Per-interval negative ELBO: squared error in scaled variance units plus weighted KL.

    Returns ``(per_interval_loss, recon, kl)``, each of shape ``(B,)``.
    """
    B = batch.past.shape[0]
    ctx_img = torch.cat([batch.past, batch.future])
    ctx_frac = torch.cat([torch.zeros(B), torch.ones(B)])
    ctx_gap = torch.cat([batch.gaps, batch.gaps])
    ctx_group = torch.cat([torch.arange(B), torch.arange(B)])
    r_ctx = net.encode_points(ctx_img, ctx_frac, ctx_gap, -1)
    cfg = net.config
    tgt_img = to_signal(batch.t_maps * cfg.variance_scale)
    r_tgt = net.encode_points(tgt_img, batch.t_frac, batch.gaps[batch.t_group], +1)
    mu_p, sd_p = net.latent_dist(_mean_by_group(r_ctx, ctx_group, B))
    mu_q, sd_q = net.latent_dist(_mean_by_group(torch.cat([r_ctx, r_tgt]),
                                                torch.cat([ctx_group, batch.t_group]), B))
    if sample_latent:
        z = mu_q + sd_q * torch.randn(mu_q.shape, generator=generator)
    else:
        z = mu_q
    g = batch.t_group
    pred = net.decode(batch.past[g], batch.future[g], batch.t_frac, batch.gaps[g], z[g])
    err = ((pred - cfg.output_scale * batch.t_maps) ** 2).mean(dim=(1, 2))
    recon = _mean_by_group(err[:, None], g, B)[:, 0]
    kl = kl_diag_gaussian(mu_q, sd_q, mu_p, sd_p)
    return recon + kl_weight * kl, recon, kl


@dataclass
class UQTrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    kl_weight: float = 1e-2
    augment: bool = True
    seed: int = 0


@dataclass
class TrainedUQ:
    net: UQPredictor
    train_config: UQTrainConfig
    history: list = field(default_factory=list)


def _flip_pair(pair, fy, fx):
    c = pair.context
    ax = [a for a, f in ((0, fy), (1, fx)) if f]
    if not ax:
        return pair
    past, future = np.flip(c.past, ax).copy(), np.flip(c.future, ax).copy()
    maps = np.flip(pair.targets, [a + 1 for a in ax]).copy()
    return UQPair(NPContext(past, c.past_index, future, c.future_index, c.targets), maps)


def train_uq_predictor(pairs, train_config=None, model_config=None, log=None):
    """Fit the predictor to Monte-Carlo variance targets (second training stage)."""
    cfg = train_config or UQTrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise TrainingError("no (context, variance) pairs to train on")
    torch.manual_seed(derive_seed(cfg.seed, "uq-init"))
    net = UQPredictor(model_config)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch_generator(derive_seed(cfg.seed, "uq-latent"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "uq-order"))
    history = []
    net.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        t0 = time.time()
        for s in range(0, len(order), cfg.batch_size):
            chunk = [pairs[i] for i in order[s:s + cfg.batch_size]]
            if cfg.augment:
                flips = rng.random((len(chunk), 2)) < 0.5
                chunk = [_flip_pair(p, fy, fx) for p, (fy, fx) in zip(chunk, flips)]
            batch = _collate([p.context for p in chunk], [p.targets for p in chunk])
            loss = np_objective(net, batch, cfg.kl_weight, gen)[0].mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log and (epoch + 1) % 10 == 0:
            log(f"uq epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.6f} ({time.time() - t0:.1f}s)")
    net.eval()
    return TrainedUQ(net, cfg, history)


@torch.no_grad()
def predict_uncertainty(net, context):
    """Variance images ``(n_targets, H, W)`` decoded from the prior mean of ``z``."""
    if isinstance(net, TrainedUQ):
        net = net.net
    net.eval()
    batch = _collate([context])
    r = net.encode_points(torch.cat([batch.past, batch.future]), torch.tensor([0.0, 1.0]),
                          torch.cat([batch.gaps, batch.gaps]), -1)
    mu, _ = net.latent_dist(r.mean(dim=0, keepdim=True))
    n = len(context.targets)
    g = torch.zeros(n, dtype=torch.long)
    pred = net.decode(batch.past[g], batch.future[g], batch.t_frac, batch.gaps[g], mu[g])
    return net.variance(pred).numpy()


def predict_volume_uncertainty(net, sparse, depth):
    """Whole-volume predicted uncertainty, interval by interval."""
    H, W = sparse.slice_shape
    out = np.zeros((depth, H, W), dtype=np.float32)
    for a, b, ma, mb in sparse.intervals():
        if b - a >= 2:
            out[a + 1:b] = predict_uncertainty(net, NPContext.for_interval(ma, a, mb, b))
    return UncertaintyMap(out, "predicted")


def save_uq(directory, model, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), directory / "model.pt")
    meta = {
        "architecture": asdict(model.net.config),
        "latent_dim": model.net.config.latent_dim,
        "kl_weight": model.train_config.kl_weight,
        "train": asdict(model.train_config),
        "history": model.history,
    }
    meta.update(extra or {})
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_uq(directory):
    directory = Path(directory)
    with open(directory / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    net = UQPredictor(UQConfig(**meta["architecture"]))
    net.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    net.eval()
    return TrainedUQ(net, UQTrainConfig(**meta["train"]), meta.get("history", []))
