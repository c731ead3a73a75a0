"""Conditional denoising-diffusion slice interpolator.

The noise predictor sees four channels: the noisy target slice, the past
and future condition slices (each possibly zeroed by a Bernoulli mask
during training) and a constant channel holding the target's relative
depth between the two conditions. Masks live in ``[-1, 1]`` signal space
inside the model (``2a - 1``), so a zeroed condition is distinguishable
from an empty annotation.

Whole volumes are filled interval by interval. Inside an interval, slices
are generated in blocks; after every block the past condition is replaced
by the last generated slice. All sampling entry points batch their work
across intervals, volumes and Monte-Carlo runs, while each job keeps its
own noise generator, so the result of a job depends only on its seed.
"""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InterpolationError, TrainingError, ValidationError
from .seeding import derive_seed, torch_generator
from .volume_data import DenseAnnotation, SparseAnnotation

MAX_FORWARD_BATCH = 512


# ---------------------------------------------------------------------------
# Schedule and forward process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule indexed by steps ``t = 1 .. n_steps``."""

    n_steps: int
    betas: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.n_steps,):
            raise ValidationError("length of betas must equal n_steps")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValidationError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.n_steps):
            raise ValidationError(f"step index must lie in [1, {self.n_steps}], got {t}")
        return self.alpha_bars[t - 1]

    def to_dict(self):
        return {"n_steps": self.n_steps, "kind": self.kind, "betas": self.betas.tolist()}


def make_schedule(n_steps=200, beta_min=5e-4, beta_max=0.1, kind="linear"):
    """Linear or cosine schedule.

    The linear defaults give ``sum(beta) ~ 10`` at 200 steps, the same
    terminal signal level as the classic 1000-step ``1e-4 .. 0.02`` schedule.
    Cosine betas are clipped into ``[beta_min, beta_max]``.
    """
    if n_steps < 2:
        raise ValidationError(f"n_steps must be >= 2, got {n_steps}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValidationError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(n_steps + 1, dtype=np.float64) / n_steps
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], beta_min, beta_max)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(int(n_steps), betas, kind)


def forward_noise(x0, t, eps, schedule):
    """Closed-form noising ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``.

    ``t`` may be a scalar or one step per leading-axis element of ``x0``.
    Works on numpy arrays and torch tensors.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValidationError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    t_np = t.cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    ab = schedule.alpha_bar(t_np)
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if np.ndim(ab) > 0:
        bshape = (-1,) + (1,) * (x0.ndim - 1)
        a, b = a.reshape(bshape), b.reshape(bshape)
    if torch.is_tensor(x0):
        a = torch.as_tensor(a, dtype=x0.dtype)
        b = torch.as_tensor(b, dtype=x0.dtype)
    return a * x0 + b * eps


# ---------------------------------------------------------------------------
# Condition masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionMaskPolicy:
    """Each condition is zeroed independently with probability ``p_mask``."""

    p_mask: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValidationError(f"p_mask must lie in [0, 1], got {self.p_mask}")

    def sample(self, n, generator=None):
        """Return ``(keep_past, keep_future)``, float tensors of shape ``(n,)`` in {0, 1}."""
        u = torch.rand(2, n, generator=generator)
        keep = (u >= self.p_mask).float()
        return keep[0], keep[1]


# ---------------------------------------------------------------------------
# Noise predictor
# ---------------------------------------------------------------------------


def to_signal(mask):
    return 2.0 * mask - 1.0


def from_signal(x):
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class DenoiserConfig:
    base_channels: int = 16
    channel_mult: tuple = (1, 2, 2)
    stem_stride: int = 2
    groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)


class SliceDenoiser(nn.Module):
    """Small U-shaped 2D noise predictor with a sinusoidal timestep embedding.

    The U-Net body runs at ``1 / stem_stride`` resolution; a thin
    full-resolution path (stem convolution in, bilinear upsample plus skip
    out) keeps slice-level detail without checkerboard artifacts.
    """

    in_channels = 4

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or DenoiserConfig()
        c = config.base_channels
        tdim = 4 * c
        self.time_mlp = nn.Sequential(nn.Linear(c, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        s = config.stem_stride
        hc = max(c // 2, 4)
        # light full-resolution path; the U-Net body runs at 1/stem_stride
        self.stem_full = nn.Conv2d(self.in_channels, hc, 3, padding=1)
        self.stem = nn.Conv2d(hc, c, 2 * s, stride=s, padding=s // 2) if s > 1 else nn.Conv2d(hc, c, 3, padding=1)
        chans = [c * m for m in config.channel_mult]
        self.down = nn.ModuleList()
        cin = c
        for ch in chans:
            self.down.append(ResBlock(cin, ch, tdim, config.groups))
            cin = ch
        self.mid = ResBlock(cin, cin, tdim, config.groups)
        self.up = nn.ModuleList()
        for ch in reversed(chans):
            self.up.append(ResBlock(cin + ch, ch, tdim, config.groups))
            cin = ch
        self.head_norm = nn.GroupNorm(min(config.groups, cin), cin)
        self.head_reduce = nn.Conv2d(cin, hc, 3, padding=1)
        self.head_full = nn.Conv2d(2 * hc, hc, 3, padding=1)
        self.head = nn.Conv2d(hc, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def downsampling(self):
        return self.config.stem_stride * 2 ** (len(self.config.channel_mult) - 1)

    def forward(self, x, t):
        if x.shape[1] != self.in_channels:
            raise ValidationError(f"denoiser expects {self.in_channels} channels, got {x.shape[1]}")
        temb = self.time_mlp(timestep_embedding(t, self.config.base_channels))
        full = F.silu(self.stem_full(x))
        h = self.stem(full)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.down) - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, temb)
        for block in self.up:
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        h = self.head_reduce(F.silu(self.head_norm(h)))
        if h.shape[-1] != full.shape[-1]:
            h = F.interpolate(h, size=full.shape[-2:], mode="bilinear", align_corners=False)
        h = F.silu(self.head_full(torch.cat([h, full], dim=1)))
        return self.head(h)


def build_input(x_t, past, future, position):
    """Stack (noisy slice, past, future, position) into the 4-channel denoiser input.

    ``x_t``, ``past`` and ``future`` have shape ``(N, 1, H, W)``; ``position``
    has shape ``(N,)``.
    """
    pos = position.view(-1, 1, 1, 1).expand_as(x_t)
    return torch.cat([x_t, past, future, pos], dim=1)


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass
class TripleSet:
    """Annotation triples ``(A_i, A_j, A_k)`` with ``i < j < k`` indexed into a mask stack.

    ``masks`` has shape ``(V, D, H, W)``; each row of ``index`` is
    ``(volume, i, j, k)``.
    """

    masks: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1, 4)
        v, i, j, k = self.index.T
        if self.index.size and not np.all((i < j) & (j < k)):
            raise ValidationError("every triple needs i < j < k")

    def __len__(self):
        return len(self.index)

    @classmethod
    def from_masks(cls, masks, min_gap=2, max_gap=8):
        """All triples inside each mask's foreground extent with ``min_gap <= k - i <= max_gap``."""
        masks = np.asarray(masks, dtype=np.uint8)
        rows = []
        for v, m in enumerate(masks):
            ext = DenseAnnotation(m).foreground_extent()
            if ext is None:
                continue
            lo, hi = ext
            for i in range(lo, hi + 1):
                for k in range(i + min_gap, min(i + max_gap, hi) + 1):
                    for j in range(i + 1, k):
                        rows.append((v, i, j, k))
        return cls(masks, np.array(rows, dtype=np.int64).reshape(-1, 4))

    def batch(self, rows):
        idx = self.index[rows]
        v, i, j, k = idx.T
        m = self.masks
        past = torch.from_numpy(m[v, i].astype(np.float32))[:, None]
        target = torch.from_numpy(m[v, j].astype(np.float32))[:, None]
        future = torch.from_numpy(m[v, k].astype(np.float32))[:, None]
        position = torch.from_numpy(((j - i) / (k - i)).astype(np.float32))
        return past, target, future, position


def augment(past, target, future, position, generator):
    """Random flips, transpose and past/future reversal, shared across each triple."""
    n = past.shape[0]
    r = torch.rand(4, n, generator=generator)
    stack = torch.cat([past, target, future], dim=1)
    for axis, flag in ((2, r[0]), (3, r[1])):
        sel = flag < 0.5
        if sel.any():
            stack[sel] = stack[sel].flip(axis)
    if stack.shape[2] == stack.shape[3]:
        sel = r[2] < 0.5
        if sel.any():
            stack[sel] = stack[sel].transpose(2, 3)
    rev = r[3] < 0.5
    if rev.any():
        stack[rev] = stack[rev].flip(1)
        position = torch.where(rev, 1.0 - position, position)
    return stack[:, 0:1], stack[:, 1:2], stack[:, 2:3], position


def diffusion_loss(denoiser, target, past, future, position, schedule, mask_policy,
                   generator=None, t=None, eps=None, keep=None):
    """Squared-error noise-prediction loss for one batch.

    Inputs are masks in ``[0, 1]`` with shape ``(N, 1, H, W)``. ``t``,
    ``eps`` and ``keep`` (a ``(keep_past, keep_future)`` pair) are drawn
    when omitted.
    """
    n = target.shape[0]
    if t is None:
        t = torch.randint(1, schedule.n_steps + 1, (n,), generator=generator)
    if eps is None:
        eps = torch.randn(target.shape, generator=generator)
    if keep is None:
        keep = mask_policy.sample(n, generator)
    keep_p, keep_f = keep
    x_t = forward_noise(to_signal(target), t, eps, schedule)
    cond_p = keep_p.view(-1, 1, 1, 1) * to_signal(past)
    cond_f = keep_f.view(-1, 1, 1, 1) * to_signal(future)
    pred = denoiser(build_input(x_t, cond_p, cond_f, position), t)
    return ((eps - pred) ** 2).mean()


@dataclass
class DenoiserTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.995
    augment: bool = True
    seed: int = 0
    max_steps_per_epoch: int | None = 250


@dataclass
class TrainedDenoiser:
    net: SliceDenoiser
    schedule: DiffusionSchedule
    mask_policy: ConditionMaskPolicy
    train_config: DenoiserTrainConfig
    history: list = field(default_factory=list)

    def __call__(self, x, t):
        return self.net(x, t)


def train_denoiser(triples, schedule, mask_policy=None, train_config=None, model_config=None,
                   log=None):
    """Fit a noise predictor on annotation triples; returns the EMA network.

    ``history`` holds the mean batch loss of every epoch.
    """
    mask_policy = mask_policy or ConditionMaskPolicy()
    cfg = train_config or DenoiserTrainConfig()
    if len(triples) == 0:
        raise TrainingError("no annotation triples to train on")
    torch.manual_seed(derive_seed(cfg.seed, "denoiser-init"))
    net = SliceDenoiser(model_config)
    ema = copy.deepcopy(net).requires_grad_(False)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch_generator(derive_seed(cfg.seed, "denoiser-train"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "denoiser-order"))
    steps = math.ceil(len(triples) / cfg.batch_size)
    if cfg.max_steps_per_epoch:
        steps = min(steps, cfg.max_steps_per_epoch)
    total = steps * cfg.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 100) * 0.5 * (1 + math.cos(math.pi * min(s, total) / total))
    )
    history = []
    net.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triples))
        losses = []
        t0 = time.time()
        for s in range(steps):
            rows = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            if len(rows) < cfg.batch_size:
                rows = rng.integers(0, len(triples), cfg.batch_size)
            past, target, future, pos = triples.batch(rows)
            if cfg.augment:
                past, target, future, pos = augment(past, target, future, pos, gen)
            loss = diffusion_loss(net, target, past, future, pos, schedule, mask_policy, gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), net.parameters()):
                    pe.mul_(cfg.ema_decay).add_(p, alpha=1.0 - cfg.ema_decay)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log:
            log(f"denoiser epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f} ({time.time() - t0:.1f}s)")
    if cfg.ema_decay <= 0:
        ema = net
    ema.eval()
    return TrainedDenoiser(ema, schedule, mask_policy, cfg, history)


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def _eval_denoiser(denoiser, x, t):
    outs = []
    for s in range(0, x.shape[0], MAX_FORWARD_BATCH):
        xs = x[s:s + MAX_FORWARD_BATCH]
        outs.append(denoiser(xs, t[:xs.shape[0]]))
    return torch.cat(outs) if len(outs) > 1 else outs[0]


@torch.no_grad()
def reverse_process(denoiser, past, future, position, schedule, generators, counts):
    """Ancestral sampling of a batch of slices from pure noise.

    ``past``/``future`` are signal-space conditions ``(N, 1, H, W)``;
    ``generators[k]`` draws the noise of the next ``counts[k]`` rows.
    Returns masks in ``[0, 1]``.
    """
    if sum(counts) != past.shape[0]:
        raise ValidationError("generator row counts must cover the batch")
    shape = (1,) + tuple(past.shape[1:])

    def noise():
        return torch.cat([torch.randn((c,) + shape[1:], generator=g) for g, c in zip(generators, counts)])

    betas = schedule.betas
    abars = schedule.alpha_bars
    x = noise()
    n = x.shape[0]
    x0 = x
    for t in range(schedule.n_steps, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        eps = _eval_denoiser(denoiser, build_input(x, past, future, position), tt)
        ab = abars[t - 1]
        x0 = ((x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)).clamp(-1.0, 1.0)
        if t > 1:
            ab_prev = abars[t - 2]
            beta = betas[t - 1]
            c0 = math.sqrt(ab_prev) * beta / (1 - ab)
            ct = math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)
            var = beta * (1 - ab_prev) / (1 - ab)
            x = c0 * x0 + ct * x + math.sqrt(var) * noise()
    return from_signal(x0)


def _as_float_slice(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float32))


def sample_block(denoiser, past, future, positions, schedule, seed=0):
    """Generate one slice per relative position in ``positions`` (strictly increasing, in (0, 1))."""
    positions = [float(p) for p in positions]
    if not positions:
        raise ValidationError("need at least one position")
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise ValidationError(f"positions must be strictly increasing: {positions}")
    if positions[0] <= 0 or positions[-1] >= 1:
        raise ValidationError(f"positions must lie in (0, 1): {positions}")
    past, future = np.asarray(past), np.asarray(future)
    if past.shape != future.shape:
        raise ValidationError("past and future slices differ in shape")
    n = len(positions)
    p = to_signal(_as_float_slice(past))[None, None].expand(n, 1, *past.shape)
    f = to_signal(_as_float_slice(future))[None, None].expand(n, 1, *past.shape)
    out = reverse_process(denoiser, p, f, torch.tensor(positions), schedule,
                          [torch_generator(seed)], [n])
    return [s[0].numpy() for s in out]


@dataclass
class IntervalRequest:
    past: np.ndarray
    future: np.ndarray
    gap: int
    block_size: int = 2
    seed: int = 0

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float32)
        self.future = np.asarray(self.future, dtype=np.float32)
        if self.past.shape != self.future.shape:
            raise ValidationError("past and future slices differ in shape")
        if self.gap < 1:
            raise ValidationError(f"gap must be >= 1, got {self.gap}")
        if self.block_size < 1:
            raise ValidationError(f"block size must be >= 1, got {self.block_size}")


def block_plan(gap, block_size):
    """Block sizes used to fill the ``gap - 1`` interior slices of an interval."""
    missing = gap - 1
    return [min(block_size, missing - s) for s in range(0, missing, block_size)]


def fill_intervals(denoiser, requests, schedule):
    """Interior slices for many intervals at once; one ``(gap - 1, H, W)`` array per request.

    Each autoregressive round batches the next block of every unfinished
    interval. A block's relative positions are measured inside the
    interval bounded by its current conditions, i.e. from the last
    generated slice to the future annotation.
    """
    states = []
    for r in requests:
        states.append({
            "req": r,
            "gen": torch_generator(r.seed),
            "past": to_signal(_as_float_slice(r.past)),
            "future": to_signal(_as_float_slice(r.future)),
            "done": 0,
            "out": [],
        })
    while True:
        active = [s for s in states if s["done"] < s["req"].gap - 1]
        if not active:
            break
        pasts, futures, positions, gens, counts = [], [], [], [], []
        for s in active:
            r = s["req"]
            n = min(r.block_size, r.gap - 1 - s["done"])
            span = r.gap - s["done"]
            positions.extend((k + 1) / span for k in range(n))
            pasts.append(s["past"][None, None].expand(n, 1, *r.past.shape))
            futures.append(s["future"][None, None].expand(n, 1, *r.past.shape))
            gens.append(s["gen"])
            counts.append(n)
        out = reverse_process(denoiser, torch.cat(pasts), torch.cat(futures),
                              torch.tensor(positions, dtype=torch.float32), schedule, gens, counts)
        start = 0
        for s, n in zip(active, counts):
            block = out[start:start + n, 0]
            start += n
            s["out"].extend(block.numpy())
            s["past"] = to_signal(block[-1])
            s["done"] += n
    H, W = requests[0].past.shape if requests else (0, 0)
    return [np.stack(s["out"]) if s["out"] else np.zeros((0, H, W), np.float32) for s in states]


def interpolate_interval(denoiser, request, schedule):
    """The ``gap - 1`` missing slices between two annotations, as a list."""
    return list(fill_intervals(denoiser, [request], schedule)[0])


def interpolate_many(denoiser, sparses, depths, schedule, seeds, block_size=2):
    """Batched :func:`interpolate_volume` over several sparse annotations."""
    requests, owners = [], []
    for v, (sparse, depth, seed) in enumerate(zip(sparses, depths, seeds)):
        if len(sparse.indices) < 2:
            raise InterpolationError("need at least two annotated slices to interpolate")
        if sparse.indices[-1] >= depth:
            raise InterpolationError(f"annotation index {sparse.indices[-1]} outside depth {depth}")
        for k, (a, b, ma, mb) in enumerate(sparse.intervals()):
            if b - a >= 2:
                requests.append(IntervalRequest(ma, mb, b - a, block_size, derive_seed(seed, "interval", k)))
                owners.append((v, a, b))
    filled = fill_intervals(denoiser, requests, schedule)
    results = []
    for v, (sparse, depth) in enumerate(zip(sparses, depths)):
        H, W = sparse.slice_shape
        vol = np.zeros((depth, H, W), dtype=np.float32)
        for z, m in sparse.slices:
            vol[z] = m
        results.append(vol)
    for (v, a, b), slices in zip(owners, filled):
        results[v][a + 1:b] = slices
    return [DenseAnnotation(r, "interpolated") for r in results]


def interpolate_volume(denoiser, sparse, depth, schedule, seed=0, block_size=2):
    """Dense annotation: known slices copied, interiors generated, outside the extent zero."""
    return interpolate_many(denoiser, [sparse], [depth], schedule, [seed], block_size)[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_denoiser(directory, model, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), directory / "model.pt")
    meta = {
        "schedule": {"n_steps": model.schedule.n_steps, "kind": model.schedule.kind,
                     "betas": model.schedule.betas.tolist()},
        "architecture": asdict(model.net.config),
        "mask_policy": {"p_mask": model.mask_policy.p_mask},
        "train": asdict(model.train_config),
        "epochs": len(model.history),
        "history": model.history,
    }
    meta.update(extra or {})
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_denoiser(directory):
    directory = Path(directory)
    with open(directory / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    net = SliceDenoiser(DenoiserConfig(**meta["architecture"]))
    net.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    net.eval()
    sch = meta["schedule"]
    schedule = DiffusionSchedule(sch["n_steps"], np.array(sch["betas"]), sch["kind"])
    return TrainedDenoiser(net, schedule, ConditionMaskPolicy(meta["mask_policy"]["p_mask"]),
                           DenoiserTrainConfig(**meta["train"]), meta.get("history", []))
