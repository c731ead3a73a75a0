"""Pipeline stages over a run directory.

Layout of a run directory::

    config.json           resolved configuration of the last command
    run_manifest.json     one record per completed stage
    data/                 gen-data: volumes, masks, sparse slices, manifest.json
    interp/               train-interp: denoiser checkpoint
    mc/                   mc-variance: sparsified pool masks + Monte-Carlo variance
    uq/                   train-uq: uncertainty-predictor checkpoint
    targets/<id>/         build-targets: interpolation, uncertainty, weights, target
    models/<mode>/seed<k>/  train: classifier checkpoints
    eval/                 evaluate: per-mode reports, summary table, figures
    sweeps/<param>/<v>/   sweep sub-runs plus comparison tables

A stage is skipped ("up to date") when its recorded input hash matches
and its outputs still hash to the recorded value. Inputs are the stage's
configuration section, the root seed and the output hashes of upstream
stages, so editing a config section re-runs exactly the affected stages.
All randomness derives from ``derive_seed(root_seed, stage, ...)``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import shutil
import time
from dataclasses import asdict
from pathlib import Path

import filelock
import numpy as np

from . import diffusion as dif
from . import uncertainty as unc
from .config import RunConfig, from_dict, save_config
from .errors import DependencyError, DueError, ValidationError
from .explain import TrainConfig, TrainingData, load_classifier, save_classifier, train
from .report import (aggregate_columns, aggregate_rows, build_report, emit_report, evaluate_model,
                     load_report, plot_parameter_sweep, plot_sweep, save_report, write_table)
from .seeding import derive_seed, numpy_rng
from .volume_data import (DatasetManifest, DenseAnnotation, generate_mask_pool,
                          generate_synthetic_dataset, load_annotation, load_sparse, random_indices,
                          save_annotation, save_sparse, sparsify_annotation, sparsify_dataset,
                          split_dataset)

log = logging.getLogger("due")

STAGES = ("gen-data", "train-interp", "mc-variance", "train-uq", "build-targets", "train", "evaluate")
STAGE_DIRS = {
    "gen-data": "data",
    "train-interp": "interp",
    "mc-variance": "mc",
    "train-uq": "uq",
    "build-targets": "targets",
    "evaluate": "eval",
}
SWEEP_PARAMETERS = ("lambda", "train_size")
MANIFEST_NAME = "run_manifest.json"


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def hash_directory(path):
    """SHA-256 over relative paths and contents of all files below ``path``."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        h.update(b"\0")
    return h.hexdigest()


class Run:
    """A run directory plus its configuration.

    ``shared`` maps stage names to other :class:`Run` objects whose outputs
    are used instead of this run's (sweep sub-runs reuse trained models).
    """

    def __init__(self, config, run_dir, shared=None):
        self.config = config
        self.dir = Path(run_dir)
        self.shared = dict(shared or {})
        self.dir.mkdir(parents=True, exist_ok=True)

    # --- manifest ---------------------------------------------------------

    @property
    def manifest_path(self):
        return self.dir / MANIFEST_NAME

    def manifest(self):
        if not self.manifest_path.exists():
            return {"stages": {}}
        with open(self.manifest_path, encoding="utf-8") as fh:
            return json.load(fh)

    def _save_manifest(self, m):
        tmp = self.manifest_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
        tmp.replace(self.manifest_path)

    def owner(self, stage):
        base = stage.split(":")[0]
        return self.shared.get(base, self)

    def out_dir(self, stage):
        owner = self.owner(stage)
        if stage.startswith("train:"):
            return owner.dir / "models" / stage.split(":", 1)[1]
        return owner.dir / STAGE_DIRS[stage]

    def record(self, stage):
        """Verified completion record of an upstream stage."""
        owner = self.owner(stage)
        rec = owner.manifest()["stages"].get(stage)
        out = self.out_dir(stage)
        if rec is None or not out.exists():
            where = "" if owner is self else f" in {owner.dir}"
            raise DependencyError(f"stage {stage!r} has not been run{where}; run `due {stage.split(':')[0]}` first",
                                  stage=stage.split(":")[0])
        if hash_directory(out) != rec["output_hash"]:
            raise DependencyError(f"outputs of stage {stage!r} changed since it ran; re-run `due {stage.split(':')[0]}`",
                                  stage=stage.split(":")[0])
        return rec

    def lock(self):
        return filelock.FileLock(str(self.dir / ".lock"), timeout=0)

    # --- execution --------------------------------------------------------

    def execute(self, stage, fn, deps, params, force=False):
        upstream = {d: self.record(d)["output_hash"] for d in deps}
        seed = derive_seed(self.config.seed, stage)
        input_hash = hashlib.sha256(
            _canonical({"params": params, "root_seed": self.config.seed, "upstream": upstream}).encode()
        ).hexdigest()
        out = self.out_dir(stage)
        m = self.manifest()
        rec = m["stages"].get(stage)
        if (not force and rec and rec["input_hash"] == input_hash and out.exists()
                and hash_directory(out) == rec["output_hash"]):
            log.info(f"{stage}: up to date")
            return rec
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        t0 = time.time()
        log.info(f"{stage}: running")
        fn(out, seed)
        rec = {
            "stage": stage,
            "input_hash": input_hash,
            "inputs": upstream,
            "outputs": sorted(p.relative_to(self.dir).as_posix() for p in out.rglob("*") if p.is_file()),
            "output_hash": hash_directory(out),
            "wall_time": round(time.time() - t0, 3),
            "seed": seed,
        }
        m = self.manifest()
        m["stages"][stage] = rec
        self._save_manifest(m)
        log.info(f"{stage}: done in {rec['wall_time']:.1f}s")
        return rec

    # --- shared loaders ---------------------------------------------------

    def dataset(self):
        return DatasetManifest.load(self.out_dir("gen-data"))

    def denoiser(self):
        return dif.load_denoiser(self.out_dir("train-interp"))


def config_snapshot(config):
    d = config.to_dict()
    d.pop("run_dir", None)
    return d


def open_run(config, run_dir=None):
    run = Run(config, run_dir or config.run_dir or "due-run")
    save_config(run.dir / "config.json", config)
    return run


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def gen_data(run, force=False):
    cfg = run.config.data

    def fn(out, seed):
        m = generate_synthetic_dataset(cfg.synthetic, derive_seed(seed, "samples"), out)
        m = split_dataset(m, cfg.split_ratios, derive_seed(seed, "split"), cfg.balance_train)
        sparsify_dataset(m, cfg.sparse_spacing, derive_seed(seed, "sparsify"), cfg.gap_range)
        counts = {s: len(m.by_split(s)) for s in ("train", "val", "test")}
        log.info(f"gen-data: {len(m.samples)} samples, split {counts}")

    return run.execute("gen-data", fn, [], {"data": asdict(cfg)}, force)


def _schedule(icfg):
    return dif.make_schedule(icfg.n_steps, icfg.beta_min, icfg.beta_max, icfg.schedule)


def train_interp(run, force=False):
    cfg = run.config
    icfg = cfg.interp

    def fn(out, seed):
        pool = generate_mask_pool(cfg.data.synthetic, derive_seed(seed, "pool"), icfg.pool_size)
        triples = dif.TripleSet.from_masks(pool, icfg.min_gap, icfg.max_gap)
        log.info(f"train-interp: {len(triples)} annotation triples from {len(pool)} masks")
        model = dif.train_denoiser(
            triples, _schedule(icfg), dif.ConditionMaskPolicy(icfg.p_mask),
            dif.DenoiserTrainConfig(**asdict(icfg.train), seed=derive_seed(seed, "fit")),
            dif.DenoiserConfig(**asdict(icfg.model)), log=log.info,
        )
        dif.save_denoiser(out, model, {"n_triples": len(triples)})

    params = {"synthetic": asdict(cfg.data.synthetic), "interp": asdict(icfg)}
    return run.execute("train-interp", fn, [], params, force)


def uq_pool(config, seed):
    """Sparsified ground-truth masks (random gaps) whose MC variance trains the predictor."""
    pool = generate_mask_pool(config.data.synthetic, derive_seed(seed, "pool"), config.uq.pool_size)
    sparses = []
    for i, m in enumerate(pool):
        dense = DenseAnnotation(m, "ground_truth")
        z0, z1 = dense.foreground_extent()
        idx = random_indices(z0, z1, config.uq.gap_range, numpy_rng(seed, "gaps", i))
        sparses.append(sparsify_annotation(dense, idx))
    return sparses


def mc_variance(run, force=False):
    cfg = run.config

    def fn(out, seed):
        den = run.denoiser()
        sparses = uq_pool(cfg, seed)
        depths = [s.depth for s in sparses]
        roots = [derive_seed(seed, "mc", i) for i in range(len(sparses))]
        t0 = time.time()
        maps = unc.mc_variance_many(den.net, sparses, depths, den.schedule, cfg.uq.T_runs, roots,
                                    cfg.interp.block_size)
        log.info(f"mc-variance: {len(sparses)} annotations x {cfg.uq.T_runs} runs in {time.time() - t0:.1f}s")
        for i, (s, u) in enumerate(zip(sparses, maps)):
            (out / f"{i:04d}").mkdir()
            save_sparse(out / f"{i:04d}" / "sparse", s)
            unc.save_uncertainty(out / f"{i:04d}" / "variance.f32", u)

    params = {"synthetic": asdict(cfg.data.synthetic), "uq_pool": cfg.uq.pool_size,
              "gap_range": list(cfg.uq.gap_range), "T_runs": cfg.uq.T_runs,
              "block_size": cfg.interp.block_size}
    return run.execute("mc-variance", fn, ["train-interp"], params, force)


def load_mc_pairs(mc_dir):
    pairs = []
    for d in sorted(p for p in Path(mc_dir).iterdir() if p.is_dir()):
        sparse = load_sparse(d / "sparse")
        pairs.extend(unc.pairs_from_mc(sparse, unc.load_uncertainty(d / "variance.f32")))
    return pairs


def train_uq(run, force=False):
    cfg = run.config.uq

    def fn(out, seed):
        pairs = load_mc_pairs(run.out_dir("mc-variance"))
        log.info(f"train-uq: {len(pairs)} interval pairs")
        model = unc.train_uq_predictor(
            pairs, unc.UQTrainConfig(**asdict(cfg.train), seed=derive_seed(seed, "fit")),
            unc.UQConfig(**asdict(cfg.model)), log=log.info,
        )
        unc.save_uq(out, model, {"n_pairs": len(pairs)})

    params = {"model": asdict(cfg.model), "train": asdict(cfg.train)}
    return run.execute("train-uq", fn, ["mc-variance"], params, force)


def build_targets(run, force=False):
    cfg = run.config
    source = cfg.targets.uncertainty
    deps = ["gen-data", "train-interp"] + (["train-uq"] if source == "predicted" else [])

    def fn(out, seed):
        ds = run.dataset()
        den = run.denoiser()
        entries = [e for e in ds.by_split("train") if e.label == 1]
        sparses = [ds.load_sparse(e) for e in entries]
        depths = [s.depth for s in sparses]
        seeds = [derive_seed(seed, "interpolate", e.id) for e in entries]
        dense = dif.interpolate_many(den.net, sparses, depths, den.schedule, seeds, cfg.interp.block_size)
        if source == "predicted":
            uq = unc.load_uq(run.out_dir("train-uq"))
            umaps = [unc.predict_volume_uncertainty(uq, s, d) for s, d in zip(sparses, depths)]
        else:
            roots = [derive_seed(seed, "mc", e.id) for e in entries]
            umaps = unc.mc_variance_many(den.net, sparses, depths, den.schedule, cfg.uq.T_runs, roots,
                                         cfg.interp.block_size)
        for e, s, d, u in zip(entries, sparses, dense, umaps):
            w = unc.uncertainty_to_weights(u, s.indices)
            tgt = unc.build_supervision_target(d, w, s)
            (out / e.id).mkdir()
            save_annotation(out / e.id / "interpolated.f32", d)
            unc.save_uncertainty(out / e.id / "uncertainty.f32", u)
            unc.save_weights(out / e.id / "weights.f32", w)
            save_annotation(out / e.id / "target.f32", tgt)
        log.info(f"build-targets: {len(entries)} positive training samples ({source} uncertainty)")

    params = {"targets": asdict(cfg.targets), "block_size": cfg.interp.block_size,
              "T_runs": cfg.uq.T_runs if source == "monte_carlo" else None}
    return run.execute("build-targets", fn, deps, params, force)


def training_data(run, split="train", with_targets=True):
    ds = run.dataset()
    entries = ds.by_split(split)
    if not entries:
        raise ValidationError(f"split {split!r} is empty")
    vols = np.stack([ds.load_volume(e).data for e in entries])
    labels = np.array([e.label for e in entries])
    masks = weights = None
    if with_targets:
        tdir = run.out_dir("build-targets")
        masks = np.zeros_like(vols)
        weights = np.ones_like(vols)
        for i, e in enumerate(entries):
            if e.label == 1:
                masks[i] = load_annotation(tdir / e.id / "interpolated.f32").mask
                weights[i] = unc.load_weights(tdir / e.id / "weights.f32").values
    return TrainingData(vols, labels, masks, weights), entries


def classifier_seeds(config):
    return [derive_seed(config.seed, "classifier", k) for k in range(config.train.n_seeds)]


def train_config_for(config, mode, seed):
    t = config.train
    return TrainConfig(lam=t.lam, lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, loss=t.loss,
                       mode=mode, weighting=t.weighting, seed=seed, arch=copy.deepcopy(t.arch))


def train_mode(run, mode, force=False):
    cfg = run.config
    deps = ["gen-data"] + ([] if mode == "baseline" else ["build-targets"])

    def fn(out, _seed):
        data, _ = training_data(run, "train", with_targets=mode != "baseline")
        val = training_data(run, "val", with_targets=False)[0] if run.dataset().by_split("val") else None
        for k, s in enumerate(classifier_seeds(cfg)):
            tc = train_config_for(cfg, mode, s)
            model, hist = train(data, tc, val, log=log.info if k == 0 else None)
            save_classifier(out / f"seed{k}", model, tc, hist)
            log.info(f"train:{mode}: seed {k} final prediction loss {hist[-1]['prediction_loss']:.4f}")

    params = {"train": asdict(cfg.train), "mode": mode}
    return run.execute(f"train:{mode}", fn, deps, params, force)


def evaluate(run, force=False, modes=None):
    cfg = run.config
    modes = list(modes or cfg.train.modes)
    deps = ["gen-data"] + [f"train:{m}" for m in modes]

    def fn(out, _seed):
        ds = run.dataset()
        entries = ds.by_split(cfg.eval.split)
        if not entries:
            raise ValidationError(f"evaluation split {cfg.eval.split!r} is empty")
        vols = np.stack([ds.load_volume(e).data for e in entries])
        labels = np.array([e.label for e in entries])
        masks = np.stack([ds.load_mask(e).mask for e in entries])
        ids = [e.id for e in entries]
        reports = {}
        for mode in modes:
            mdir = run.out_dir(f"train:{mode}")
            results, first_sal = [], None
            for k in range(cfg.train.n_seeds):
                model, _ = load_classifier(mdir / f"seed{k}")
                res, sal = evaluate_model(model, vols, labels, masks, ids, cfg.eval.threshold,
                                          cfg.eval.thresholds)
                results.append((k, res))
                first_sal = first_sal if first_sal is not None else sal
            report = build_report(config_snapshot(cfg), results)
            report["mode"] = mode
            overlays = []
            for i, sid in enumerate(ids):
                if sid in first_sal and len(overlays) < cfg.eval.n_overlays:
                    overlays.append((sid, vols[i], first_sal[sid], masks[i]))
            emit_report(out / mode, report, overlays)
            reports[mode] = report
            agg = report["aggregates"]
            log.info(f"evaluate:{mode}: IoU {agg['iou']['mean']:.4f} +- {agg['iou']['std']:.4f}, "
                     f"ROC-AUC {agg['roc_auc']['mean']:.4f}")
        write_summary(out, reports)

    params = {"eval": asdict(cfg.eval), "modes": modes}
    return run.execute("evaluate", fn, deps, params, force)


def write_summary(out, reports):
    rows = aggregate_rows(reports)
    write_table(Path(out) / "summary.tsv", rows, aggregate_columns())
    save_report(Path(out) / "summary.json", {k: r["aggregates"] for k, r in reports.items()})
    sweeps = {k: r["sweep"] for k, r in reports.items() if r.get("sweep")}
    if sweeps:
        plot_sweep(Path(out) / "threshold_sweep.png", sweeps)


def run_all(run, force=False):
    gen_data(run, force)
    train_interp(run, force)
    if run.config.targets.uncertainty == "predicted":
        mc_variance(run, force)
        train_uq(run, force)
    if any(m != "baseline" for m in run.config.train.modes):
        build_targets(run, force)
    for mode in run.config.train.modes:
        train_mode(run, mode, force)
    return evaluate(run, force)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _sub_config(config, **changes):
    d = config.to_dict()
    for dotted, value in changes.items():
        node = d
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return from_dict(RunConfig, d).validate()


def _value_name(v):
    return f"{v:g}" if isinstance(v, float) else str(v)


def sweep(run, parameter, values=None, force=False):
    """Sub-run per value, then a comparison table and plot in ``sweeps/<parameter>``."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValidationError(f"sweep parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
    cfg = run.config
    if values is None:
        values = cfg.sweep.lam if parameter == "lambda" else cfg.sweep.train_size
    values = list(values)
    if not values:
        raise ValidationError("sweep needs at least one value")
    root = run.dir / "sweeps" / parameter
    rows, reports = [], {}
    for v in values:
        if parameter == "lambda":
            v = float(v)
            sub_cfg = _sub_config(cfg, **{"train.lam": v, "train.modes": ["due"]})
            shared = {s: run for s in ("gen-data", "train-interp", "mc-variance", "train-uq", "build-targets")}
        else:
            v = int(v)
            ratio = cfg.data.split_ratios[0]
            per_class = math.ceil(v / (2 * ratio))
            sub_cfg = _sub_config(cfg, **{"data.synthetic.n_pos": per_class, "data.synthetic.n_neg": per_class})
            shared = {s: run for s in ("train-interp", "mc-variance", "train-uq")}
        sub = Run(sub_cfg, root / _value_name(v), shared)
        save_config(sub.dir / "config.json", sub_cfg)
        log.info(f"sweep {parameter}={_value_name(v)}")
        if parameter == "train_size":
            gen_data(sub, force)
            if any(m != "baseline" for m in sub_cfg.train.modes):
                build_targets(sub, force)
        for mode in sub_cfg.train.modes:
            train_mode(sub, mode, force)
        evaluate(sub, force)
        n_train = len(sub.dataset().by_split("train"))
        for mode in sub_cfg.train.modes:
            rep = load_report(sub.out_dir("evaluate") / mode / "report.json")
            reports.setdefault(mode, []).append(rep)
            rows.append({"name": f"{mode}", parameter: v, "n_train": n_train,
                         **aggregate_rows({mode: rep})[0]})
    cols = [parameter, "n_train"] + aggregate_columns()
    write_table(root / "comparison.tsv", rows, cols)
    save_report(root / "comparison.json", {"parameter": parameter, "values": values, "rows": rows})
    for mode, reps in reports.items():
        plot_parameter_sweep(root / f"{parameter}_{mode}.png", parameter, values, reps)
    return rows

