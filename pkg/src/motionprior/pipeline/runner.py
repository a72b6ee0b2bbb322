"""Experiment commands behind the CLI.

Every command reads an :class:`ExperimentConfig`, works inside the data
root and the run directory, and stamps what it writes with the config
hash, seed and package version.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .. import __version__, body, evalm, sensim
from ..exceptions import ConfigError, LoadError, MissingPrerequisiteError
from ..prior import MotionPrior, slerp_baseline
from ..reuse import MotionEstimator
from .config import ExperimentConfig
from .data import DatasetManifest, ingest_motion_corpus, load_windows, subsample_ids
from .synth import write_source_corpus

logger = logging.getLogger(__name__)

POINT_METRICS = ("pose_error", "joint_error", "mesh_error")
IMU_METRICS = ("sip_error", "angular_error", "positional_error", "mesh_error", "jitter")
FRACTIONS = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)


class Context:
    """Resolved paths, body model and provenance for one command invocation."""

    def __init__(self, config: ExperimentConfig, command: str):
        self.config = config
        self.command = command
        self.root = config.resolved_data_root()
        self.run_dir = Path(config.run_dir)
        self._model = None

    @property
    def model(self):
        if self._model is None:
            spec = self.config.body_model
            self._model = body.default_toy_model() if spec == "toy" else body.load_model(spec)
        return self._model

    def header(self, **extra):
        return {"command": self.command, "config_hash": self.config.digest(),
                "seed": self.config.seed, "code_version": __version__, **extra}

    # -- locations --------------------------------------------------------

    @property
    def windows_dir(self):
        return self.root / "windows"

    def clips_dir(self, split, modality):
        return self.root / "clips" / split / modality

    @property
    def prior_path(self):
        return self.run_dir / "prior.pt"

    def reuse_path(self, modality):
        return self.run_dir / f"reuse_{modality}.pt"

    def write_json(self, name, payload):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / name
        path.write_text(json.dumps({"provenance": self.header(), **payload}, indent=2, sort_keys=True))
        return path

    def write_text(self, name, text):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / name
        path.write_text(f"# provenance: {json.dumps(self.header(), sort_keys=True)}\n{text}\n")
        return path

    # -- loading ----------------------------------------------------------

    def windows(self, split, fraction=1.0):
        manifest_path = self.windows_dir / f"{split}_manifest.json"
        if not manifest_path.exists():
            raise MissingPrerequisiteError(f"{manifest_path} is missing; run `gen-data` first")
        manifest = DatasetManifest.load(manifest_path)
        ids = manifest.ids
        if fraction < 1.0:
            ids = subsample_ids(ids, fraction)
        if self.config.data.max_windows:
            ids = ids[: self.config.data.max_windows]
        if not ids:
            raise MissingPrerequisiteError(f"the {split} split has no windows")
        return load_windows(self.windows_dir / f"{split}_windows.npz", ids)

    def clips(self, split, modality, fraction=1.0):
        d = self.clips_dir(split, modality)
        manifest = d / "manifest.jsonl"
        if not manifest.exists():
            raise MissingPrerequisiteError(
                f"{manifest} is missing; run `gen-data --modalities {modality}` first")
        records = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
        ids = [r["clip_id"] for r in records]
        if fraction < 1.0:
            ids = subsample_ids(ids, fraction)
        if self.config.data.max_windows:
            ids = ids[: self.config.data.max_windows]
        by_id = {r["clip_id"]: r for r in records}
        return [sensim.SensorClip.load(d / by_id[i]["file"]) for i in ids]

    def prior(self):
        if not self.prior_path.exists():
            raise MissingPrerequisiteError(f"prior checkpoint {self.prior_path} is missing; "
                                           "run `train-prior` first")
        return MotionPrior.load(self.prior_path, body_model=self.model)

    def adapter(self, modality, prior):
        path = self.reuse_path(modality)
        if not path.exists():
            raise MissingPrerequisiteError(f"adapter checkpoint {path} is missing; "
                                           f"run `train-reuse` with modality {modality}")
        try:
            return MotionEstimator.load(path, prior)
        except LoadError as exc:
            if "trained against prior" in str(exc):
                raise ConfigError(str(exc)) from exc
            raise

    # -- estimator factories ---------------------------------------------

    def make_prior(self, **overrides):
        c = self.config
        params = dataclasses.asdict(c.prior)
        params.update(overrides)
        return MotionPrior(body_model=self.model, window=c.data.window, seed=c.seed, **params)

    def make_adapter(self, prior, modality, **overrides):
        params = dataclasses.asdict(self.config.reuse)
        params["pointnet_hidden"] = tuple(params["pointnet_hidden"])
        params.update(overrides)
        return MotionEstimator(prior, modality=modality, seed=self.config.seed, **params)


def clip_seed(seed, clip_id):
    return int(hashlib.sha256(f"{seed}:{clip_id}".encode()).hexdigest()[:8], 16)


def _file_id(clip_id):
    return clip_id.replace("/", "__")


# -- commands --------------------------------------------------------------

def gen_data(ctx, modalities=None):
    c = ctx.config
    modalities = modalities or [c.modality]
    src = Path(c.data.source_dir) if c.data.source_dir else ctx.root / "source"
    if not c.data.source_dir and not any(src.glob("*/*.npz")):
        write_source_corpus(src, c.data.synth_per_subset, tuple(c.data.synth_subsets), c.seed)
    manifests = ingest_motion_corpus(src, ctx.windows_dir, c.data.fps, c.data.window,
                                     c.data.holdout_subset, c.data.stride,
                                     c.data.max_seconds, c.data.min_seconds)
    sensor_cfg = sensim.SensorConfig(**dataclasses.asdict(c.sensors))
    summary = {}
    for split, manifest in manifests.items():
        if not manifest.items:
            continue
        seqs = ctx.windows(split)
        for modality in modalities:
            out = ctx.clips_dir(split, modality)
            out.mkdir(parents=True, exist_ok=True)
            lines = []
            for seq in seqs:
                seed = clip_seed(c.seed, seq.source_id)
                clip = sensim.generate_clip(seq, modality, ctx.model, sensor_cfg, seed, seq.source_id)
                fname = _file_id(seq.source_id) + ".npz"
                clip.save(out / fname, header=ctx.header())
                lines.append(json.dumps({
                    "clip_id": clip.clip_id, "modality": modality, "seed": seed,
                    "camera": clip.camera.to_dict() if clip.camera else None,
                    "source_id": seq.source_id, "n_frames": len(clip), "file": fname,
                    "invalid_frames": int(clip.flags.sum())}, sort_keys=True))
            (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
            summary[f"{split}/{modality}"] = len(lines)
    ctx.write_json("gen_data.json", {"clips": summary,
                                     "windows": {k: m.counts for k, m in manifests.items()}})
    return summary


def train_prior(ctx, fraction=None):
    seqs = ctx.windows("train", fraction or ctx.config.data.fraction)
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    log = ctx.run_dir / "prior_log.jsonl"
    log.unlink(missing_ok=True)
    est = ctx.make_prior(checkpoint_path=str(ctx.prior_path), log_path=str(log))
    est.fit(seqs)
    ctx.write_json("train_prior.json", {"n_sequences": len(seqs), "steps": est.n_steps_,
                                        "final": est.history_[-1], "param_hash": est.param_hash()})
    return est


def train_reuse(ctx, modality=None, fraction=None):
    modality = modality or ctx.config.modality
    prior = ctx.prior()
    clips = ctx.clips("train", modality, fraction or ctx.config.data.fraction)
    log = ctx.run_dir / f"reuse_{modality}_log.jsonl"
    log.unlink(missing_ok=True)
    est = ctx.make_adapter(prior, modality, checkpoint_path=str(ctx.reuse_path(modality)),
                           log_path=str(log))
    est.fit(clips)
    ctx.write_json(f"train_reuse_{modality}.json", {"n_clips": len(clips), "steps": est.n_steps_,
                                                    "final": est.history_[-1],
                                                    "prior_hash": est.prior_hash_})
    return est


def _predict_report(ctx, est, clips, modality):
    use_gt = modality == "imu" and ctx.config.eval.imu_ground_truth_shape
    preds = est.predict(clips, beta="source" if use_gt else None)
    metrics = IMU_METRICS if modality == "imu" else POINT_METRICS
    return evalm.evaluate([c.source for c in clips], preds, ctx.model, metrics,
                          ids=[c.clip_id for c in clips],
                          metadata={"modality": modality, "prior_hash": est.prior_hash_,
                                    "ground_truth_shape": use_gt}), preds


def evaluate(ctx, modality=None, split="test"):
    modality = modality or ctx.config.modality
    prior = ctx.prior()
    est = ctx.adapter(modality, prior)
    clips = ctx.clips(split, modality)
    report, _ = _predict_report(ctx, est, clips, modality)
    report.metadata.update(split=split, checkpoint=str(ctx.reuse_path(modality)))
    ctx.write_json(f"eval_{modality}_{split}.json", report.to_dict())
    ctx.write_text(f"eval_{modality}_{split}.txt", report.to_table())
    return report


def _masked_joint_error(model, gt, pred, masked):
    a = body.sequence_joints(model, gt)[0][masked]
    b = body.sequence_joints(model, pred)[0][masked]
    return float(np.linalg.norm(a - b, axis=-1).mean() * 100)


def inbetween(ctx, split="test", keyframes=None):
    prior = ctx.prior()
    seqs = ctx.windows(split)
    T = ctx.config.data.window
    frames = sorted({k % T for k in (keyframes or ctx.config.eval.inbetween_keyframes)})
    masked = np.ones(T, dtype=bool)
    masked[frames] = False
    if not masked.any():
        raise ConfigError("every frame is a keyframe; nothing to inbetween")
    report = evalm.MetricReport(metadata={"split": split, "keyframes": frames,
                                          "prior_hash": prior.param_hash()})
    for seq in seqs:
        kf = {t: seq.frame(t) for t in frames}
        ours = prior.inbetween(kf, T, beta=seq.beta, fps=seq.fps)
        base = slerp_baseline(kf, T, seq.fps)
        report.add(seq.source_id, "inbetween_joint_error", _masked_joint_error(ctx.model, seq, ours, masked), "cm")
        report.add(seq.source_id, "slerp_joint_error", _masked_joint_error(ctx.model, seq, base, masked), "cm")
    ctx.write_json(f"inbetween_{split}.json", report.to_dict())
    ctx.write_text(f"inbetween_{split}.txt", report.to_table())
    return report


def ablate_translation(ctx, reprs=("delta_144", "delta_3", "abs_144", "abs_3"), n_epochs=None):
    train = ctx.windows("train")
    test = ctx.windows("test")
    report = evalm.MetricReport(metadata={"n_train": len(train), "n_test": len(test)})
    for repr in reprs:
        overrides = {"translation_repr": repr}
        if n_epochs:
            overrides["n_epochs"] = n_epochs
        est = ctx.make_prior(**overrides).fit(train)
        preds = [est.reconstruct(s) for s in test]
        sub = evalm.evaluate(test, preds, ctx.model, ("pose_error", "joint_error", "mesh_error"))
        for metric, value in sub.aggregate().items():
            report.add(repr, metric, value)
    ctx.write_json("ablate_translation.json", report.to_dict())
    ctx.write_text("ablate_translation.txt", report.to_table())
    return report


def write_obj(path, vertices, faces, header=None):
    lines = [f"# {header}"] if header else []
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def export(ctx, modality=None, split="test", clip_id=None):
    """Per-frame OBJ meshes of estimate and ground truth, per-vertex errors and a metric table."""
    modality = modality or ctx.config.modality
    prior = ctx.prior()
    clips = ctx.clips(split, modality)
    if clip_id is not None:
        clips = [c for c in clips if c.clip_id == clip_id]
        if not clips:
            raise ConfigError(f"no {split} clip named {clip_id!r}")
    clip = clips[0]
    try:
        est = ctx.adapter(modality, prior)
        pred = est.predict([clip], beta="source" if modality == "imu" else None)[0]
    except MissingPrerequisiteError:
        pred = prior.reconstruct(clip.source)
    out = ctx.run_dir / "export" / _file_id(clip.clip_id)
    out.mkdir(parents=True, exist_ok=True)
    v_pred = body.sequence_vertices(ctx.model, pred)
    v_gt = body.sequence_vertices(ctx.model, clip.source)
    header = json.dumps(ctx.header(clip=clip.clip_id), sort_keys=True)
    n = min(len(v_pred), ctx.config.eval.export_frames)
    for t in range(n):
        write_obj(out / f"pred_{t:03d}.obj", v_pred[t], ctx.model.faces, header)
        write_obj(out / f"gt_{t:03d}.obj", v_gt[t], ctx.model.faces, header)
    np.save(out / "vertex_error_cm.npy", np.linalg.norm(v_pred - v_gt, axis=-1) * 100)
    report = evalm.evaluate([clip.source], [pred], ctx.model, POINT_METRICS, ids=[clip.clip_id])
    (out / "metrics.txt").write_text(f"# provenance: {header}\n{report.to_table()}\n")
    return out


def data_efficiency(ctx, modality=None, fractions=FRACTIONS, tolerance=0.10):
    """Train adapters on nested fractions of the training clips and compare test pose error."""
    modality = modality or ctx.config.modality
    prior = ctx.prior()
    test = ctx.clips("test", modality)
    report = evalm.MetricReport(metadata={"modality": modality, "tolerance": tolerance})
    errors = []
    for f in sorted(fractions):
        train = ctx.clips("train", modality, f)
        est = ctx.make_adapter(prior, modality).fit(train)
        sub, _ = _predict_report(ctx, est, test, modality)
        err = sub.aggregate()["pose_error" if modality != "imu" else "angular_error"]
        errors.append(err)
        key = f"fraction_{f:.4f}"
        report.add(key, "error", err, "deg")
        report.add(key, "n_train", len(train), "count")
    report.metadata["monotone"] = monotone_within(errors, tolerance)
    ctx.write_json(f"data_efficiency_{modality}.json", report.to_dict())
    ctx.write_text(f"data_efficiency_{modality}.txt", report.to_table())
    return report, errors


def monotone_within(errors, tolerance=0.10, allowed_inversions=1):
    """True if errors (ordered by growing data) never rise, up to one rise within ``tolerance``."""
    inversions = 0
    for prev, cur in zip(errors[:-1], errors[1:]):
        if cur > prev:
            if cur > prev * (1 + tolerance):
                return False
            inversions += 1
    return inversions <= allowed_inversions
