"""Motion-corpus ingestion: resampling, splitting, windowing and manifests."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from ..body import MotionSequence
from ..exceptions import InvalidArgumentError, LoadError


def load_source(path):
    """Read one AMASS-style ``.npz`` (poses, trans, betas, mocap_framerate)."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = set(npz.files)
            if "mocap_framerate" not in files:
                raise LoadError(f"{path}: frame rate missing (mocap_framerate)")
            for key in ("poses", "trans", "betas"):
                if key not in files:
                    raise LoadError(f"{path}: field {key!r} missing")
            poses = np.asarray(npz["poses"], dtype=np.float64)
            trans = np.asarray(npz["trans"], dtype=np.float64)
            betas = np.asarray(npz["betas"], dtype=np.float64)
            fps = float(npz["mocap_framerate"])
    except LoadError:
        raise
    except Exception as exc:
        raise LoadError(f"cannot read motion file {path}: {exc}") from exc
    theta = poses.reshape(len(poses), -1, 3)[:, :24]
    return MotionSequence(theta, trans, betas[:10], fps, path.stem)


def resample(seq, fps_target):
    """Bring ``seq`` to ``fps_target``.

    Integer ratios decimate; anything else interpolates, with per-joint SLERP
    for rotations and linear interpolation for the root translation.
    """
    ratio = seq.fps / fps_target
    if ratio < 1 - 1e-9 and len(seq) > 1 or ratio <= 0:
        raise InvalidArgumentError(f"cannot resample {seq.fps} fps up to {fps_target} fps")
    step = round(ratio)
    if abs(ratio - step) < 1e-9:
        return MotionSequence(seq.theta[::step], seq.transl[::step], seq.beta, fps_target, seq.source_id)
    T = len(seq)
    src_t = np.arange(T) / seq.fps
    n_out = int(math.floor(src_t[-1] * fps_target + 1e-9)) + 1
    out_t = np.arange(n_out) / fps_target
    J = seq.n_joints
    theta = np.empty((n_out, J, 3))
    for j in range(J):
        theta[:, j] = Slerp(src_t, Rotation.from_rotvec(seq.theta[:, j]))(out_t).as_rotvec()
    transl = np.stack([np.interp(out_t, src_t, seq.transl[:, k]) for k in range(3)], -1)
    return MotionSequence(theta, transl, seq.beta, fps_target, seq.source_id)


def split_pieces(seq, max_seconds=8.0, min_seconds=4.0):
    """Cut sequences longer than ``max_seconds`` into equal pieces; drop pieces under ``min_seconds``."""
    duration = len(seq) / seq.fps
    n = math.ceil(duration / max_seconds) if duration > max_seconds else 1
    bounds = np.linspace(0, len(seq), n + 1).round().astype(int)
    pieces = []
    for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        if (b - a) / seq.fps + 1e-9 < min_seconds:
            continue
        pieces.append(seq.slice(a, b))
    return pieces


def windows(seq, T=40, stride=None):
    """Fixed-length windows inside one piece; ``stride`` defaults to ``T`` (no overlap)."""
    stride = stride or T
    return [(s, seq.slice(s, s + T)) for s in range(0, len(seq) - T + 1, stride)]


def subsample_ids(ids, fraction):
    """Deterministic nested subsample of ``ceil(fraction * n)`` ids.

    Ids are ranked by a hash of their text, so smaller fractions always
    select subsets of larger ones and no fraction yields an empty set.
    """
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("fraction must lie in (0, 1]")
    ids = list(ids)
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    keep = set(ranked[:math.ceil(fraction * len(ids))])
    return [i for i in ids if i in keep]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    split: str
    items: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [it["id"] for it in self.items]

    @property
    def counts(self):
        return {"windows": len(self.items),
                "sources": len({it["source"] for it in self.items})}

    def validate(self):
        ids = self.ids
        if len(ids) != len(set(ids)):
            raise InvalidArgumentError(f"duplicate ids in manifest {self.split!r}")
        return self

    def subsample(self, fraction):
        keep_ids = set(subsample_ids(self.ids, fraction))
        keep = [it for it in self.items if it["id"] in keep_ids]
        return DatasetManifest(self.split, keep, dict(self.provenance, fraction=fraction))

    def to_dict(self):
        d = asdict(self)
        d["counts"] = self.counts
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise LoadError(f"manifest not found: {path}")
        d = json.loads(path.read_text())
        m = cls(d["split"], d["items"], d.get("provenance", {})).validate()
        if d.get("counts", m.counts) != m.counts:
            raise LoadError(f"manifest {path} counts do not match its items")
        return m


def save_windows(path, seqs, ids):
    np.savez(path, ids=np.array(ids), theta=np.stack([s.theta for s in seqs]).astype("<f8"),
             transl=np.stack([s.transl for s in seqs]).astype("<f8"),
             beta=np.stack([s.beta for s in seqs]).astype("<f8"),
             fps=np.array([s.fps for s in seqs], dtype="<f8"))


def load_windows(path, ids=None):
    """Windows stored by :func:`save_windows`, optionally restricted to ``ids`` (in that order)."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"window file not found: {path}")
    with np.load(path) as npz:
        all_ids = [str(i) for i in npz["ids"]]
        index = {k: i for i, k in enumerate(all_ids)}
        wanted = all_ids if ids is None else list(ids)
        missing = [i for i in wanted if i not in index]
        if missing:
            raise LoadError(f"{path} lacks windows {missing[:3]}")
        sel = [index[i] for i in wanted]
        return [MotionSequence(npz["theta"][i], npz["transl"][i], npz["beta"][i], float(npz["fps"][i]),
                               all_ids[i]) for i in sel]


def ingest_motion_corpus(src_dir, out_dir, fps_target=10.0, T=40, holdout_subset=None,
                         stride=None, max_seconds=8.0, min_seconds=4.0):
    """Turn a directory of per-subset motion files into train/test windows and manifests.

    Files live in ``src_dir/<subset>/*.npz``. The subset named ``holdout_subset``
    becomes the test split; all others form the training split.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    files = sorted(src_dir.glob("*/*.npz"))
    if not files:
        raise LoadError(f"no motion files found under {src_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], [], []), "test": ([], [], [])}
    sources = {}
    stats = {"files": len(files), "dropped_short": 0, "pieces": 0}
    for path in files:
        subset = path.parent.name
        seq = resample(load_source(path), fps_target)
        sources[f"{subset}/{path.name}"] = file_sha256(path)
        pieces = split_pieces(seq, max_seconds, min_seconds)
        if not pieces:
            stats["dropped_short"] += 1
        split = "test" if subset == holdout_subset else "train"
        for p_idx, piece in enumerate(pieces):
            stats["pieces"] += 1
            for start, w in windows(piece, T, stride):
                wid = f"{subset}/{path.stem}/p{p_idx}/f{start:04d}"
                items, seqs, ids = splits[split]
                items.append({"id": wid, "source": f"{subset}/{path.name}", "subset": subset,
                              "piece": p_idx, "start": start, "n_frames": T})
                w.source_id = wid
                seqs.append(w)
                ids.append(wid)
    manifests = {}
    for split, (items, seqs, ids) in splits.items():
        m = DatasetManifest(split, items, {"fps": fps_target, "window": T, "sources": sources,
                                           "holdout_subset": holdout_subset, **stats}).validate()
        if seqs:
            save_windows(out_dir / f"{split}_windows.npz", seqs, ids)
        m.save(out_dir / f"{split}_manifest.json")
        manifests[split] = m
    return manifests
