"""Evaluation metrics and the report that aggregates them.

Angles are reported in degrees, distances in centimetres and jitter in
km/s^3. Global-frame metrics go through forward kinematics of the shared
body model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import body, rotconv
from .exceptions import InvalidArgumentError
from .validation import check_same_length

METRIC_UNITS = {
    "pose_error": "deg",
    "joint_error": "cm",
    "mesh_error": "cm",
    "chamfer": "cm",
    "sip_error": "deg",
    "angular_error": "deg",
    "positional_error": "cm",
    "jitter": "km/s^3",
}

SIP_JOINTS = ("left_shoulder", "right_shoulder", "left_hip", "right_hip")


def _rotmats(seq):
    return rotconv.aa_to_matrix(np.asarray(seq.theta, dtype=np.float64))


def _global_rotmats(model, seq):
    return body.sequence_joints(model, seq)[1]


def _angle_deg(Ra, Rb):
    return np.degrees(rotconv.geodesic_angle(Ra, Rb))


def pose_error(gt, pred):
    """Mean geodesic angle between local joint rotations, degrees."""
    check_same_length(gt, pred)
    return float(_angle_deg(_rotmats(gt), _rotmats(pred)).mean())


def joint_error(gt, pred, model):
    """Mean joint distance without alignment, cm."""
    check_same_length(gt, pred)
    a, b = body.sequence_joints(model, gt)[0], body.sequence_joints(model, pred)[0]
    return float(np.linalg.norm(a - b, axis=-1).mean() * 100)


def mesh_error(gt, pred, model):
    """Mean vertex distance without alignment, cm."""
    check_same_length(gt, pred)
    a, b = body.sequence_vertices(model, gt), body.sequence_vertices(model, pred)
    return float(np.linalg.norm(a - b, axis=-1).mean() * 100)


def _points(x):
    pts = np.asarray(getattr(x, "points", x), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgumentError(f"point set must be (P, 3), got {pts.shape}")
    if len(pts) == 0:
        raise InvalidArgumentError("Chamfer distance of an empty point set is undefined")
    return pts


def chamfer(a, b):
    """Symmetric Chamfer distance (unsquared nearest-neighbour distances, averaged both ways), cm."""
    a, b = _points(a), _points(b)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()) * 100)


def sequence_chamfer(gt, pred, model):
    """Per-frame Chamfer distance between the two posed meshes' vertices, averaged, cm."""
    check_same_length(gt, pred)
    va, vb = body.sequence_vertices(model, gt), body.sequence_vertices(model, pred)
    return float(np.mean([chamfer(x, y) for x, y in zip(va, vb)]))


def _joint_indices(model, names):
    lookup = {n: i for i, n in enumerate(model.joint_names)}
    missing = [n for n in names if n not in lookup]
    if missing:
        raise InvalidArgumentError(f"body model has no joints named {missing}")
    return [lookup[n] for n in names]


def sip_error(gt, pred, model):
    """Mean global orientation error of the upper arms and upper legs, degrees."""
    check_same_length(gt, pred)
    idx = _joint_indices(model, SIP_JOINTS)
    a, b = _global_rotmats(model, gt)[:, idx], _global_rotmats(model, pred)[:, idx]
    return float(_angle_deg(a, b).mean())


def angular_error(gt, pred, model):
    """Mean global orientation error over all joints, degrees."""
    check_same_length(gt, pred)
    return float(_angle_deg(_global_rotmats(model, gt), _global_rotmats(model, pred)).mean())


def positional_error(gt, pred, model):
    """Mean joint distance after aligning the root joints frame by frame, cm.

    Joints are posed without the global translation, so a pure root
    translation error contributes exactly zero.
    """
    check_same_length(gt, pred)
    a, b = (body.sequence_joints(model, _untranslated(s))[0] for s in (gt, pred))
    a = a - a[:, :1]
    b = b - b[:, :1]
    return float(np.linalg.norm(a - b, axis=-1).mean() * 100)


def _untranslated(seq):
    return body.MotionSequence(seq.theta, np.zeros_like(seq.transl), seq.beta, seq.fps, seq.source_id)


def jerk(positions, fps):
    """Third time derivative by central differences, (T-4, ..., 3), for frames 2..T-3."""
    p = np.asarray(positions, dtype=np.float64)
    if p.shape[0] < 5:
        raise InvalidArgumentError("jerk needs at least five frames")
    return (p[4:] - 2 * p[3:-1] + 2 * p[1:-3] - p[:-4]) * (0.5 * fps ** 3)


def jitter_positions(positions, fps):
    """Mean jerk magnitude of a position trajectory, km/s^3."""
    return float(np.linalg.norm(jerk(positions, fps), axis=-1).mean() / 1000)


def jitter(seq, model):
    """Mean jerk magnitude over joints and interior frames, km/s^3.

    The two frames at each end have no central stencil and are excluded.
    """
    if len(seq) < 5:
        raise InvalidArgumentError("jitter needs at least five frames")
    return jitter_positions(body.sequence_joints(model, seq)[0], seq.fps)


PAIRWISE = {
    "pose_error": lambda g, p, m: pose_error(g, p),
    "joint_error": joint_error,
    "mesh_error": mesh_error,
    "chamfer": sequence_chamfer,
    "sip_error": sip_error,
    "angular_error": angular_error,
    "positional_error": positional_error,
    "jitter": lambda g, p, m: jitter(p, m),
}


@dataclass
class MetricReport:
    """Per-sequence metric values with fixed units, plus aggregate means."""

    records: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, seq_id, metric, value, unit=None):
        unit = unit or METRIC_UNITS.get(metric)
        if unit is None:
            raise InvalidArgumentError(f"metric {metric!r} has no registered unit")
        known = self.units.setdefault(metric, unit)
        if known != unit:
            raise InvalidArgumentError(f"metric {metric!r} is reported in {known}, refusing {unit}")
        self.records.setdefault(str(seq_id), {})[metric] = float(value)

    def merge(self, other):
        for sid, row in other.records.items():
            for metric, value in row.items():
                self.add(sid, metric, value, other.units[metric])
        self.metadata.update(other.metadata)
        return self

    def aggregate(self):
        out = {}
        for metric in self.units:
            vals = [r[metric] for r in self.records.values() if metric in r]
            out[metric] = float(np.mean(vals))
        return out

    def to_dict(self):
        return {"metadata": self.metadata, "units": self.units, "aggregate": self.aggregate(),
                "sequences": self.records}

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["sequences"]), dict(d["units"]), dict(d.get("metadata", {})))

    def to_table(self, metrics=None):
        """Fixed-width text table: one row per sequence and a closing mean row."""
        metrics = list(metrics or self.units)
        head = ["sequence"] + [f"{m} [{self.units[m]}]" for m in metrics]
        rows = [[sid] + [_fmt(r.get(m)) for m in metrics] for sid, r in sorted(self.records.items())]
        agg = self.aggregate()
        rows.append(["mean"] + [_fmt(agg.get(m)) for m in metrics])
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
        return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in rows])


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def evaluate(gts, preds, model, metrics=("pose_error", "joint_error", "mesh_error"),
             ids=None, metadata=None):
    """Score paired sequences and collect the values in a :class:`MetricReport`."""
    gts, preds = list(gts), list(preds)
    if len(gts) != len(preds):
        raise InvalidArgumentError(f"{len(gts)} ground-truth vs {len(preds)} predicted sequences")
    unknown = [m for m in metrics if m not in PAIRWISE]
    if unknown:
        raise InvalidArgumentError(f"unknown metrics {unknown}")
    ids = ids or [g.source_id or f"seq{i:04d}" for i, g in enumerate(gts)]
    report = MetricReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("chamfer_variant", "unsquared, mean of both directions")
    for sid, g, p in zip(ids, gts, preds):
        for m in metrics:
            report.add(sid, m, PAIRWISE[m](g, p, model))
    return report
