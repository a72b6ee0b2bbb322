"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .body import MotionSequence
from .exceptions import InvalidArgumentError


def check_sequences(X, n_joints=None, n_betas=None, length=None, min_length=1):
    """Validate a collection of :class:`MotionSequence` and return it as a list."""
    if isinstance(X, MotionSequence):
        X = [X]
    seqs = list(X)
    if not seqs:
        raise InvalidArgumentError("empty dataset: at least one sequence is required")
    for i, s in enumerate(seqs):
        if not isinstance(s, MotionSequence):
            raise InvalidArgumentError(f"item {i} is {type(s).__name__}, expected MotionSequence")
        if n_joints is not None and s.n_joints != n_joints:
            raise InvalidArgumentError(f"sequence {i} has {s.n_joints} joints, expected {n_joints}")
        if n_betas is not None and s.beta.shape[0] != n_betas:
            raise InvalidArgumentError(f"sequence {i} has {s.beta.shape[0]} shape coefficients, "
                                       f"expected {n_betas}")
        if length is not None and len(s) != length:
            raise InvalidArgumentError(f"sequence {i} has {len(s)} frames, expected {length}")
        if len(s) < min_length:
            raise InvalidArgumentError(f"sequence {i} is shorter than {min_length} frames")
        if not (np.isfinite(s.theta).all() and np.isfinite(s.transl).all() and np.isfinite(s.beta).all()):
            raise InvalidArgumentError(f"sequence {i} contains non-finite values")
    return seqs


def check_same_length(a, b):
    if len(a) != len(b):
        raise InvalidArgumentError(f"sequence lengths differ: {len(a)} vs {len(b)}")
    if a.n_joints != b.n_joints:
        raise InvalidArgumentError(f"joint counts differ: {a.n_joints} vs {b.n_joints}")
