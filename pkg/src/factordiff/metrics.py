"""Evaluation metrics for generated samples.

Identity retrieval scores a generated vector by argmax cosine similarity
against the class prototypes, averaged over the three identity read-outs
(the evaluation recognizer always uses all three, regardless of how many
the model was conditioned on).  Pose error is a factor-recovery analog
rather than a head-pose angle, hence the ``pose_analog`` label in outputs.
All metrics are permutation-invariant over the evaluation set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .world import OracleEncoders

__all__ = [
    "MetricsReport",
    "metric_id_retrieval",
    "metric_exp_error",
    "metric_pose_error",
    "metric_mse",
]


@dataclass
class MetricsReport:
    id_retrieval: float
    exp_error: float
    pose_error: float
    mse: float


def _as_matrix(xs) -> np.ndarray:
    m = np.asarray(xs, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    return m


def retrieve_ids(gen, enc: OracleEncoders) -> np.ndarray:
    """Argmax-cosine class per generated sample, compound over read-outs."""
    gen = _as_matrix(gen)
    face = gen[:, : enc.face_dim]
    w = face @ enc.readout_id.T  # (N, num_classes) class coefficients
    scores = np.zeros((gen.shape[0], enc.num_classes))
    for S, P in zip(enc.sketches, enc.protos):
        v = w @ S.T
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        scores += (v / norms) @ P.T  # P rows are unit prototypes
    return np.argmax(scores, axis=1)


def metric_id_retrieval(gen, intended_ids: Sequence[int], enc: OracleEncoders) -> float:
    """Fraction of samples whose retrieved class matches the intended one."""
    gen = _as_matrix(gen)
    intended = np.asarray(intended_ids, dtype=int)
    if gen.shape[0] == 0 or intended.shape[0] != gen.shape[0]:
        raise ValueError("need one intended class per generated sample")
    return float(np.mean(retrieve_ids(gen, enc) == intended))


def metric_exp_error(gen, exp_src, enc: OracleEncoders) -> float:
    """Mean Euclidean distance between expression embeddings of gen and source."""
    gen, src = _as_matrix(gen), _as_matrix(exp_src)
    if gen.shape != src.shape:
        raise ValueError("gen / exp_src shape mismatch")
    d = gen[:, : enc.face_dim] @ enc.readout_exp.T - src[:, : enc.face_dim] @ enc.readout_exp.T
    return float(np.mean(np.linalg.norm(d, axis=1)))


def metric_pose_error(gen, true_pose, enc: OracleEncoders) -> float:
    """Mean Euclidean error of the pose factor recovered from the face region."""
    gen = _as_matrix(gen)
    true_pose = _as_matrix(true_pose)
    rec = gen[:, : enc.face_dim] @ enc.readout_pose.T
    if rec.shape != true_pose.shape:
        raise ValueError("pose shape mismatch")
    return float(np.mean(np.linalg.norm(rec - true_pose, axis=1)))


def metric_mse(gen, ref) -> float:
    """Mean elementwise squared error against the reference vectors."""
    gen, ref = _as_matrix(gen), _as_matrix(ref)
    if gen.shape != ref.shape:
        raise ValueError("gen / ref shape mismatch")
    return float(np.mean((gen - ref) ** 2))
