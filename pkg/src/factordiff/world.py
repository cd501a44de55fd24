"""Synthetic factor world: linear generators, exact encoders, oracle denoisers.

A sample is a float64 vector x0 = [face | background].  The face region is
a class prototype plus linear expression and pose contributions; the
background mixes a free background factor with the *same* pose factor, so
pose is inferable from the background alone:

    face = A_id[:, k] + A_exp @ e + A_pose_face @ g + sigma * eta
    bkg  = A_bkg @ b  + A_pose_bkg @ g            + sigma * eta'

Because the stacked generator [A_id | A_exp | A_pose_face] has full column
rank, least-squares inversion of the face region recovers the class
coefficients, the expression factor, and the pose factor exactly on
noiseless samples.  The identity read-outs sketch the class-coefficient
space through three distinct random projections (each deliberately lossy
on its own) and unit-normalize; the expression read-out returns the
recovered expression factor directly.

Oracle denoisers return the exact conditional noise for analytically known
data distributions (a point mass, or an isotropic Gaussian), which lets the
estimators in :mod:`factordiff.samplers` be validated without any training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .container import read_container, write_container
from .numerics import Rng
from .schedule import NoiseSchedule

__all__ = [
    "WorldSpec",
    "FactorSample",
    "OracleEncoders",
    "build_world",
    "make_sample",
    "sample_world",
    "mask_background",
    "derive_encoders",
    "encode_id",
    "id_embeddings",
    "encode_exp",
    "recover_pose",
    "oracle_denoiser_pointmass",
    "oracle_denoiser_gaussian",
    "decode",
    "exp_travel",
    "export_dataset",
    "load_dataset",
]

# Child-stream keys reserved off the master seed.
_KEY_GENERATORS = 0
_KEY_SKETCHES = 1

DEFAULT_SKETCH_DIMS = (4, 5, 6)


@dataclass(frozen=True)
class WorldSpec:
    """Frozen world geometry; generator matrices are read-only arrays."""

    face_dim: int
    bkg_dim: int
    num_classes: int
    exp_dim: int
    pose_dim: int
    bkg_free_dim: int
    sigma_data: float
    seed: int
    A_id: np.ndarray          # (face_dim, num_classes) prototype table
    A_exp: np.ndarray         # (face_dim, exp_dim)
    A_pose_face: np.ndarray   # (face_dim, pose_dim)
    A_pose_bkg: np.ndarray    # (bkg_dim, pose_dim)
    A_bkg: np.ndarray         # (bkg_dim, bkg_free_dim)

    @property
    def dim(self) -> int:
        return self.face_dim + self.bkg_dim

    @property
    def mask(self) -> np.ndarray:
        """Binary face-region mask over x0 indices (1 on the face region)."""
        m = np.zeros(self.dim)
        m[: self.face_dim] = 1.0
        m.setflags(write=False)
        return m


@dataclass
class FactorSample:
    x0: np.ndarray
    id_class: int
    exp_factor: np.ndarray
    pose_factor: np.ndarray
    mask: np.ndarray


def _unit_columns(rng: Rng, rows: int, cols: int) -> np.ndarray:
    m = rng.normal((rows, cols))
    m /= np.linalg.norm(m, axis=0, keepdims=True)
    return m


def build_world(face_dim: int = 16, bkg_dim: int = 16, num_classes: int = 8,
                exp_dim: int = 2, pose_dim: int = 2, bkg_free_dim: int = 4,
                sigma_data: float = 0.05, seed: int = 0) -> WorldSpec:
    """Draw generator matrices from the master seed and verify their rank.

    Columns are unit-normalized so every factor contributes at a comparable
    scale.  Construction fails if either stacked generator loses column
    rank (never observed for the default sizes, but cheap to assert).
    """
    if face_dim < num_classes + exp_dim + pose_dim:
        raise ValueError("face_dim too small for full-column-rank generators")
    if bkg_dim < bkg_free_dim + pose_dim:
        raise ValueError("bkg_dim too small for full-column-rank generators")
    g = Rng(seed).child(_KEY_GENERATORS)
    A_id = _unit_columns(g, face_dim, num_classes)
    A_exp = _unit_columns(g, face_dim, exp_dim)
    A_pose_face = _unit_columns(g, face_dim, pose_dim)
    A_pose_bkg = _unit_columns(g, bkg_dim, pose_dim)
    A_bkg = _unit_columns(g, bkg_dim, bkg_free_dim)
    face_stack = np.hstack([A_id, A_exp, A_pose_face])
    bkg_stack = np.hstack([A_bkg, A_pose_bkg])
    if np.linalg.matrix_rank(face_stack) != face_stack.shape[1]:
        raise ValueError("face generators are column-rank deficient")
    if np.linalg.matrix_rank(bkg_stack) != bkg_stack.shape[1]:
        raise ValueError("background generators are column-rank deficient")
    for m in (A_id, A_exp, A_pose_face, A_pose_bkg, A_bkg):
        m.setflags(write=False)
    return WorldSpec(face_dim=face_dim, bkg_dim=bkg_dim, num_classes=num_classes,
                     exp_dim=exp_dim, pose_dim=pose_dim, bkg_free_dim=bkg_free_dim,
                     sigma_data=float(sigma_data), seed=int(seed),
                     A_id=A_id, A_exp=A_exp, A_pose_face=A_pose_face,
                     A_pose_bkg=A_pose_bkg, A_bkg=A_bkg)


def make_sample(spec: WorldSpec, id_class: int, exp_factor, pose_factor,
                bkg_factor, noise_rng: Optional[Rng] = None) -> FactorSample:
    """Deterministic sample from explicit factors; noise only if rng given."""
    k = int(id_class)
    if not 0 <= k < spec.num_classes:
        raise ValueError(f"id_class {k} outside 0..{spec.num_classes - 1}")
    e = np.asarray(exp_factor, dtype=np.float64).reshape(spec.exp_dim)
    gf = np.asarray(pose_factor, dtype=np.float64).reshape(spec.pose_dim)
    b = np.asarray(bkg_factor, dtype=np.float64).reshape(spec.bkg_free_dim)
    face = spec.A_id[:, k] + spec.A_exp @ e + spec.A_pose_face @ gf
    bkg = spec.A_bkg @ b + spec.A_pose_bkg @ gf
    if noise_rng is not None and spec.sigma_data > 0.0:
        face = face + spec.sigma_data * noise_rng.normal((spec.face_dim,))
        bkg = bkg + spec.sigma_data * noise_rng.normal((spec.bkg_dim,))
    return FactorSample(x0=np.concatenate([face, bkg]), id_class=k,
                        exp_factor=e, pose_factor=gf, mask=np.array(spec.mask))


def sample_world(spec: WorldSpec, rng: Rng) -> FactorSample:
    """Random sample: uniform class, standard-normal factors, data noise.

    Draw order is fixed (class, expression, pose, background, noise) so a
    given rng state always yields the same sample.
    """
    k = int(rng.integers(0, spec.num_classes))
    e = rng.normal((spec.exp_dim,))
    gf = rng.normal((spec.pose_dim,))
    b = rng.normal((spec.bkg_free_dim,))
    return make_sample(spec, k, e, gf, b, noise_rng=rng)


def mask_background(x, mask) -> np.ndarray:
    """Zero the face region (mask==1), copy background entries verbatim."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} != x shape {x.shape}")
    return x * (1.0 - mask)


@dataclass(frozen=True)
class OracleEncoders:
    """Exact read-out maps standing in for pretrained recognition networks.

    ``readout`` is the pseudo-inverse of [A_id | A_exp | A_pose_face]
    restricted to the face region; ``sketches[i]`` projects the recovered
    class coefficients into the i-th identity embedding space; ``protos[i]``
    holds the unit-normalized prototype embeddings (num_classes, dim_i).
    """

    face_dim: int
    num_classes: int
    exp_dim: int
    pose_dim: int
    readout_id: np.ndarray     # (num_classes, face_dim)
    readout_exp: np.ndarray    # (exp_dim, face_dim)
    readout_pose: np.ndarray   # (pose_dim, face_dim)
    sketches: tuple            # three (dim_i, num_classes) arrays
    protos: tuple              # three (num_classes, dim_i) arrays, unit rows


def derive_encoders(spec: WorldSpec,
                    sketch_dims: Sequence[int] = DEFAULT_SKETCH_DIMS) -> OracleEncoders:
    """Analytic encoders for a world: least-squares inversion plus sketches.

    Each of the three identity read-outs uses its own random projection of
    the class-coefficient space (dimensions below num_classes, so any
    single view is lossy); together they separate all classes.
    """
    if len(sketch_dims) != 3:
        raise ValueError("exactly three identity sketches are required")
    stack = np.hstack([spec.A_id, spec.A_exp, spec.A_pose_face])
    readout = np.linalg.pinv(stack)
    K, m = spec.num_classes, spec.exp_dim
    r_id = readout[:K]
    r_exp = readout[K:K + m]
    r_pose = readout[K + m:]
    srng = Rng(spec.seed).child(_KEY_SKETCHES)
    sketches = []
    protos = []
    for d in sketch_dims:
        S = srng.normal((int(d), K))
        P = S.T.copy()  # prototype k embeds as column k of the sketch
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        S.setflags(write=False)
        P.setflags(write=False)
        sketches.append(S)
        protos.append(P)
    for arr in (readout, r_id, r_exp, r_pose):
        arr.setflags(write=False)
    return OracleEncoders(face_dim=spec.face_dim, num_classes=K, exp_dim=m,
                          pose_dim=spec.pose_dim, readout_id=r_id,
                          readout_exp=r_exp, readout_pose=r_pose,
                          sketches=tuple(sketches), protos=tuple(protos))


def _face_region(enc: OracleEncoders, x):
    return x[: enc.face_dim]


def _normalize(v):
    n = ad.norm(v)
    if float(ad.raw(n)) < 1e-12:
        raise ValueError("zero-norm embedding")
    return v / n


def encode_id(enc: OracleEncoders, x, i: int):
    """Unit-norm identity embedding from the i-th read-out (accepts Var)."""
    w = enc.sketches[i] @ (enc.readout_id @ _face_region(enc, x))
    return _normalize(w)


def id_embeddings(enc: OracleEncoders, x, num: int = 3) -> List:
    if not 1 <= num <= 3:
        raise ValueError("num must be 1, 2 or 3")
    w = enc.readout_id @ _face_region(enc, x)  # shared across the sketches
    return [_normalize(enc.sketches[i] @ w) for i in range(num)]


def encode_exp(enc: OracleEncoders, x):
    """Expression embedding: exact on noiseless samples (accepts Var)."""
    return enc.readout_exp @ _face_region(enc, x)


def recover_pose(enc: OracleEncoders, x):
    """Pose factor recovered from the face region by least squares."""
    return enc.readout_pose @ _face_region(enc, x)


def oracle_denoiser_pointmass(s: NoiseSchedule, c) -> Callable:
    """Exact conditional noise when the data distribution is a point mass.

    eps(z, t) = (z - sqrt(abar_t) * c) / sqrt(1 - abar_t).  Feeding the
    result through the one-step inversion returns c identically.  ``c``
    may also be an (n, d) batch: row i is then the point mass for row i.
    """
    c = np.asarray(c, dtype=np.float64)

    def den(z, t, cond=None):
        t = s.check_t(t)
        ab = s.alpha_bars[t]
        return (z - np.sqrt(ab) * c) * (1.0 / np.sqrt(s.one_minus_alpha_bars[t]))

    return den


def oracle_denoiser_gaussian(s: NoiseSchedule, mu, sigma: float) -> Callable:
    """Exact conditional noise for x0 ~ N(mu, sigma^2 I).

    The posterior mean of the clean state given z_t is
        E[x0|z_t] = (sqrt(abar_t) sigma^2 z_t + (1-abar_t) mu)
                    / (abar_t sigma^2 + 1 - abar_t)
    and the returned noise is (z_t - sqrt(abar_t) E[x0|z_t]) / sqrt(1-abar_t).
    As sigma -> 0 this reduces to the point-mass oracle at mu.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.asarray(mu, dtype=np.float64)
    s2 = float(sigma) ** 2

    def den(z, t, cond=None):
        t = s.check_t(t)
        ab = s.alpha_bars[t]
        om = s.one_minus_alpha_bars[t]
        ex0 = (np.sqrt(ab) * s2 * z + om * mu) / (ab * s2 + om)
        return (z - np.sqrt(ab) * ex0) * (1.0 / np.sqrt(om))

    return den


def decode(z):
    """Latent-to-data transform; the identity map at this scale."""
    return z


def exp_travel(e0, e1, alpha: float):
    """Linear interpolation between two expression embeddings."""
    e0 = np.asarray(e0, dtype=np.float64)
    e1 = np.asarray(e1, dtype=np.float64)
    if e0.shape != e1.shape:
        raise ValueError(f"shape mismatch {e0.shape} vs {e1.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return (1.0 - alpha) * e0 + alpha * e1


def export_dataset(path, samples: Sequence[FactorSample]) -> None:
    """Write samples to the binary container (see :mod:`factordiff.container`)."""
    if not samples:
        raise ValueError("no samples to export")
    arrays = {
        "x0": np.stack([s.x0 for s in samples]),
        "id_class": np.array([float(s.id_class) for s in samples]),
        "exp_factor": np.stack([s.exp_factor for s in samples]),
        "pose_factor": np.stack([s.pose_factor for s in samples]),
        "mask": np.array(samples[0].mask),
    }
    write_container(path, arrays)


def load_dataset(path) -> List[FactorSample]:
    arrays = read_container(path)
    mask = arrays["mask"]
    out = []
    for i in range(arrays["x0"].shape[0]):
        out.append(FactorSample(x0=arrays["x0"][i],
                                id_class=int(arrays["id_class"][i]),
                                exp_factor=arrays["exp_factor"][i],
                                pose_factor=arrays["pose_factor"][i],
                                mask=np.array(mask)))
    return out
