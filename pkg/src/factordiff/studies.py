"""Trained-model studies: sampling-method comparison and ablations.

Every study trains its variants from the same seed with identical budgets,
evaluates them with a fixed protocol, and assembles a keyed report whose
CSV serialization is byte-stable across reruns.

Evaluation protocol per variant:

* swap task (mismatched conditions): background, identity, and expression
  come from three independently drawn samples; identity retrieval,
  expression error, and the pose analog are measured on the generations.
* reconstruction task (matched conditions): one sample supplies all three
  conditions; mean squared error is measured against its clean vector.

The sampling study additionally probes reconstruction error of the
variant's clean-state estimator on a frozen (sample, t, eps) set at every
checkpoint, giving per-variant training curves.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .configio import config_hash
from .denoiser import build_condition, make_denoiser
from .metrics import (MetricsReport, metric_exp_error, metric_id_retrieval,
                      metric_mse, metric_pose_error)
from .numerics import Rng
from .samplers import SamplerConfig, estimate_x0, generate
from .schedule import q_sample
from .training import (NumericFailure, TrainConfig, TrainState, init_training,
                       train_step, training_condition)
from .world import WorldSpec, build_world, derive_encoders, sample_world

__all__ = [
    "StudyReport",
    "evaluate_model",
    "recon_probe",
    "make_probe",
    "run_sampling_study",
    "run_ablation_study",
    "SAMPLING_VARIANTS",
    "ABLATION_VARIANTS",
]

# Child-stream keys under the master seed for evaluation draws.
_KEY_EVAL = 3
_SUB_SWAP = 0
_SUB_RECON = 1
_SUB_PROBE = 2

SAMPLING_VARIANTS = (
    ("no_id_exp_losses", {"estimator": "none", "use_id_exp_losses": False}),
    ("one_step", {"estimator": "one_step"}),
    ("midpoint", {"estimator": "midpoint"}),
    ("improved_midpoint", {"estimator": "improved_midpoint"}),
)

ABLATION_VARIANTS = (
    ("full", {}),
    ("no_bkg_condition", {"use_bkg_condition": False}),
    ("id_embeds_2", {"num_id_embeds": 2}),
    ("id_embeds_1", {"num_id_embeds": 1}),
)

_FAILED = MetricsReport(id_retrieval=float("nan"), exp_error=float("nan"),
                        pose_error=float("nan"), mse=float("nan"))


def _round9(x: float) -> float:
    return float(f"{x:.9g}")


@dataclass
class StudyReport:
    """Per-variant metric rows plus study metadata; keyed, order-preserving."""

    seed: int
    steps: int
    config_hash: str
    rows: Dict[str, MetricsReport] = field(default_factory=dict)
    curves: Dict[str, List[Tuple[int, float]]] = field(default_factory=dict, compare=False)

    def add_row(self, label: str, m: MetricsReport) -> None:
        if label in self.rows:
            raise ValueError(f"duplicate variant {label!r}")
        self.rows[label] = MetricsReport(
            id_retrieval=_round9(m.id_retrieval), exp_error=_round9(m.exp_error),
            pose_error=_round9(m.pose_error), mse=_round9(m.mse))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "id_retrieval", "exp_error", "pose_analog",
                    "mse", "seed", "steps"])
        for label, m in self.rows.items():
            w.writerow([label, f"{m.id_retrieval:.9g}", f"{m.exp_error:.9g}",
                        f"{m.pose_error:.9g}", f"{m.mse:.9g}",
                        self.seed, self.steps])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "StudyReport":
        lines = text.splitlines()
        chash = ""
        if lines and lines[0].startswith("# config_hash="):
            chash = lines[0].split("=", 1)[1]
            lines = lines[1:]
        rows = list(csv.reader(io.StringIO("\n".join(lines))))
        header, body = rows[0], rows[1:]
        expected = ["variant", "id_retrieval", "exp_error", "pose_analog",
                    "mse", "seed", "steps"]
        if header != expected:
            raise ValueError(f"unexpected study CSV header {header}")
        if not body:
            raise ValueError("study CSV has no rows")
        report = cls(seed=int(body[0][5]), steps=int(body[0][6]), config_hash=chash)
        for row in body:
            report.rows[row[0]] = MetricsReport(
                id_retrieval=float(row[1]), exp_error=float(row[2]),
                pose_error=float(row[3]), mse=float(row[4]))
        return report

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "step", "recon_mse"])
        for label, pts in self.curves.items():
            for step, v in pts:
                w.writerow([label, step, f"{v:.9g}"])
        return buf.getvalue()


def evaluate_model(state: TrainState, n_eval: int = 512,
                   inference_steps: int = 20) -> MetricsReport:
    """Swap-task ID/expression/pose metrics plus reconstruction MSE.

    Draws are keyed by (seed, eval-purpose, sample index) only, so the
    evaluation set is identical for every variant trained from one seed.
    """
    cfg = state.cfg
    den = make_denoiser(state.params)
    scfg = SamplerConfig(inference_steps=inference_steps)
    gens, intended, exp_refs, pose_refs = [], [], [], []
    for i in range(n_eval):
        r = Rng(cfg.seed).child(_KEY_EVAL, _SUB_SWAP, i)
        bkg_src = sample_world(state.spec, r)
        id_src = sample_world(state.spec, r)
        exp_src = sample_world(state.spec, r)
        cond = build_condition(bkg_src, id_src, exp_src, state.enc,
                               num_id_embeds=cfg.num_id_embeds)
        gens.append(generate(state.schedule, den, cond, scfg, r))
        intended.append(id_src.id_class)
        exp_refs.append(exp_src.x0)
        pose_refs.append(bkg_src.pose_factor)
    gens = np.stack(gens)
    recon_gens, recon_refs = [], []
    for i in range(n_eval):
        r = Rng(cfg.seed).child(_KEY_EVAL, _SUB_RECON, i)
        target = sample_world(state.spec, r)
        cond = build_condition(target, target, target, state.enc,
                               num_id_embeds=cfg.num_id_embeds)
        recon_gens.append(generate(state.schedule, den, cond, scfg, r))
        recon_refs.append(target.x0)
    return MetricsReport(
        id_retrieval=metric_id_retrieval(gens, intended, state.enc),
        exp_error=metric_exp_error(gens, np.stack(exp_refs), state.enc),
        pose_error=metric_pose_error(gens, np.stack(pose_refs), state.enc),
        mse=metric_mse(np.stack(recon_gens), np.stack(recon_refs)))


def make_probe(spec: WorldSpec, seed: int, size: int, T: int) -> list:
    """Frozen (sample, t, eps) triples for reconstruction-curve probing."""
    probe = []
    for i in range(size):
        r = Rng(seed).child(_KEY_EVAL, _SUB_PROBE, i)
        s = sample_world(spec, r)
        t = int(r.integers(1, T + 1))
        eps = r.normal((spec.dim,))
        probe.append((s, t, eps))
    return probe


def recon_probe(state: TrainState, probe: list, estimator: str) -> float:
    """Mean squared reconstruction error of the estimator on the frozen probe."""
    den = make_denoiser(state.params)
    total = 0.0
    for s, t, eps in probe:
        zt = q_sample(state.schedule, s.x0, t, eps)
        cond = training_condition(state, s)
        z0_hat = estimate_x0(state.schedule, den, zt, t, cond, method=estimator)
        total += float(np.mean((np.asarray(z0_hat) - s.x0) ** 2))
    return total / len(probe)


def _run_variants(spec: WorldSpec, base_cfg: TrainConfig, variants,
                  n_eval: int, inference_steps: int,
                  curve_every: int = 0, probe_size: int = 64,
                  log=print) -> StudyReport:
    enc = derive_encoders(spec)
    world_kwargs = {"face_dim": spec.face_dim, "bkg_dim": spec.bkg_dim,
                    "num_classes": spec.num_classes, "exp_dim": spec.exp_dim,
                    "pose_dim": spec.pose_dim, "bkg_free_dim": spec.bkg_free_dim,
                    "sigma_data": spec.sigma_data, "seed": spec.seed}
    chash = config_hash(world_kwargs, base_cfg,
                        SamplerConfig(inference_steps=inference_steps))
    report = StudyReport(seed=base_cfg.seed, steps=base_cfg.steps, config_hash=chash)
    probe = (make_probe(spec, base_cfg.seed, probe_size, base_cfg.T)
             if curve_every > 0 else None)
    for label, overrides in variants:
        cfg = replace(base_cfg, **overrides)
        state = init_training(cfg, spec, enc)
        curve_estimator = cfg.estimator if cfg.estimator != "none" else "one_step"
        curve: List[Tuple[int, float]] = []
        if probe is not None:
            curve.append((0, recon_probe(state, probe, curve_estimator)))
        try:
            while state.step < cfg.steps:
                train_step(state)
                if probe is not None and state.step % curve_every == 0:
                    curve.append((state.step, recon_probe(state, probe, curve_estimator)))
            metrics = evaluate_model(state, n_eval=n_eval,
                                     inference_steps=inference_steps)
        except NumericFailure as e:
            log(f"[study] variant {label} diverged: {e}")
            metrics = _FAILED
        report.add_row(label, metrics)
        if probe is not None:
            report.curves[label] = curve
        m = report.rows[label]
        log(f"[study] {label}: id={m.id_retrieval:.4f} exp={m.exp_error:.4f} "
            f"pose={m.pose_error:.4f} mse={m.mse:.5f}")
    return report


def run_sampling_study(spec: WorldSpec, base_cfg: TrainConfig,
                       n_eval: int = 512, inference_steps: int = 20,
                       curve_every: int = 25, probe_size: int = 64,
                       log=print) -> StudyReport:
    """Train the four estimator variants and compare, curves included."""
    return _run_variants(spec, base_cfg, SAMPLING_VARIANTS, n_eval,
                         inference_steps, curve_every=curve_every,
                         probe_size=probe_size, log=log)


def run_ablation_study(spec: WorldSpec, base_cfg: TrainConfig,
                       n_eval: int = 512, inference_steps: int = 20,
                       log=print) -> StudyReport:
    """Train full model vs background/compound-embedding ablations."""
    return _run_variants(spec, base_cfg, ABLATION_VARIANTS, n_eval,
                         inference_steps, log=log)
