"""Composite training objective, the training loop, and checkpointing.

Each training sample contributes a denoising term plus optional identity
and expression constraint terms:

    total = loss_dm + lambda1 * loss_id + lambda2 * loss_exp

The constraint terms need an estimate of the clean state: the configured
estimator produces z0* from the current noisy state, *reusing* the noise
prediction already computed for the denoising term as its first denoiser
call (so the midpoint estimators cost exactly one extra evaluation).
Gradients flow through the entire estimator graph, including both denoiser
evaluations and the posterior descent of the improved midpoint.

Training is deterministic: the batch and all per-sample draws for step s
come from the child stream (seed, TRAIN, s), so runs are reproducible and
resumable from any checkpoint without replaying earlier steps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .container import read_container, write_container
from .denoiser import (ConditionBundle, DenoiserConfig, DenoiserParams,
                       _forward, build_condition, init_params)
from .numerics import OptimState, Rng, adamw_step
from .samplers import estimate_x0
from .schedule import NoiseSchedule, make_linear_schedule, q_sample
from .world import (FactorSample, OracleEncoders, WorldSpec, build_world,
                    decode, derive_encoders, encode_exp, id_embeddings,
                    sample_world)

__all__ = [
    "ESTIMATORS",
    "TrainConfig",
    "TrainState",
    "NumericFailure",
    "loss_dm",
    "loss_id",
    "loss_exp",
    "total_loss",
    "lr_at",
    "init_training",
    "draw_batch",
    "train_step",
    "training_condition",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "state_arrays",
    "write_training_log",
]

ESTIMATORS = ("none", "one_step", "midpoint", "improved_midpoint")

# Reserved child-stream keys off the master seed (world uses 0 and 1).
_KEY_TRAIN = 2
_KEY_EVAL = 3
_KEY_GEN = 4


@dataclass
class TrainConfig:
    lambda1: float = 0.003
    lambda2: float = 0.01
    steps: int = 2000
    batch_size: int = 32
    estimator: str = "improved_midpoint"
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-3
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    use_bkg_condition: bool = True
    num_id_embeds: int = 3
    use_id_exp_losses: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.num_id_embeds not in (1, 2, 3):
            raise ValueError("num_id_embeds must be 1, 2 or 3")


class NumericFailure(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, record: Optional[dict] = None):
        super().__init__(message)
        self.record = record or {}


# -- losses -------------------------------------------------------------------


def loss_dm(eps, eps_hat):
    """Mean squared error between true and predicted noise."""
    if ad.raw(eps).shape != ad.raw(eps_hat).shape:
        raise ValueError("eps / eps_hat shape mismatch")
    d = eps_hat - eps
    return ad.mean_(d * d)


def loss_id(id_embeds_src: Sequence, id_embeds_gen: Sequence):
    """Mean over the embedding list of (1 - cosine similarity); range [0, 2]."""
    if len(id_embeds_src) != len(id_embeds_gen):
        raise ValueError("embedding lists differ in length")
    if not id_embeds_src:
        raise ValueError("empty embedding list")
    acc = None
    for u, v in zip(id_embeds_src, id_embeds_gen):
        nu, nv = float(np.linalg.norm(ad.raw(u))), float(np.linalg.norm(ad.raw(v)))
        if nu < 1e-12 or nv < 1e-12:
            raise ValueError("zero-norm embedding")
        cos = ad.dot(u, v) / (ad.norm(u) * ad.norm(v))
        term = 1.0 - cos
        acc = term if acc is None else acc + term
    return acc * (1.0 / len(id_embeds_src))


def loss_exp(e_src, e_gen):
    """Mean squared error between expression embeddings."""
    if ad.raw(e_src).shape != ad.raw(e_gen).shape:
        raise ValueError("expression embedding shape mismatch")
    d = e_gen - e_src
    return ad.mean_(d * d)


def total_loss(l_dm, l_id, l_exp, lambda1: float = 0.003, lambda2: float = 0.01):
    """Weighted sum l_dm + lambda1*l_id + lambda2*l_exp (evaluated left to right)."""
    for part in (l_dm, l_id, l_exp):
        if not np.all(np.isfinite(ad.raw(part))):
            raise ValueError("non-finite loss part")
    return l_dm + lambda1 * l_id + lambda2 * l_exp


# -- training state -------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    spec: WorldSpec
    enc: OracleEncoders
    schedule: NoiseSchedule
    params: DenoiserParams
    opt: OptimState
    step: int = 0
    history: List[dict] = field(default_factory=list)


def init_training(cfg: TrainConfig, spec: WorldSpec, enc: OracleEncoders,
                  n_tokens: int = 8, width: int = 16, n_blocks: int = 2) -> TrainState:
    sketch_dims = tuple(S.shape[0] for S in enc.sketches)
    dcfg = DenoiserConfig(data_dim=spec.dim,
                          cond_dims=sketch_dims + (spec.exp_dim,),
                          n_tokens=n_tokens, width=width, n_blocks=n_blocks)
    params = init_params(dcfg, Rng(cfg.seed).child(_KEY_GEN))
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.adam_beta1,
                     beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    sch = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    return TrainState(cfg=cfg, spec=spec, enc=enc, schedule=sch,
                      params=params, opt=opt)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Constant for the first half of training, then linear decay."""
    half = cfg.steps // 2
    if step < half or cfg.steps == half:
        return cfg.lr
    return cfg.lr * (cfg.steps - step) / (cfg.steps - half)


def draw_batch(state: TrainState, step: int) -> tuple[List[FactorSample], Rng]:
    """Batch and draw stream for a step; a function of (seed, step) only."""
    rng = Rng(state.cfg.seed).child(_KEY_TRAIN, step)
    batch = [sample_world(state.spec, rng) for _ in range(state.cfg.batch_size)]
    return batch, rng


def training_condition(state: TrainState, s: FactorSample) -> ConditionBundle:
    cond = build_condition(s, s, s, state.enc, num_id_embeds=state.cfg.num_id_embeds)
    if not state.cfg.use_bkg_condition:
        # ablation: mask-only channel while training; real background at inference
        cond = replace(cond, masked_bkg=np.array(s.mask))
    return cond


def train_step(state: TrainState, batch: Optional[List[FactorSample]] = None,
               rng: Optional[Rng] = None) -> dict:
    """One optimizer update over a batch; returns the loss record.

    Per sample: draw t uniformly in 1..T and eps ~ N(0, I), form z_t, run
    the denoiser once for the denoising loss, then (if configured) estimate
    z0* reusing that evaluation, decode, and score identity/expression
    against the source embeddings.  Gradients are accumulated over the
    batch in a fixed order and applied with one AdamW step.
    """
    cfg = state.cfg
    if batch is None or rng is None:
        batch, rng = draw_batch(state, state.step)
    dcfg = state.params.config
    sch = state.schedule
    sums = {"loss_dm": 0.0, "loss_id": 0.0, "loss_exp": 0.0, "total": 0.0}
    constrain = cfg.use_id_exp_losses and cfg.estimator != "none"

    # one lifted parameter set for the whole batch: a single backward pass
    # over the batch-mean loss accumulates sample gradients in fixed order
    pvars = {k: Var(v) for k, v in state.params.tensors.items()}

    def den(z, tt, c):
        return _forward(dcfg, pvars, z, tt, c)

    sample_totals = []
    for s in batch:
        t = int(rng.integers(1, cfg.T + 1))
        eps = rng.normal((state.spec.dim,))
        zt = q_sample(sch, s.x0, t, eps)
        cond = training_condition(state, s)

        eps_hat = _forward(dcfg, pvars, zt, t, cond)
        l_dm = loss_dm(eps, eps_hat)

        if constrain:
            z0_star = estimate_x0(sch, den, zt, t, cond, method=cfg.estimator,
                                  eps_hat_t=eps_hat)
            x0_star = decode(z0_star)
            src_ids = id_embeddings(state.enc, s.x0, cfg.num_id_embeds)
            gen_ids = id_embeddings(state.enc, x0_star, cfg.num_id_embeds)
            l_id = loss_id(src_ids, gen_ids)
            l_exp = loss_exp(encode_exp(state.enc, s.x0), encode_exp(state.enc, x0_star))
            total = total_loss(l_dm, l_id, l_exp, cfg.lambda1, cfg.lambda2)
        else:
            l_id = l_exp = 0.0
            total = l_dm

        tval = float(ad.raw(total))
        if not np.isfinite(tval):
            raise NumericFailure(
                f"non-finite loss at step {state.step}",
                record={"step": state.step, "t": t, "id_class": s.id_class,
                        "loss_dm": float(ad.raw(l_dm))})
        sample_totals.append(total)
        sums["loss_dm"] += float(ad.raw(l_dm))
        sums["loss_id"] += float(ad.raw(l_id))
        sums["loss_exp"] += float(ad.raw(l_exp))
        sums["total"] += tval

    n = len(batch)
    batch_total = sample_totals[0]
    for term in sample_totals[1:]:
        batch_total = batch_total + term
    batch_total = batch_total * (1.0 / n)
    ad.backward(batch_total)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
             for k, v in pvars.items()}
    state.opt.lr = lr_at(cfg, state.step)
    adamw_step(state.params.tensors, grads, state.opt)
    state.step += 1
    record = {"step": state.step, **{k: v / n for k, v in sums.items()}}
    state.history.append(record)
    return record


def run_training(state: TrainState, steps: Optional[int] = None, hook=None,
                 hook_every: int = 0) -> TrainState:
    """Run training steps; optionally call hook(state) every ``hook_every``."""
    steps = state.cfg.steps if steps is None else steps
    while state.step < steps:
        train_step(state)
        if hook is not None and hook_every > 0 and state.step % hook_every == 0:
            hook(state)
    return state


# -- checkpointing ---------------------------------------------------------------


_CFG_SCALARS = ["lambda1", "lambda2", "steps", "batch_size", "T", "beta_start",
                "beta_end", "lr", "weight_decay", "adam_beta1", "adam_beta2",
                "adam_eps", "seed", "use_bkg_condition", "num_id_embeds",
                "use_id_exp_losses"]
_CFG_KINDS = {"steps": int, "batch_size": int, "T": int, "seed": int,
              "num_id_embeds": int, "use_bkg_condition": bool,
              "use_id_exp_losses": bool}
_WORLD_SCALARS = ["face_dim", "bkg_dim", "num_classes", "exp_dim", "pose_dim",
                  "bkg_free_dim", "sigma_data", "seed"]


def state_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    """Flatten a training state into the named-array checkpoint map."""
    arrays: Dict[str, np.ndarray] = {}
    for name, arr in state.params.tensors.items():
        arrays[f"param.{name}"] = arr
    for name, arr in state.opt.m.items():
        arrays[f"opt.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        arrays[f"opt.v.{name}"] = arr
    arrays["opt.scalars"] = np.array([state.opt.lr, state.opt.weight_decay,
                                      state.opt.beta1, state.opt.beta2,
                                      state.opt.eps, float(state.opt.step)])
    arrays["schedule.betas"] = state.schedule.betas
    arrays["config.scalars"] = np.array(
        [float(getattr(state.cfg, k)) for k in _CFG_SCALARS])
    arrays["config.estimator"] = np.array([float(ESTIMATORS.index(state.cfg.estimator))])
    arrays["world.scalars"] = np.array(
        [float(getattr(state.spec, k)) for k in _WORLD_SCALARS])
    arrays["world.sketch_dims"] = np.array(
        [float(S.shape[0]) for S in state.enc.sketches])
    arrays["denoiser.shape"] = np.array([float(state.params.config.n_tokens),
                                         float(state.params.config.width),
                                         float(state.params.config.n_blocks),
                                         float(state.params.config.adapter_hidden)])
    arrays["step"] = np.array([float(state.step)])
    return arrays


def save_checkpoint(state: TrainState, path) -> None:
    write_container(path, state_arrays(state))


def load_checkpoint(path) -> TrainState:
    arrays = read_container(path)
    cfg_vals = arrays["config.scalars"]
    kwargs = {}
    for name, val in zip(_CFG_SCALARS, cfg_vals):
        kind = _CFG_KINDS.get(name, float)
        kwargs[name] = kind(int(val)) if kind in (int, bool) else float(val)
    kwargs["estimator"] = ESTIMATORS[int(arrays["config.estimator"][0])]
    cfg = TrainConfig(**kwargs)

    wv = arrays["world.scalars"]
    spec = build_world(face_dim=int(wv[0]), bkg_dim=int(wv[1]), num_classes=int(wv[2]),
                       exp_dim=int(wv[3]), pose_dim=int(wv[4]), bkg_free_dim=int(wv[5]),
                       sigma_data=float(wv[6]), seed=int(wv[7]))
    sketch_dims = tuple(int(d) for d in arrays["world.sketch_dims"])
    enc = derive_encoders(spec, sketch_dims)

    dn = arrays["denoiser.shape"]
    state = init_training(cfg, spec, enc, n_tokens=int(dn[0]), width=int(dn[1]),
                          n_blocks=int(dn[2]))
    for name in list(state.params.tensors):
        state.params.tensors[name] = np.array(arrays[f"param.{name}"])
    ov = arrays["opt.scalars"]
    state.opt = OptimState(lr=float(ov[0]), weight_decay=float(ov[1]),
                           beta1=float(ov[2]), beta2=float(ov[3]), eps=float(ov[4]),
                           step=int(ov[5]))
    for key, arr in arrays.items():
        if key.startswith("opt.m."):
            state.opt.m[key[len("opt.m."):]] = np.array(arr)
        elif key.startswith("opt.v."):
            state.opt.v[key[len("opt.v."):]] = np.array(arr)
    state.step = int(arrays["step"][0])
    return state


def write_training_log(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss_dm", "loss_id", "loss_exp", "total"])
    for rec in history:
        w.writerow([rec["step"], f"{rec['loss_dm']:.9g}", f"{rec['loss_id']:.9g}",
                    f"{rec['loss_exp']:.9g}", f"{rec['total']:.9g}"])
    return buf.getvalue()
