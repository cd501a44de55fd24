"""Conditional noise-prediction network with exact reverse-mode gradients.

Desk-scale architecture: the state vector is viewed as a small token grid
(n_tokens x width).  The input projection consumes the noisy state
concatenated with the masked-background channel; a sinusoidal timestep
embedding is added to every token.  Each hidden block applies a linear map
and a smooth sigmoid-weighted nonlinearity, then lets the tokens
cross-attend (single head) over the adapted condition tokens: up to three
identity embeddings and one expression embedding, each mapped to the
attention width by its own two-layer adapter MLP.  The output projection
is zero-initialized so the network starts at eps_hat = 0.

``forward`` runs on plain arrays or autodiff ``Var`` tensors (training
lifts the parameters to ``Var`` and differentiates through everything,
including estimator graphs that call the network twice).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var, raw
from .numerics import Rng
from .world import (FactorSample, OracleEncoders, encode_exp, id_embeddings,
                    mask_background)

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "ConditionBundle",
    "build_condition",
    "init_params",
    "forward",
    "backward",
    "make_denoiser",
]


@dataclass(frozen=True)
class DenoiserConfig:
    data_dim: int
    cond_dims: tuple = (4, 5, 6, 2)   # three identity embeddings + expression
    n_tokens: int = 8
    width: int = 16
    n_blocks: int = 2
    adapter_hidden: int = 16

    def __post_init__(self):
        if self.width % 2 != 0:
            raise ValueError("width must be even (sinusoidal embedding)")
        if len(self.cond_dims) != 4:
            raise ValueError("cond_dims lists three identity dims plus one expression dim")


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: Dict[str, np.ndarray]


@dataclass
class ConditionBundle:
    """Conditions: masked background channel, identity embeddings, expression.

    ``masked_bkg`` normally has the face region filled with zeros; the
    background-ablation training variant deliberately substitutes the raw
    binary mask for this channel instead.
    """

    masked_bkg: np.ndarray
    id_embeds: List[np.ndarray]
    exp_embed: np.ndarray


def build_condition(bkg: FactorSample, id_src: FactorSample, exp_src: FactorSample,
                    enc: OracleEncoders, num_id_embeds: int = 3) -> ConditionBundle:
    """Assemble conditions from three (possibly identical) source samples.

    Passing the same sample three times is the reconstruction setting
    (matched conditions); distinct sources give the swap setting.
    """
    return ConditionBundle(
        masked_bkg=mask_background(bkg.x0, bkg.mask),
        id_embeds=[np.asarray(e) for e in id_embeddings(enc, id_src.x0, num_id_embeds)],
        exp_embed=np.asarray(encode_exp(enc, exp_src.x0)),
    )


# Construction order of parameter tensors; also the initialization order.
def _param_shapes(cfg: DenoiserConfig) -> list[tuple[str, tuple]]:
    hid = cfg.n_tokens * cfg.width
    shapes = [("w_in", (2 * cfg.data_dim, hid)), ("b_in", (hid,))]
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        shapes += [(p + "w_lin", (cfg.width, cfg.width)), (p + "b_lin", (cfg.width,)),
                   (p + "w_q", (cfg.width, cfg.width)), (p + "w_k", (cfg.width, cfg.width)),
                   (p + "w_v", (cfg.width, cfg.width)), (p + "w_o", (cfg.width, cfg.width))]
    for j, d in enumerate(cfg.cond_dims):
        p = f"adapter{j}."
        shapes += [(p + "w1", (d, cfg.adapter_hidden)), (p + "b1", (cfg.adapter_hidden,)),
                   (p + "w2", (cfg.adapter_hidden, cfg.width)), (p + "b2", (cfg.width,))]
    shapes += [("w_out", (hid, cfg.data_dim)), ("b_out", (cfg.data_dim,))]
    return shapes


def init_params(cfg: DenoiserConfig, rng: Rng, zero_output: bool = True) -> DenoiserParams:
    """Small uniform init scaled by fan-in; output projection zeroed by default."""
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg):
        if name.startswith("b_") or ".b" in name:
            tensors[name] = np.zeros(shape)
        elif name == "w_out" and zero_output:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, shape)
    return DenoiserParams(config=cfg, tensors=tensors)


@lru_cache(maxsize=4096)
def _time_embedding_cached(t: int, width: int) -> np.ndarray:
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)])
    out.setflags(write=False)
    return out


def time_embedding(t: int, width: int) -> np.ndarray:
    """Sinusoidal timestep features: sin/cos at geometrically spaced rates."""
    return _time_embedding_cached(int(t), int(width))


def _adapter(tensors: Mapping, j: int, raw_embed):
    p = f"adapter{j}."
    h = ad.silu(ad.affine(raw_embed, tensors[p + "w1"], tensors[p + "b1"]))
    return ad.affine(h, tensors[p + "w2"], tensors[p + "b2"])


def _forward(cfg: DenoiserConfig, tensors: Mapping, zt, t: int,
             cond: ConditionBundle, attn_sink: Optional[list] = None):
    if raw(zt).shape != (cfg.data_dim,):
        raise ValueError(f"state shape {raw(zt).shape} != ({cfg.data_dim},)")
    bkg = np.asarray(cond.masked_bkg, dtype=np.float64)
    if bkg.shape != (cfg.data_dim,):
        raise ValueError(f"masked_bkg shape {bkg.shape} != ({cfg.data_dim},)")

    u = ad.concat([zt, bkg])
    h = ad.affine(u, tensors["w_in"], tensors["b_in"]).reshape(cfg.n_tokens, cfg.width)
    h = h + time_embedding(t, cfg.width)

    toks = []
    for j, e in enumerate(cond.id_embeds):
        toks.append(_adapter(tensors, j, np.asarray(e, dtype=np.float64)))
    toks.append(_adapter(tensors, 3, np.asarray(cond.exp_embed, dtype=np.float64)))
    cond_mat = ad.stack_rows(toks)

    scale = 1.0 / np.sqrt(cfg.width)
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        a = ad.silu(ad.affine(h, tensors[p + "w_lin"], tensors[p + "b_lin"]))
        q = a @ tensors[p + "w_q"]
        k = cond_mat @ tensors[p + "w_k"]
        v = cond_mat @ tensors[p + "w_v"]
        attn = ad.softmax((q @ k.T) * scale, axis=-1)
        if attn_sink is not None:
            attn_sink.append(np.array(raw(attn)))
        h = h + (attn @ v) @ tensors[p + "w_o"]

    return ad.affine(h.reshape(cfg.n_tokens * cfg.width), tensors["w_out"],
                     tensors["b_out"])


def forward(p: DenoiserParams, zt, t: int, cond: ConditionBundle,
            attn_sink: Optional[list] = None):
    """Predicted noise for state zt at timestep t under the given conditions.

    Deterministic in its inputs; output shape equals the state shape.
    ``attn_sink``, when given, collects one attention matrix per block.
    """
    return _forward(p.config, p.tensors, zt, t, cond, attn_sink=attn_sink)


def backward(p: DenoiserParams, zt, t: int, cond: ConditionBundle,
             upstream: np.ndarray):
    """Exact reverse-mode gradients of all parameters and of zt.

    Returns (grads_by_name, grad_zt) for the scalar sum(upstream * eps_hat).
    """
    pvars = {name: Var(arr) for name, arr in p.tensors.items()}
    zvar = Var(zt)
    out = _forward(p.config, pvars, zvar, t, cond)
    ad.backward(out, seed=upstream)
    grads = {name: (v.grad if v.grad is not None else np.zeros_like(v.data))
             for name, v in pvars.items()}
    return grads, np.array(zvar.grad)


def make_denoiser(p: DenoiserParams, cond_override: Optional[ConditionBundle] = None):
    """Plain-array denoiser callable (z, t, cond) -> eps_hat."""
    def den(z, t, cond=None):
        use = cond if cond is not None else cond_override
        if use is None:
            raise ValueError("denoiser needs a condition bundle")
        return forward(p, z, t, use)
    return den
