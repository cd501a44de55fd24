"""Command-line interface.

Subcommands: gen-world, train, sample, eval, study-sampling,
study-ablation, compare-estimators.  Global flags: --config (key = value
file), --seed (overrides the config seed), --out (output directory).

Exit codes: 0 success, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .configio import ConfigError, build_configs, load_config
from .container import ContainerError, write_container
from .denoiser import build_condition, make_denoiser
from .metrics import MetricsReport
from .numerics import Rng
from .samplers import SamplerConfig, compare_estimators, generate
from .schedule import make_linear_schedule
from .studies import evaluate_model, run_ablation_study, run_sampling_study
from .training import (NumericFailure, load_checkpoint, init_training,
                       run_training, save_checkpoint, write_training_log)
from .world import (build_world, derive_encoders, export_dataset,
                    oracle_denoiser_gaussian, sample_world)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load(args):
    if args.config:
        return load_config(args.config, seed_override=args.seed)
    return build_configs({}, seed_override=args.seed)


def _outpath(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_gen_world(args) -> int:
    world_kwargs, train_cfg, _ = _load(args)
    spec = build_world(**world_kwargs)
    rng = Rng(train_cfg.seed).child(9)
    samples = [sample_world(spec, rng) for _ in range(args.count)]
    path = _outpath(args, "dataset.bin")
    export_dataset(path, samples)
    print(f"wrote {args.count} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    world_kwargs, train_cfg, _ = _load(args)
    spec = build_world(**world_kwargs)
    enc = derive_encoders(spec)
    state = init_training(train_cfg, spec, enc)
    run_training(state)
    ckpt = _outpath(args, "checkpoint.bin")
    save_checkpoint(state, ckpt)
    log_path = _outpath(args, "training_log.csv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(write_training_log(state.history))
    last = state.history[-1] if state.history else {}
    print(f"trained {state.step} steps; final total loss "
          f"{last.get('total', float('nan')):.6g}; wrote {ckpt}")
    return EXIT_OK


def cmd_sample(args) -> int:
    _, _, sampler_cfg = _load(args)
    state = load_checkpoint(args.checkpoint)
    den = make_denoiser(state.params)
    scfg = SamplerConfig(method=sampler_cfg.method,
                         intermediate_noise=sampler_cfg.intermediate_noise,
                         inference_steps=min(sampler_cfg.inference_steps, state.cfg.T))
    outs = []
    for i in range(args.count):
        r = Rng(state.cfg.seed).child(8, i)
        bkg_src = sample_world(state.spec, r)
        id_src = sample_world(state.spec, r)
        exp_src = sample_world(state.spec, r)
        cond = build_condition(bkg_src, id_src, exp_src, state.enc,
                               num_id_embeds=state.cfg.num_id_embeds)
        outs.append(generate(state.schedule, den, cond, scfg, r))
    path = _outpath(args, "samples.bin")
    write_container(path, {"samples": np.stack(outs)})
    print(f"wrote {args.count} generations to {path}")
    return EXIT_OK


def _metrics_csv(m: MetricsReport) -> str:
    return ("id_retrieval,exp_error,pose_analog,mse\n"
            f"{m.id_retrieval:.9g},{m.exp_error:.9g},{m.pose_error:.9g},{m.mse:.9g}\n")


def cmd_eval(args) -> int:
    _, _, sampler_cfg = _load(args)
    state = load_checkpoint(args.checkpoint)
    m = evaluate_model(state, n_eval=args.eval_size,
                       inference_steps=min(sampler_cfg.inference_steps, state.cfg.T))
    path = _outpath(args, "metrics.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_metrics_csv(m))
    print(f"id_retrieval={m.id_retrieval:.4f} exp_error={m.exp_error:.4f} "
          f"pose_analog={m.pose_error:.4f} mse={m.mse:.6f}")
    return EXIT_OK


def cmd_study_sampling(args) -> int:
    world_kwargs, train_cfg, sampler_cfg = _load(args)
    spec = build_world(**world_kwargs)
    report = run_sampling_study(spec, train_cfg, n_eval=args.eval_size,
                                inference_steps=min(sampler_cfg.inference_steps,
                                                    train_cfg.T),
                                curve_every=args.curve_every)
    path = _outpath(args, "study_sampling.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    curves = _outpath(args, "curves_sampling.csv")
    with open(curves, "w", encoding="utf-8") as fh:
        fh.write(report.curves_csv())
    print(f"wrote {path} and {curves}")
    return EXIT_OK


def cmd_study_ablation(args) -> int:
    world_kwargs, train_cfg, sampler_cfg = _load(args)
    spec = build_world(**world_kwargs)
    report = run_ablation_study(spec, train_cfg, n_eval=args.eval_size,
                                inference_steps=min(sampler_cfg.inference_steps,
                                                    train_cfg.T))
    path = _outpath(args, "study_ablation.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare_estimators(args) -> int:
    world_kwargs, train_cfg, _ = _load(args)
    sch = make_linear_schedule(train_cfg.T, train_cfg.beta_start, train_cfg.beta_end)
    dim = world_kwargs["face_dim"] + world_kwargs["bkg_dim"]
    sigma = args.sigma
    den = oracle_denoiser_gaussian(sch, np.zeros(dim), sigma)
    t_list = [max(1, train_cfg.T // 4), max(1, train_cfg.T // 2),
              max(1, 3 * train_cfg.T // 4)]

    def draw(rng, n):
        return sigma * rng.normal((n, dim))

    report = compare_estimators(sch, den, draw, t_list, args.n,
                                Rng(train_cfg.seed))
    path = _outpath(args, "estimator_mse.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    for method in ("one_step", "midpoint", "improved_midpoint"):
        vals = " ".join(f"t={t}:{report.mse(method, t):.5f}" for t in t_list)
        print(f"{method}: {vals}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factordiff",
                                 description="conditional diffusion on a synthetic factor world")
    ap.add_argument("--config", default=None, help="key = value config file")
    ap.add_argument("--seed", type=int, default=None, help="master seed override")
    ap.add_argument("--out", default=".", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="sample a dataset and export it")
    p.add_argument("--count", type=int, default=1024)
    p.set_defaults(fn=cmd_gen_world)

    p = sub.add_parser("train", help="train a model per the config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-size", type=int, default=512)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("study-sampling", help="compare estimator training variants")
    p.add_argument("--eval-size", type=int, default=512)
    p.add_argument("--curve-every", type=int, default=25)
    p.set_defaults(fn=cmd_study_sampling)

    p = sub.add_parser("study-ablation", help="background / embedding ablations")
    p.add_argument("--eval-size", type=int, default=512)
    p.set_defaults(fn=cmd_study_ablation)

    p = sub.add_parser("compare-estimators", help="oracle-world estimator MSE")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(fn=cmd_compare_estimators)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContainerError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        print(f"numeric failure: {e} {e.record}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
