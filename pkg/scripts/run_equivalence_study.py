#!/usr/bin/env python3
"""Centralized and federated trajectory-equivalence study.

Trains the constant-scale multi-branch model and its fused counterpart
side by side and reports the worst output divergence, then repeats the
comparison across federated rounds, plus an all-ones-multiplier ablation
showing the gradient multipliers are load-bearing.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedrepopt import data, federated, hs, reparam
from fedrepopt.models import build_model, ghost_micro, vgg_micro
from fedrepopt.optim import OptimConfig


def randomize_scales(model, seed):
    rng = np.random.default_rng(seed)
    for _, block in model.blocks:
        for name, layer in block.sublayers():
            if name in ("scale3", "scale1", "dw_const", "dw_scale"):
                layer.s.data[:] = rng.uniform(0.5, 1.5, layer.s.shape)
    return model


def centralized(spec, steps, lr, seed):
    csla = randomize_scales(build_model(spec, "csla", seed), seed + 1)
    state, gm = reparam.csla_fuse_model(csla)
    rep = build_model(spec, "repopt", seed)
    rep.load_state_dict(state)
    rng = np.random.default_rng(seed + 2)
    stream = [
        (rng.standard_normal((8, 3, spec.resolution, spec.resolution)), rng.integers(0, spec.classes, 8))
        for _ in range(8)
    ]
    report = reparam.verify_training_equivalence(csla, rep, gm, stream, steps=steps, lr=lr)

    csla2 = randomize_scales(build_model(spec, "csla", seed), seed + 1)
    rep2 = build_model(spec, "repopt", seed)
    rep2.load_state_dict(state)
    ones = reparam.GradMultSpec({pid: np.ones_like(m) for pid, m in gm.entries.items()})
    control = reparam.verify_training_equivalence(csla2, rep2, ones, stream, steps=steps, lr=lr)
    return report, control


def federated_divergence(spec, rounds, seed):
    hs_ds = data.synth_blobs(320, spec.classes, spec.resolution, seed=seed + 10)
    result = hs.hyper_search(spec, hs_ds, 1, OptimConfig(lr=0.05), seed)
    train = data.synth_blobs(500, spec.classes, spec.resolution, seed=seed + 11)
    test = data.synth_blobs(100, spec.classes, spec.resolution, seed=seed + 12, split="test")
    cfg = federated.FederatedConfig(
        num_clients=10, rounds=rounds, local_epochs=1, seed=seed,
        optimizer=OptimConfig(lr=0.05), eval_every=rounds, batch_size=32,
    )
    _, state_csla = federated.run_federated(cfg, spec, "csla", result, train, test)
    _, state_rep = federated.run_federated(cfg, spec, "repopt", result, train, test)
    csla_model = federated.make_replica(spec, "csla", "fp64", state_csla)
    fused, _ = reparam.csla_fuse_model(csla_model)
    return max(float(np.max(np.abs(fused[pid] - state_rep[pid]))) for pid in state_rep)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--rounds", type=int, default=10)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for spec, name in ((vgg_micro(), "vgg_micro"), (ghost_micro(), "ghost_micro")):
        report, control = centralized(spec, args.steps, args.lr, args.seed)
        print(f"{name} centralized {args.steps} steps: divergence {report.max_abs_diff:.3e} "
              f"(all-ones multipliers: {control.max_abs_diff:.3e})")
    div = federated_divergence(vgg_micro(resolution=16), args.rounds, args.seed)
    print(f"vgg_micro federated {args.rounds} rounds: global parameter divergence {div:.3e}")


if __name__ == "__main__":
    main()
