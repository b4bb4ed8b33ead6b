#!/usr/bin/env python3
"""Desk-scale variant comparison: train all four block variants federated
on the same data and print a small results table (params, top-1, top-5).

Expects a CIFAR-format dataset directory (see make_dataset.py); the first
`--n-hs` train records become the hyperparameter-search subset, the rest
the federated training pool.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedrepopt import data, federated, hs
from fedrepopt.models import build_model, ghost_micro, vgg_micro
from fedrepopt.optim import OptimConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", required=True, help="CIFAR-format directory")
    ap.add_argument("--family", default="vgg_micro", choices=("vgg_micro", "ghost_micro"))
    ap.add_argument("--n-hs", type=int, default=4000)
    ap.add_argument("--n-train", type=int, default=10000)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--clients", type=int, default=10)
    ap.add_argument("--partition", default="iid", choices=("iid", "dirichlet"))
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=77)
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()

    pool = data.load_cifar_binary(args.dataset, "train", dtype="fp32")
    test = data.load_cifar_binary(args.dataset, "test", dtype="fp32", stats=pool.norm_stats)
    if len(pool) < args.n_hs + args.n_train:
        raise SystemExit(f"need {args.n_hs + args.n_train} train records, found {len(pool)}")
    hs_ds = data.take(pool, np.arange(args.n_hs), split="hs")
    train = data.take(pool, np.arange(args.n_hs, args.n_hs + args.n_train), split="train")

    spec = vgg_micro() if args.family == "vgg_micro" else ghost_micro()
    t0 = time.perf_counter()
    result = hs.hyper_search(
        spec, hs_ds, epochs=5,
        optim_cfg=OptimConfig(lr=args.lr, schedule="cosine", total_steps=1),
        seed=args.seed + 1000, dtype="fp32",
    )
    print(f"hyperparameter search: accuracy {result.final_accuracy:.3f} ({time.perf_counter() - t0:.0f}s)")

    cfg = federated.FederatedConfig(
        num_clients=args.clients, rounds=args.rounds, local_epochs=1, participation=1.0,
        partition=args.partition, alpha=args.alpha, seed=args.seed,
        optimizer=OptimConfig(lr=args.lr, momentum=0.0), eval_every=args.rounds,
        batch_size=64, augment=True,
    )
    rows = []
    for variant in ("rep_tr", "plain", "csla", "repopt"):
        hs_arg = result if variant in ("csla", "repopt") else None
        t0 = time.perf_counter()
        metrics, _ = federated.run_federated(cfg, spec, variant, hs_arg, train, test,
                                             dtype="fp32", threads=args.threads)
        params = build_model(spec, variant, seed=0).num_parameters()
        final = metrics[-1]
        rows.append((variant, params, final.top1, final.top5, time.perf_counter() - t0))
        print(f"  {variant}: top1={final.top1:.4f} top5={final.top5:.4f} ({rows[-1][4]:.0f}s)")

    print(f"\n{'variant':10} {'params':>8} {'top1':>8} {'top5':>8} {'seconds':>8}")
    for variant, params, top1, top5, secs in rows:
        print(f"{variant:10} {params:8d} {top1:8.4f} {top5:8.4f} {secs:8.0f}")


if __name__ == "__main__":
    main()
