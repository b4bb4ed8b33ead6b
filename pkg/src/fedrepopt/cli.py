"""Command-line entry point.

Subcommands: hs-search, fed-train, fuse, verify-equiv, partition-stats,
eval.  Exit codes: 0 success, 2 configuration/checkpoint error, 3
numerical failure.  The environment variable FEDREPOPT_THREADS caps the
number of parallel client trainers.

With a fixed --seed every command is reproducible end to end; the metrics
CSV writes a zero seconds column by default so reruns are byte-identical
(pass --wallclock to record real timings instead).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import federated, hs, reparam
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    AggregationError,
    CheckpointError,
    ConfigError,
    FedRepOptError,
    NumericalError,
    ShapeError,
)
from .models import Model, ModelSpec, build_model
from .optim import OptimConfig
from .rng import stream_rng, stream_seed

logger = logging.getLogger("fedrepopt")


def client_threads():
    raw = os.environ.get("FEDREPOPT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDREPOPT_THREADS must be an integer, got {raw!r}") from None


def parse_synth_descriptor(text):
    fields = {}
    for part in text[len("synth:"):].split(","):
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad synth descriptor field {part!r} in {text!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    known = {"n", "classes", "res", "seed", "sigma"}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown synth descriptor keys {sorted(unknown)}; expected {sorted(known)}")
    return {
        "n": config_mod.parse_int(fields.get("n", "512"), "synth n"),
        "classes": config_mod.parse_int(fields.get("classes", "10"), "synth classes"),
        "res": config_mod.parse_int(fields.get("res", "16"), "synth res"),
        "seed": config_mod.parse_int(fields.get("seed", "0"), "synth seed"),
        "sigma": config_mod.parse_float(fields.get("sigma", "0.5"), "synth sigma"),
    }


def load_dataset_arg(arg, split, dtype):
    """A dataset argument is either ``synth:k=v,...`` or a CIFAR-format
    directory.  Synthetic test splits derive from the train seed."""
    if arg.startswith("synth:"):
        d = parse_synth_descriptor(arg)
        if split == "test":
            n = max(d["classes"], d["n"] // 5)
            return data_mod.synth_blobs(n, d["classes"], d["res"], d["seed"] + 1, sigma=d["sigma"], dtype=dtype, split="test")
        return data_mod.synth_blobs(d["n"], d["classes"], d["res"], d["seed"], sigma=d["sigma"], dtype=dtype)
    if not os.path.isdir(arg):
        raise ConfigError(f"dataset directory not found: {arg}")
    return data_mod.load_cifar_binary(arg, split, dtype=dtype)


def build_spec(values, classes, resolution):
    return ModelSpec(
        values["spec"],
        config_mod.parse_int_tuple(values["model.widths"], "model.widths"),
        config_mod.parse_int_tuple(values["model.blocks"], "model.blocks"),
        classes,
        resolution,
    )


def write_metrics_csv(path, metrics, wallclock=False):
    lines = ["round,top1,top5,loss,clients,seconds"]
    for m in metrics:
        seconds = f"{m.seconds:.3f}" if wallclock else "0.000"
        clients = ";".join(str(c) for c in m.clients)
        lines.append(f"{m.round},{m.top1:.6f},{m.top5:.6f},{m.loss:.6f},{clients},{seconds}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_record(record, out_path):
    line = json.dumps(record, sort_keys=True)
    print(line)
    if out_path:
        with open(out_path, "a") as fh:
            fh.write(line + "\n")


FED_DEFAULTS = {
    "spec": "vgg_micro",
    "variant": "plain",
    "dataset": None,
    "testset": None,
    "hs": None,
    "clients": "10",
    "participation": "1.0",
    "rounds": "10",
    "epochs": "1",
    "partition": "iid",
    "alpha": "0.5",
    "lr": "0.05",
    "momentum": "0.0",
    "seed": "0",
    "dtype": "fp64",
    "out": None,
    "eval_every": "1",
    "batch": "64",
    "augment": "false",
    "wallclock": "false",
    "model.widths": "16,32,64",
    "model.blocks": "1,1,1",
}


def cmd_fed_train(args):
    file_values = config_mod.parse_config_file(args.config) if args.config else {}
    preset = args.preset or file_values.pop("preset", None)
    flag_values = {
        "spec": args.spec, "variant": args.variant, "dataset": args.dataset,
        "testset": args.testset, "hs": args.hs, "clients": args.clients,
        "participation": args.participation, "rounds": args.rounds, "epochs": args.epochs,
        "partition": args.partition, "alpha": args.alpha, "lr": args.lr,
        "momentum": args.momentum, "seed": args.seed, "dtype": args.dtype,
        "out": args.out, "eval_every": args.eval_every, "batch": args.batch,
        "augment": args.augment, "wallclock": args.wallclock,
        "model.widths": args.model_widths, "model.blocks": args.model_blocks,
    }
    values = config_mod.merge_values(FED_DEFAULTS, file_values, preset, flag_values)
    if values["dataset"] is None:
        raise ConfigError("fed-train requires --dataset (or a dataset key in the config file)")
    if values["out"] is None:
        raise ConfigError("fed-train requires --out (or an out key in the config file)")

    run = config_mod.RunConfig(
        spec=None,
        variant=config_mod.parse_variant(values["variant"]),
        fed=None,
        dataset=values["dataset"],
        testset=values["testset"] or values["dataset"],
        hs_path=values["hs"],
        out_dir=values["out"],
        dtype=values["dtype"],
        wallclock=config_mod.parse_bool(values["wallclock"], "wallclock"),
    )
    train = load_dataset_arg(run.dataset, "train", run.dtype)
    test = load_dataset_arg(run.testset, "test", run.dtype)
    run.spec = build_spec(values, train.classes, train.resolution)
    run.fed = federated.FederatedConfig(
        num_clients=config_mod.parse_int(values["clients"], "clients"),
        rounds=config_mod.parse_int(values["rounds"], "rounds"),
        local_epochs=config_mod.parse_int(values["epochs"], "epochs"),
        participation=config_mod.parse_participation(values["participation"]),
        partition=values["partition"],
        alpha=config_mod.parse_float(values["alpha"], "alpha"),
        seed=config_mod.parse_int(values["seed"], "seed"),
        optimizer=OptimConfig(
            lr=config_mod.parse_float(values["lr"], "lr"),
            momentum=config_mod.parse_float(values["momentum"], "momentum"),
        ),
        eval_every=config_mod.parse_int(values["eval_every"], "eval_every"),
        batch_size=config_mod.parse_int(values["batch"], "batch"),
        augment=config_mod.parse_bool(values["augment"], "augment"),
    )
    hs_result = hs.load_hs(run.hs_path, expected_spec=run.spec) if run.hs_path else None

    os.makedirs(run.out_dir, exist_ok=True)
    metrics, _ = federated.run_federated(
        run.fed, run.spec, run.variant, hs_result, train, test,
        dtype=run.dtype, threads=client_threads(), checkpoint_dir=run.out_dir,
    )
    csv_path = os.path.join(run.out_dir, "metrics.csv")
    write_metrics_csv(csv_path, metrics, wallclock=run.wallclock)
    if metrics:
        last = metrics[-1]
        print(f"final round {last.round}: top1={last.top1:.4f} top5={last.top5:.4f} loss={last.loss:.4f}")
    print(f"metrics written to {csv_path}")
    return 0


def cmd_hs_search(args):
    dataset = load_dataset_arg(args.dataset, "train", args.dtype)
    values = {"spec": args.spec, "model.widths": args.model_widths or "16,32,64",
              "model.blocks": args.model_blocks or "1,1,1"}
    spec = build_spec(values, args.classes or dataset.classes, dataset.resolution)
    schedule = "cosine" if args.epochs > 0 else "constant"
    cfg = OptimConfig(lr=args.lr, momentum=0.0, schedule=schedule, total_steps=1 if schedule == "cosine" else 0)
    result = hs.hyper_search(
        spec, dataset, args.epochs, cfg, args.seed,
        batch_size=args.batch, dtype=args.dtype, dataset_id=args.dataset,
    )
    hs.export_hs(result, args.out)
    print(f"search accuracy {result.final_accuracy:.4f}; wrote {args.out}")
    if not result.scales_positive:
        print("warning: some learned scale constants are not strictly positive", file=sys.stderr)
    return 0


def cmd_fuse(args):
    variant = config_mod.parse_variant(args.variant)
    tensors = load_checkpoint(args.ckpt)
    if variant in ("plain", "repopt"):
        # already single-branch: pass through unchanged
        save_checkpoint(args.out, tensors)
        print(f"wrote {args.out}")
        return 0
    if variant != "rep_tr":
        raise ConfigError("fuse expects a rep-tr (or already plain) checkpoint")
    values = {"spec": args.spec, "model.widths": args.model_widths or "16,32,64",
              "model.blocks": args.model_blocks or "1,1,1"}
    spec = build_spec(values, args.classes, args.resolution)
    source = Model(spec, "rep_tr", seed=0, dtype=args.dtype)
    source.load_state_dict(tensors)
    fused_state = reparam.rep_fuse_model(source)
    target = Model(spec, "plain", seed=0, dtype=args.dtype, with_bias=True)
    target.load_state_dict(fused_state)
    save_checkpoint(args.out, target.state_dict())
    print(f"wrote {args.out}")
    return 0


def cmd_verify_equiv(args):
    result = hs.load_hs(args.hs)
    csla, rep = hs.models_from_hs(result, seed=stream_seed(args.seed, "init"), dtype=args.dtype)
    spec = result.spec
    rng = stream_rng(args.seed, "verify")
    stream = [
        (
            rng.standard_normal((args.batch, spec.in_channels, spec.resolution, spec.resolution)),
            rng.integers(0, spec.classes, args.batch),
        )
        for _ in range(8)
    ]
    report = reparam.verify_training_equivalence(
        csla, rep, result.grad_mult, stream, steps=args.steps, lr=args.lr, tolerance=args.tolerance
    )
    emit_record(report.to_record(), args.out)
    return 0 if report.passed else 3


def cmd_partition_stats(args):
    dataset = load_dataset_arg(args.dataset, "train", "fp32")
    labels = dataset.labels
    seeds = range(args.seeds)
    iid_entropy = float(np.mean([
        federated.partition_label_entropy(federated.partition_iid(labels, args.clients, stream_seed(s, "partition")), labels)
        for s in seeds
    ]))
    emit_record({"partition": "iid", "clients": args.clients, "mean_entropy": iid_entropy, "seeds": args.seeds}, args.out)
    for alpha in args.alpha or []:
        entropy = float(np.mean([
            federated.partition_label_entropy(
                federated.partition_dirichlet(labels, args.clients, alpha, stream_seed(s, "partition")), labels
            )
            for s in seeds
        ]))
        emit_record(
            {"partition": "dirichlet", "alpha": alpha, "clients": args.clients,
             "mean_entropy": entropy, "seeds": args.seeds},
            args.out,
        )
    return 0


def cmd_eval(args):
    dataset = load_dataset_arg(args.dataset, args.split, args.dtype)
    values = {"spec": args.spec, "model.widths": args.model_widths or "16,32,64",
              "model.blocks": args.model_blocks or "1,1,1"}
    spec = build_spec(values, dataset.classes, dataset.resolution)
    variant = config_mod.parse_variant(args.variant)
    state = load_checkpoint(args.ckpt)
    model = federated.make_replica(spec, variant, args.dtype, state)
    top1, top5, loss = federated.evaluate(model, dataset)
    emit_record({"top1": top1, "top5": top5, "loss": loss, "samples": len(dataset)}, args.out)
    return 0


def _add_model_flags(p, with_classes=False):
    p.add_argument("--spec", default="vgg_micro", choices=("vgg_micro", "ghost_micro"))
    p.add_argument("--model-widths", default=None, help="comma-separated stage widths")
    p.add_argument("--model-blocks", default=None, help="comma-separated blocks per stage")
    if with_classes:
        p.add_argument("--classes", type=int, default=10)
        p.add_argument("--resolution", type=int, default=32)


def build_parser():
    parser = argparse.ArgumentParser(prog="fedrepopt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hs-search", help="learn scale constants and emit the fused init + gradient multipliers")
    _add_model_flags(p)
    p.add_argument("--classes", type=int, default=None, help="override class count (defaults to dataset's)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="fp64", choices=("fp32", "fp64"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hs_search)

    p = sub.add_parser("fed-train", help="run federated training")
    p.add_argument("--config", default=None, help="flat key=value config file; flags override it")
    p.add_argument("--preset", default=None, choices=sorted(config_mod.PRESETS))
    p.add_argument("--spec", default=None, choices=("vgg_micro", "ghost_micro"))
    p.add_argument("--variant", default=None, choices=("rep-tr", "plain", "csla", "repopt"))
    p.add_argument("--dataset", default=None)
    p.add_argument("--testset", default=None)
    p.add_argument("--hs", default=None)
    p.add_argument("--clients", default=None)
    p.add_argument("--participation", default=None)
    p.add_argument("--rounds", default=None)
    p.add_argument("--epochs", default=None)
    p.add_argument("--partition", default=None, choices=("iid", "dirichlet"))
    p.add_argument("--alpha", default=None)
    p.add_argument("--lr", default=None)
    p.add_argument("--momentum", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--dtype", default=None, choices=("fp32", "fp64"))
    p.add_argument("--out", default=None)
    p.add_argument("--eval-every", dest="eval_every", default=None)
    p.add_argument("--batch", default=None)
    p.add_argument("--augment", action="store_const", const="true", default=None)
    p.add_argument("--wallclock", action="store_const", const="true", default=None,
                   help="record real wall-clock seconds in the CSV (breaks byte-level reproducibility)")
    p.add_argument("--model-widths", dest="model_widths", default=None)
    p.add_argument("--model-blocks", dest="model_blocks", default=None)
    p.set_defaults(func=cmd_fed_train)

    p = sub.add_parser("fuse", help="fuse a rep-tr checkpoint into a plain one")
    _add_model_flags(p, with_classes=True)
    p.add_argument("--variant", required=True, choices=("rep-tr", "plain", "repopt"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", default="fp64", choices=("fp32", "fp64"))
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify-equiv", help="dual-trajectory equivalence check for a search result")
    p.add_argument("--hs", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--dtype", default="fp64", choices=("fp32", "fp64"))
    p.add_argument("--out", default=None, help="append the JSON report line to this file")
    p.set_defaults(func=cmd_verify_equiv)

    p = sub.add_parser("partition-stats", help="mean per-client label entropy per partitioning scheme")
    p.add_argument("--dataset", required=True)
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--alpha", type=float, action="append", default=None)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_partition_stats)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_model_flags(p)
    p.add_argument("--variant", required=True, choices=("rep-tr", "plain", "csla", "repopt"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--dtype", default="fp64", choices=("fp32", "fp64"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, AggregationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FedRepOptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
