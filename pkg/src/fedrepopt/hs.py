"""Hyperparameter search: learn the scale constants on an auxiliary
dataset, then emit the fused initialization and gradient multipliers.

The search trains the csla model with its scale layers *trainable*
(initialized to 1); the final scale values are frozen into constants.
Only conv-stack weights and scales flow downstream -- the search
classifier head is discarded, since the search dataset's label space may
differ from the target task's.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod
from . import ops, optim
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericalError, ShapeError
from .federated import evaluate
from .models import GhostBlock, ModelSpec, build_model
from .reparam import GradMultSpec, csla_fuse_model
from .rng import stream_seed

logger = logging.getLogger("fedrepopt")


@dataclass
class HsResult:
    spec: ModelSpec
    alphas: dict            # block path -> {scale name: per-channel values}
    fused: dict             # repopt-space conv-stack parameters
    grad_mult: GradMultSpec
    csla_params: dict       # csla-space conv-stack parameters (incl. scales)
    dataset_id: str
    epochs: int
    final_accuracy: float
    seed: int
    scales_positive: bool


def _conv_stack(state):
    return {pid: arr for pid, arr in state.items() if not pid.startswith("head/")}


def _collect_alphas(model):
    alphas = {}
    for path, block in model.blocks:
        names = ("dw_const", "dw_scale") if isinstance(block, GhostBlock) else ("scale3", "scale1")
        alphas[path] = {name: getattr(block, name).s.data.copy() for name in names}
    return alphas


def hyper_search(spec, hs_dataset, epochs, optim_cfg, seed, batch_size=64, dtype="fp64",
                 dataset_id="hs"):
    """Train the csla model on the search dataset and fuse the result."""
    if hs_dataset.resolution != spec.resolution:
        raise ShapeError(f"search dataset resolution {hs_dataset.resolution} does not match spec resolution {spec.resolution}")
    hs_spec = replace(spec, classes=hs_dataset.classes)
    model = build_model(hs_spec, "csla", stream_seed(seed, "init"), dtype=dtype, trainable_scales=True)

    steps_per_epoch = max(1, -(-len(hs_dataset) // batch_size))
    cfg = optim_cfg
    if cfg.schedule == "cosine" and epochs > 0:
        cfg = replace(cfg, total_steps=epochs * steps_per_epoch)
    opt_state = optim.OptimState()
    last_finite_epoch = -1
    for epoch in range(epochs):
        for x, y in data_mod.batches(hs_dataset, batch_size, stream_seed(seed, f"hs.epoch.{epoch}")):
            model.zero_grad()
            logits = model.forward(x, mode="train")
            loss, dlogits = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericalError(f"search training diverged in epoch {epoch}; last finite-loss epoch was {last_finite_epoch}")
            model.backward(dlogits)
            optim.step(model.parameter_list(), None, cfg, opt_state)
        last_finite_epoch = epoch

    final_accuracy = evaluate(model, hs_dataset)[0]
    alphas = _collect_alphas(model)
    flat_constants = np.concatenate([v for d in alphas.values() for v in d.values()])
    scales_positive = bool(np.all(flat_constants > 0))
    if not scales_positive:
        logger.warning("hyperparameter search produced non-positive scale constants (min=%g)", flat_constants.min())
    fused_state, grad_mult = csla_fuse_model(model)
    return HsResult(
        spec=spec,
        alphas=alphas,
        fused=_conv_stack(fused_state),
        grad_mult=grad_mult,
        csla_params=_conv_stack(model.state_dict()),
        dataset_id=dataset_id,
        epochs=epochs,
        final_accuracy=float(final_accuracy),
        seed=seed,
        scales_positive=scales_positive,
    )


def models_from_hs(result: HsResult, seed, dtype="fp64"):
    """Build the post-search csla model and its fused repopt counterpart.

    Both get the same freshly seeded classifier head (the search head was
    discarded), so their training trajectories correspond exactly.
    """
    from .models import Model

    csla = Model(result.spec, "csla", seed=seed, dtype=dtype)
    state = csla.state_dict()
    state.update(result.csla_params)
    csla.load_state_dict(state)

    rep = Model(result.spec, "repopt", seed=seed, dtype=dtype)
    rep_state = rep.state_dict()
    rep_state.update(result.fused)
    rep_state["head/linear/w"] = csla.head.w.data.copy()
    rep_state["head/linear/b"] = csla.head.b.data.copy()
    rep.load_state_dict(rep_state)
    rep.grad_mult = result.grad_mult
    return csla, rep


def export_hs(result: HsResult, path):
    """Write an HsResult as a checkpoint with prefixed tensor ids."""
    tensors = {}
    for pid, arr in result.fused.items():
        tensors[f"w/{pid}"] = np.asarray(arr)
    for pid, arr in result.grad_mult.entries.items():
        tensors[f"gm/{pid}"] = np.asarray(arr)
    for pid, arr in result.csla_params.items():
        tensors[f"csla/{pid}"] = np.asarray(arr)
    spec = result.spec
    tensors["meta/spec/widths"] = np.asarray(spec.widths, dtype=np.float64)
    tensors["meta/spec/blocks_per_stage"] = np.asarray(spec.blocks_per_stage, dtype=np.float64)
    tensors["meta/spec/dims"] = np.asarray(
        [spec.classes, spec.resolution, spec.in_channels], dtype=np.float64
    )
    tensors[f"meta/spec/family/{spec.family}"] = np.float64(0.0).reshape(())
    tensors[f"meta/dataset/{result.dataset_id}"] = np.float64(0.0).reshape(())
    tensors["meta/epochs"] = np.float64(result.epochs).reshape(())
    tensors["meta/final_accuracy"] = np.float64(result.final_accuracy).reshape(())
    tensors["meta/seed"] = np.float64(result.seed).reshape(())
    tensors["meta/scales_positive"] = np.float64(result.scales_positive).reshape(())
    save_checkpoint(path, tensors)


def load_hs(path, expected_spec=None):
    """Load an exported HsResult; optionally reject a mismatched spec."""
    tensors = load_checkpoint(path)
    family = dataset_id = None
    for tid in tensors:
        if tid.startswith("meta/spec/family/"):
            family = tid.split("/", 3)[3]
        elif tid.startswith("meta/dataset/"):
            dataset_id = tid.split("/", 2)[2]
    required = {"meta/spec/widths", "meta/spec/blocks_per_stage", "meta/spec/dims", "meta/epochs"}
    if family is None or not required <= set(tensors):
        raise ShapeError(f"{path}: not a hyperparameter-search checkpoint")
    classes, resolution, in_channels = (int(v) for v in tensors["meta/spec/dims"])
    spec = ModelSpec(
        family,
        tuple(int(w) for w in tensors["meta/spec/widths"]),
        tuple(int(b) for b in tensors["meta/spec/blocks_per_stage"]),
        classes,
        resolution,
        in_channels,
    )
    if expected_spec is not None and spec != expected_spec:
        raise ShapeError(f"search checkpoint was built for {spec}, run expects {expected_spec}")
    fused = {tid[2:]: arr for tid, arr in tensors.items() if tid.startswith("w/")}
    gm = GradMultSpec({tid[3:]: arr for tid, arr in tensors.items() if tid.startswith("gm/")})
    csla_params = {tid[5:]: arr for tid, arr in tensors.items() if tid.startswith("csla/")}
    alphas = {}
    for pid, arr in csla_params.items():
        parts = pid.split("/")
        if parts[-2] in ("scale3", "scale1", "dw_const", "dw_scale") and parts[-1] == "s":
            alphas.setdefault("/".join(parts[:-2]), {})[parts[-2]] = arr
    return HsResult(
        spec=spec,
        alphas=alphas,
        fused=fused,
        grad_mult=gm,
        csla_params=csla_params,
        dataset_id=dataset_id or "unknown",
        epochs=int(tensors["meta/epochs"]),
        final_accuracy=float(tensors["meta/final_accuracy"]),
        seed=int(tensors["meta/seed"]),
        scales_positive=bool(tensors["meta/scales_positive"]),
    )
