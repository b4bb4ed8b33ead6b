"""Linear transformations between block variants.

The conversions here are what make the single-branch model train like its
multi-branch counterpart:

* conv+BN fusion folds eval-mode batch norm into the preceding kernel,
* 1x1 kernels and per-channel scales embed into 3x3 kernel space,
* ``csla_fuse`` collapses a constant-scale multi-branch block into one
  kernel W' = sum_b c_b * T_b(W_b) plus per-element gradient multipliers
  gm[e] = sum of c_b^2 over the branches whose trainable parameter
  touches element e.

The per-element rule is what makes the fused trajectory match the
multi-branch one exactly: a branch with constant c contributes c * dW_b
to dW' while its own gradient is c * dL/dW', so each element of W' moves
by the sum of c^2 over the branches feeding it.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import models, ops, optim
from .errors import NumericalError, ShapeError
from .tensor import DTYPE_NAMES


class GradMultSpec:
    """Map from parameter id to a strictly positive multiplier tensor.

    Parameters without an entry use multiplier 1.
    """

    def __init__(self, entries):
        for pid, mult in entries.items():
            if not np.all(np.isfinite(mult)):
                raise NumericalError(f"non-finite gradient multiplier for {pid}")
            if np.any(mult <= 0):
                raise NumericalError(f"gradient multiplier for {pid} must be strictly positive (min={mult.min()})")
        self.entries = {pid: np.asarray(m) for pid, m in entries.items()}

    def get(self, pid):
        return self.entries.get(pid)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, GradMultSpec):
            return NotImplemented
        return set(self.entries) == set(other.entries) and all(
            np.array_equal(self.entries[k], other.entries[k]) for k in self.entries
        )


@dataclass
class FusionReport:
    max_abs_diff: float
    num_probes: int
    dtype: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance

    def to_record(self):
        return {
            "max_abs_diff": self.max_abs_diff,
            "num_probes": self.num_probes,
            "dtype": self.dtype,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def fuse_conv_bn(kernel, gamma, beta, mean, var, eps=1e-5):
    """Fold eval-mode batch norm into the conv: returns (kernel', bias')."""
    if gamma.shape != (kernel.shape[0],):
        raise ShapeError(f"BN channel dim {gamma.shape} does not match kernel output dim {kernel.shape[0]}")
    denom = var + eps
    if np.any(denom <= 0):
        raise NumericalError(f"var + eps must be positive, got min {denom.min()}")
    inv_std = 1.0 / np.sqrt(denom)
    factor = gamma * inv_std
    return kernel * factor[:, None, None, None], beta - mean * factor


def pad_1x1_to_3x3(kernel):
    """Embed a 1x1 kernel at the center of a 3x3 kernel."""
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise ShapeError(f"expected OxIx1x1 kernel, got {kernel.shape}")
    out = np.zeros(kernel.shape[:2] + (3, 3), dtype=kernel.dtype)
    out[:, :, 1, 1] = kernel[:, :, 0, 0]
    return out


def scale_to_depthwise_kernel(s):
    """Per-channel scale as a depthwise 3x3 kernel with the value at the center tap."""
    s = np.asarray(s)
    out = np.zeros((s.shape[0], 1, 3, 3), dtype=s.dtype)
    out[:, 0, 1, 1] = s
    return out


def csla_fuse(block):
    """Collapse a csla block into (fused kernel W', gradient multiplier gm)."""
    if getattr(block, "variant", None) != "csla":
        raise ShapeError(f"csla_fuse requires a csla block, got variant {getattr(block, 'variant', None)!r}")
    if isinstance(block, models.VggBlock):
        w3 = block.conv3.w.data
        c3 = block.scale3.s.data
        w1 = block.conv1.w.data
        c1 = block.scale1.s.data
        fused = c3[:, None, None, None] * w3 + pad_1x1_to_3x3(c1[:, None, None, None] * w1)
        gm = np.broadcast_to((c3 ** 2)[:, None, None, None], fused.shape).copy()
        gm[:, :, 1, 1] += (c1 ** 2)[:, None]
        return fused, gm
    if isinstance(block, models.GhostBlock):
        k = block.dw.w.data
        c_dw = block.dw_const.s.data
        s = block.dw_scale.s.data
        fused = c_dw[:, None, None, None] * k + scale_to_depthwise_kernel(s)
        gm = np.broadcast_to((c_dw ** 2)[:, None, None, None], fused.shape).copy()
        gm[:, 0, 1, 1] += 1.0  # the parallel scale is itself the trainable operator
        return fused, gm
    raise ShapeError(f"unsupported block type {type(block).__name__}")


def rep_fuse(block):
    """Fuse a rep_tr block's branches (eval-mode BN) into (kernel, bias).

    Plain blocks pass through unchanged, so fusing twice is a no-op.
    """
    if isinstance(block, models.VggBlock):
        if block._structure == "plain":
            b = block.conv.b.data.copy() if block.conv.b is not None else np.zeros(block.conv.w.data.shape[0], dtype=block.conv.w.data.dtype)
            return block.conv.w.data.copy(), b
        if block.variant != "rep_tr":
            raise ShapeError(f"rep_fuse requires rep_tr or plain, got {block.variant!r}")
        k3, b3 = fuse_conv_bn(
            block.conv3.w.data, block.bn3.gamma.data, block.bn3.beta.data,
            block.bn3.running_mean, block.bn3.running_var, models.BN_EPS,
        )
        k1, b1 = fuse_conv_bn(
            block.conv1.w.data, block.bn1.gamma.data, block.bn1.beta.data,
            block.bn1.running_mean, block.bn1.running_var, models.BN_EPS,
        )
        return k3 + pad_1x1_to_3x3(k1), b3 + b1
    if isinstance(block, models.GhostBlock):
        if block._structure == "plain":
            b = block.dw.b.data.copy() if block.dw.b is not None else np.zeros(block.half, dtype=block.dw.w.data.dtype)
            return block.dw.w.data.copy(), b
        if block.variant != "rep_tr":
            raise ShapeError(f"rep_fuse requires rep_tr or plain, got {block.variant!r}")
        kd, bd = fuse_conv_bn(
            block.dw.w.data, block.bn_dw.gamma.data, block.bn_dw.beta.data,
            block.bn_dw.running_mean, block.bn_dw.running_var, models.BN_EPS,
        )
        inv_std = 1.0 / np.sqrt(block.bn_id.running_var + models.BN_EPS)
        id_scale = block.bn_id.gamma.data * inv_std
        id_bias = block.bn_id.beta.data - block.bn_id.running_mean * id_scale
        return kd + scale_to_depthwise_kernel(id_scale), bd + id_bias
    raise ShapeError(f"unsupported block type {type(block).__name__}")


def _fused_kernel_id(path, block):
    return f"{path}/conv/w" if isinstance(block, models.VggBlock) else f"{path}/dw/w"


def csla_fuse_model(csla_model):
    """Fuse every block of a csla model.

    Returns the state dict of the equivalent repopt/plain model (no conv
    biases; non-reparam parameters pass through) and the GradMultSpec.
    """
    if csla_model.variant != "csla":
        raise ShapeError(f"expected a csla model, got {csla_model.variant!r}")
    state, gm_entries = {}, {}
    for path, block in csla_model.blocks:
        fused, gm = csla_fuse(block)
        if isinstance(block, models.GhostBlock):
            state[f"{path}/pw/w"] = block.pw.w.data.copy()
        state[_fused_kernel_id(path, block)] = fused
        gm_entries[_fused_kernel_id(path, block)] = gm
    state["head/linear/w"] = csla_model.head.w.data.copy()
    state["head/linear/b"] = csla_model.head.b.data.copy()
    return state, GradMultSpec(gm_entries)


def rep_fuse_model(model):
    """Fuse a rep_tr (or plain) model into the state dict of a plain model
    with per-conv biases."""
    state = {}
    for path, block in model.blocks:
        kernel, bias = rep_fuse(block)
        if isinstance(block, models.GhostBlock):
            state[f"{path}/pw/w"] = block.pw.w.data.copy()
            state[f"{path}/dw/w"] = kernel
            state[f"{path}/dw/b"] = bias
        else:
            state[f"{path}/conv/w"] = kernel
            state[f"{path}/conv/b"] = bias
    state["head/linear/w"] = model.head.w.data.copy()
    state["head/linear/b"] = model.head.b.data.copy()
    return state


def compare_on_probes(forward_a, forward_b, probes, tolerance, dtype_name):
    """Max absolute output difference of two callables over probe inputs."""
    worst = 0.0
    for x in probes:
        diff = float(np.max(np.abs(forward_a(x) - forward_b(x))))
        worst = max(worst, diff)
    return FusionReport(worst, len(probes), dtype_name, tolerance)


def verify_training_equivalence(csla_model, repopt_model, gm, stream, steps, lr, tolerance=1e-8):
    """Train both models side by side and report the worst per-step
    divergence of their eval outputs on a fixed probe batch.

    Both models take plain SGD steps with momentum 0 on identical
    minibatches; the repopt model's gradients are scaled by ``gm``.
    """
    batches = list(stream)
    if not batches:
        raise ShapeError("verify_training_equivalence requires at least one minibatch")
    if csla_model.spec != repopt_model.spec:
        raise ShapeError(f"model specs differ: {csla_model.spec} vs {repopt_model.spec}")
    probe = batches[0][0]
    cfg = optim.OptimConfig(lr=lr, momentum=0.0)
    states = {id(csla_model): optim.OptimState(), id(repopt_model): optim.OptimState()}
    worst = 0.0
    for x, y in itertools.islice(itertools.cycle(batches), steps):
        for model, mult in ((csla_model, None), (repopt_model, gm)):
            model.zero_grad()
            logits = model.forward(x, mode="train")
            loss, dlogits = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged during equivalence run ({model.variant})")
            model.backward(dlogits)
            optim.step(model.parameter_list(), mult, cfg, states[id(model)])
        diff = float(np.max(np.abs(csla_model.forward(probe, mode="eval") - repopt_model.forward(probe, mode="eval"))))
        worst = max(worst, diff)
    return FusionReport(worst, steps, DTYPE_NAMES[csla_model.dtype], tolerance)
