"""Micro VGG-style and Ghost-style networks in four block variants.

Variants
--------
rep_tr   multi-branch training structure: per-branch conv + batch norm
plain    single-branch inference structure (3x3 or depthwise conv only)
csla     multi-branch with constant per-channel scales instead of BN
repopt   structurally identical to plain, initialized by fusing a seeded
         csla model; trained with per-element gradient multipliers

A VGG block sums a 3x3 and a 1x1 conv branch; a Ghost block applies a
pointwise conv and then a depthwise 3x3 sub-block whose parallel branch
is a per-channel scale (csla) or an identity batch norm (rep_tr).
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, resolve_dtype

VARIANTS = ("rep_tr", "plain", "csla", "repopt")
FAMILIES = ("vgg_micro", "ghost_micro")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ModelSpec:
    family: str
    widths: tuple = (16, 32, 64)
    blocks_per_stage: tuple = (1, 1, 1)
    classes: int = 10
    resolution: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown model family {self.family!r}, expected one of {FAMILIES}")
        if len(self.widths) == 0 or len(self.widths) != len(self.blocks_per_stage):
            raise ShapeError(f"widths {self.widths} and blocks_per_stage {self.blocks_per_stage} must be non-empty and equal length")
        if any(w <= 0 for w in self.widths) or any(b <= 0 for b in self.blocks_per_stage):
            raise ShapeError("stage widths and block counts must be positive")
        if self.family == "ghost_micro" and any(w % 2 for w in self.widths):
            raise ShapeError(f"ghost_micro widths must be even, got {self.widths}")
        if self.resolution < 2 ** len(self.widths):
            raise ShapeError(f"resolution {self.resolution} too small for {len(self.widths)} stride-2 stages")


def vgg_micro(classes=10, resolution=32):
    return ModelSpec("vgg_micro", (16, 32, 64), (1, 1, 1), classes, resolution)


def ghost_micro(classes=10, resolution=32):
    return ModelSpec("ghost_micro", (16, 32, 64), (1, 1, 1), classes, resolution)


def he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2dLayer:
    def __init__(self, w, b=None, stride=1, pad=0, groups=1):
        self.w = Tensor(w)
        self.b = Tensor(b) if b is not None else None
        self.stride, self.pad, self.groups = stride, pad, groups
        self._cache = None

    def forward(self, x, mode="train"):
        y, self._cache = ops.conv2d(
            x, self.w.data, None if self.b is None else self.b.data,
            stride=self.stride, pad=self.pad, groups=self.groups,
        )
        return y

    def backward(self, dy):
        dx, dw, db = ops.conv2d_backward(dy, self._cache)
        self._cache = None
        self.w.add_grad(dw)
        if self.b is not None:
            self.b.add_grad(db)
        return dx

    def named_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def named_state(self):
        return [(name, t.data) for name, t in self.named_params()]


class BatchNormLayer:
    def __init__(self, channels, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, mode="train"):
        y, self._cache, (rm, rv) = ops.batchnorm(
            x, self.gamma.data, self.beta.data, self.running_mean, self.running_var,
            eps=BN_EPS, momentum=BN_MOMENTUM, mode=mode,
        )
        if mode == "train":
            self.running_mean, self.running_var = rm, rv
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = ops.batchnorm_backward(dy, self._cache)
        self._cache = None
        self.gamma.add_grad(dgamma)
        self.beta.add_grad(dbeta)
        return dx

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_state(self):
        return [
            ("gamma", self.gamma.data),
            ("beta", self.beta.data),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]


class ChannelScaleLayer:
    def __init__(self, channels, dtype, trainable, init=None):
        self.s = Tensor(np.ones(channels, dtype=dtype) if init is None else np.asarray(init, dtype=dtype))
        self.trainable = trainable
        self._cache = None

    def forward(self, x, mode="train"):
        y, self._cache = ops.scale_channels(x, self.s.data)
        return y

    def backward(self, dy):
        dx, ds = ops.scale_channels_backward(dy, self._cache)
        self._cache = None
        if self.trainable:
            self.s.add_grad(ds)
        return dx

    def named_params(self):
        return [("s", self.s)] if self.trainable else []

    def named_state(self):
        return [("s", self.s.data)]


class LinearLayer:
    def __init__(self, w, b):
        self.w = Tensor(w)
        self.b = Tensor(b)
        self._cache = None

    def forward(self, x, mode="train"):
        y, self._cache = ops.linear(x, self.w.data, self.b.data)
        return y

    def backward(self, dy):
        dx, dw, db = ops.linear_backward(dy, self._cache)
        self._cache = None
        self.w.add_grad(dw)
        self.b.add_grad(db)
        return dx

    def named_params(self):
        return [("w", self.w), ("b", self.b)]

    def named_state(self):
        return [(name, t.data) for name, t in self.named_params()]


class ReLULayer:
    def __init__(self):
        self._mask = None

    def forward(self, x, mode="train"):
        y, self._mask = ops.relu(x)
        return y

    def backward(self, dy):
        dx = ops.relu_backward(dy, self._mask)
        self._mask = None
        return dx


class VggBlock:
    """3x3 (+1x1) conv block; pre-activation depends on the variant."""

    def __init__(self, cin, cout, stride, variant, dtype, rng, trainable_scales=False, with_bias=False):
        self.variant = variant
        self.stride = stride
        structure = "plain" if variant == "repopt" else variant
        if structure == "rep_tr":
            self.conv3 = Conv2dLayer(he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype), stride=stride, pad=1)
            self.bn3 = BatchNormLayer(cout, dtype)
            self.conv1 = Conv2dLayer(he_uniform(rng, (cout, cin, 1, 1), cin, dtype), stride=stride, pad=0)
            self.bn1 = BatchNormLayer(cout, dtype)
        elif structure == "csla":
            self.conv3 = Conv2dLayer(he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype), stride=stride, pad=1)
            self.scale3 = ChannelScaleLayer(cout, dtype, trainable=trainable_scales)
            self.conv1 = Conv2dLayer(he_uniform(rng, (cout, cin, 1, 1), cin, dtype), stride=stride, pad=0)
            self.scale1 = ChannelScaleLayer(cout, dtype, trainable=trainable_scales)
        elif structure == "plain":
            bias = np.zeros(cout, dtype=dtype) if with_bias else None
            self.conv = Conv2dLayer(he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype), bias, stride=stride, pad=1)
        else:
            raise ShapeError(f"unsupported vgg block variant {variant!r}")
        self.relu = ReLULayer()
        self._structure = structure

    def forward(self, x, mode="train"):
        if self._structure == "rep_tr":
            pre = self.bn3.forward(self.conv3.forward(x, mode), mode) + self.bn1.forward(self.conv1.forward(x, mode), mode)
        elif self._structure == "csla":
            pre = self.scale3.forward(self.conv3.forward(x, mode), mode) + self.scale1.forward(self.conv1.forward(x, mode), mode)
        else:
            pre = self.conv.forward(x, mode)
        return self.relu.forward(pre, mode)

    def backward(self, dy):
        dpre = self.relu.backward(dy)
        if self._structure == "rep_tr":
            return self.conv3.backward(self.bn3.backward(dpre)) + self.conv1.backward(self.bn1.backward(dpre))
        if self._structure == "csla":
            return self.conv3.backward(self.scale3.backward(dpre)) + self.conv1.backward(self.scale1.backward(dpre))
        return self.conv.backward(dpre)

    def sublayers(self):
        if self._structure == "rep_tr":
            return [("conv3", self.conv3), ("bn3", self.bn3), ("conv1", self.conv1), ("bn1", self.bn1)]
        if self._structure == "csla":
            return [("conv3", self.conv3), ("scale3", self.scale3), ("conv1", self.conv1), ("scale1", self.scale1)]
        return [("conv", self.conv)]


class GhostBlock:
    """Pointwise conv + depthwise 3x3 sub-block, halves concatenated."""

    def __init__(self, cin, cout, stride, variant, dtype, rng, trainable_scales=False, with_bias=False):
        self.variant = variant
        self.stride = stride
        half = cout // 2
        self.half = half
        structure = "plain" if variant == "repopt" else variant
        self.pw = Conv2dLayer(he_uniform(rng, (half, cin, 1, 1), cin, dtype), stride=stride, pad=0)
        if structure == "rep_tr":
            self.dw = Conv2dLayer(he_uniform(rng, (half, 1, 3, 3), 9, dtype), stride=1, pad=1, groups=half)
            self.bn_dw = BatchNormLayer(half, dtype)
            self.bn_id = BatchNormLayer(half, dtype)
        elif structure == "csla":
            self.dw = Conv2dLayer(he_uniform(rng, (half, 1, 3, 3), 9, dtype), stride=1, pad=1, groups=half)
            self.dw_const = ChannelScaleLayer(half, dtype, trainable=False)
            self.dw_scale = ChannelScaleLayer(half, dtype, trainable=True)
        elif structure == "plain":
            bias = np.zeros(half, dtype=dtype) if with_bias else None
            self.dw = Conv2dLayer(he_uniform(rng, (half, 1, 3, 3), 9, dtype), bias, stride=1, pad=1, groups=half)
        else:
            raise ShapeError(f"unsupported ghost block variant {variant!r}")
        self.relu1 = ReLULayer()
        self.relu2 = ReLULayer()
        self._structure = structure

    def forward(self, x, mode="train"):
        p = self.relu1.forward(self.pw.forward(x, mode), mode)
        if self._structure == "rep_tr":
            pre = self.bn_dw.forward(self.dw.forward(p, mode), mode) + self.bn_id.forward(p, mode)
        elif self._structure == "csla":
            pre = self.dw_const.forward(self.dw.forward(p, mode), mode) + self.dw_scale.forward(p, mode)
        else:
            pre = self.dw.forward(p, mode)
        d = self.relu2.forward(pre, mode)
        return np.concatenate([p, d], axis=1)

    def backward(self, dy):
        dp_direct = dy[:, : self.half]
        dpre = self.relu2.backward(np.ascontiguousarray(dy[:, self.half :]))
        if self._structure == "rep_tr":
            dp_branch = self.dw.backward(self.bn_dw.backward(dpre)) + self.bn_id.backward(dpre)
        elif self._structure == "csla":
            dp_branch = self.dw.backward(self.dw_const.backward(dpre)) + self.dw_scale.backward(dpre)
        else:
            dp_branch = self.dw.backward(dpre)
        return self.pw.backward(self.relu1.backward(dp_direct + dp_branch))

    def sublayers(self):
        out = [("pw", self.pw)]
        if self._structure == "rep_tr":
            out += [("dw", self.dw), ("bn_dw", self.bn_dw), ("bn_id", self.bn_id)]
        elif self._structure == "csla":
            out += [("dw", self.dw), ("dw_const", self.dw_const), ("dw_scale", self.dw_scale)]
        else:
            out += [("dw", self.dw)]
        return out


class Model:
    """A stack of stage blocks plus a pooled linear classifier head."""

    def __init__(self, spec, variant, seed, dtype="fp64", trainable_scales=False, with_bias=False):
        if variant not in VARIANTS:
            raise ShapeError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        np_dtype = resolve_dtype(dtype)
        self.spec = spec
        self.variant = variant
        self.dtype = np_dtype
        self.grad_mult = None
        rng = np.random.default_rng(seed)
        block_cls = VggBlock if spec.family == "vgg_micro" else GhostBlock
        self.blocks = []
        cin = spec.in_channels
        for si, (width, nblocks) in enumerate(zip(spec.widths, spec.blocks_per_stage)):
            for bi in range(nblocks):
                stride = 2 if bi == 0 else 1
                block = block_cls(
                    cin, width, stride, variant, np_dtype, rng,
                    trainable_scales=trainable_scales, with_bias=with_bias,
                )
                self.blocks.append((f"stage{si}/block{bi}", block))
                cin = width
        self.head = LinearLayer(
            he_uniform(rng, (spec.classes, cin), cin, np_dtype),
            np.zeros(spec.classes, dtype=np_dtype),
        )
        self._pool_shape = None

    def forward(self, x, mode="train"):
        n, c, h, w = x.shape
        if c != self.spec.in_channels or h != self.spec.resolution or w != self.spec.resolution:
            raise ShapeError(
                f"input {x.shape} does not match spec ({self.spec.in_channels}, {self.spec.resolution}, {self.spec.resolution})"
            )
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        for _, block in self.blocks:
            x = block.forward(x, mode)
        pooled, self._pool_shape = ops.global_avg_pool(x)
        return self.head.forward(pooled, mode)

    def backward(self, dlogits):
        dx = self.head.backward(dlogits)
        dx = ops.global_avg_pool_backward(dx, self._pool_shape)
        for _, block in reversed(self.blocks):
            dx = block.backward(dx)
        return dx

    def parameter_list(self):
        out = []
        for path, block in self.blocks:
            for lname, layer in block.sublayers():
                for pname, tensor in layer.named_params():
                    out.append((f"{path}/{lname}/{pname}", tensor))
        for pname, tensor in self.head.named_params():
            out.append((f"head/linear/{pname}", tensor))
        return out

    def state_dict(self):
        out = {}
        for path, block in self.blocks:
            for lname, layer in block.sublayers():
                for sname, arr in layer.named_state():
                    out[f"{path}/{lname}/{sname}"] = arr.copy()
        for sname, arr in self.head.named_state():
            out[f"head/linear/{sname}"] = arr.copy()
        return out

    def load_state_dict(self, state):
        own = self._state_slots()
        if set(state) != set(own):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeError(f"state dict does not match model: missing={missing[:4]} extra={extra[:4]}")
        for pid, arr in state.items():
            slot_owner, attr = own[pid]
            arr = np.asarray(arr)
            current = getattr(slot_owner, attr)
            target = current.data if isinstance(current, Tensor) else current
            if arr.shape != target.shape:
                raise ShapeError(f"parameter {pid}: shape {arr.shape} does not match {target.shape}")
            if isinstance(current, Tensor):
                current.data = np.ascontiguousarray(arr.astype(self.dtype))
            else:
                setattr(slot_owner, attr, np.ascontiguousarray(arr.astype(self.dtype)))

    def _state_slots(self):
        slots = {}
        for path, block in self.blocks:
            for lname, layer in block.sublayers():
                for sname, _ in layer.named_state():
                    if sname in ("running_mean", "running_var"):
                        slots[f"{path}/{lname}/{sname}"] = (layer, sname)
                    else:
                        attr = {"w": "w", "b": "b", "gamma": "gamma", "beta": "beta", "s": "s"}[sname]
                        slots[f"{path}/{lname}/{sname}"] = (layer, attr)
        for sname, _ in self.head.named_state():
            slots[f"head/linear/{sname}"] = (self.head, sname)
        return slots

    def zero_grad(self):
        for _, tensor in self.parameter_list():
            tensor.zero_grad()

    def num_parameters(self):
        return sum(int(np.prod(t.shape)) for _, t in self.parameter_list())


def build_model(spec, variant, seed, dtype="fp64", trainable_scales=False, with_bias=False):
    """Construct a model. The repopt variant is initialized by fusing the
    csla model built from the same seed, and carries its gradient-multiplier
    spec in ``model.grad_mult``."""
    if variant == "repopt":
        from .reparam import csla_fuse_model

        csla = build_model(spec, "csla", seed, dtype)
        state, gm = csla_fuse_model(csla)
        model = Model(spec, "repopt", seed, dtype, with_bias=with_bias)
        model.load_state_dict(state)
        model.grad_mult = gm
        return model
    return Model(spec, variant, seed, dtype, trainable_scales=trainable_scales, with_bias=with_bias)
