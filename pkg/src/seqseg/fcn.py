"""Miniature residual fully convolutional network with skip prediction heads.

The network is a stride-2 stem followed by residual stages separated by 2x2
max pools. A 1x1 prediction head sits on the lowest-resolution feature map
and on each tapped stage; head outputs are merged in logit space by repeated
fixed bilinear upsampling and addition, then upsampled to input resolution.

Layer objects hold their parameters and (optionally) forward caches; the
whole model exposes flat named-tensor views for the optimizer and the
checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigurationError, ContractViolation
from .tensor import BatchNormParams, KernelBank, check_tensor4, new_kernel_bank


@dataclass
class FcnConfig:
    num_classes: int = 4
    in_channels: int = 3
    input_hw: tuple = (48, 64)
    stem_channels: int = 16
    stem_kernel: int = 7
    stage_blocks: tuple = (3, 3, 3)
    stage_channels: tuple = (16, 32, 32)
    skip_taps: tuple = (0, 1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.input_hw = tuple(self.input_hw)
        self.stage_blocks = tuple(self.stage_blocks)
        self.stage_channels = tuple(self.stage_channels)
        self.skip_taps = tuple(self.skip_taps)
        n = len(self.stage_blocks)
        if n < 2 or len(self.stage_channels) != n:
            raise ConfigurationError("need >= 2 stages with matching channel list")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if list(self.skip_taps) != sorted(set(self.skip_taps)):
            raise ConfigurationError("skip_taps must be distinct and ordered")
        if any(t < 0 or t >= n - 1 for t in self.skip_taps):
            raise ConfigurationError("skip_taps must index stages before the last one")
        h, w = self.input_hw
        d = self.total_downsample
        if h % d or w % d:
            raise ConfigurationError(f"input {h}x{w} must be divisible by downsampling {d}")
        downs = [self.stage_downsample(t) for t in self.skip_taps]
        chain = list(zip(downs + [self.total_downsample], [1] + downs))
        for deep, shallow in chain:
            if deep // shallow not in (2, 4, 8):
                raise ConfigurationError(
                    "skip tap spacing requires an unsupported upsampling factor"
                )

    @property
    def n_stages(self):
        return len(self.stage_blocks)

    @property
    def total_downsample(self):
        # stride-2 stem plus one 2x2 pool between consecutive stages
        return 2 * 2 ** (self.n_stages - 1)

    def stage_downsample(self, i):
        return 2 * 2 ** i


def fcn45_config(num_classes=5, input_hw=(240, 320)):
    """Full-scale configuration following the 45-layer table (constructible,
    not part of CI training)."""
    return FcnConfig(
        num_classes=num_classes,
        input_hw=input_hw,
        stem_channels=64,
        stem_kernel=7,
        stage_blocks=(4, 5, 5, 5),
        stage_channels=(64, 128, 128, 128),
        skip_taps=(1, 2),
    )


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, name, bank: KernelBank, stride=1):
        self.name = name
        self.bank = bank
        self.stride = stride
        self._x = None
        self.gw = None
        self.gb = None

    def forward(self, x, keep=False):
        if keep:
            self._x = x
        return ops.conv2d(x, self.bank, stride=self.stride)

    def backward(self, gy):
        dx, self.gw, self.gb = ops.conv2d_backward(gy, self._x, self.bank, stride=self.stride)
        return dx

    def named_tensors(self):
        yield self.name + "/w", self.bank.weights
        yield self.name + "/b", self.bank.bias

    def named_grads(self):
        yield self.name + "/w", self.gw
        yield self.name + "/b", self.gb

    def astype(self, dtype):
        return _Conv(self.name, self.bank.astype(dtype), self.stride)


class _BatchNorm:
    def __init__(self, name, params: BatchNormParams):
        self.name = name
        self.params = params
        self._x = None
        self._phase = None
        self.ggamma = None
        self.gbeta = None

    def forward(self, x, phase, keep=False):
        if keep:
            self._x = x
            self._phase = phase
        return ops.batchnorm(x, self.params, phase)

    def backward(self, gy):
        dx, self.ggamma, self.gbeta = ops.batchnorm_backward(gy, self._x, self.params, self._phase)
        return dx

    def named_tensors(self):
        p = self.params
        yield self.name + "/gamma", p.gamma
        yield self.name + "/beta", p.beta
        yield self.name + "/mean", p.running_mean
        yield self.name + "/var", p.running_var

    def trainable_tensors(self):
        yield self.name + "/gamma", self.params.gamma
        yield self.name + "/beta", self.params.beta

    def named_grads(self):
        yield self.name + "/gamma", self.ggamma
        yield self.name + "/beta", self.gbeta

    def astype(self, dtype):
        return _BatchNorm(self.name, self.params.astype(dtype))


class _Relu:
    def __init__(self):
        self._x = None

    def forward(self, x, keep=False):
        if keep:
            self._x = x
        return ops.pointwise(x, "relu")

    def backward(self, gy):
        return ops.pointwise_backward(gy, self._x, "relu")


class _ConvBnRelu:
    def __init__(self, name, rng, in_c, out_c, kernel, stride, cfg):
        self.conv = _Conv(name + "/conv", new_kernel_bank(rng, out_c, in_c, kernel, kernel), stride)
        self.bn = _BatchNorm(
            name + "/bn", BatchNormParams.identity(out_c, cfg.bn_momentum, cfg.bn_eps)
        )
        self.relu = _Relu()

    def forward(self, x, phase, keep=False):
        return self.relu.forward(self.bn.forward(self.conv.forward(x, keep), phase, keep), keep)

    def backward(self, gy):
        return self.conv.backward(self.bn.backward(self.relu.backward(gy)))

    def children(self):
        return [self.conv, self.bn]

    def astype(self, dtype):
        out = object.__new__(_ConvBnRelu)
        out.conv = self.conv.astype(dtype)
        out.bn = self.bn.astype(dtype)
        out.relu = _Relu()
        return out


class _ResidualBlock:
    """conv-BN-ReLU, conv-BN, add input, ReLU."""

    def __init__(self, name, rng, channels, cfg):
        self.conv1 = _Conv(name + "/conv1", new_kernel_bank(rng, channels, channels, 3, 3))
        self.bn1 = _BatchNorm(name + "/bn1", BatchNormParams.identity(channels, cfg.bn_momentum, cfg.bn_eps))
        self.relu1 = _Relu()
        self.conv2 = _Conv(name + "/conv2", new_kernel_bank(rng, channels, channels, 3, 3))
        self.bn2 = _BatchNorm(name + "/bn2", BatchNormParams.identity(channels, cfg.bn_momentum, cfg.bn_eps))
        self.relu_out = _Relu()

    def forward(self, x, phase, keep=False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, keep), phase, keep), keep)
        h = self.bn2.forward(self.conv2.forward(h, keep), phase, keep)
        return self.relu_out.forward(h + x, keep)

    def backward(self, gy):
        gs = self.relu_out.backward(gy)
        g = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(gs))
        )))
        return g + gs

    def children(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2]

    def astype(self, dtype):
        out = object.__new__(_ResidualBlock)
        out.conv1 = self.conv1.astype(dtype)
        out.bn1 = self.bn1.astype(dtype)
        out.relu1 = _Relu()
        out.conv2 = self.conv2.astype(dtype)
        out.bn2 = self.bn2.astype(dtype)
        out.relu_out = _Relu()
        return out


class _Stage:
    """Optional channel-adapting transition conv followed by residual blocks.

    The transition (conv-BN-ReLU, no residual) mirrors the unconnected conv
    that opens each post-pool group in the full-scale table; it is emitted
    only when the channel count changes so the desk-scale stages stay pure
    residual stacks.
    """

    def __init__(self, name, rng, in_c, channels, blocks, cfg):
        self.transition = None
        if in_c != channels:
            self.transition = _ConvBnRelu(name + "/trans", rng, in_c, channels, 3, 1, cfg)
        self.blocks = [_ResidualBlock(f"{name}/block{j}", rng, channels, cfg) for j in range(blocks)]

    def forward(self, x, phase, keep=False):
        if self.transition is not None:
            x = self.transition.forward(x, phase, keep)
        for b in self.blocks:
            x = b.forward(x, phase, keep)
        return x

    def backward(self, gy):
        for b in reversed(self.blocks):
            gy = b.backward(gy)
        if self.transition is not None:
            gy = self.transition.backward(gy)
        return gy

    def children(self):
        out = [] if self.transition is None else self.transition.children()
        for b in self.blocks:
            out.extend(b.children())
        return out

    def astype(self, dtype):
        out = object.__new__(_Stage)
        out.transition = None if self.transition is None else self.transition.astype(dtype)
        out.blocks = [b.astype(dtype) for b in self.blocks]
        return out


class _MaxPool:
    def __init__(self):
        self._arg = None
        self._shape = None

    def forward(self, x, keep=False):
        y, arg = ops.maxpool2(x)
        if keep:
            self._arg = arg
            self._shape = x.shape
        return y

    def backward(self, gy):
        return ops.maxpool2_backward(gy, self._arg, self._shape)


# ---------------------------------------------------------------------------
# logit bundle and merge
# ---------------------------------------------------------------------------

@dataclass
class LogitsBundle:
    """Per-resolution class logits: lowest-resolution map, one map per skip
    tap (ascending tap order), and the merged full-resolution map."""

    logits_low: np.ndarray
    skip_logits: tuple
    logits_full: np.ndarray
    tap_downsamples: tuple
    low_downsample: int


def merge_logits(low, skips, tap_downsamples, low_downsample):
    """Upsample-and-add merge in logit space, deepest tap first, then a final
    fixed bilinear upsample to input resolution."""
    x = low
    current = low_downsample
    for skip, d in zip(reversed(skips), reversed(tap_downsamples)):
        x = ops.bilinear_upsample(x, current // d) + skip
        current = d
    return ops.bilinear_upsample(x, current)


def merge_logits_backward(g_full, low_hw, skip_hws, tap_downsamples, low_downsample):
    """Transpose of merge_logits; returns (d_low, d_skips ascending order)."""
    downs = list(tap_downsamples)
    hws = list(skip_hws)
    if not downs:
        return ops.bilinear_upsample_backward(g_full, low_downsample, low_hw), ()
    g = ops.bilinear_upsample_backward(g_full, downs[0], hws[0])
    d_skips = []
    current = downs[0]
    for i in range(len(downs)):
        d_skips.append(g)
        src_hw = hws[i + 1] if i + 1 < len(downs) else low_hw
        src_down = downs[i + 1] if i + 1 < len(downs) else low_downsample
        g = ops.bilinear_upsample_backward(g, src_down // current, src_hw)
        current = src_down
    return g, tuple(d_skips)


def replace_low_logits(bundle: LogitsBundle, new_low):
    """Re-run only the merge stage with a substituted lowest-resolution map."""
    new_low = np.asarray(new_low)
    if new_low.shape != bundle.logits_low.shape:
        raise ContractViolation(
            f"replacement logits shape {new_low.shape} != {bundle.logits_low.shape}"
        )
    full = merge_logits(new_low, bundle.skip_logits, bundle.tap_downsamples, bundle.low_downsample)
    return LogitsBundle(new_low, bundle.skip_logits, full,
                        bundle.tap_downsamples, bundle.low_downsample)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class FcnModel:
    """Parameter container plus forward/backward for the full network."""

    def __init__(self, config: FcnConfig, rng):
        cfg = config
        self.config = cfg
        self.stem = _ConvBnRelu("stem", rng, cfg.in_channels, cfg.stem_channels,
                                cfg.stem_kernel, 2, cfg)
        self.stages = []
        in_c = cfg.stem_channels
        for i, (blocks, ch) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            self.stages.append(_Stage(f"stage{i}", rng, in_c, ch, blocks, cfg))
            in_c = ch
        self.pools = [_MaxPool() for _ in range(cfg.n_stages - 1)]
        self.tap_heads = {
            t: _Conv(f"head/tap{t}",
                     new_kernel_bank(rng, cfg.num_classes, cfg.stage_channels[t], 1, 1))
            for t in cfg.skip_taps
        }
        self.low_head = _Conv("head/low",
                              new_kernel_bank(rng, cfg.num_classes, cfg.stage_channels[-1], 1, 1))

    # -- structure ---------------------------------------------------------

    def _children(self):
        out = self.stem.children()
        for s in self.stages:
            out.extend(s.children())
        for t in sorted(self.tap_heads):
            out.append(self.tap_heads[t])
        out.append(self.low_head)
        return out

    def named_tensors(self):
        """All tensors in deterministic order (includes batchnorm running stats)."""
        for child in self._children():
            yield from child.named_tensors()

    def trainable_tensors(self):
        for child in self._children():
            it = child.trainable_tensors() if isinstance(child, _BatchNorm) else child.named_tensors()
            yield from it

    def named_grads(self):
        for child in self._children():
            yield from child.named_grads()

    def num_params(self):
        return sum(int(np.prod(a.shape)) for _, a in trainable_dict(self).items())

    def astype(self, dtype):
        out = object.__new__(FcnModel)
        out.config = self.config
        out.stem = self.stem.astype(dtype)
        out.stages = [s.astype(dtype) for s in self.stages]
        out.pools = [_MaxPool() for _ in self.pools]
        out.tap_heads = {t: h.astype(dtype) for t, h in self.tap_heads.items()}
        out.low_head = self.low_head.astype(dtype)
        return out

    # -- forward / backward -------------------------------------------------

    def forward(self, image, phase, keep_cache=False):
        cfg = self.config
        image = check_tensor4(image, channels=cfg.in_channels)
        if image.shape[2:] != cfg.input_hw:
            raise ContractViolation(
                f"image spatial dims {image.shape[2:]} != configured {cfg.input_hw}"
            )
        x = self.stem.forward(image, phase, keep_cache)
        stage_out = []
        for i, stage in enumerate(self.stages):
            x = stage.forward(x, phase, keep_cache)
            stage_out.append(x)
            if i < len(self.pools):
                x = self.pools[i].forward(x, keep_cache)
        logits_low = self.low_head.forward(x, keep_cache)
        skips = tuple(self.tap_heads[t].forward(stage_out[t], keep_cache) for t in cfg.skip_taps)
        taps_d = tuple(cfg.stage_downsample(t) for t in cfg.skip_taps)
        low_d = cfg.stage_downsample(cfg.n_stages - 1)
        full = merge_logits(logits_low, skips, taps_d, low_d)
        return LogitsBundle(logits_low, skips, full, taps_d, low_d)

    def backward(self, bundle: LogitsBundle, d_full):
        """Backprop from d(loss)/d(logits_full); returns d(loss)/d(image).

        Parameter gradients are left on the layers (see named_grads).
        """
        cfg = self.config
        low_hw = bundle.logits_low.shape[2:]
        skip_hws = [s.shape[2:] for s in bundle.skip_logits]
        d_low, d_skips = merge_logits_backward(
            d_full, low_hw, skip_hws, bundle.tap_downsamples, bundle.low_downsample
        )
        g = self.low_head.backward(d_low)
        tap_g = {t: self.tap_heads[t].backward(d_skips[j]) for j, t in enumerate(cfg.skip_taps)}
        for i in reversed(range(cfg.n_stages)):
            if i < cfg.n_stages - 1:
                g = self.pools[i].backward(g)
            if i in tap_g:
                g = g + tap_g[i]
            g = self.stages[i].backward(g)
        return self.stem.backward(g)


def trainable_dict(model):
    return dict(model.trainable_tensors())


def grads_dict(model):
    return dict(model.named_grads())


def build_fcn(config: FcnConfig, seed: int) -> FcnModel:
    """Deterministically initialize the network for a seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return FcnModel(config, rng)


def fcn_forward(model: FcnModel, image, phase, keep_cache=False) -> LogitsBundle:
    return model.forward(image, phase, keep_cache)
