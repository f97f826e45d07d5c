"""Adaptive spatial attention: squeeze-excitation channel gating, a
two-round four-direction IRNN context sweep, an attention-map branch,
and a residual wrapper around the whole thing.

Directional sweeps follow the running-ReLU recurrence
h[i,j] <- max(W_rec @ h[i,j-1] + p[i,j], 0), with the recurrent matrix
of every direction initialised to the identity. One round reaches the
row and column of each pixel; chaining two rounds makes every output
pixel depend on the whole map.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    global_avg_pool,
    matvec,
    mul,
    narrow,
    relu,
    reshape,
    sigmoid,
)

DIRECTIONS = ("right", "left", "down", "up")


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class SEBlock:
    """Channelwise gate: squeeze to a descriptor, excite through a
    two-layer bottleneck with sigmoid, rescale the input channels."""

    def __init__(self, channels: int, reduction_ratio: int = 4, rng: np.random.Generator | None = None):
        if channels % reduction_ratio != 0:
            raise ValueError(
                f"SEBlock: channels {channels} not divisible by reduction ratio {reduction_ratio}")
        self.channels = channels
        self.reduction_ratio = reduction_ratio
        hidden = channels // reduction_ratio
        rng = rng or np.random.default_rng(0)
        self.reduce_weights = Tensor(_he(rng, (hidden, channels), channels), requires_grad=True)
        self.expand_weights = Tensor(_he(rng, (channels, hidden), hidden), requires_grad=True)

    def params(self) -> dict:
        return {"reduce": self.reduce_weights, "expand": self.expand_weights}

    def scale_vector(self, x: Tensor) -> Tensor:
        """The per-channel gate s in (0,1)^C, shape (N, C)."""
        n, c = x.shape[0], x.shape[1]
        if c != self.channels:
            raise ValueError(f"SEBlock: input has {c} channels, block expects {self.channels}")
        z = reshape(global_avg_pool(x), (n, c))
        hidden = relu(matvec(self.reduce_weights, z, axis=1))
        return sigmoid(matvec(self.expand_weights, hidden, axis=1))


def se_forward(block: SEBlock, x: Tensor) -> Tensor:
    """Squeeze-excite gating: returns s_c * u_c for each channel c."""
    s = block.scale_vector(x)
    return mul(x, reshape(s, (x.shape[0], x.shape[1], 1, 1)))


class IrnnBlock:
    """Four direction-independent recurrences over a feature map.

    Recurrent matrices start as the identity; the input projection is
    shared by all four directions and also starts as the identity, so a
    freshly built block sweeps the raw input values.
    """

    def __init__(self, channels: int):
        self.channels = channels
        eye = np.eye(channels)
        self.input_proj = Tensor(eye.copy(), requires_grad=True)
        self.recurrent = {d: Tensor(eye.copy(), requires_grad=True) for d in DIRECTIONS}

    def params(self) -> dict:
        out = {"input_proj": self.input_proj}
        for d in DIRECTIONS:
            out[f"recurrent_{d}"] = self.recurrent[d]
        return out


def _sweep(weight: Tensor, projected: Tensor, axis: int, reverse: bool) -> Tensor:
    """Run the running-ReLU recurrence along one spatial axis."""
    steps = projected.shape[axis]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    slots: list = [None] * steps
    h = None
    for idx in order:
        p = narrow(projected, axis, idx, 1)
        h = relu(p) if h is None else relu(add(matvec(weight, h, axis=1), p))
        slots[idx] = h
    return concat(slots, axis=axis)


def irnn_pass(block: IrnnBlock, x: Tensor) -> Tensor:
    """Sweep all four directions and stack the results on the channel
    axis in DIRECTIONS order: (N, C, H, W) -> (N, 4C, H, W)."""
    projected = matvec(block.input_proj, x, axis=1)
    outs = [
        _sweep(block.recurrent["right"], projected, axis=3, reverse=False),
        _sweep(block.recurrent["left"], projected, axis=3, reverse=True),
        _sweep(block.recurrent["down"], projected, axis=2, reverse=False),
        _sweep(block.recurrent["up"], projected, axis=2, reverse=True),
    ]
    return concat(outs, axis=1)


class SpatialAttentionCore:
    """Two IRNN rounds plus the parallel attention-map branch."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c = channels
        self.channels = c
        self.irnn1 = IrnnBlock(c)
        self.irnn2 = IrnnBlock(c)
        # 4C -> C bookkeeping after each round; the post-gate projection
        # carries no bias so a zero attention map annihilates the output.
        self.fuse1_kernel = Tensor(_he(rng, (c, 4 * c, 1, 1), 4 * c), requires_grad=True)
        self.fuse1_bias = Tensor(np.zeros(c), requires_grad=True)
        self.map_kernel = Tensor(_he(rng, (1, c, 1, 1), c), requires_grad=True)
        self.map_bias = Tensor(np.zeros(1), requires_grad=True)
        self.out_kernel = Tensor(_he(rng, (c, 4 * c, 1, 1), 4 * c), requires_grad=True)

    def params(self) -> dict:
        out = {}
        for name, block in (("irnn1", self.irnn1), ("irnn2", self.irnn2)):
            for key, value in block.params().items():
                out[f"{name}.{key}"] = value
        out["fuse1.kernel"] = self.fuse1_kernel
        out["fuse1.bias"] = self.fuse1_bias
        out["map.kernel"] = self.map_kernel
        out["map.bias"] = self.map_bias
        out["out.kernel"] = self.out_kernel
        return out


def spatial_attention(core: SpatialAttentionCore, x: Tensor):
    """Returns (features, attention_map).

    Round one gathers row/column context, round two widens it to the
    full map; a 1x1-conv + sigmoid branch on the input produces the
    single-channel attention map that gates the second round's output
    before it is projected back to C channels through a ReLU.
    """
    round1 = irnn_pass(core.irnn1, x)
    fused1 = relu(conv2d(round1, core.fuse1_kernel, bias=core.fuse1_bias))
    round2 = irnn_pass(core.irnn2, fused1)
    attention_map = sigmoid(conv2d(x, core.map_kernel, bias=core.map_bias))
    gated = mul(round2, attention_map)
    features = relu(conv2d(gated, core.out_kernel))
    return features, attention_map


class AdaptiveAttention:
    """Residual wrapper: ReLU(x + SE(spatial attention(x))).

    When att_channels is narrower than the input, 1x1 entry/exit
    projections bracket the branch so the sweeps run at reduced width;
    the skip path is untouched either way.
    """

    def __init__(self, channels: int, att_channels: int | None = None,
                 reduction_ratio: int = 4, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        inner = att_channels or channels
        self.att_channels = inner
        if inner != channels:
            self.entry_kernel = Tensor(_he(rng, (inner, channels, 1, 1), channels), requires_grad=True)
            self.entry_bias = Tensor(np.zeros(inner), requires_grad=True)
            self.exit_kernel = Tensor(_he(rng, (channels, inner, 1, 1), inner, gain=0.5), requires_grad=True)
            self.exit_bias = Tensor(np.zeros(channels), requires_grad=True)
        else:
            self.entry_kernel = self.entry_bias = None
            self.exit_kernel = self.exit_bias = None
        self.core = SpatialAttentionCore(inner, rng=rng)
        self.se = SEBlock(inner, reduction_ratio=reduction_ratio, rng=rng)

    def params(self) -> dict:
        out = {}
        if self.entry_kernel is not None:
            out["entry.kernel"] = self.entry_kernel
            out["entry.bias"] = self.entry_bias
            out["exit.kernel"] = self.exit_kernel
            out["exit.bias"] = self.exit_bias
        for key, value in self.core.params().items():
            out[f"core.{key}"] = value
        for key, value in self.se.params().items():
            out[f"se.{key}"] = value
        return out


def adaptive_attention_forward(module: AdaptiveAttention, x: Tensor) -> Tensor:
    if x.shape[1] != module.channels:
        raise ValueError(
            f"AdaptiveAttention: input has {x.shape[1]} channels, module expects {module.channels}")
    inner = x
    if module.entry_kernel is not None:
        inner = conv2d(x, module.entry_kernel, bias=module.entry_bias)
    features, _ = spatial_attention(module.core, inner)
    branch = se_forward(module.se, features)
    if module.exit_kernel is not None:
        branch = conv2d(branch, module.exit_kernel, bias=module.exit_bias)
    return relu(add(x, branch))
