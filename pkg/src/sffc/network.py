"""Three convolutional blocks plus a linear head, as composable pieces.

Every block is BN (non-affine) -> conv -> ReLU -> pool; the first block also
inserts the multi-copy dropout sampler right after its BN, and that sampler
stays active at inference.  The copy axis is folded into the batch axis for
later blocks and for BN, so the rest of the stack never needs to know about
it.  Frozen blocks run in eval mode under a no-grad regime, which is what
confines gradients to whichever block is currently being trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .goodness import ProjectionBasis
from .tensor import BatchNormState, Parameter, Tensor

INPUT_SHAPES = {
    "mnist": (1, 28, 28),
    "cifar10": (3, 32, 32),
    "cifar100": (3, 32, 32),
}

CLASS_COUNTS = {"mnist": 10, "cifar10": 10, "cifar100": 100}

BASE_CHANNELS = 96  # first block; each later block multiplies by 4


@dataclass
class BlockSpec:
    kind: str                       # conv_block | classifier
    bn: bool = True
    dropout_p: float = 0.0
    n_copies: int = 1
    conv: tuple | None = None       # (out_channels, kernel, stride, padding, groups)
    activation: str = "relu"
    pool: tuple | None = None       # (mode, k, stride, padding)


@dataclass
class NetworkConfig:
    dataset: str
    blocks: list[BlockSpec]
    classifier_in_dims: int
    n_classes: int
    channel_scale: float = 1.0
    classifier_dropout_p: float = 0.5

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(b.conv[0] for b in self.blocks)

    @staticmethod
    def for_dataset(dataset: str, channel_scale: float = 1.0, n_copies: int = 20,
                    dropout_p: float = 0.2) -> "NetworkConfig":
        if dataset not in INPUT_SHAPES:
            raise ValueError(f"unknown dataset {dataset!r}")
        c1 = BASE_CHANNELS * channel_scale
        if abs(c1 - round(c1)) > 1e-9 or round(c1) < 1:
            raise ValueError(f"channel_scale {channel_scale} does not yield integer channels")
        c1 = int(round(c1))
        blocks = [
            BlockSpec("conv_block", bn=True, dropout_p=dropout_p, n_copies=n_copies,
                      conv=(c1, 5, 1, 2, 1), pool=("max", 4, 2, 1)),
            BlockSpec("conv_block", bn=True,
                      conv=(4 * c1, 3, 1, 1, c1), pool=("max", 4, 2, 1)),
            BlockSpec("conv_block", bn=True,
                      conv=(16 * c1, 3, 1, 1, 4 * c1), pool=("avg", 2, 2, 0)),
        ]
        shapes = infer_shapes(blocks, INPUT_SHAPES[dataset])
        c, h, w = shapes[-1]
        return NetworkConfig(
            dataset=dataset,
            blocks=blocks,
            classifier_in_dims=c * h * w,
            n_classes=CLASS_COUNTS[dataset],
            channel_scale=channel_scale,
        )


def infer_shapes(blocks: list[BlockSpec], input_shape: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Output (C, H, W) after each block, following the conv/pool arithmetic."""
    c, h, w = input_shape
    out = []
    for spec in blocks:
        cout, k, stride, pad, groups = spec.conv
        if c % groups:
            raise ValueError(f"groups={groups} does not divide {c} input channels")
        h = (h + 2 * pad - k) // stride + 1
        w = (w + 2 * pad - k) // stride + 1
        c = cout
        if spec.pool is not None:
            _, pk, ps, pp = spec.pool
            h = (h + 2 * pp - pk) // ps + 1
            w = (w + 2 * pp - pk) // ps + 1
        out.append((c, h, w))
    return out


class LinearHead:
    """Flatten -> dropout (train only) -> linear, applied per noisy copy."""

    def __init__(self, in_dims: int, n_classes: int, rng: np.random.Generator,
                 dropout_p: float = 0.5, name: str = "classifier"):
        dtype = T.default_dtype()
        bound = 1.0 / np.sqrt(in_dims)
        self.weight = Parameter(f"{name}.weight",
                                rng.uniform(-bound, bound, size=(n_classes, in_dims)).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(n_classes, dtype=dtype))
        self.dropout_p = dropout_p
        self.in_dims = in_dims
        self.n_classes = n_classes

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, features: Tensor, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
        b, n = features.data.shape[:2]
        flat = features.reshape(b * n, -1)
        if flat.data.shape[1] != self.in_dims:
            raise ValueError(f"head expects {self.in_dims} dims, got {flat.data.shape[1]}")
        if mode == "train" and self.dropout_p > 0:
            if rng is None:
                raise ValueError("training-mode head needs a generator for dropout")
            flat = T.dropout(flat, self.dropout_p, rng)
        logits = T.linear(flat, self.weight.tensor, self.bias.tensor)
        return logits.reshape(b, n, self.n_classes)


class Network:
    """Parameters, BN states and (once training starts) projection bases."""

    def __init__(self, config: NetworkConfig, params: dict[str, Parameter],
                 bn_states: list[BatchNormState], classifier: LinearHead):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.classifier = classifier
        self.bases: list[ProjectionBasis | None] | None = None
        self.block_shapes = infer_shapes(config.blocks, INPUT_SHAPES[config.dataset])

    @property
    def n_blocks(self) -> int:
        return len(self.config.blocks)

    def block_param(self, index: int) -> Parameter:
        return self.params[f"conv{index + 1}.weight"]

    def block_kernels(self, index: int) -> np.ndarray:
        w = self.block_param(index).data
        return w.reshape(w.shape[0], -1)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def build_network(config: NetworkConfig, seed: int) -> Network:
    """Initialize all parameters deterministically from one seed.

    Conv kernels are Kaiming-uniform over fan-in (no bias); the linear head
    is uniform +-1/sqrt(Din) with a zero bias.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1417)))
    dtype = T.default_dtype()
    in_c = INPUT_SHAPES[config.dataset][0]
    params: dict[str, Parameter] = {}
    bn_states: list[BatchNormState] = []
    c = in_c
    for i, spec in enumerate(config.blocks):
        cout, k, _, _, groups = spec.conv
        fan_in = (c // groups) * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, c // groups, k, k)).astype(dtype)
        params[f"conv{i + 1}.weight"] = Parameter(f"conv{i + 1}.weight", w)
        bn_states.append(BatchNormState(c, dtype=dtype))
        c = cout
    shapes = infer_shapes(config.blocks, INPUT_SHAPES[config.dataset])
    cf, hf, wf = shapes[-1]
    if cf * hf * wf != config.classifier_in_dims:
        raise ValueError(
            f"classifier expects {config.classifier_in_dims} input dims but blocks "
            f"produce {cf}x{hf}x{wf} = {cf * hf * wf}"
        )
    head = LinearHead(config.classifier_in_dims, config.n_classes, rng,
                      dropout_p=config.classifier_dropout_p)
    params[head.weight.name] = head.weight
    params[head.bias.name] = head.bias
    return Network(config, params, bn_states, head)


def block_forward(net: Network, index: int, x: Tensor, mode: str = "eval",
                  rng: np.random.Generator | None = None,
                  mask: np.ndarray | None = None,
                  sample_noise: bool = True) -> Tensor:
    """One block; input is [B,C,H,W] for block 0, [B,N,C,H,W] after.

    Returns [B,N,C',H',W'].  ``mode`` drives BN (batch stats + running update
    vs running stats); the copy sampler in block 0 is active regardless of
    mode unless ``sample_noise`` is off (single clean pass).
    """
    spec = net.config.blocks[index]
    if index == 0:
        if x.data.ndim != 4:
            raise ValueError(f"block 1 expects [B,C,H,W], got shape {x.data.shape}")
        b = x.data.shape[0]
        h = T.batchnorm2d(x, net.bn_states[0], mode) if spec.bn else x
        if sample_noise:
            h = T.dropout_copies(h, spec.dropout_p, spec.n_copies, rng=rng, mask=mask)
        else:
            h = h.reshape(b, 1, *x.data.shape[1:])
        n = h.data.shape[1]
        h = h.reshape(b * n, *h.data.shape[2:])
    else:
        if x.data.ndim != 5:
            raise ValueError(f"block {index + 1} expects [B,N,C,H,W], got shape {x.data.shape}")
        b, n = x.data.shape[:2]
        h = x.reshape(b * n, *x.data.shape[2:])
        if spec.bn:
            h = T.batchnorm2d(h, net.bn_states[index], mode)
    cout, k, stride, pad, groups = spec.conv
    h = T.conv2d(h, net.block_param(index).tensor, stride=stride, padding=pad, groups=groups)
    h = T.relu(h, inplace=True)  # conv output is exclusively ours
    if spec.pool is not None:
        pmode, pk, ps, pp = spec.pool
        h = T.pool2d(h, pmode, pk, ps, pp)
    return h.reshape(b, n, *h.data.shape[1:])


def features_forward(net: Network, x: Tensor | np.ndarray, stop_at_block: int = 3,
                     train_block: int | None = None, bp: bool = False,
                     rng: np.random.Generator | None = None,
                     mask: np.ndarray | None = None,
                     sample_noise: bool = True) -> Tensor:
    """Run blocks 1..stop_at_block.

    With ``train_block`` set, every other block runs in eval mode under
    no-grad (so its output is detached and its parameters can never receive
    gradient); with ``bp`` all blocks run in train mode on one graph.
    """
    if not 1 <= stop_at_block <= net.n_blocks:
        raise ValueError(f"stop_at_block must be in [1, {net.n_blocks}]")
    h = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(stop_at_block):
        kwargs = dict(rng=rng, mask=mask, sample_noise=sample_noise) if i == 0 else {}
        if bp or (train_block is not None and i == train_block):
            h = block_forward(net, i, h, mode="train", **kwargs)
        else:
            with T.no_grad():
                h = block_forward(net, i, h, mode="eval", **kwargs)
    return h


def classifier_forward(net: Network, features: Tensor, mode: str = "eval",
                       rng: np.random.Generator | None = None) -> Tensor:
    """Per-copy logits [B,N,n_classes] from block-3 features [B,N,C,H,W]."""
    return net.classifier.forward(features, mode=mode, rng=rng)
