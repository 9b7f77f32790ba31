"""
Layers with parameters.

``Module`` registers ``Parameter`` and ``Module`` attributes in assignment
order, so dotted parameter names (``decoder.conv_a.weight``) follow the
construction order of the network. Leaf layers know how to cost
themselves and how to drop channels for pruning.

Usage:
    conv = Conv2d(64, 64, 3, dilation=2, rng=rng)
    y = conv(x)
    for name, p in model.named_parameters():
        ...
"""

from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import ops
from .cost import CostReport, Shape, join, numel
from .exceptions import ShapeError
from .tensor import Parameter, Tensor


class Module:
    """Base class for layers and blocks."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value) -> None:
        params: Dict[str, Parameter] = self.__dict__.get("_params", {})
        children: Dict[str, Module] = self.__dict__.get("_children", {})
        params.pop(name, None)
        children.pop(name, None)
        if isinstance(value, Parameter):
            params[name] = value
        elif isinstance(value, Module):
            children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        raise NotImplementedError(f"{type(self).__name__} does not implement cost()")

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(join(prefix, name))

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield join(prefix, name), p
        for name, child in self._children.items():
            yield from child.named_parameters(join(prefix, name))

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, child in self._children.items():
            yield from child.named_buffers(join(prefix, name))

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        child = self._children.get(head)
        if child is None or not rest:
            raise KeyError(name)
        child.set_buffer(rest, value)

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Sequential(Module):
    """Ordered container; children are named ``0``, ``1``, ..."""

    def __init__(self, *modules: Module):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._children)), module)

    def __iter__(self) -> Iterator[Module]:
        return iter(list(self._children.values()))

    def __len__(self) -> int:
        return len(self._children)

    def __getitem__(self, index: int) -> Module:
        return list(self._children.values())[index]

    def forward(self, x):
        for m in self:
            x = m(x)
        return x

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        for key, m in self._children.items():
            shape = m.cost(shape, report, join(name, key))
        return shape


# Segments of a layer's input channel axis: a ChannelGroup (prunable) or a
# fixed number of channels.
Segment = Union["ChannelGroup", int]  # noqa: F821


def _he_normal(rng: Optional[np.random.Generator], shape: Tuple[int, ...], fan_in: int,
               dtype) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """Square-kernel convolution, optionally dilated."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, dilation: int = 1, bias: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64,
                 padding: str = "same"):
        super().__init__()
        if kernel_size < 1 or in_channels < 1 or out_channels < 1:
            raise ShapeError(f"Conv2d: invalid geometry {in_channels}->{out_channels} k={kernel_size}")
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_he_normal(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        # Set on residual-final convolutions after masked pruning: output
        # channel i lands at position out_index[i] of a full_width tensor.
        self.out_index: Optional[np.ndarray] = None
        self.full_width = out_channels
        self.in_layout: List[Segment] = [in_channels]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)

    def scatter(self, y: Tensor) -> Tensor:
        """Re-insert zeros for channels removed by masked pruning."""
        if self.out_index is None:
            return y
        return ops.expand_channels(y, self.out_index, self.full_width)

    def output_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"Conv2d: input has {c} channels, weight expects {self.in_channels}")
        pad = ops.same_padding(self.kernel_size, self.dilation) if self.padding == "same" else 0
        ho = ops.conv_output_size(h, self.kernel_size, self.stride, self.dilation, pad)
        wo = ops.conv_output_size(w, self.kernel_size, self.stride, self.dilation, pad)
        return (n, self.out_channels, ho, wo)

    def param_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        out = self.output_shape(shape)
        macs = numel(out) * self.in_channels * self.kernel_size ** 2
        report.add("conv2d", name, self.param_count(), 2 * macs)
        if self.out_index is not None:
            return (out[0], self.full_width, out[2], out[3])
        return out

    def select_out(self, index: np.ndarray) -> None:
        self.weight = Parameter(self.weight.data[index].copy(), self.weight.name, self.weight.trainable)
        if self.bias is not None:
            self.bias = Parameter(self.bias.data[index].copy(), self.bias.name, self.bias.trainable)
        if self.out_index is not None:
            self.out_index = self.out_index[index]

    def select_in(self, index: np.ndarray) -> None:
        self.weight = Parameter(self.weight.data[:, index].copy(), self.weight.name, self.weight.trainable)

    def __repr__(self) -> str:
        return (f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
                f"stride={self.stride}, dilation={self.dilation})")


class ConvTranspose2d(Module):
    """Learned ×stride upsampling; weight is Cin×Cout×2s×2s."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2,
                 bias: bool = False, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        super().__init__()
        if stride not in (2, 4):
            raise ShapeError(f"ConvTranspose2d: stride must be 2 or 4, got {stride}")
        self.stride = stride
        k = 2 * stride
        self.weight = Parameter(_he_normal(rng, (in_channels, out_channels, k, k),
                                           in_channels * k * k, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.in_layout: List[Segment] = [in_channels]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride)

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"ConvTranspose2d: input has {c} channels, weight expects {self.in_channels}")
        macs = n * h * w * self.in_channels * self.out_channels * (2 * self.stride) ** 2
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        report.add("conv_transpose2d", name, params, 2 * macs)
        return (n, self.out_channels, h * self.stride, w * self.stride)

    def select_out(self, index: np.ndarray) -> None:
        self.weight = Parameter(self.weight.data[:, index].copy(), self.weight.name, self.weight.trainable)
        if self.bias is not None:
            self.bias = Parameter(self.bias.data[index].copy(), self.bias.name, self.bias.trainable)

    def select_in(self, index: np.ndarray) -> None:
        self.weight = Parameter(self.weight.data[index].copy(), self.weight.name, self.weight.trainable)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = ops.RunningStats(channels, dtype)
        self.in_layout: List[Segment] = [channels]

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, self.training)

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        if shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2d: input has {shape[1]} channels, layer has {self.channels}")
        report.elementwise("batch_norm", name, shape, params=2 * self.channels)
        return shape

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        yield join(prefix, "running_mean"), self.stats.mean
        yield join(prefix, "running_var"), self.stats.var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.stats.mean = value.copy()
        elif name == "running_var":
            self.stats.var = value.copy()
        else:
            raise KeyError(name)

    def select_in(self, index: np.ndarray) -> None:
        self.gamma = Parameter(self.gamma.data[index].copy(), self.gamma.name, self.gamma.trainable)
        self.beta = Parameter(self.beta.data[index].copy(), self.beta.name, self.beta.trainable)
        self.stats.mean = self.stats.mean[index].copy()
        self.stats.var = self.stats.var[index].copy()


def bn_relu(bn: BatchNorm2d, x: Tensor) -> Tensor:
    return ops.relu(bn(x))


def bn_relu_cost(bn: BatchNorm2d, shape: Shape, report: CostReport, name: str) -> Shape:
    bn.cost(shape, report, name)
    report.elementwise("relu", join(name, "relu"), shape)
    return shape
