"""
Differentiable layers and the layer-stack description of the embedding.

Convolution, max pooling, batch normalization and ReLU are enough to
express the five-layer embedding used by the Siamese matcher. All
layers are valid-mode (no padding). Convolution lowers to a window
gather ("im2col") followed by a matrix product.
"""

import logging
from typing import Literal, NamedTuple, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import ShapeError
from app.tensor import Tensor4, record_op, relu

logger = logging.getLogger(__name__)

LayerKind = Literal["conv", "pool", "bn", "relu"]


class LayerDesc(BaseModel):
    """One row of an embedding description."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LayerKind
    kernel: int | None = Field(default=None, ge=1)
    stride: int = Field(default=1, ge=1)
    in_channels: int | None = Field(default=None, ge=1)
    out_channels: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_fields(self) -> "LayerDesc":
        if self.kind == "conv" and None in (self.kernel, self.in_channels, self.out_channels):
            raise ValueError("conv layers need kernel, in_channels and out_channels")
        if self.kind == "pool" and self.kernel is None:
            raise ValueError("pool layers need a kernel size")
        if self.kind == "bn" and None not in (self.in_channels, self.out_channels):
            if self.in_channels != self.out_channels:
                raise ValueError("bn layers keep the channel count")
        return self


class LayerShape(NamedTuple):
    layer: str
    h: int
    w: int
    c: int


class EmbeddingConfig(BaseModel):
    """Ordered layer stack plus the exemplar/search input sizes it is meant for."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "custom"
    in_channels: int = Field(default=3, ge=1)
    exemplar_size: int = Field(ge=1)
    search_size: int = Field(ge=1)
    layers: tuple[LayerDesc, ...]
    default_scd_layers: tuple[int, ...] = ()

    @model_validator(mode="after")
    def _check_channel_chain(self) -> "EmbeddingConfig":
        channels = self.in_channels
        for name, desc in zip(self.layer_names, self.layers):
            if desc.kind == "conv":
                if desc.in_channels != channels:
                    raise ValueError(
                        f"{name}: in_channels={desc.in_channels} but the previous layer "
                        f"produces {channels} channels"
                    )
                channels = desc.out_channels
            elif desc.kind == "bn":
                declared = desc.in_channels or desc.out_channels
                if declared is not None and declared != channels:
                    raise ValueError(f"{name}: declared {declared} channels, input has {channels}")
        if self.conv_count == 0:
            raise ValueError("an embedding needs at least one conv layer")
        for layer in self.default_scd_layers:
            if not 1 <= layer <= self.conv_count:
                raise ValueError(f"default SCD layer {layer} is not a conv index of this embedding")
        return self

    @property
    def layer_names(self) -> list[str]:
        """conv{k}/pool{p}; bn and relu take the index of the conv they follow."""
        names = []
        conv_index = pool_index = 0
        for desc in self.layers:
            if desc.kind == "conv":
                conv_index += 1
                names.append(f"conv{conv_index}")
            elif desc.kind == "pool":
                pool_index += 1
                names.append(f"pool{pool_index}")
            else:
                names.append(f"{desc.kind}{conv_index}")
        return names

    @property
    def conv_count(self) -> int:
        return sum(1 for desc in self.layers if desc.kind == "conv")

    @property
    def out_channels(self) -> int:
        return [d.out_channels for d in self.layers if d.kind == "conv"][-1]

    @property
    def total_stride(self) -> int:
        stride = 1
        for desc in self.layers:
            if desc.kind in ("conv", "pool"):
                stride *= desc.stride
        return stride


def _output_size(size: int, kernel: int, stride: int) -> int:
    if size < kernel:
        return 0
    return (size - kernel) // stride + 1


def infer_shapes(cfg: EmbeddingConfig, input_hw: tuple[int, int]) -> list[LayerShape]:
    """
    Compute the activation size after every conv and pool layer.

    Batch norm and ReLU keep the shape and are not listed.

    Args:
        cfg: Embedding description
        input_hw: (rows, cols) of the input image

    Returns:
        One LayerShape per conv/pool layer, in stack order

    Raises:
        ShapeError: naming the first layer whose output would be empty
    """
    h, w = input_hw
    channels = cfg.in_channels
    rows = []
    for name, desc in zip(cfg.layer_names, cfg.layers):
        if desc.kind not in ("conv", "pool"):
            continue
        out_h = _output_size(h, desc.kernel, desc.stride)
        out_w = _output_size(w, desc.kernel, desc.stride)
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"{name}: {desc.kernel}x{desc.kernel} kernel with stride {desc.stride} "
                f"does not fit a {h}x{w} input"
            )
        h, w = out_h, out_w
        if desc.kind == "conv":
            channels = desc.out_channels
        rows.append(LayerShape(name, h, w, channels))
    return rows


def _conv(kernel: int, stride: int, c_in: int, c_out: int) -> LayerDesc:
    return LayerDesc(kind="conv", kernel=kernel, stride=stride, in_channels=c_in, out_channels=c_out)


def _assemble(
    name: str,
    convs: list[tuple[int, int, int, int]],
    pools: dict[int, tuple[int, int]],
    exemplar_size: int,
    search_size: int,
    default_scd_layers: tuple[int, ...],
    relu_after_bn: bool,
    bn_after_last_conv: bool,
) -> EmbeddingConfig:
    layers: list[LayerDesc] = []
    for index, (kernel, stride, c_in, c_out) in enumerate(convs, start=1):
        last = index == len(convs)
        layers.append(_conv(kernel, stride, c_in, c_out))
        if not last or bn_after_last_conv:
            layers.append(LayerDesc(kind="bn", in_channels=c_out, out_channels=c_out))
        if not last and relu_after_bn:
            layers.append(LayerDesc(kind="relu"))
        if index in pools:
            pool_kernel, pool_stride = pools[index]
            layers.append(LayerDesc(kind="pool", kernel=pool_kernel, stride=pool_stride))
    return EmbeddingConfig(
        name=name,
        in_channels=convs[0][2],
        exemplar_size=exemplar_size,
        search_size=search_size,
        layers=tuple(layers),
        default_scd_layers=default_scd_layers,
    )


def table1_preset(relu_after_bn: bool = True, bn_after_last_conv: bool = False) -> EmbeddingConfig:
    """Five conv layers, 127/255 inputs, 32 output channels."""
    return _assemble(
        "table1",
        convs=[(11, 2, 3, 96), (5, 1, 96, 256), (3, 1, 256, 384), (3, 1, 384, 384), (3, 1, 384, 32)],
        pools={1: (3, 2), 2: (3, 1)},
        exemplar_size=127,
        search_size=255,
        default_scd_layers=(3, 5),
        relu_after_bn=relu_after_bn,
        bn_after_last_conv=bn_after_last_conv,
    )


def desk_preset(relu_after_bn: bool = True, bn_after_last_conv: bool = False) -> EmbeddingConfig:
    """Three conv layers, 32/64 inputs, 16 channels at conv2 and conv3."""
    return _assemble(
        "desk",
        convs=[(5, 2, 3, 8), (3, 1, 8, 16), (3, 1, 16, 16)],
        pools={1: (3, 1)},
        exemplar_size=32,
        search_size=64,
        default_scd_layers=(3,),
        relu_after_bn=relu_after_bn,
        bn_after_last_conv=bn_after_last_conv,
    )


PRESETS = {"table1": table1_preset, "desk": desk_preset}


class Layer(Protocol):
    name: str

    def __call__(self, x: Tensor4, training: bool = True) -> Tensor4: ...

    def parameters(self) -> list[Tensor4]: ...

    def state(self) -> dict[str, np.ndarray]: ...

    def load_state(self, state: dict[str, np.ndarray]) -> None: ...


def _window_count(size: int, kernel: int, stride: int, name: str) -> int:
    count = _output_size(size, kernel, stride)
    if count < 1:
        raise ShapeError(f"{name}: kernel {kernel} with stride {stride} does not fit input size {size}")
    return count


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = x.shape[:2]
    col = np.empty((n, c, kh, kw, oh, ow))
    for y in range(kh):
        y_max = y + stride * oh
        for x_off in range(kw):
            x_max = x_off + stride * ow
            col[:, :, y, x_off] = x[:, :, y:y_max:stride, x_off:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)


def _col2im(col: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = shape[:2]
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(shape)
    for y in range(kh):
        y_max = y + stride * oh
        for x_off in range(kw):
            x_max = x_off + stride * ow
            img[:, :, y:y_max:stride, x_off:x_max:stride] += col[:, :, y, x_off]
    return img


class ConvLayer:
    """Valid-mode 2-D convolution (no kernel flip) with a per-channel bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int | tuple[int, int],
        stride: int = 1,
        rng: np.random.Generator | None = None,
        name: str = "conv",
    ):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if min(kh, kw) < 1 or stride < 1:
            raise ShapeError(f"{name}: kernel and stride must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_channels * kh * kw))
        self.name = name
        self.stride = stride
        self.weight = Tensor4(
            rng.normal(0.0, std, size=(out_channels, in_channels, kh, kw)),
            requires_grad=True,
            name=f"{name}.weight",
            copy=False,
        )
        self.bias = Tensor4.zeros((1, out_channels, 1, 1), requires_grad=True, name=f"{name}.bias")

    @property
    def in_channels(self) -> int:
        return self.weight.c

    @property
    def out_channels(self) -> int:
        return self.weight.n

    def __call__(self, x: Tensor4, training: bool = True) -> Tensor4:
        return conv_forward(self, x)

    def parameters(self) -> list[Tensor4]:
        return [self.weight, self.bias]

    def state(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        _load_into(self.weight, state["weight"], f"{self.name}.weight")
        _load_into(self.bias, state["bias"], f"{self.name}.bias")


def conv_forward(layer: ConvLayer, x: Tensor4) -> Tensor4:
    """
    Apply a conv layer: out[c] = sum over input channels of k[c, c'] * x[c'] + bias[c].

    Args:
        layer: Convolution parameters
        x: Input of dims (n, C_in, h, w)

    Returns:
        Output of dims (n, C_out, floor((h-kh)/s)+1, floor((w-kw)/s)+1)
    """
    c_out, c_in, kh, kw = layer.weight.dims
    if x.c != c_in:
        raise ShapeError(f"{layer.name}: expected {c_in} input channels, got {x.c}")
    stride = layer.stride
    oh = _window_count(x.h, kh, stride, layer.name)
    ow = _window_count(x.w, kw, stride, layer.name)

    col = _im2col(x.data, kh, kw, stride, oh, ow)
    w_col = layer.weight.data.reshape(c_out, -1)
    out = col @ w_col.T + layer.bias.data.reshape(1, c_out)
    out = out.reshape(x.n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def rule(g: np.ndarray):
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        d_weight = (g_rows.T @ col).reshape(layer.weight.dims)
        d_bias = g_rows.sum(axis=0).reshape(1, c_out, 1, 1)
        d_x = _col2im(g_rows @ w_col, x.dims, kh, kw, stride, oh, ow) if x.requires_grad else None
        return d_x, d_weight, d_bias

    return record_op("conv", np.ascontiguousarray(out), (x, layer.weight, layer.bias), rule)


class MaxPoolLayer:
    def __init__(self, kernel: int, stride: int, name: str = "pool"):
        if kernel < 1 or stride < 1:
            raise ShapeError(f"{name}: kernel and stride must be >= 1")
        self.kernel = kernel
        self.stride = stride
        self.name = name

    def __call__(self, x: Tensor4, training: bool = True) -> Tensor4:
        return maxpool_forward(x, self.kernel, self.stride)

    def parameters(self) -> list[Tensor4]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass


def maxpool_forward(x: Tensor4, kernel: int, stride: int) -> Tensor4:
    """
    Windowed per-channel maximum.

    The gradient goes to the first maximal position of each window in
    row-major order, so ties resolve deterministically.
    """
    oh = _window_count(x.h, kernel, stride, "maxpool")
    ow = _window_count(x.w, kernel, stride, "maxpool")
    windows = np.empty((x.n, x.c, oh, ow, kernel * kernel))
    for y in range(kernel):
        for x_off in range(kernel):
            windows[..., y * kernel + x_off] = x.data[
                :, :, y : y + stride * oh : stride, x_off : x_off + stride * ow : stride
            ]
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray):
        d_x = np.zeros_like(x.data)
        for y in range(kernel):
            for x_off in range(kernel):
                mask = argmax == y * kernel + x_off
                d_x[:, :, y : y + stride * oh : stride, x_off : x_off + stride * ow : stride] += g * mask
        return (d_x,)

    return record_op("maxpool", out, (x,), rule)


class BatchNormLayer:
    """Per-channel batch normalization with running statistics for evaluation."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        if eps <= 0:
            raise ValueError(f"{name}: eps must be > 0")
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor4.ones((1, channels, 1, 1), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor4.zeros((1, channels, 1, 1), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    @property
    def channels(self) -> int:
        return self.gamma.c

    def __call__(self, x: Tensor4, training: bool = True) -> Tensor4:
        return batchnorm_forward(self, x, training)

    def parameters(self) -> list[Tensor4]:
        return [self.gamma, self.beta]

    def state(self) -> dict[str, np.ndarray]:
        return {
            "gamma": self.gamma.data,
            "beta": self.beta.data,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        _load_into(self.gamma, state["gamma"], f"{self.name}.gamma")
        _load_into(self.beta, state["beta"], f"{self.name}.beta")
        self.running_mean = np.array(state["running_mean"], dtype=np.float64).reshape(self.channels)
        self.running_var = np.array(state["running_var"], dtype=np.float64).reshape(self.channels)


def batchnorm_forward(layer: BatchNormLayer, x: Tensor4, training: bool) -> Tensor4:
    """
    Normalize each channel, then scale by gamma and shift by beta.

    Training mode uses the batch statistics (biased variance) and folds
    them into the running estimates with the unbiased variance; eval
    mode uses the running estimates.
    """
    if x.c != layer.channels:
        raise ShapeError(f"{layer.name}: expected {layer.channels} channels, got {x.c}")
    axes = (0, 2, 3)
    gamma = layer.gamma.data

    if training:
        count = x.n * x.h * x.w
        if count < 2:
            raise ShapeError(f"{layer.name}: training mode needs n*h*w >= 2, got {count}")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        x_hat = (x.data - mean) * inv_std

        m = layer.momentum
        layer.running_mean = (1 - m) * layer.running_mean + m * mean.reshape(-1)
        layer.running_var = (1 - m) * layer.running_var + m * var.reshape(-1) * count / (count - 1)

        def rule(g: np.ndarray):
            d_gamma = (g * x_hat).sum(axis=axes, keepdims=True)
            d_beta = g.sum(axis=axes, keepdims=True)
            d_hat = g * gamma
            d_x = (inv_std / count) * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
            return d_x, d_gamma, d_beta
    else:
        inv_std = (1.0 / np.sqrt(layer.running_var + layer.eps)).reshape(1, -1, 1, 1)
        x_hat = (x.data - layer.running_mean.reshape(1, -1, 1, 1)) * inv_std

        def rule(g: np.ndarray):
            d_gamma = (g * x_hat).sum(axis=axes, keepdims=True)
            d_beta = g.sum(axis=axes, keepdims=True)
            return g * gamma * inv_std, d_gamma, d_beta

    out = gamma * x_hat + layer.beta.data
    return record_op("batchnorm", out, (x, layer.gamma, layer.beta), rule)


class ReLULayer:
    def __init__(self, name: str = "relu"):
        self.name = name

    def __call__(self, x: Tensor4, training: bool = True) -> Tensor4:
        return relu(x)

    def parameters(self) -> list[Tensor4]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass


def _load_into(tensor: Tensor4, values: np.ndarray, label: str) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != tensor.dims:
        raise ShapeError(f"{label}: stored shape {values.shape} does not match {tensor.dims}")
    tensor.data[...] = values


def build_layers(cfg: EmbeddingConfig, rng: np.random.Generator) -> list[Layer]:
    """Instantiate the layer stack; conv weights are drawn from rng in stack order."""
    layers: list[Layer] = []
    for name, desc in zip(cfg.layer_names, cfg.layers):
        if desc.kind == "conv":
            layers.append(
                ConvLayer(desc.in_channels, desc.out_channels, desc.kernel, desc.stride, rng=rng, name=name)
            )
        elif desc.kind == "pool":
            layers.append(MaxPoolLayer(desc.kernel, desc.stride, name=name))
        elif desc.kind == "bn":
            channels = desc.in_channels or desc.out_channels or _stack_channels(layers, cfg.in_channels)
            layers.append(BatchNormLayer(channels, name=name))
        else:
            layers.append(ReLULayer(name=name))
    logger.debug(f"Built {len(layers)} layers for embedding '{cfg.name}'")
    return layers


def _stack_channels(layers: list[Layer], in_channels: int) -> int:
    """Channel count produced by a partially built stack."""
    for layer in reversed(layers):
        if isinstance(layer, ConvLayer):
            return layer.out_channels
    return in_channels
