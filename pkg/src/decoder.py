"""Toy grid decoder: dilated context aggregation, x4 upsampling, sigmoid vacancy grid.

Forward and reverse passes are written out by hand on numpy arrays laid
out as (channels, rows, cols). Convolutions use zero "same" padding so the
network is fully convolutional.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from src.errors import CheckpointMismatchError, ConfigurationError, DataError
from src.grid3d import DEFAULT_VOXEL_Z, Grid3D, GridSpec

Activation = Literal["leaky_relu", "sigmoid", "identity"]
Array = NDArray[np.floating[Any]]


@dataclass
class ConvLayer:
    weight: Array
    bias: Array
    dilation: int = 1
    activation: Activation = "leaky_relu"

    def spec(self) -> Dict[str, Any]:
        out_ch, in_ch, kernel, _ = self.weight.shape
        return {
            "out_channels": int(out_ch),
            "in_channels": int(in_ch),
            "kernel": int(kernel),
            "dilation": int(self.dilation),
            "activation": self.activation,
        }


@dataclass
class DecoderParams:
    """Ordered layers; nearest upsampling runs right after ``layers[upsample_after]``.

    ``voxel_z`` is the axial pitch (nm) of the grid the output slices were trained on.
    """

    layers: List[ConvLayer]
    upsample_after: int
    upsample_factor: int = 4
    leaky_slope: float = 0.1
    normalization: Tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    version: int = 0
    voxel_z: float = DEFAULT_VOXEL_Z

    def __post_init__(self) -> None:
        if not 0 <= self.upsample_after < len(self.layers) - 1:
            raise ConfigurationError("upsampling must sit between two layers")
        if self.upsample_factor < 1:
            raise ConfigurationError("upsample_factor must be >= 1")
        if self.voxel_z <= 0:
            raise ConfigurationError("voxel_z must be positive")
        for previous, layer in zip(self.layers, self.layers[1:]):
            if layer.weight.shape[1] != previous.weight.shape[0]:
                raise ConfigurationError("layer channel counts do not chain")

    @property
    def depth(self) -> int:
        """Number of z-slices produced by the final layer."""
        return int(self.layers[-1].weight.shape[0])

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.layers[0].weight.dtype

    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def named_arrays(self) -> Dict[str, Array]:
        """Parameter arrays in declaration order, keyed ``layers.<i>.weight|bias``."""
        arrays: Dict[str, Array] = {}
        for index, layer in enumerate(self.layers):
            arrays[f"layers.{index}.weight"] = layer.weight
            arrays[f"layers.{index}.bias"] = layer.bias
        return arrays

    def astype(self, dtype: Any) -> "DecoderParams":
        layers = [
            ConvLayer(
                layer.weight.astype(dtype),
                layer.bias.astype(dtype),
                layer.dilation,
                layer.activation,
            )
            for layer in self.layers
        ]
        return DecoderParams(
            layers,
            self.upsample_after,
            self.upsample_factor,
            self.leaky_slope,
            self.normalization,
            self.seed,
            self.version,
            self.voxel_z,
        )

    def copy(self) -> "DecoderParams":
        return self.astype(self.dtype)

    def manifest(self) -> Dict[str, Any]:
        return {
            "layers": [layer.spec() for layer in self.layers],
            "upsample_after": self.upsample_after,
            "upsample_factor": self.upsample_factor,
            "leaky_slope": self.leaky_slope,
            "normalization": list(self.normalization),
            "seed": self.seed,
            "voxel_z": self.voxel_z,
            "parameter_count": self.parameter_count(),
        }


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations kept for the reverse pass."""

    inputs: List[Array] = field(default_factory=list)
    pre_activations: List[Array] = field(default_factory=list)
    outputs: List[Array] = field(default_factory=list)
    input_shape: Tuple[int, int] = (0, 0)
    version: int = -1
    layer_shapes: Tuple[Tuple[int, ...], ...] = ()


def init_decoder(
    depth: int,
    channels: int = 32,
    dilations: Sequence[int] = (1, 2, 4, 8),
    leaky_slope: float = 0.1,
    upsample_factor: int = 4,
    seed: int = 0,
    dtype: Any = np.float64,
    voxel_z: float = DEFAULT_VOXEL_Z,
) -> DecoderParams:
    """Default toy architecture with fan-in scaled uniform weights and zero biases."""
    if depth < 1 or channels < 1:
        raise ConfigurationError("depth and channels must be positive")
    rng = np.random.default_rng(seed)

    def make(out_ch: int, in_ch: int, kernel: int, dilation: int, act: Activation) -> ConvLayer:
        bound = 1.0 / np.sqrt(in_ch * kernel * kernel)
        weight = rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)).astype(dtype)
        return ConvLayer(weight, np.zeros(out_ch, dtype=dtype), dilation, act)

    layers: List[ConvLayer] = []
    in_ch = 1
    for rate in dilations:
        layers.append(make(channels, in_ch, 3, rate, "leaky_relu"))
        in_ch = channels
    upsample_after = len(layers) - 1
    layers.append(make(channels, channels, 3, 1, "leaky_relu"))
    layers.append(make(depth, channels, 1, 1, "sigmoid"))
    return DecoderParams(
        layers=layers,
        upsample_after=upsample_after,
        upsample_factor=upsample_factor,
        leaky_slope=leaky_slope,
        seed=seed,
        voxel_z=voxel_z,
    )


def receptive_field(params: DecoderParams) -> int:
    """Theoretical receptive field (input pixels) of the low-resolution stage."""
    size = 1
    for layer in params.layers[: params.upsample_after + 1]:
        kernel = layer.weight.shape[2]
        size += (kernel - 1) * layer.dilation
    return size


def conv2d(x: Array, weight: Array, bias: Array, dilation: int) -> Array:
    """Zero-padded 'same' convolution (cross-correlation) of a (C, H, W) tensor."""
    out_ch, _, kernel, _ = weight.shape
    rows, cols = x.shape[1:]
    pad = dilation * (kernel // 2)
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((out_ch, rows, cols), dtype=np.result_type(x, weight))
    for a in range(kernel):
        for b in range(kernel):
            patch = padded[:, a * dilation : a * dilation + rows, b * dilation : b * dilation + cols]
            out += np.tensordot(weight[:, :, a, b], patch, axes=(1, 0))
    out += bias[:, None, None]
    return out


def conv2d_backward(
    x: Array, weight: Array, dilation: int, grad_out: Array
) -> Tuple[Array, Array, Array]:
    """Gradients (weight, bias, input) of ``conv2d``."""
    _, _, kernel, _ = weight.shape
    rows, cols = x.shape[1:]
    pad = dilation * (kernel // 2)
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    grad_weight = np.zeros_like(weight)
    grad_padded = np.zeros_like(padded, dtype=np.result_type(padded, grad_out))
    for a in range(kernel):
        for b in range(kernel):
            window = (
                slice(None),
                slice(a * dilation, a * dilation + rows),
                slice(b * dilation, b * dilation + cols),
            )
            grad_weight[:, :, a, b] = np.tensordot(grad_out, padded[window], axes=([1, 2], [1, 2]))
            grad_padded[window] += np.tensordot(weight[:, :, a, b], grad_out, axes=(0, 0))
    grad_bias = grad_out.sum(axis=(1, 2))
    grad_input = grad_padded[:, pad : pad + rows, pad : pad + cols]
    return grad_weight, grad_bias, grad_input


def upsample_nearest(x: Array, factor: int) -> Array:
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample_nearest_backward(grad: Array, factor: int) -> Array:
    channels, rows, cols = grad.shape
    return grad.reshape(channels, rows // factor, factor, cols // factor, factor).sum(axis=(2, 4))


def _activate(pre: Array, activation: Activation, slope: float) -> Array:
    if activation == "leaky_relu":
        return np.where(pre > 0, pre, slope * pre)
    if activation == "sigmoid":
        return np.asarray(expit(pre))
    return pre


def _activation_grad(
    pre: Array, out: Array, grad: Array, activation: Activation, slope: float
) -> Array:
    if activation == "leaky_relu":
        return np.where(pre > 0, grad, slope * grad)
    if activation == "sigmoid":
        return grad * out * (1 - out)
    return grad


def normalize_frame(params: DecoderParams, pixels: NDArray[np.float64]) -> Array:
    """Apply the recorded zero-mean / unit-variance constants."""
    mean, std = params.normalization
    return ((pixels - mean) / std).astype(params.dtype)


def _layer_shapes(params: DecoderParams) -> Tuple[Tuple[int, ...], ...]:
    return tuple(tuple(layer.weight.shape) for layer in params.layers)


def decoder_forward(
    params: DecoderParams, frame: Array, spec: Optional[GridSpec] = None
) -> Tuple[Grid3D, ForwardCache]:
    """Map a normalized (H, W) frame to a (D, f·H, f·W) grid of occupancy probabilities."""
    if frame.ndim != 2:
        raise DataError(f"decoder expects a 2D frame, got shape {frame.shape}")
    if params.layers[0].weight.shape[1] != 1:
        raise DataError("first decoder layer must take a single input channel")
    rows, cols = frame.shape
    factor = params.upsample_factor
    expected = (params.depth, rows * factor, cols * factor)
    if spec is None:
        spec = GridSpec(
            voxel_z=params.voxel_z,
            dims=expected,
            origin=(0.0, 0.0, -params.depth * params.voxel_z / 2),
        )
    elif tuple(spec.dims) != expected:
        raise DataError(f"grid spec dims {spec.dims} do not match decoder output {expected}")

    cache = ForwardCache(
        input_shape=(rows, cols), version=params.version, layer_shapes=_layer_shapes(params)
    )
    x: Array = np.asarray(frame, dtype=params.dtype)[None, :, :]
    for index, layer in enumerate(params.layers):
        cache.inputs.append(x)
        pre = conv2d(x, layer.weight, layer.bias, layer.dilation)
        out = _activate(pre, layer.activation, params.leaky_slope)
        cache.pre_activations.append(pre)
        cache.outputs.append(out)
        x = out
        if index == params.upsample_after:
            x = upsample_nearest(x, factor)

    return Grid3D(values=np.asarray(x), spec=spec), cache


def decoder_backward(
    params: DecoderParams, cache: ForwardCache, grad_output: Array
) -> Tuple[Dict[str, Array], Array]:
    """Reverse pass: parameter gradients keyed like ``named_arrays`` and dL/dframe."""
    if cache.version != params.version or cache.layer_shapes != _layer_shapes(params):
        raise CheckpointMismatchError("forward cache is stale for these decoder parameters")
    final = cache.outputs[-1]
    if grad_output.shape != final.shape:
        raise CheckpointMismatchError(
            f"grad_output shape {grad_output.shape} does not match output {final.shape}"
        )

    grads: Dict[str, Array] = {}
    grad = np.asarray(grad_output, dtype=params.dtype)
    for index in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[index]
        if index == params.upsample_after:
            grad = upsample_nearest_backward(grad, params.upsample_factor)
        grad = _activation_grad(
            cache.pre_activations[index],
            cache.outputs[index],
            grad,
            layer.activation,
            params.leaky_slope,
        )
        grad_w, grad_b, grad = conv2d_backward(
            cache.inputs[index], layer.weight, layer.dilation, grad
        )
        grads[f"layers.{index}.weight"] = grad_w
        grads[f"layers.{index}.bias"] = grad_b

    ordered = {name: grads[name] for name in params.named_arrays()}
    return ordered, grad[0]


def loss_eval(
    prediction: Grid3D, target: Grid3D, weights: Tuple[float, float] = (1.0, 0.0)
) -> Tuple[float, NDArray[np.float64]]:
    """Weighted MSE against the dilated target plus an L1 sparsity term."""
    if prediction.spec != target.spec:
        raise DataError("prediction and target grids use different specs")
    w_pos, w_l1 = weights
    pred = np.asarray(prediction.values, dtype=np.float64)
    diff = pred - target.values
    count = pred.size
    loss = w_pos * float(np.mean(diff * diff)) + w_l1 * float(np.mean(np.abs(pred)))
    grad = (2.0 * w_pos / count) * diff + (w_l1 / count) * np.sign(pred)
    return loss, grad
