"""Model configuration, parameter initialization, and the assembled network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2D, Flatten, Linear, MaxPool2D, ReLU, SpatialWeights

# When True, every forward pass asserts all activations are finite.
DEBUG_NAN_CHECKS = False


@dataclass(frozen=True)
class ConvSpec:
    """One convolutional stage: conv (+ ReLU), optionally followed by max pool."""

    channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool_size: int = 0
    pool_stride: int = 0


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    input_channels: int = 1
    conv: tuple[ConvSpec, ...] = (
        ConvSpec(8, 5, 2, 2, 2, 2),
        ConvSpec(16, 3, 1, 1, 2, 2),
        ConvSpec(16, 3, 1, 1),
    )
    spatial_weights: tuple[int, int] | None = (2, 2)
    fc: tuple[int, ...] = (48,)
    output_dim: int = 2
    loss: str = "l1"
    optimizer: str = "sgd"  # momentum SGD; "adam" is available for configs
    # where per-parameter step normalization helps
    learning_rate: float = 0.02
    lr_decay: float = 1.0  # per-epoch multiplicative decay
    momentum: float = 0.9  # momentum for sgd, beta1 for adam
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.output_dim != 2:
            raise ValueError("output_dim must be 2")
        if self.loss != "l1":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.input_size <= 0 or self.input_channels not in (1, 3):
            raise ValueError("input must be square with 1 or 3 channels")
        if not self.conv:
            raise ValueError("at least one conv layer is required")

    def conv_output_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the activation entering the spatial
        weights / fully connected stage."""
        h = w = self.input_size
        c = self.input_channels
        for spec in self.conv:
            h = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if h <= 0 or w <= 0:
                raise ValueError("conv stack shrinks the input to nothing")
            if spec.pool_size:
                h = -(-(h - spec.pool_size) // spec.pool_stride) + 1
                w = -(-(w - spec.pool_size) // spec.pool_stride) + 1
            c = spec.channels
        return c, h, w


def paper_scale_config(**overrides) -> ModelConfig:
    """Full-scale configuration: 448x448 RGB input through the classic
    five-conv stack, yielding a 256x13x13 activation before the spatial
    weights stage."""
    base = dict(
        input_size=448,
        input_channels=3,
        conv=(
            ConvSpec(96, 11, 4, 0, 3, 2),
            ConvSpec(256, 5, 1, 2, 3, 2),
            ConvSpec(384, 3, 1, 1),
            ConvSpec(384, 3, 1, 1),
            ConvSpec(256, 3, 1, 1, 3, 2),
        ),
        spatial_weights=(32, 32),
        fc=(4096, 4096),
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_config(**overrides) -> ModelConfig:
    """Small configuration trainable on a CPU in minutes (64x64 grayscale)."""
    return ModelConfig(**overrides)


def _parameter_specs(config: ModelConfig):
    """Canonical (name, shape, init_kind) list; the draw order of
    init_parameters and the serialization order both follow it."""
    specs = []
    c_in = config.input_channels
    for i, spec in enumerate(config.conv, start=1):
        specs.append((f"conv{i}.weight", (spec.channels, c_in, spec.kernel, spec.kernel), "hidden"))
        specs.append((f"conv{i}.bias", (spec.channels,), "hidden"))
        c_in = spec.channels
    if config.spatial_weights is not None:
        c1, c2 = config.spatial_weights
        n = config.conv[-1].channels
        specs.append(("sw1.weight", (c1, n), "sw_early"))
        specs.append(("sw1.bias", (c1,), "sw_early"))
        specs.append(("sw2.weight", (c2, c1), "sw_early"))
        specs.append(("sw2.bias", (c2,), "sw_early"))
        specs.append(("sw3.weight", (1, c2), "sw_last"))
        specs.append(("sw3.bias", (1,), "sw_last"))
    c, h, w = config.conv_output_shape()
    n_in = c * h * w
    for i, width in enumerate(config.fc, start=1):
        specs.append((f"fc{i}.weight", (width, n_in), "hidden"))
        specs.append((f"fc{i}.bias", (width,), "hidden"))
        n_in = width
    specs.append(("out.weight", (config.output_dim, n_in), "head"))
    specs.append(("out.bias", (config.output_dim,), "head"))
    return specs


# fixed weight std / bias value per initialization kind; the weight-map
# branch uses the prescribed tiny Gaussians so the map starts near 1.0
_INIT = {
    "sw_early": (0.01, 0.1),
    "sw_last": (np.sqrt(0.001), 1.0),
    "head": (0.01, 0.0),
}


def init_parameters(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Draw all parameters reproducibly.

    Spatial-weights convs 1-2: Gaussian std 0.01, bias 0.1; spatial-weights
    conv 3: Gaussian variance 0.001, bias 1.0.  Hidden conv/fc layers are
    fan-in scaled (std sqrt(2/fan_in), bias 0), which from-scratch training
    needs to keep activations from vanishing; the output head starts at
    std 0.01, bias 0.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in _parameter_specs(config):
        if name.endswith(".bias"):
            bias = 0.0 if kind in ("hidden", "head") else _INIT[kind][1]
            params[name] = np.full(shape, bias, dtype=float)
        elif kind == "hidden":
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            params[name] = rng.normal(0.0, _INIT[kind][0], size=shape)
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_specs(config))


class Network:
    """Fixed-topology regression network: conv stack -> spatial weights ->
    fully connected stack -> linear 2D output.

    Parameters are held in a plain dict shared with the layer objects, so a
    training loop can update them in place.  Instances cache per-call
    activations and are therefore not shareable across threads; concurrent
    evaluation should give each thread its own Network over the same
    parameter dict.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        expected = {name: shape for name, shape, _ in _parameter_specs(config)}
        got = {name: arr.shape for name, arr in params.items()}
        if got != expected:
            raise ValueError("parameter set does not match the configuration")

        self.layers = []
        c_in = config.input_channels
        for i, spec in enumerate(config.conv, start=1):
            self.layers.append(Conv2D(f"conv{i}", c_in, spec.channels, spec.kernel, spec.stride, spec.pad))
            self.layers.append(ReLU())
            if spec.pool_size:
                self.layers.append(MaxPool2D(spec.pool_size, spec.pool_stride))
            c_in = spec.channels
        self._conv_end = len(self.layers)
        self.spatial = None
        if config.spatial_weights is not None:
            self.spatial = SpatialWeights("sw", config.conv[-1].channels, config.spatial_weights)
            self.layers.append(self.spatial)
        self.layers.append(Flatten())
        c, h, w = config.conv_output_shape()
        n_in = c * h * w
        for i, width in enumerate(config.fc, start=1):
            self.layers.append(Linear(f"fc{i}", n_in, width))
            self.layers.append(ReLU())
            n_in = width
        self.layers.append(Linear("out", n_in, config.output_dim))

        for layer in self.layers:
            for name in layer.params:
                layer.weights[name] = params[name]

        self.conv_activation: np.ndarray | None = None
        self.weight_map: np.ndarray | None = None

    def refresh_params(self):
        """Re-bind layer weights after params were replaced (not mutated)."""
        for layer in self.layers:
            for name in layer.params:
                layer.weights[name] = self.params[name]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 3 and self.config.input_channels == 1:
            x = x[:, None, :, :]
        if x.ndim != 4 or x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ValueError(
                f"batch must be (B, {self.config.input_channels}, "
                f"{self.config.input_size}, {self.config.input_size}), got {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if DEBUG_NAN_CHECKS and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after layer {i} ({type(layer).__name__})")
            if i == self._conv_end - 1:
                self.conv_activation = x
        if self.spatial is not None:
            self.weight_map = self.spatial.last_weight_map
        return x

    def backward(self, dpred: np.ndarray) -> dict[str, np.ndarray]:
        d = dpred
        for layer in reversed(self.layers):
            d = layer.backward(d)
        grads: dict[str, np.ndarray] = {}
        for layer in self.layers:
            grads.update(layer.grads)
        return grads

    def activation_pattern(self) -> list[np.ndarray]:
        """ReLU masks and pool argmax indices from the last forward pass.

        The network restricted to a single parameter is affine wherever the
        pattern is constant; gradient checking uses this to detect kinks."""
        pattern = []
        for layer in self.layers:
            getter = getattr(layer, "activation_pattern", None)
            if getter is not None:
                pattern.extend(p.copy() for p in getter())
        return pattern

    def predict(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Forward pass in chunks; output (B, 2)."""
        x = self._check_input(x)
        outs = [self.forward(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
        return np.concatenate(outs, axis=0)
