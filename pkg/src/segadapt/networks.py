"""Network modules: feature generator, classifier head, and the discriminators.

All four networks are small convolutional/linear stacks built on the autodiff
ops; every forward is a pure function of (weights, input) and initialization
is seed-deterministic (Kaiming fan-in scaling, zero biases).

Domain-channel conventions used throughout:
  * global discriminator: channel 0 = source, channel 1 = target;
  * semantic discriminators: 2c output channels, [0, c) = source classes,
    [c, 2c) = target classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    bilinear_upsample,
    conv2d,
    leaky_relu,
    linear,
    no_grad,
    softmax_channel,
)

LEAKY_SLOPE = 0.2
CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be applied to the current models."""


@dataclass(frozen=True)
class ModelConfig:
    """Width/stride knobs shared by every network builder."""

    feature_channels: int = 64
    stride: int = 4
    generator_widths: Tuple[int, ...] = (32, 64, 64)
    global_disc_widths: Tuple[int, ...] = (64, 128)
    semantic_hidden: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "generator_widths", tuple(int(w) for w in self.generator_widths))
        object.__setattr__(self, "global_disc_widths", tuple(int(w) for w in self.global_disc_widths))
        if self.feature_channels <= 0 or self.semantic_hidden <= 0:
            raise ValueError("channel counts must be positive")


def _kaiming(rng, shape, fan_in, dtype):
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape).astype(dtype)


class _Conv:
    def __init__(self, rng, cin, cout, k, stride, padding, dtype):
        self.kernel = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class _Linear:
    def __init__(self, rng, n_in, n_out, dtype):
        self.weight = Tensor(_kaiming(rng, (n_out, n_in), n_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class _Stack:
    """Shared parameter bookkeeping for the concrete networks."""

    def __init__(self):
        self._layers = []  # (name, layer) pairs in forward order

    def _add(self, name, layer):
        self._layers.append((name, layer))
        return layer

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for name, layer in self._layers:
            if isinstance(layer, _Conv):
                params[f"{name}.kernel"] = layer.kernel
                params[f"{name}.bias"] = layer.bias
            else:
                params[f"{name}.weight"] = layer.weight
                params[f"{name}.bias"] = layer.bias
        return params

    def load_parameters(self, arrays: Dict[str, np.ndarray], prefix: str = ""):
        params = self.parameters()
        for name, tensor in params.items():
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {key!r}")
            value = np.asarray(arrays[key])
            if value.shape != tensor.shape:
                raise CheckpointError(
                    f"checkpoint parameter {key!r} has shape {value.shape}, expected {tensor.shape}"
                )
            tensor.data = value.astype(tensor.dtype)


# stride budget 4 split over the four generator layers; the first layer stays
# at full resolution so thin shapes survive into the features.
_GEN_STRIDE_LAYOUTS = {1: (1, 1, 1, 1), 2: (1, 2, 1, 1), 4: (1, 2, 2, 1), 8: (2, 2, 2, 1)}


class FeatureGenerator(_Stack):
    """Convolutional trunk: [3, H, W] image -> [n, H/s, W/s] feature map."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        super().__init__()
        if config.stride not in _GEN_STRIDE_LAYOUTS:
            raise ValueError(f"stride must be one of {sorted(_GEN_STRIDE_LAYOUTS)}, got {config.stride}")
        self.stride = config.stride
        self.feature_channels = config.feature_channels
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        channels = (3,) + config.generator_widths + (config.feature_channels,)
        if len(channels) != 5:
            raise ValueError("generator_widths must list the three intermediate widths")
        strides = _GEN_STRIDE_LAYOUTS[config.stride]
        for i in range(4):
            self._add(f"conv{i}", _Conv(rng, channels[i], channels[i + 1], 3, strides[i], 1, self.dtype))

    def forward(self, image) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] image, got shape {image.shape}")
        _, h, w = image.shape
        if h % self.stride or w % self.stride:
            raise ValueError(f"input {h}x{w} is not divisible by the output stride {self.stride}")
        x = image
        for i, (_, layer) in enumerate(self._layers):
            x = layer(x)
            if i < len(self._layers) - 1:
                x = leaky_relu(x, LEAKY_SLOPE)
        return x


class ClassifierHead(_Stack):
    """1x1 convolution n -> c plus the upsample+softmax score-map step."""

    def __init__(self, num_classes: int, config: ModelConfig = ModelConfig(), seed: int = 1, dtype=np.float32):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._add("conv", _Conv(rng, config.feature_channels, num_classes, 1, 1, 0, self.dtype))

    def logits(self, features: Tensor) -> Tensor:
        return self._layers[0][1](features)

    def score_map(self, features: Tensor, out_hw: Tuple[int, int]) -> Tensor:
        """Per-pixel class simplex at the requested resolution (upsample, then softmax)."""
        return softmax_channel(bilinear_upsample(self.logits(features), out_hw[0], out_hw[1]))


class GlobalDiscriminator(_Stack):
    """Score-map domain classifier: [c, H, W] -> per-location 2-simplex [2, H/8, W/8]."""

    def __init__(self, num_classes: int, config: ModelConfig = ModelConfig(), seed: int = 2, dtype=np.float32):
        super().__init__()
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        channels = (num_classes,) + config.global_disc_widths + (2,)
        for i in range(len(channels) - 1):
            self._add(f"conv{i}", _Conv(rng, channels[i], channels[i + 1], 4, 2, 1, self.dtype))

    def forward(self, score_map: Tensor) -> Tensor:
        if score_map.data.ndim != 3 or score_map.shape[0] != self.num_classes:
            raise ValueError(
                f"expected [{self.num_classes}, H, W] score map, got shape {score_map.shape}"
            )
        x = score_map
        for i, (_, layer) in enumerate(self._layers):
            x = layer(x)
            if i < len(self._layers) - 1:
                x = leaky_relu(x, LEAKY_SLOPE)
        return softmax_channel(x)


class SemanticDiscriminatorFC(_Stack):
    """Class-vector domain classifier: [n] -> 2c-simplex."""

    def __init__(self, num_classes: int, config: ModelConfig = ModelConfig(), seed: int = 3, dtype=np.float32):
        super().__init__()
        self.num_classes = num_classes
        self.feature_channels = config.feature_channels
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._add("fc0", _Linear(rng, config.feature_channels, config.semantic_hidden, self.dtype))
        self._add("fc1", _Linear(rng, config.semantic_hidden, 2 * num_classes, self.dtype))

    def forward(self, vector: Tensor) -> Tensor:
        if vector.data.ndim != 1 or vector.shape[0] != self.feature_channels:
            raise ValueError(
                f"expected a length-{self.feature_channels} feature vector, got shape {vector.shape}"
            )
        x = leaky_relu(self._layers[0][1](vector), LEAKY_SLOPE)
        return softmax_channel(self._layers[1][1](x))


class SemanticDiscriminatorConv(_Stack):
    """Per-pixel variant of the FC discriminator, as a pair of 1x1 convolutions."""

    def __init__(self, num_classes: int, config: ModelConfig = ModelConfig(), seed: int = 3, dtype=np.float32):
        super().__init__()
        self.num_classes = num_classes
        self.feature_channels = config.feature_channels
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._add("conv0", _Conv(rng, config.feature_channels, config.semantic_hidden, 1, 1, 0, self.dtype))
        self._add("conv1", _Conv(rng, config.semantic_hidden, 2 * num_classes, 1, 1, 0, self.dtype))

    @classmethod
    def from_fc(cls, fc: SemanticDiscriminatorFC, config: ModelConfig = ModelConfig()):
        """Transplant FC weights; the result computes the FC forward at every pixel."""
        conv = cls(fc.num_classes, config=config, dtype=fc.dtype)
        fc_params = fc.parameters()
        for conv_name, fc_name in (("conv0", "fc0"), ("conv1", "fc1")):
            layer = dict(conv._layers)[conv_name]
            weight = fc_params[f"{fc_name}.weight"].data
            layer.kernel.data = weight.reshape(weight.shape + (1, 1)).copy()
            layer.bias.data = fc_params[f"{fc_name}.bias"].data.copy()
        return conv

    def forward(self, features: Tensor) -> Tensor:
        if features.data.ndim != 3 or features.shape[0] != self.feature_channels:
            raise ValueError(
                f"expected [{self.feature_channels}, h, w] features, got shape {features.shape}"
            )
        x = leaky_relu(self._layers[0][1](features), LEAKY_SLOPE)
        return softmax_channel(self._layers[1][1](x))


def predict(generator: FeatureGenerator, head: ClassifierHead, image: np.ndarray) -> np.ndarray:
    """Hard per-pixel class prediction at input resolution (no gradients)."""
    image = np.asarray(image)
    with no_grad():
        features = generator.forward(image)
        scores = head.score_map(features, (image.shape[1], image.shape[2]))
    return np.argmax(scores.data, axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint container: npz of named arrays plus a json metadata entry
# ---------------------------------------------------------------------------

_META_KEY = "_checkpoint_meta"


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None):
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    payload = dict(arrays)
    payload[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path, expected_fingerprint: Optional[str] = None):
    """Return (arrays, meta); rejects version or fingerprint mismatches."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if _META_KEY not in data:
                raise CheckpointError(f"{path} is not a recognized checkpoint (missing metadata)")
            meta = json.loads(str(data[_META_KEY][()]))
            arrays = {k: data[k] for k in data.files if k != _META_KEY}
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')} is not supported"
        )
    if expected_fingerprint is not None and meta.get("fingerprint") != expected_fingerprint:
        raise CheckpointError(
            f"checkpoint fingerprint {meta.get('fingerprint')!r} does not match "
            f"expected {expected_fingerprint!r}"
        )
    return arrays, meta
