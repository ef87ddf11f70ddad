"""
Multi-scale early-exit network.
The first layer generates every scale with vertical convolutions; later layers
run one cell per scale, fed by a horizontal projection of the same scale and a
diagonal projection of the next finer scale. Classifiers read the coarsest scale.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .cell import cell_forward, discrete_cell_forward
from .errors import ArgumentError, ConfigError, ShapeError
from .genotype import AlphaTable, Genotype
from .operations import ParameterStore, relu_conv_norm
from .tensor import Tensor, concat, conv2d, dense, global_avg_pool, no_grad, relu

logger = logging.getLogger(__name__)

MAX_SCALES = 3
HEAD_MIN_SPATIAL = 4

# per layer, one tensor per scale; None where the scale is not computed
FeatureGrid = List[List[Optional[Tensor]]]


def halve(size: int) -> int:
    """Spatial size after a stride-2, padding-preserving operation."""
    return (size + 1) // 2


def default_reduction_layers(layers: int) -> Tuple[int, ...]:
    candidates = {layers // 3 + 1, (2 * layers) // 3 + 1}
    return tuple(sorted(layer for layer in candidates if 2 <= layer <= layers))


@dataclass
class NetworkConfig:
    """Shape of the multi-scale network; layer indices are 1-based, layer 1 is the stem."""

    layers: int = 5
    scales: int = 1
    init_channels: int = 16
    nodes: int = 4
    early_exits: bool = False
    classifier_layers: Optional[Tuple[int, ...]] = None
    reduction_layers: Optional[Tuple[int, ...]] = None
    num_classes: int = 10
    mode: str = "relaxed"
    input_size: int = 32
    input_channels: int = 3

    def __post_init__(self):
        if self.classifier_layers is None:
            self.classifier_layers = tuple(range(2, self.layers + 1)) if self.early_exits else (self.layers,)
        if self.reduction_layers is None:
            self.reduction_layers = default_reduction_layers(self.layers)
        self.classifier_layers = tuple(sorted(set(int(v) for v in self.classifier_layers)))
        self.reduction_layers = tuple(sorted(set(int(v) for v in self.reduction_layers)))

    def validate(self) -> "NetworkConfig":
        if self.layers < 2:
            raise ConfigError("network.layers", f"must be >= 2, got {self.layers}")
        if not 1 <= self.scales <= MAX_SCALES:
            raise ConfigError("network.scales", f"must be in 1..{MAX_SCALES}, got {self.scales}")
        if self.init_channels < 1:
            raise ConfigError("network.init_channels", f"must be >= 1, got {self.init_channels}")
        if self.nodes < 1:
            raise ConfigError("network.nodes", f"must be >= 1, got {self.nodes}")
        if self.num_classes < 2:
            raise ConfigError("network.num_classes", f"must be >= 2, got {self.num_classes}")
        if self.mode not in ("relaxed", "discrete"):
            raise ConfigError("network.mode", f"must be 'relaxed' or 'discrete', got {self.mode!r}")
        valid = set(range(2, self.layers + 1))
        if not self.classifier_layers:
            raise ConfigError("network.classifier_layers", "at least one classifier is required")
        if not set(self.classifier_layers) <= valid:
            raise ConfigError("network.classifier_layers", f"{list(self.classifier_layers)} must lie in 2..{self.layers}")
        if not set(self.reduction_layers) <= valid:
            raise ConfigError("network.reduction_layers", f"{list(self.reduction_layers)} must lie in 2..{self.layers}")
        if self.input_size < 2 ** (self.scales - 1):
            raise ConfigError("network.input_size", f"{self.input_size} too small for {self.scales} scales")
        return self

    def reductions_through(self, layer: int) -> int:
        return sum(1 for r in self.reduction_layers if r <= layer)

    def spatial(self, layer: int, scale: int, input_size: Optional[int] = None) -> int:
        size = self.input_size if input_size is None else input_size
        for _ in range(scale + self.reductions_through(layer)):
            size = halve(size)
        return size

    def cell_width(self, layer: int, scale: int) -> int:
        return self.init_channels * 2 ** (scale + self.reductions_through(layer))

    def out_width(self, layer: int, scale: int) -> int:
        if layer == 1:
            return self.init_channels * 2 ** scale
        return self.nodes * self.cell_width(layer, scale)

    @property
    def last_classifier(self) -> int:
        return max(self.classifier_layers)

    def is_live(self, layer: int, scale: int) -> bool:
        """Whether a (layer, scale) node can reach any classifier."""
        if layer == 1:
            return True
        last = self.last_classifier
        return layer <= last and scale >= self.scales - 1 - (last - layer)

    def cone(self, layer: int) -> Dict[int, List[int]]:
        """Scales needed at each layer to compute the coarsest scale of layer."""
        needed = {1: list(range(self.scales))}
        for current in range(2, layer + 1):
            needed[current] = [s for s in range(self.scales) if s >= self.scales - 1 - (layer - current)]
        return needed

    def live_scales(self, layer: int) -> List[int]:
        return [s for s in range(self.scales) if self.is_live(layer, s)]

    def with_mode(self, mode: str) -> "NetworkConfig":
        values = self.to_dict()
        values["mode"] = mode
        return NetworkConfig.from_dict(values)

    def to_dict(self) -> dict:
        values = asdict(self)
        values["classifier_layers"] = list(self.classifier_layers)
        values["reduction_layers"] = list(self.reduction_layers)
        return values

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        for key in ("classifier_layers", "reduction_layers"):
            if known.get(key) is not None:
                known[key] = tuple(known[key])
        return cls(**known)


@dataclass
class Network:
    """A built network: configuration, parameters and its architecture encoding."""

    config: NetworkConfig
    store: ParameterStore
    alphas: Optional[AlphaTable] = None
    genotype: Optional[Genotype] = None

    @property
    def relaxed(self) -> bool:
        return self.config.mode == "relaxed"

    @property
    def exits(self) -> Tuple[int, ...]:
        return self.config.classifier_layers

    def train(self) -> "Network":
        self.store.train()
        return self

    def eval(self) -> "Network":
        self.store.eval()
        return self

    def weights(self) -> Dict[str, Tensor]:
        return dict(self.store.params)

    def num_params(self) -> int:
        return self.store.count()


def _as_input(x, net: Network) -> Tensor:
    tensor = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if tensor.dtype != net.store.dtype:
        tensor = Tensor(tensor.data.astype(net.store.dtype))
    if tensor.ndim != 4 or tensor.shape[1] != net.config.input_channels:
        raise ShapeError(f"expected an (N, {net.config.input_channels}, H, W) batch, got {tensor.shape}")
    return tensor


def stem_vertical(x: Tensor, net: Network) -> List[Tensor]:
    """
    First layer: build every scale from the input image.

    Args:
        x: Image batch (N, 3, H, W)
        net: Network whose stem parameters are used

    Returns:
        One feature map per scale; scale s has C * 2^s channels and half the
        spatial size of scale s - 1
    """
    cfg = net.config
    min_size = 2 ** (cfg.scales - 1)
    if x.shape[2] < min_size or x.shape[3] < min_size:
        raise ArgumentError(f"input {x.shape[2]}x{x.shape[3]} smaller than {min_size} required by {cfg.scales} scales")
    store = net.store
    out = conv2d(x, store.conv_weight("stem.scale0.conv", cfg.out_width(1, 0), x.shape[1], 3), 1, 1)
    features = [store.norm("stem.scale0.norm", out, affine=True)]
    for scale in range(1, cfg.scales):
        features.append(
            relu_conv_norm(store, f"stem.scale{scale}.vertical", features[-1], cfg.out_width(1, scale), 3, 2, 1, affine=True)
        )
    return features


def _check_pyramid(prev: Sequence[Optional[Tensor]], layer: int):
    for scale in range(1, len(prev)):
        finer, coarser = prev[scale - 1], prev[scale]
        if finer is None or coarser is None:
            continue
        expected = (halve(finer.shape[2]), halve(finer.shape[3]))
        if coarser.shape[2:] != expected:
            raise ShapeError(
                f"layer {layer - 1}: scale {scale} is {coarser.shape[2]}x{coarser.shape[3]}, "
                f"expected {expected[0]}x{expected[1]} (half of scale {scale - 1})"
            )


def layer_forward(
    prev: Sequence[Optional[Tensor]],
    net: Network,
    layer: int,
    scales: Optional[Sequence[int]] = None,
) -> List[Optional[Tensor]]:
    """
    Compute one layer of the multi-scale grid.

    Args:
        prev: Previous layer's feature maps, one per scale
        net: Network providing parameters and the architecture encoding
        layer: 1-based index of this layer (>= 2)
        scales: Scales to compute; defaults to every live scale

    Returns:
        Feature maps of this layer; None for scales that were not computed
    """
    cfg = net.config
    if len(prev) != cfg.scales:
        raise ShapeError(f"layer {layer}: expected {cfg.scales} input scales, got {len(prev)}")
    _check_pyramid(prev, layer)
    store = net.store
    reduction = layer in cfg.reduction_layers
    wanted = cfg.live_scales(layer) if scales is None else list(scales)
    out: List[Optional[Tensor]] = [None] * cfg.scales
    for scale in wanted:
        prefix = f"layer{layer}.scale{scale}"
        width = cfg.cell_width(layer, scale)
        same = prev[scale]
        if same is None or (scale > 0 and prev[scale - 1] is None):
            raise ShapeError(f"{prefix}: inputs from layer {layer - 1} were not computed")
        horizontal = relu_conv_norm(store, f"{prefix}.horizontal", same, width, 1)
        if scale == 0:
            input_a = input_b = horizontal
        else:
            diagonal = relu_conv_norm(store, f"{prefix}.diagonal", prev[scale - 1], width, 3, 2, 1)
            input_a = relu_conv_norm(store, f"{prefix}.fuse", concat([diagonal, same], axis=1), width, 1)
            input_b = horizontal
        if net.relaxed:
            out[scale] = cell_forward(input_a, input_b, net.alphas.table(reduction), store, f"{prefix}.cell", reduction)
        else:
            out[scale] = discrete_cell_forward(input_a, input_b, net.genotype.cell(reduction), store, f"{prefix}.cell", reduction)
    return out


def classifier_forward(feature: Tensor, net: Network, layer: int) -> Tensor:
    """
    Early-exit head on the coarsest scale of a layer.

    Two stride-2 conv-norm-ReLU blocks, global average pooling and a dense
    layer; features smaller than 4x4 get a single stride-1 block instead.
    """
    store = net.store
    prefix = f"head{layer}"
    out = feature
    channels = feature.shape[1]
    if min(feature.shape[2], feature.shape[3]) >= HEAD_MIN_SPATIAL:
        blocks = ((1, 2), (2, 2))
    else:
        blocks = ((1, 1),)
    for index, stride in blocks:
        out = conv2d(out, store.conv_weight(f"{prefix}.conv{index}", channels, channels, 3), stride, 1)
        out = relu(store.norm(f"{prefix}.norm{index}", out, affine=True))
    pooled = global_avg_pool(out)
    weight, bias = store.dense_weights(f"{prefix}.dense", channels, net.config.num_classes)
    return dense(pooled, weight, bias)


def feature_grid(x, net: Network, last_layer: Optional[int] = None) -> FeatureGrid:
    """Every computed feature map, layer by layer."""
    x = _as_input(x, net)
    last = net.config.layers if last_layer is None else last_layer
    grid: FeatureGrid = [stem_vertical(x, net)]
    for layer in range(2, last + 1):
        grid.append(layer_forward(grid[-1], net, layer))
    return grid


def iter_exits(x, net: Network) -> Iterator[Tuple[int, int, Tensor]]:
    """
    Yield (exit_index, layer, logits) from the shallowest classifier on,
    computing deeper layers only when the caller keeps iterating.
    """
    x = _as_input(x, net)
    cfg = net.config
    features = stem_vertical(x, net)
    exit_index = 0
    for layer in range(2, cfg.last_classifier + 1):
        features = layer_forward(features, net, layer)
        if layer in cfg.classifier_layers:
            yield exit_index, layer, classifier_forward(features[cfg.scales - 1], net, layer)
            exit_index += 1


def network_forward(x, net: Network, max_exits: Optional[int] = None) -> List[Tensor]:
    """
    Logits of every classifier, ordered shallow to deep.

    Args:
        x: Image batch (N, 3, H, W)
        net: Built network
        max_exits: Stop after this many exits without computing deeper layers

    Returns:
        One (N, num_classes) logits tensor per computed exit
    """
    limit = len(net.exits) if max_exits is None else max_exits
    if not 1 <= limit <= len(net.exits):
        raise ArgumentError(f"max_exits must be in 1..{len(net.exits)}, got {max_exits}")
    logits = []
    for _, _, out in iter_exits(x, net):
        logits.append(out)
        if len(logits) == limit:
            break
    return logits


def forward_to_exit(x, net: Network, exit_index: int) -> Tensor:
    """Logits of one exit, computing only the nodes that exit depends on."""
    if not 0 <= exit_index < len(net.exits):
        raise ArgumentError(f"exit index {exit_index} out of range for {len(net.exits)} exits")
    x = _as_input(x, net)
    cfg = net.config
    target = net.exits[exit_index]
    cone = cfg.cone(target)
    features: List[Optional[Tensor]] = stem_vertical(x, net)
    for layer in range(2, target + 1):
        features = layer_forward(features, net, layer, scales=cone[layer])
    return classifier_forward(features[cfg.scales - 1], net, target)


def build_network(
    config: NetworkConfig,
    genotype: Optional[Genotype] = None,
    seed: int = 0,
    dtype=np.float32,
    alphas: Optional[AlphaTable] = None,
) -> Network:
    """
    Instantiate every parameter of a network.

    Args:
        config: Network shape; config.mode selects relaxed or discrete cells
        genotype: Required in discrete mode
        seed: Seed of the weight initializer
        dtype: float32 for training, float64 for gradient checks
        alphas: Relaxed-mode alpha table; zeros (uniform mixing) when omitted

    Returns:
        Network with materialized parameters and fresh normalization statistics
    """
    config.validate()
    if config.mode == "discrete":
        if genotype is None:
            raise ArgumentError("a discrete network needs a genotype")
        genotype.validate()
        if genotype.nodes != config.nodes:
            raise ConfigError("network.nodes", f"config has {config.nodes} nodes but genotype has {genotype.nodes}")
        alphas = None
    else:
        genotype = None
        alphas = alphas if alphas is not None else AlphaTable.zeros(config.nodes, dtype=dtype)
        if alphas.nodes != config.nodes:
            raise ConfigError("network.nodes", f"config has {config.nodes} nodes but alphas describe {alphas.nodes}")
    store = ParameterStore(np.random.default_rng(seed), dtype=dtype, relaxed=config.mode == "relaxed")
    net = Network(config=config, store=store, alphas=alphas, genotype=genotype)
    dummy = np.zeros((2, config.input_channels, config.input_size, config.input_size), dtype=store.dtype)
    with no_grad():
        network_forward(dummy, net)
    store.reset_stats()
    store.frozen = True
    logger.info(
        f"Built {config.mode} network: {config.layers} layers, {config.scales} scales, "
        f"{len(config.classifier_layers)} exits, {net.num_params():,} parameters"
    )
    return net
