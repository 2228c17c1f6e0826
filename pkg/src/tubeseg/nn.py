"""Encoder-decoder segmentation network built from :mod:`tubeseg.tensor` ops.

ResNet-style encoder (7x7 stem, max-pool, four residual stages) feeding a
decoder of nearest-neighbour upsampling, skip concatenation, scSE attention
and conv-bn-relu blocks, followed by a segmentation head.

Parameters live in a flat :class:`ParameterStore`; block functions receive a
:class:`Scope` view so that names come out hierarchical, e.g.
``encoder.stage2.block0.conv1.weight``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 2
    encoder_stage_depths: list = field(default_factory=lambda: [3, 4, 6, 3])
    base_width: int = 64
    block_kind: str = "residual"
    se_reduction: int = 2
    decoder_multipliers: list = field(default_factory=lambda: [4, 2, 1, 1])
    use_attention: bool = True
    # "after_concat": upsample -> concat -> scse -> conv -> bn -> relu
    # "after_conv":   upsample -> concat -> conv -> bn -> relu -> scse
    attention_placement: str = "after_concat"
    input_size: tuple = (960, 1280)

    def validate(self) -> "NetworkConfig":
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if len(self.encoder_stage_depths) != 4 or min(self.encoder_stage_depths) < 1:
            raise ConfigError(f"encoder_stage_depths must list 4 positive counts, got {self.encoder_stage_depths}")
        if self.block_kind not in ("residual", "bottleneck"):
            raise ConfigError(f"block_kind must be residual or bottleneck, got {self.block_kind!r}")
        if self.se_reduction < 1 or self.base_width % self.se_reduction:
            raise ConfigError(
                f"base_width {self.base_width} must be divisible by se_reduction {self.se_reduction}"
            )
        if self.block_kind == "bottleneck" and self.base_width % 4:
            raise ConfigError("bottleneck blocks need base_width divisible by 4")
        if len(self.decoder_multipliers) != 4 or min(self.decoder_multipliers) < 1:
            raise ConfigError("decoder_multipliers must list 4 positive integers")
        if self.attention_placement not in ("after_concat", "after_conv"):
            raise ConfigError(f"unknown attention_placement {self.attention_placement!r}")
        check_input_extents(*self.input_size)
        return self

    @property
    def stage_widths(self) -> list:
        return [self.base_width * m for m in (1, 2, 4, 8)]

    @property
    def decoder_widths(self) -> list:
        return [self.base_width * m for m in self.decoder_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def desk_config(num_classes: int = 2, **overrides) -> NetworkConfig:
    """Small preset: every structural mechanism, trainable in minutes on one core."""
    cfg = NetworkConfig(
        num_classes=num_classes,
        encoder_stage_depths=[2, 2, 2, 2],
        base_width=16,
        input_size=(64, 64),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


def full_config(num_classes: int = 2) -> NetworkConfig:
    return NetworkConfig(num_classes=num_classes).validate()


def check_input_extents(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ConfigError(f"input extents {h}x{w} must both be divisible by 2**5 = 32")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Ordered name -> Tensor map plus batch-norm running statistics."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, RunningStats] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def add_stats(self, name: str, channels: int) -> RunningStats:
        if name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        stats = RunningStats(channels)
        self.buffers[name] = stats
        return stats

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name, t in self.params.items():
            other.params[name] = Tensor(t.data.copy(), requires_grad=True, dtype=t.dtype)
        for name, s in self.buffers.items():
            clone = RunningStats(s.mean.shape[0], dtype=s.mean.dtype)
            clone.mean[...] = s.mean
            clone.var[...] = s.var
            clone.count = s.count
            other.buffers[name] = clone
        return other


class Scope:
    """Prefixing view onto a :class:`ParameterStore`."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._name(name)]

    def __contains__(self, name: str) -> bool:
        return self._name(name) in self.store

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._name(name))

    def stats(self, name: str) -> RunningStats:
        return self.store.buffers[self._name(name)]


# ---------------------------------------------------------------------------
# parameter construction (mirrors the forward functions below)
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, store: ParameterStore, rng: np.random.Generator, dtype):
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = False) -> None:
        # He-normal for relu networks
        std = np.sqrt(2.0 / (cin * k * k))
        self.store.add(f"{name}.weight", (self.rng.standard_normal((cout, cin, k, k)) * std).astype(self.dtype))
        if bias:
            self.store.add(f"{name}.bias", np.zeros(cout, dtype=self.dtype))

    def bn(self, name: str, channels: int) -> None:
        self.store.add(f"{name}.weight", np.ones(channels, dtype=self.dtype))
        self.store.add(f"{name}.bias", np.zeros(channels, dtype=self.dtype))
        self.store.add_stats(name, channels)

    def scse(self, name: str, channels: int, r: int) -> None:
        self.conv(f"{name}.cse.fc1", channels, channels // r, 1, bias=True)
        self.conv(f"{name}.cse.fc2", channels // r, channels, 1, bias=True)
        self.conv(f"{name}.sse.conv", channels, 1, 1, bias=True)

    def residual(self, name: str, cin: int, cout: int, stride: int) -> None:
        self.conv(f"{name}.conv1", cin, cout, 3)
        self.bn(f"{name}.bn1", cout)
        self.conv(f"{name}.conv2", cout, cout, 3)
        self.bn(f"{name}.bn2", cout)
        if stride != 1 or cin != cout:
            self.conv(f"{name}.shortcut.conv", cin, cout, 1)
            self.bn(f"{name}.shortcut.bn", cout)

    def bottleneck(self, name: str, cin: int, cout: int, stride: int) -> None:
        mid = cout // 4
        self.conv(f"{name}.conv1", cin, mid, 1)
        self.bn(f"{name}.bn1", mid)
        self.conv(f"{name}.conv2", mid, mid, 3)
        self.bn(f"{name}.bn2", mid)
        self.conv(f"{name}.conv3", mid, cout, 1)
        self.bn(f"{name}.bn3", cout)
        if stride != 1 or cin != cout:
            self.conv(f"{name}.shortcut.conv", cin, cout, 1)
            self.bn(f"{name}.shortcut.bn", cout)


def build_params(config: NetworkConfig, seed: int = 0) -> ParameterStore:
    """Create every learnable tensor implied by ``config`` (deterministic in seed)."""
    config.validate()
    store = ParameterStore()
    b = _Builder(store, np.random.default_rng(seed), T.get_dtype())
    widths = config.stage_widths
    base = config.base_width

    b.conv("encoder.stem.conv", config.in_channels, base, 7)
    b.bn("encoder.stem.bn", base)
    cin = base
    make_block = b.residual if config.block_kind == "residual" else b.bottleneck
    for s, (depth, width) in enumerate(zip(config.encoder_stage_depths, widths), start=1):
        for i in range(depth):
            stride = 2 if (i == 0 and s > 1) else 1
            make_block(f"encoder.stage{s}.block{i}", cin, width, stride)
            cin = width

    skips = [widths[2], widths[1], widths[0], base]
    x_ch = widths[3]
    for d, (skip_ch, out_ch) in enumerate(zip(skips, config.decoder_widths), start=1):
        fused = x_ch + skip_ch
        name = f"decoder.block{d}"
        if config.use_attention and config.attention_placement == "after_concat":
            b.scse(f"{name}.attention", fused, config.se_reduction)
        b.conv(f"{name}.conv", fused, out_ch, 3)
        b.bn(f"{name}.bn", out_ch)
        if config.use_attention and config.attention_placement == "after_conv":
            b.scse(f"{name}.attention", out_ch, config.se_reduction)
        x_ch = out_ch

    head = base
    b.conv("head.conv1", x_ch, head, 3)
    b.bn("head.bn1", head)
    if config.use_attention:
        b.scse("head.attention", head, config.se_reduction)
    b.conv("head.conv2", head, config.num_classes, 3, bias=True)
    return store


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def conv_bn(x: Tensor, p: Scope, conv: str, bn: str, stride: int = 1, train: bool = True) -> Tensor:
    k = p[f"{conv}.weight"].shape[-1]
    y = T.conv2d(x, p[f"{conv}.weight"], None, stride=stride, padding=k // 2)
    return T.batchnorm2d(y, p[f"{bn}.weight"], p[f"{bn}.bias"], p.stats(bn), train=train)


def _shortcut(x: Tensor, p: Scope, stride: int, train: bool) -> Tensor:
    if "shortcut.conv.weight" in p:
        return conv_bn(x, p, "shortcut.conv", "shortcut.bn", stride=stride, train=train)
    return x


def residual_block(x: Tensor, p: Scope, stride: int = 1, train: bool = True) -> Tensor:
    """relu(bn(conv3x3(relu(bn(conv3x3(x))))) + shortcut(x))."""
    _check_block_input(x, p["conv1.weight"])
    y = T.relu(conv_bn(x, p, "conv1", "bn1", stride=stride, train=train))
    y = conv_bn(y, p, "conv2", "bn2", train=train)
    return T.relu(T.add(y, _shortcut(x, p, stride, train)))


def bottleneck_block(x: Tensor, p: Scope, stride: int = 1, train: bool = True) -> Tensor:
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand, plus shortcut."""
    _check_block_input(x, p["conv1.weight"])
    y = T.relu(conv_bn(x, p, "conv1", "bn1", train=train))
    y = T.relu(conv_bn(y, p, "conv2", "bn2", stride=stride, train=train))
    y = conv_bn(y, p, "conv3", "bn3", train=train)
    return T.relu(T.add(y, _shortcut(x, p, stride, train)))


def _check_block_input(x: Tensor, w: Tensor) -> None:
    if x.shape[1] != w.shape[1]:
        raise T.ShapeError(f"block expects {w.shape[1]} input channels, got {x.shape[1]}")


def cse(x: Tensor, p: Scope) -> Tensor:
    """Channel excitation: gate channels by a squeezed global descriptor."""
    s = T.global_avg_pool(x)
    s = T.relu(T.conv2d(s, p["fc1.weight"], p["fc1.bias"]))
    s = T.sigmoid(T.conv2d(s, p["fc2.weight"], p["fc2.bias"]))
    return T.mul_broadcast(x, s)


def sse(x: Tensor, p: Scope) -> Tensor:
    """Spatial excitation: gate pixels by a 1x1-conv projection."""
    q = T.sigmoid(T.conv2d(x, p["conv.weight"], p["conv.bias"]))
    return T.mul_broadcast(x, q)


def scse(x: Tensor, p: Scope) -> Tensor:
    return T.add(cse(x, p.scope("cse")), sse(x, p.scope("sse")))


def encoder_forward(image: Tensor, params: ParameterStore | Scope, config: NetworkConfig, train: bool = True) -> list:
    """Feature maps at 1/2, 1/4, 1/8, 1/16 and 1/32 of the input resolution."""
    check_input_extents(*image.shape[2:])
    p = params.scope("encoder") if isinstance(params, ParameterStore) else params
    x = T.relu(conv_bn(image, p.scope("stem"), "conv", "bn", stride=2, train=train))
    feats = [x]
    x = T.maxpool2d(x, kernel=3, stride=2, padding=1)
    block = residual_block if config.block_kind == "residual" else bottleneck_block
    for s, depth in enumerate(config.encoder_stage_depths, start=1):
        for i in range(depth):
            stride = 2 if (i == 0 and s > 1) else 1
            x = block(x, p.scope(f"stage{s}.block{i}"), stride=stride, train=train)
        feats.append(x)
    return feats


def decoder_block(x: Tensor, skip: Tensor, p: Scope, config: NetworkConfig, train: bool = True) -> Tensor:
    up = T.nearest_upsample(x, 2)
    if up.shape[2:] != skip.shape[2:]:
        raise T.ShapeError(f"decoder: upsampled {up.shape[2:]} does not match skip {skip.shape[2:]}")
    y = T.concat_channels(up, skip)
    if config.use_attention and config.attention_placement == "after_concat":
        y = scse(y, p.scope("attention"))
    y = T.relu(conv_bn(y, p, "conv", "bn", train=train))
    if config.use_attention and config.attention_placement == "after_conv":
        y = scse(y, p.scope("attention"))
    return y


def segmentation_head(x: Tensor, p: Scope, config: NetworkConfig, train: bool = True) -> Tensor:
    y = T.relu(conv_bn(x, p, "conv1", "bn1", train=train))
    if config.use_attention:
        y = scse(y, p.scope("attention"))
    return T.conv2d(y, p["conv2.weight"], p["conv2.bias"], padding=1)


def network_forward(image: Tensor, params: ParameterStore, config: NetworkConfig, train: bool = True) -> Tensor:
    """Logits with ``num_classes`` channels at the input resolution."""
    feats = encoder_forward(image, params, config, train=train)
    x = feats[-1]
    for d, skip in enumerate(reversed(feats[:-1]), start=1):
        x = decoder_block(x, skip, params.scope(f"decoder.block{d}"), config, train=train)
    x = T.nearest_upsample(x, 2)
    return segmentation_head(x, params.scope("head"), config, train=train)


def predict_proba(images: np.ndarray, params: ParameterStore, config: NetworkConfig) -> np.ndarray:
    """Eval-mode softmax probabilities for a normalised (N, C, H, W) batch."""
    with T.no_grad():
        logits = network_forward(Tensor(images), params, config, train=False)
        return T.softmax(logits, axis=1).data
