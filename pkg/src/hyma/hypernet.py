"""Hypernetwork that emits connector parameters for every encoder pair.

For pair ``k`` and connector layer ``j`` the generator MLP maps
``codebook[k] + layer_emb[j]`` to a slab of ``slab_size`` numbers; the first
``rows_j * cols_j + rows_j`` entries become layer ``j``'s weights-then-bias
block and the blocks are concatenated into ``theta``.

In ``encoder-compression`` mode the codebook row is replaced by an affine
compression of the batch-averaged image-encoder features (one compressor per
image encoder, since image encoders may differ in width).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .connectors import ConnectorLayout, ConnectorParams
from .errors import ArgumentError, ConfigurationError, RangeError

CONDITIONING_MODES = ("codebook", "encoder-compression")


@dataclass
class HyperNetConfig:
    cond_dim: int
    num_pairs: int
    max_layers: int
    slab_size: int
    generator_hidden: tuple = (64,)
    conditioning: str = "codebook"
    # generated-entry variance targeted at init (weighted mean of 1/fan_in)
    target_var: float = 1.0
    # number of text encoders, so that pair k uses image encoder k // num_text
    num_text: int = 1
    # width of each image encoder, only used by encoder-compression mode
    image_dims: tuple = ()

    def __post_init__(self):
        self.generator_hidden = tuple(int(h) for h in self.generator_hidden)
        self.image_dims = tuple(int(d) for d in self.image_dims)
        if self.cond_dim <= 0:
            raise ConfigurationError("cond_dim must be positive")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(f"unknown conditioning mode {self.conditioning!r}")
        if self.conditioning == "encoder-compression" and not self.image_dims:
            raise ConfigurationError("encoder-compression mode needs image_dims")
        if self.num_pairs < 1 or self.max_layers < 1 or self.slab_size < 1:
            raise ConfigurationError("num_pairs, max_layers and slab_size must be positive")

    @classmethod
    def for_layouts(cls, layouts: Sequence[ConnectorLayout], cond_dim: int = 32,
                    generator_hidden: Sequence[int] = (64,), conditioning: str = "codebook",
                    num_text: int = 1, image_dims: Sequence[int] = ()) -> "HyperNetConfig":
        """Size the slab and depth to cover every pair's layout."""
        weights = sum(r * c for lay in layouts for r, c in lay.layer_shapes)
        target = sum(r for lay in layouts for r, _ in lay.layer_shapes) / weights
        return cls(cond_dim=cond_dim, num_pairs=len(layouts),
                   max_layers=max(l.num_layers for l in layouts),
                   slab_size=max(l.max_layer_size for l in layouts),
                   generator_hidden=tuple(generator_hidden), conditioning=conditioning,
                   target_var=target, num_text=num_text, image_dims=tuple(image_dims))

    def check_layout(self, layout: ConnectorLayout) -> None:
        if layout.num_layers > self.max_layers:
            raise ConfigurationError(
                f"layout has {layout.num_layers} layers, hypernetwork supports {self.max_layers}")
        if layout.max_layer_size > self.slab_size:
            raise ConfigurationError(
                f"layer block of {layout.max_layer_size} exceeds slab size {self.slab_size}")

    def to_dict(self) -> dict:
        return {"cond_dim": self.cond_dim, "num_pairs": self.num_pairs, "max_layers": self.max_layers,
                "slab_size": self.slab_size, "generator_hidden": list(self.generator_hidden),
                "conditioning": self.conditioning, "target_var": self.target_var,
                "num_text": self.num_text, "image_dims": list(self.image_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperNetConfig":
        return cls(**d)


@dataclass
class HyperNetState:
    config: HyperNetConfig
    codebook: nx.Tensor | None
    layer_embeddings: nx.Tensor
    generator: list  # [(W in x out, b), ...]; last entry is the output layer
    compressors: list = field(default_factory=list)  # [(W D_A x C, b), ...] per image encoder

    def leaves(self) -> dict:
        out = {}
        if self.codebook is not None:
            out["codebook"] = self.codebook
        out["layer_emb"] = self.layer_embeddings
        for i, (w, b) in enumerate(self.generator):
            out[f"gen.layer{i}.w"] = w
            out[f"gen.layer{i}.b"] = b
        for n, (w, b) in enumerate(self.compressors):
            out[f"compressor.{n}.w"] = w
            out[f"compressor.{n}.b"] = b
        return out

    def load_leaves(self, arrays: dict) -> None:
        for name, leaf in self.leaves().items():
            arr = np.asarray(arrays[name], dtype=leaf.data.dtype)
            if arr.shape != leaf.shape:
                raise ConfigurationError(f"leaf {name}: shape {arr.shape} != {leaf.shape}")
            leaf.data = arr.copy()
            leaf.data.setflags(write=False)


def _leaf(a) -> nx.Tensor:
    return nx.Tensor(a, requires_grad=True)


def _hidden_forward(hidden_layers, x: nx.Tensor) -> nx.Tensor:
    for w, b in hidden_layers:
        x = nx.gelu(nx.add_bias(nx.matmul(x, w), b))
    return x


def init(config: HyperNetConfig, seed: int) -> HyperNetState:
    """Seeded initialisation.

    Codebook and layer embeddings are N(0, 1/C); hidden generator layers are
    fan-in scaled with zero bias. The output layer has zero bias and its
    weight scale is calibrated on the initial conditioning inputs so that
    generated entries have variance ``config.target_var``, i.e. generated
    connectors start at roughly standard fan-in scale.
    """
    rng = np.random.default_rng([seed, 11])
    C = config.cond_dim
    codebook = None
    if config.conditioning == "codebook":
        codebook = _leaf(rng.standard_normal((config.num_pairs, C)) / np.sqrt(C))
    layer_emb = _leaf(rng.standard_normal((config.max_layers, C)) / np.sqrt(C))

    widths = (C,) + config.generator_hidden
    generator = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        generator.append((_leaf(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)),
                          _leaf(np.zeros(fan_out))))

    if codebook is not None:
        codes = codebook.data
    else:
        codes = rng.standard_normal((config.num_pairs, C)) / np.sqrt(C)
    probe = (codes[:, None, :] + layer_emb.data[None, :, :]).reshape(-1, C)
    h = _hidden_forward(generator, nx.Tensor(probe)).data
    mean_sq = float(np.mean((h * h).sum(axis=1))) or 1.0
    out_scale = np.sqrt(config.target_var / mean_sq)
    generator.append((_leaf(rng.standard_normal((widths[-1], config.slab_size)) * out_scale),
                      _leaf(np.zeros(config.slab_size))))

    compressors = []
    if config.conditioning == "encoder-compression":
        for d in config.image_dims:
            compressors.append((_leaf(rng.standard_normal((d, C)) / np.sqrt(d)), _leaf(np.zeros(C))))
    return HyperNetState(config, codebook, layer_emb, generator, compressors)


def condition(state: HyperNetState, k: int, batch_features: nx.Tensor | None = None) -> nx.Tensor:
    """Conditioning vector for pair ``k`` as a ``1 x C`` tensor."""
    cfg = state.config
    if not 0 <= k < cfg.num_pairs:
        raise RangeError(f"pair index {k} outside [0, {cfg.num_pairs})")
    if cfg.conditioning == "codebook":
        return state.codebook[k:k + 1]
    if batch_features is None:
        raise ArgumentError("encoder-compression conditioning needs batch features")
    w, b = state.compressors[k // cfg.num_text]
    if batch_features.data.ndim != 2 or batch_features.shape[1] != w.shape[0]:
        raise ArgumentError(f"features {batch_features.shape} do not match compressor input {w.shape[0]}")
    pooled = nx.reshape(nx.mean(batch_features, axis=0), (1, w.shape[0]))
    return nx.add_bias(nx.matmul(pooled, w), b)


def generate_slabs(state: HyperNetState, k: int, num_layers: int,
                   batch_features: nx.Tensor | None = None) -> nx.Tensor:
    """``num_layers x slab_size`` generator output for pair ``k``."""
    if num_layers > state.config.max_layers:
        raise ConfigurationError(f"{num_layers} layers requested, max is {state.config.max_layers}")
    c = condition(state, k, batch_features)
    x = nx.add(nx.take_rows(c, [0] * num_layers), state.layer_embeddings[:num_layers])
    h = _hidden_forward(state.generator[:-1], x)
    w, b = state.generator[-1]
    return nx.add_bias(nx.matmul(h, w), b)


def slice_slabs(slabs: nx.Tensor, layout: ConnectorLayout) -> nx.Tensor:
    """Take each layer's block prefix from its slab and concatenate into theta."""
    blocks = [slabs[j, :size] for j, size in enumerate(layout.block_sizes)]
    return blocks[0] if len(blocks) == 1 else nx.concat(blocks)


def generate(state: HyperNetState, k: int, layout: ConnectorLayout,
             batch_features: nx.Tensor | None = None) -> ConnectorParams:
    state.config.check_layout(layout)
    slabs = generate_slabs(state, k, layout.num_layers, batch_features)
    return ConnectorParams(layout, slice_slabs(slabs, layout))


def consumed_entries(layout: ConnectorLayout) -> int:
    return sum(layout.block_sizes)


def generator_param_count(config: HyperNetConfig) -> int:
    widths = (config.cond_dim,) + config.generator_hidden + (config.slab_size,)
    return sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))


def generation_flops(config: HyperNetConfig, num_layers: int, batch: int = 0,
                     image_dim: int = 0) -> int:
    """Train-step FLOPs (fwd + 2x bwd) of producing one pair's parameters."""
    widths = (config.cond_dim,) + config.generator_hidden + (config.slab_size,)
    per_row = sum(2 * i * o for i, o in zip(widths[:-1], widths[1:]))
    total = 3 * num_layers * per_row
    if config.conditioning == "encoder-compression":
        total += 3 * 2 * image_dim * config.cond_dim + batch * image_dim
    return total
