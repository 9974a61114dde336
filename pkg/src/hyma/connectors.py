"""Connector layouts, the flat parameter vector, forward pass and FLOPs model.

A connector maps a modality-B (text) embedding into modality-A (image)
space. Its parameters live in one flat vector ``theta`` with a frozen layout:
layer 0 weights (row-major, shape ``(rows, cols)``), layer 0 bias, layer 1
weights, layer 1 bias, and so on. The hypernetwork slices against exactly
this layout.

FLOPs conventions, used by every strategy:

* a multiply-accumulate is 2 FLOPs; biases and activations are not counted;
* backward costs 2x forward, so a training step costs 3x forward;
* the InfoNCE similarity matrix costs ``2 * b**2 * D_A`` forward, also x3;
* frozen encoders cost ``2 * param_count`` per sample, forward only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ArgumentError, DimensionError

KINDS = ("linear", "mlp1", "mlp2")
HIDDEN = 1024

_ALIASES = {"linear": "linear", "mlp1": "mlp1", "mlp2": "mlp2",
            "mlp_1": "mlp1", "mlp_2": "mlp2", "mlp₁": "mlp1", "mlp₂": "mlp2"}


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.lower()]
    except KeyError:
        raise ArgumentError(f"unknown connector kind {kind!r}; expected one of {KINDS}") from None


def depth(kind: str) -> int:
    """Number of hidden layers (0 for linear)."""
    return KINDS.index(canonical_kind(kind))


@dataclass(frozen=True)
class ConnectorLayout:
    kind: str
    in_dim: int
    out_dim: int
    hidden: int
    layer_shapes: tuple  # ((rows, cols), ...) weight shapes; bias length == rows

    @property
    def num_layers(self) -> int:
        return len(self.layer_shapes)

    @property
    def block_sizes(self) -> tuple:
        return tuple(r * c + r for r, c in self.layer_shapes)

    @property
    def total_params(self) -> int:
        return sum(self.block_sizes)

    @property
    def max_layer_size(self) -> int:
        return max(self.block_sizes)

    def offsets(self) -> list:
        """``(start, stop)`` of every layer block inside ``theta``."""
        out, start = [], 0
        for size in self.block_sizes:
            out.append((start, start + size))
            start += size
        return out


def make_layout(kind: str, in_dim: int, out_dim: int, hidden: int = HIDDEN) -> ConnectorLayout:
    kind = canonical_kind(kind)
    if in_dim <= 0 or out_dim <= 0 or hidden <= 0:
        raise ArgumentError("connector dims must be positive")
    if kind == "linear":
        shapes = ((out_dim, in_dim),)
    elif kind == "mlp1":
        shapes = ((hidden, in_dim), (out_dim, hidden))
    else:
        shapes = ((hidden, in_dim), (hidden, hidden), (out_dim, hidden))
    return ConnectorLayout(kind, int(in_dim), int(out_dim), int(hidden), shapes)


@dataclass
class ConnectorParams:
    layout: ConnectorLayout
    theta: nx.Tensor

    def __post_init__(self):
        if not isinstance(self.theta, nx.Tensor):
            self.theta = nx.Tensor(self.theta)
        if self.theta.shape != (self.layout.total_params,):
            raise DimensionError(
                f"theta has shape {self.theta.shape}, layout needs ({self.layout.total_params},)")


def flatten(layout: ConnectorLayout, layers: Sequence[tuple]) -> np.ndarray:
    """``[(W0, b0), (W1, b1), ...]`` -> flat theta in canonical order."""
    if len(layers) != layout.num_layers:
        raise DimensionError(f"expected {layout.num_layers} layers, got {len(layers)}")
    parts = []
    for (rows, cols), (w, b) in zip(layout.layer_shapes, layers):
        w, b = np.asarray(w), np.asarray(b)
        if w.shape != (rows, cols) or b.shape != (rows,):
            raise DimensionError(f"layer shapes {w.shape}/{b.shape} != {(rows, cols)}/{(rows,)}")
        parts += [w.reshape(-1), b]
    return np.concatenate(parts)


def unflatten(layout: ConnectorLayout, theta) -> list:
    theta = np.asarray(theta)
    if theta.shape != (layout.total_params,):
        raise DimensionError(f"theta length {theta.shape} != {layout.total_params}")
    layers = []
    for (rows, cols), (start, _) in zip(layout.layer_shapes, layout.offsets()):
        w = theta[start:start + rows * cols].reshape(rows, cols)
        b = theta[start + rows * cols:start + rows * cols + rows]
        layers.append((w.copy(), b.copy()))
    return layers


def init_params(layout: ConnectorLayout, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled normal weights, zero biases."""
    layers = []
    for rows, cols in layout.layer_shapes:
        layers.append((rng.standard_normal((rows, cols)) / np.sqrt(cols), np.zeros(rows)))
    return flatten(layout, layers)


def forward(params: ConnectorParams, x: nx.Tensor) -> nx.Tensor:
    """affine -> gelu -> affine ... (gelu between layers, none after the last)."""
    layout = params.layout
    if x.data.ndim != 2 or x.shape[1] != layout.in_dim:
        raise DimensionError(f"connector expects width {layout.in_dim}, got input {x.shape}")
    theta = params.theta
    h = x
    for j, ((rows, cols), (start, _)) in enumerate(zip(layout.layer_shapes, layout.offsets())):
        w = nx.reshape(theta[start:start + rows * cols], (rows, cols))
        b = theta[start + rows * cols:start + rows * cols + rows]
        h = nx.add_bias(nx.matmul(h, nx.transpose(w)), b)
        if j < layout.num_layers - 1:
            h = nx.gelu(h)
    return h


def forward_numpy(layout: ConnectorLayout, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Graph-free forward used by evaluation."""
    h = np.asarray(x, dtype=np.float64)
    layers = unflatten(layout, theta)
    for j, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if j < len(layers) - 1:
            h = nx.gelu(nx.Tensor(h)).data
    return h


# ---------------------------------------------------------------------------
# FLOPs


def flops_per_forward(layout: ConnectorLayout, batch: int) -> int:
    return int(batch) * sum(2 * r * c for r, c in layout.layer_shapes)


def similarity_flops(batch: int, out_dim: int) -> int:
    """InfoNCE similarity matrix, forward and backward."""
    return 3 * 2 * int(batch) ** 2 * int(out_dim)


def encoder_flops(batch: int, param_counts: Sequence[int] = ()) -> int:
    return int(batch) * sum(2 * int(p) for p in param_counts)


def flops_per_train_step(layout: ConnectorLayout, batch: int,
                         encoder_params: Sequence[int] = ()) -> int:
    """Connector fwd+bwd, similarity term, and frozen-encoder embedding cost."""
    if batch < 1:
        raise ArgumentError("batch must be >= 1")
    return (3 * flops_per_forward(layout, batch)
            + similarity_flops(batch, layout.out_dim)
            + encoder_flops(batch, encoder_params))
