"""Feature in-painting over a grid of patch features.

Each patch feature is first replaced by its memory-augmented "normal"
version. Then every center feature is refined by a single-head attention
layer whose query is the center's own feature and whose keys/values are the
augmented features of its (up to eight) neighbors. The center's own
augmented feature never enters its key/value set.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Linear, Module
from .autodiff.tensor import ShapeError, Tensor
from .memory import SpaceAwareMemory

_MASKED = -1e30


@dataclass
class PatchGrid:
    """``features`` is (batch, rows * cols, *feature_shape) in row-major cell order."""

    extent: tuple[int, int]
    features: Tensor
    stage: str = "raw"

    def __post_init__(self):
        rows, cols = self.extent
        if self.features.ndim < 3 or self.features.shape[1] != rows * cols:
            raise ShapeError(f"PatchGrid: features {self.features.shape} do not hold {rows}x{cols} cells")

    @property
    def batch(self) -> int:
        return self.features.shape[0]


def neighbor_index(i: int, j: int, extent: tuple[int, int]) -> list[tuple[int, int]]:
    """Valid 8-neighborhood of cell (i, j) in row-major order."""
    rows, cols = extent
    if not (0 <= i < rows and 0 <= j < cols):
        raise IndexError(f"cell ({i}, {j}) outside grid {extent}")
    return [
        (a, b)
        for a in range(i - 1, i + 2)
        for b in range(j - 1, j + 2)
        if (a, b) != (i, j) and 0 <= a < rows and 0 <= b < cols
    ]


@lru_cache(maxsize=None)
def neighbor_table(extent: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Padded (cells, 8) table of flat neighbor indices and its validity mask."""
    rows, cols = extent
    idx = np.zeros((rows * cols, 8), dtype=np.int64)
    valid = np.zeros((rows * cols, 8), dtype=bool)
    for i in range(rows):
        for j in range(cols):
            nb = neighbor_index(i, j, extent)
            p = i * cols + j
            idx[p, : len(nb)] = [a * cols + b for a, b in nb]
            valid[p, : len(nb)] = True
    idx.setflags(write=False)
    valid.setflags(write=False)
    return idx, valid


def canonical_order(kv: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Permutation along axis -2 that sorts each key/value set lexicographically.

    Invalid slots go last. Sorting makes attention a function of the *set*
    of neighbors, bit-for-bit, regardless of the order they were gathered in.
    """
    *lead, s, d = kv.shape
    groups = int(np.prod(lead)) if lead else 1
    flat = kv.reshape(groups * s, d)
    invalid = np.broadcast_to(~valid, kv.shape[:-1]).reshape(-1).astype(np.int8)
    group = np.repeat(np.arange(groups), s)
    keys = np.vstack([flat.T[::-1], invalid[None, :], group[None, :]])
    order = np.lexsort(keys).reshape(groups, s) - (np.arange(groups) * s)[:, None]
    return order.reshape(*lead, s)


def _gather_slots(x: Tensor, order: np.ndarray) -> Tensor:
    lead = order.shape[:-1]
    grids = np.indices(lead + (order.shape[-1],), sparse=True)
    index = tuple(grids[:-1]) + (order,)
    return ops.getitem(x, index)


class NeighborAttention(Module):
    """Single-head attention from one query token to a set of neighbor tokens,
    followed by a residual connection and a two-layer feed-forward sublayer.

    A token is a small feature map flattened to ``positions * dim`` values.
    Projections act on the ``dim`` channels at every position (shared
    weights, like point-wise convolutions), while attention scores compare
    whole tokens. The parameter count therefore does not depend on the
    patch size.
    """

    def __init__(self, dim: int, positions: int, rng: np.random.Generator):
        self.dim = dim
        self.positions = positions
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, bias=False)
        self.ff1 = Linear(dim, dim, rng)
        self.ff2 = Linear(dim, dim, rng)

    @property
    def token_dim(self) -> int:
        return self.dim * self.positions

    def _project(self, layer: Linear, t: Tensor) -> Tensor:
        lead = t.shape[:-1]
        out = layer(ops.reshape(t, lead + (self.positions, self.dim)))
        return ops.reshape(out, lead + (self.token_dim,))

    def attend(self, q: Tensor, kv: Tensor, valid: np.ndarray) -> Tensor:
        """q: (..., D); kv: (..., S, D); valid: bool, broadcastable to (..., S)."""
        if kv.shape[:-2] != q.shape[:-1] or kv.shape[-1] != q.shape[-1] or q.shape[-1] != self.token_dim:
            raise ShapeError(f"attention: query {q.shape} incompatible with key/value set {kv.shape}")
        valid = np.broadcast_to(valid, kv.shape[:-1])
        order = canonical_order(kv.data, valid)
        kv = _gather_slots(kv, order)
        valid = np.take_along_axis(valid, order, axis=-1)
        query = ops.reshape(self._project(self.wq, q), q.shape[:-1] + (1, self.token_dim))
        keys = self._project(self.wk, kv)
        values = self._project(self.wv, kv)
        axes = tuple(range(keys.ndim - 2)) + (keys.ndim - 1, keys.ndim - 2)
        scores = ops.scale(ops.matmul(query, ops.transpose(keys, axes)), 1.0 / np.sqrt(self.token_dim))
        mask = np.where(valid, 0.0, _MASKED)[..., None, :]
        weights = ops.softmax(ops.add(scores, Tensor(mask)), axis=-1)
        mixed = ops.reshape(ops.matmul(weights, values), q.shape)
        return self._project(self.wo, mixed)

    def forward(self, q: Tensor, kv: Tensor, valid: np.ndarray) -> Tensor:
        h = ops.add(q, self.attend(q, kv, valid))
        return ops.add(h, self._project(self.ff2, ops.relu(self._project(self.ff1, h))))


class InpaintBlock(Module):
    """Point-wise reduce -> memory augmentation -> neighbor attention -> point-wise expand."""

    def __init__(self, channels: int, feature_hw: tuple[int, int], grid: tuple[int, int],
                 rng: np.random.Generator, reduction: int = 4, items: int = 100, top_k: int = 5,
                 temperature: float = 1.0):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.grid = tuple(grid)
        self.feature_hw = tuple(feature_hw)
        self.channels = channels
        self.reduced = channels // reduction
        self.token_dim = self.reduced * feature_hw[0] * feature_hw[1]
        self.reduce = Conv2d(channels, self.reduced, 1, rng)
        self.expand = Conv2d(self.reduced, channels, 1, rng)
        self.memory = SpaceAwareMemory(grid, items, self.token_dim, rng, top_k=top_k, temperature=temperature)
        self.attention = NeighborAttention(self.reduced, feature_hw[0] * feature_hw[1], rng)

    @property
    def cells(self) -> int:
        return self.grid[0] * self.grid[1]

    def augment(self, tokens: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """(B, P, D) raw tokens -> (B, P, D) memory-augmented tokens."""
        per_block = ops.transpose(tokens, (1, 0, 2))
        return ops.transpose(self.memory(per_block, rng), (1, 0, 2))

    def refine(self, tokens: Tensor, augmented: Tensor) -> Tensor:
        if self.cells == 1:
            # no neighbors: the lone cell reads its own memory output instead
            kv = ops.reshape(augmented, augmented.shape[:2] + (1, self.token_dim))
            return self.attention(tokens, kv, np.ones((1, 1), dtype=bool))
        idx, valid = neighbor_table(self.grid)
        kv = ops.getitem(augmented, (slice(None), idx))  # (B, P, 8, D)
        return self.attention(tokens, kv, valid)

    def forward(self, feats: Tensor, batch: int, rng: np.random.Generator | None = None) -> Tensor:
        """``feats``: (batch * cells, fh, fw, channels) -> same shape."""
        fh, fw = self.feature_hw
        if feats.shape != (batch * self.cells, fh, fw, self.channels):
            raise ShapeError(
                f"inpaint: features {feats.shape} do not match grid {self.grid} of "
                f"({fh}, {fw}, {self.channels}) cells for batch {batch}"
            )
        reduced = self.reduce(feats)
        tokens = ops.reshape(reduced, (batch, self.cells, self.token_dim))
        out = self.refine(tokens, self.augment(tokens, rng))
        out = ops.reshape(out, (batch * self.cells, fh, fw, self.reduced))
        return self.expand(out)


def inpaint_forward(grid: PatchGrid, block: InpaintBlock, rng: np.random.Generator | None = None) -> PatchGrid:
    if tuple(grid.extent) != tuple(block.grid):
        raise ShapeError(f"inpaint: grid extent {grid.extent} does not match memory extent {block.grid}")
    b, p = grid.features.shape[:2]
    flat = ops.reshape(grid.features, (b * p,) + grid.features.shape[2:])
    out = block(flat, b, rng)
    return PatchGrid(grid.extent, ops.reshape(out, grid.features.shape), stage="inpainted")
