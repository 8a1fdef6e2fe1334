"""Space-aware memory matrix.

The memory is split into one block of learnable items per patch location.
A feature queried at location ``(i, j)`` is compared (raw dot product) only
against the items of block ``(i, j)``; the top-k similarities are mixed by
a Gumbel-perturbed softmax whose backward pass reaches every item.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.nn import Module
from .autodiff.tensor import Parameter, ShapeError, Tensor


@dataclass
class LookupResult:
    augmented: Tensor
    similarities: Tensor
    weights: Tensor
    active: np.ndarray  # indices of the top-k items, ascending


def gumbel_shrinkage(scores: Tensor, k: int, temperature: float = 1.0, noise: np.ndarray | None = None) -> Tensor:
    return ops.gumbel_shrinkage(scores, k, temperature=temperature, noise=noise)


def memory_lookup(
    z: Tensor,
    block: Tensor,
    k: int,
    temperature: float = 1.0,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> LookupResult:
    """Query one block with one feature vector ``z`` of length C."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if z.ndim != 1 or block.ndim != 2 or block.shape[1] != z.shape[0]:
        raise ShapeError(f"memory_lookup: feature {z.shape} incompatible with block {block.shape}")
    sims = ops.reshape(ops.matmul(block, ops.reshape(z, (-1, 1))), (-1,))
    noise = None
    if mode == "train":
        if rng is None:
            raise ValueError("memory_lookup: train mode needs an rng for Gumbel noise")
        noise = ops.sample_gumbel(rng, sims.shape)
    weights = gumbel_shrinkage(sims, k, temperature, noise)
    augmented = ops.reshape(ops.matmul(ops.reshape(weights, (1, -1)), block), (-1,))
    return LookupResult(augmented, sims, weights, np.flatnonzero(weights.data > 0))


class SpaceAwareMemory(Module):
    """Blocks of ``items`` learnable vectors of size ``dim``, one per grid cell.

    ``blocks`` has shape ``(rows * cols, items, dim)`` with cells in
    row-major order.
    """

    def __init__(self, grid: tuple[int, int], items: int, dim: int, rng: np.random.Generator,
                 top_k: int = 5, temperature: float = 1.0):
        rows, cols = grid
        if min(rows, cols, items, dim) <= 0:
            raise ValueError(f"memory sizes must be positive, got grid={grid}, items={items}, dim={dim}")
        if not 1 <= top_k <= items:
            raise ValueError(f"top_k must lie in [1, {items}], got {top_k}")
        self.grid = (int(rows), int(cols))
        self.items = int(items)
        self.dim = int(dim)
        self.top_k = int(top_k)
        self.temperature = float(temperature)
        self.blocks = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (rows * cols, items, dim)))

    @property
    def num_blocks(self) -> int:
        return self.grid[0] * self.grid[1]

    def block(self, i: int, j: int) -> Tensor:
        rows, cols = self.grid
        if not (0 <= i < rows and 0 <= j < cols):
            raise IndexError(f"block ({i}, {j}) outside grid {self.grid}")
        return ops.getitem(self.blocks, i * cols + j)

    def forward(self, z: Tensor, rng: np.random.Generator | None = None, return_weights: bool = False):
        """Batched lookup. ``z``: (num_blocks, M, dim), row p queried against block p."""
        if z.ndim != 3 or z.shape[0] != self.num_blocks or z.shape[2] != self.dim:
            raise ShapeError(
                f"memory: queries {z.shape} incompatible with {self.num_blocks} blocks of dim {self.dim}"
            )
        sims = ops.matmul(z, ops.transpose(self.blocks, (0, 2, 1)))
        noise = None
        if self.training:
            if rng is None:
                raise ValueError("memory: training mode needs an rng for Gumbel noise")
            noise = ops.sample_gumbel(rng, sims.shape)
        weights = gumbel_shrinkage(sims, self.top_k, self.temperature, noise)
        out = ops.matmul(weights, self.blocks)
        return (out, weights) if return_weights else out


def memory_init(grid: tuple[int, int], items_per_block: int, item_dim: int, seed: int,
                top_k: int = 5, temperature: float = 1.0) -> SpaceAwareMemory:
    return SpaceAwareMemory(grid, items_per_block, item_dim, np.random.default_rng(seed),
                            top_k=min(top_k, items_per_block) if items_per_block > 0 else top_k,
                            temperature=temperature)
