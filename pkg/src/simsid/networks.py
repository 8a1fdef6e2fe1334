"""Encoder, teacher/student generators, discriminator, and the full model.

Images are ``(batch, H, W, 1)`` arrays in [-1, 1]. They are cut into a grid
of non-overlapping tiles; the encoder and both generators work tile-wise
(shared weights, batch statistics over batch x tiles), while the
discriminator always sees whole images.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ops
from .autodiff.nn import BatchNorm, Conv2d, Linear, Module
from .autodiff.tensor import ShapeError, Tensor
from .inpaint import InpaintBlock
from .memory import SpaceAwareMemory


@dataclass
class ModelConfig:
    image_size: int = 128
    grid: tuple[int, int] = (4, 4)
    enc_channels: tuple[int, ...] = (32, 64, 128)
    disc_channels: tuple[int, ...] = (16, 32, 64, 128)
    items: int = 100
    top_k: int = 5
    temperature: float = 1.0
    dec_channels: tuple[int, ...] = (32, 16, 8)
    inpaint_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.dec_channels = tuple(int(c) for c in self.dec_channels)
        if len(self.dec_channels) != len(self.enc_channels):
            raise ValueError(f"decoder needs {len(self.enc_channels)} widths, got {self.dec_channels}")
        rows, cols = self.grid
        if self.image_size % rows or self.image_size % cols:
            raise ValueError(f"image size {self.image_size} not divisible by grid {self.grid}")
        levels = len(self.enc_channels)
        th, tw = self.tile_hw
        if th % 2**levels or tw % 2**levels:
            raise ValueError(f"tile {self.tile_hw} not divisible by 2**{levels} for the encoder")
        if not 1 <= self.top_k <= self.items:
            raise ValueError(f"top_k {self.top_k} must lie in [1, items={self.items}]")

    @property
    def tile_hw(self) -> tuple[int, int]:
        return self.image_size // self.grid[0], self.image_size // self.grid[1]

    @property
    def levels(self) -> int:
        return len(self.enc_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["enc_channels"] = list(self.enc_channels)
        d["disc_channels"] = list(self.disc_channels)
        d["dec_channels"] = list(self.dec_channels)
        return d


def patchify(images: Tensor, grid: tuple[int, int]) -> Tensor:
    """(B, H, W, C) -> (B, rows*cols, H/rows, W/cols, C), cells in row-major order."""
    if images.ndim != 4:
        raise ShapeError(f"patchify: expected (B, H, W, C) images, got {images.shape}")
    b, h, w, c = images.shape
    rows, cols = grid
    if h % rows or w % cols:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by grid {rows}x{cols}")
    th, tw = h // rows, w // cols
    x = ops.reshape(images, (b, rows, th, cols, tw, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, rows * cols, th, tw, c))


def unpatchify(tiles: Tensor, grid: tuple[int, int]) -> Tensor:
    """Inverse of :func:`patchify`."""
    b, p, th, tw, c = tiles.shape
    rows, cols = grid
    if p != rows * cols:
        raise ShapeError(f"unpatchify: {p} tiles do not fill grid {grid}")
    x = ops.reshape(tiles, (b, rows, cols, th, tw, c))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, rows * th, cols * tw, c))


class ConvBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, leaky: float | None = None):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.norm = BatchNorm(cout)
        self.leaky = leaky

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return ops.relu(y) if self.leaky is None else ops.leaky_relu(y, self.leaky)


class Encoder(Module):
    """One stride-2 conv-BN-ReLU per level, halving the tile side each time."""

    def __init__(self, channels: tuple[int, ...], rng: np.random.Generator):
        cins = (1,) + tuple(channels[:-1])
        self.stages = [ConvBlock(ci, co, rng, stride=2) for ci, co in zip(cins, channels)]

    def forward(self, tiles: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Returns the deepest feature map and the shallower level outputs (fine to coarse)."""
        acts = []
        x = tiles
        for stage in self.stages:
            x = stage(x)
            acts.append(x)
        return acts[-1], acts[:-1]


class Generator(Module):
    """Upsample -> concat skip -> conv-BN-ReLU per level, then 1x1 conv + tanh.

    Skips enter every level except the outermost. With ``patch_grid`` set,
    the non-outermost levels are filtered by a space-aware memory after the
    convolution (the student); otherwise the generator is a plain decoder
    (the teacher). Each such memory holds one block per position of the
    whole-image feature map at its level, so its grid is the patch grid
    scaled by the tile feature side.
    """

    def __init__(self, enc_channels: tuple[int, ...], dec_channels: tuple[int, ...], rng: np.random.Generator,
                 patch_grid: tuple[int, int] | None = None, tile_hw: tuple[int, int] | None = None,
                 items: int = 100, top_k: int = 5, temperature: float = 1.0):
        levels = len(enc_channels)
        skip_ch = list(reversed(enc_channels[:-1]))  # coarse to fine
        assert len(skip_ch) == levels - 1, "the outermost skip must not be wired"
        self.num_skips = len(skip_ch)
        cin = enc_channels[-1]
        self.blocks = []
        for lvl, cout in enumerate(dec_channels):
            extra = skip_ch[lvl] if lvl < self.num_skips else 0
            self.blocks.append(ConvBlock(cin + extra, cout, rng))
            cin = cout
        self.head = Conv2d(cin, 1, 1, rng)
        self.memories = []
        self.patch_grid = patch_grid
        if patch_grid is not None:
            rows, cols = patch_grid
            th, tw = tile_hw
            for lvl in range(levels - 1):
                side = 2 ** (levels - 1 - lvl)
                grid = (rows * (th // side), cols * (tw // side))
                self.memories.append(SpaceAwareMemory(grid, items, dec_channels[lvl], rng, top_k=top_k,
                                                      temperature=temperature))

    def _filter(self, mem: SpaceAwareMemory, x: Tensor, batch: int, rng) -> Tensor:
        n, h, w, c = x.shape
        rows, cols = self.patch_grid
        if mem.grid != (rows * h, cols * w):
            raise ShapeError(f"generator: level map {h}x{w} per tile does not fit memory grid {mem.grid}")
        # tile-major (B, rows, cols, h, w) -> image row-major positions, one query row per position
        q = ops.transpose(ops.reshape(x, (batch, rows, cols, h, w, c)), (1, 3, 2, 4, 0, 5))
        out = mem(ops.reshape(q, (mem.num_blocks, batch, c)), rng)
        out = ops.transpose(ops.reshape(out, (rows, h, cols, w, batch, c)), (4, 0, 2, 1, 3, 5))
        return ops.reshape(out, (n, h, w, c))

    def forward(self, feats: Tensor, skips: list[Tensor], batch: int, rng=None, bypass_memory: bool = False):
        """``skips`` are ordered fine to coarse as returned by :class:`Encoder`."""
        if len(skips) != self.num_skips:
            raise ShapeError(f"generator: expected {self.num_skips} skip tensors, got {len(skips)}")
        coarse_first = list(reversed(skips))
        x = feats
        levels = []
        for lvl, block in enumerate(self.blocks):
            x = ops.upsample_nearest(x, 2)
            if lvl < self.num_skips:
                skip = coarse_first[lvl]
                if skip.shape[:3] != x.shape[:3]:
                    raise ShapeError(f"generator: skip {skip.shape} does not match level input {x.shape}")
                x = ops.concat(x, skip, axis=-1)
            x = block(x)
            levels.append(x)
            if self.memories and lvl < len(self.memories) and not bypass_memory:
                x = self._filter(self.memories[lvl], x, batch, rng)
        return ops.tanh(self.head(x)), levels


class Discriminator(Module):
    """Stride-2 conv-BN-LeakyReLU stages over the full image, linear head -> logit."""

    def __init__(self, channels: tuple[int, ...], image_size: int, rng: np.random.Generator, slope: float = 0.2):
        cins = (1,) + tuple(channels[:-1])
        self.stages = [ConvBlock(ci, co, rng, stride=2, leaky=slope) for ci, co in zip(cins, channels)]
        side = image_size // 2 ** len(channels)
        self.flat = side * side * channels[-1]
        self.head = Linear(self.flat, 1, rng)

    def logits(self, images: Tensor) -> Tensor:
        x = images
        for stage in self.stages:
            x = stage(x)
        x = ops.reshape(x, (x.shape[0], self.flat))
        return ops.reshape(self.head(x), (x.shape[0],))

    def forward(self, images: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(images))


class SimSIDModel(Module):
    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        th, tw = config.tile_hw
        down = 2**config.levels
        feat_hw = (th // down, tw // down)
        self.encoder = Encoder(config.enc_channels, rng)
        self.inpaint = InpaintBlock(config.enc_channels[-1], feat_hw, config.grid, rng,
                                    reduction=config.inpaint_reduction, items=config.items,
                                    top_k=config.top_k, temperature=config.temperature)
        self.teacher = Generator(config.enc_channels, config.dec_channels, rng)
        self.student = Generator(config.enc_channels, config.dec_channels, rng, patch_grid=config.grid,
                                 tile_hw=config.tile_hw, items=config.items, top_k=config.top_k,
                                 temperature=config.temperature)
        self.disc = Discriminator(config.disc_channels, config.image_size, rng)
        # Gumbel noise stream, only consumed in training mode
        self.noise_rng = np.random.default_rng([config.seed, 1])

    # -- pieces ---------------------------------------------------------------
    def _check_images(self, images: Tensor) -> None:
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 1):
            raise ShapeError(f"expected images of shape (B, {s}, {s}, 1), got {images.shape}")

    def encode(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        self._check_images(images)
        b = images.shape[0]
        tiles = patchify(images, self.config.grid)
        th, tw = self.config.tile_hw
        tiles = ops.reshape(tiles, (b * tiles.shape[1], th, tw, 1))
        return self.encoder(tiles)

    def _assemble(self, tiles: Tensor, batch: int) -> Tensor:
        th, tw = self.config.tile_hw
        cells = self.config.grid[0] * self.config.grid[1]
        return unpatchify(ops.reshape(tiles, (batch, cells, th, tw, 1)), self.config.grid)

    def teacher_decode(self, feats: Tensor, skips: list[Tensor], batch: int):
        """Plain reconstruction; inputs are stop-gradiented so the encoder learns nothing from it."""
        feats = ops.stop_gradient(feats)
        skips = [ops.stop_gradient(s) for s in skips]
        tiles, levels = self.teacher(feats, skips, batch)
        return self._assemble(tiles, batch), levels

    def student_decode(self, feats: Tensor, skips: list[Tensor], batch: int, bypass: bool = False):
        rng = self.noise_rng if self.training else None
        if not bypass:
            feats = self.inpaint(feats, batch, rng)
        tiles, levels = self.student(feats, skips, batch, rng, bypass_memory=bypass)
        return self._assemble(tiles, batch), levels

    def reconstruct(self, images: Tensor) -> Tensor:
        feats, skips = self.encode(images)
        return self.student_decode(feats, skips, images.shape[0])[0]

    def disc_logits(self, images: Tensor) -> Tensor:
        self._check_images(images)
        return self.disc.logits(images)

    def discriminate(self, images: Tensor) -> Tensor:
        return ops.sigmoid(self.disc_logits(images))

    # -- parameter groups -----------------------------------------------------
    def generator_parameters(self):
        return (self.encoder.parameters() + self.inpaint.parameters()
                + self.teacher.parameters() + self.student.parameters())

    def discriminator_parameters(self):
        return self.disc.parameters()

    def memories(self) -> list[SpaceAwareMemory]:
        return [self.inpaint.memory] + list(self.student.memories)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer, keyed by dotted name (views, not copies)."""
        state = {f"param:{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return state


def as_batch(images) -> Tensor:
    """Accept (H, W), (1, H, W), (B, H, W) or (B, H, W, 1) arrays; return (B, H, W, 1)."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[:, :, :, None]
    elif arr.ndim != 4:
        raise ShapeError(f"cannot interpret array of shape {arr.shape} as images")
    return Tensor(arr)
