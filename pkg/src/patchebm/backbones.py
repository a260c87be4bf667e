"""Patch decomposition and the global/local 3D CNN feature extractors.

The global backbone is a small dense-block network over the whole volume; the
local backbones are small VGG-style stacks, one per patch. Each backbone ends
in a single-channel projection followed by global average pooling, so every
backbone emits exactly one scalar feature. With P patches the feature vector
has k = P + 1 entries: the global feature first, then patch features in grid
order (z-major).

Layer counts and channel widths are desk-scale stand-ins sized for CPU
training, not a replication of any full-scale network.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import nn
from .nn import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Exact non-overlapping decomposition of a volume into patches."""

    volume_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]
    patch_names: tuple[str, ...] = ()

    def __post_init__(self):
        for vs, ps in zip(self.volume_shape, self.patch_shape):
            if ps <= 0 or vs % ps != 0:
                raise ValueError(
                    f"patch shape {self.patch_shape} must divide volume shape {self.volume_shape} exactly"
                )
        if not self.patch_names:
            object.__setattr__(self, "patch_names", tuple(
                f"patch_{iz}_{iy}_{ix}" for iz, iy, ix in self._cells()
            ))
        elif len(self.patch_names) != self.patch_count:
            raise ValueError(
                f"{len(self.patch_names)} patch names for {self.patch_count} patches"
            )

    def _cells(self) -> Iterator[tuple[int, int, int]]:
        nz, ny, nx = (v // p for v, p in zip(self.volume_shape, self.patch_shape))
        for iz in range(nz):
            for iy in range(ny):
                for ix in range(nx):
                    yield iz, iy, ix

    @property
    def patch_count(self) -> int:
        nz, ny, nx = (v // p for v, p in zip(self.volume_shape, self.patch_shape))
        return nz * ny * nx

    @property
    def feature_count(self) -> int:
        return self.patch_count + 1

    @property
    def origins(self) -> tuple[tuple[int, int, int], ...]:
        pz, py, px = self.patch_shape
        return tuple((iz * pz, iy * py, ix * px) for iz, iy, ix in self._cells())

    @property
    def feature_names(self) -> tuple[str, ...]:
        return ("global",) + self.patch_names

    def with_names_from(self, path: str | Path) -> "PatchGrid":
        """Apply a sidecar JSON config mapping patch index -> region name."""
        mapping = json.loads(Path(path).read_text())
        names = list(self.patch_names)
        for key, value in mapping.items():
            idx = int(key)
            if not 0 <= idx < self.patch_count:
                raise ValueError(f"patch name config index {idx} out of range (P={self.patch_count})")
            names[idx] = str(value)
        return PatchGrid(self.volume_shape, self.patch_shape, tuple(names))


def extract_patches(volume: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    """Patches in grid order; concatenating them by origin reproduces the volume."""
    volume = np.asarray(volume)
    if volume.shape[-3:] != grid.volume_shape:
        raise ValueError(f"volume shape {volume.shape[-3:]} does not match grid {grid.volume_shape}")
    pz, py, px = grid.patch_shape
    return [
        volume[..., oz:oz + pz, oy:oy + py, ox:ox + px]
        for oz, oy, ox in grid.origins
    ]


def reassemble(patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    out = np.empty(patches[0].shape[:-3] + grid.volume_shape, dtype=patches[0].dtype)
    pz, py, px = grid.patch_shape
    for patch, (oz, oy, ox) in zip(patches, grid.origins):
        out[..., oz:oz + pz, oy:oy + py, ox:ox + px] = patch
    return out


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3dLayer:
    """A convolution, optionally holding `groups` independent kernel stacks."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int,
                 stride: int = 1, padding: int = 0, groups: int = 1, dtype=np.float32):
        fan_in = cin * k ** 3
        self.weight = Tensor(_he_init(rng, (groups * cout, cin, k, k, k), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(groups * cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv3d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, batch_groups=self.groups)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class DenseLayer:
    def __init__(self, rng: np.random.Generator, fin: int, fout: int, dtype=np.float32):
        self.weight = Tensor(_he_init(rng, (fout, fin), fin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nn.dense(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class GlobalBackbone:
    """Whole-volume scalar extractor: stem conv, two dense blocks with channel
    concatenation and transition pooling, 1-channel projection, global average
    pool."""

    STEM_CHANNELS = 8
    GROWTH = 4

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        g = self.GROWTH
        c = self.STEM_CHANNELS
        self.stem = Conv3dLayer(rng, 1, c, 3, padding=1, dtype=dtype)
        self.block1 = [
            Conv3dLayer(rng, c, g, 3, padding=1, dtype=dtype),
            Conv3dLayer(rng, c + g, g, 3, padding=1, dtype=dtype),
        ]
        self.transition = Conv3dLayer(rng, c + 2 * g, c, 1, dtype=dtype)
        self.block2 = [
            Conv3dLayer(rng, c, g, 3, padding=1, dtype=dtype),
            Conv3dLayer(rng, c + g, g, 3, padding=1, dtype=dtype),
        ]
        self.project = Conv3dLayer(rng, c + 2 * g, 1, 1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = nn.maxpool3d(nn.relu(self.stem(x)), 2)
        for layer in self.block1:
            h = nn.concat([h, nn.relu(layer(h))], axis=1)
        h = nn.maxpool3d(nn.relu(self.transition(h)), 2)
        for layer in self.block2:
            h = nn.concat([h, nn.relu(layer(h))], axis=1)
        return nn.global_avg_pool(self.project(h))

    def parameters(self) -> list[Tensor]:
        layers = [self.stem, *self.block1, self.transition, *self.block2, self.project]
        return [p for layer in layers for p in layer.parameters()]


class LocalBackboneStack:
    """Per-patch scalar extractors: two conv-relu-conv-relu-maxpool stages,
    1-channel projection, global average pool.

    All P backbones run as one grouped call: patches are interleaved into the
    batch dimension and each patch index keeps its own kernel stack, so the
    weights stay independent per patch (unless `shared`).
    """

    WIDTHS = (8, 16)

    def __init__(self, rng: np.random.Generator, patch_count: int, shared: bool = False,
                 dtype=np.float32):
        g = 1 if shared else patch_count
        w1, w2 = self.WIDTHS
        self.patch_count = patch_count
        self.groups = g
        self.stage1 = [
            Conv3dLayer(rng, 1, w1, 3, padding=1, groups=g, dtype=dtype),
            Conv3dLayer(rng, w1, w1, 3, padding=1, groups=g, dtype=dtype),
        ]
        self.stage2 = [
            Conv3dLayer(rng, w1, w2, 3, padding=1, groups=g, dtype=dtype),
            Conv3dLayer(rng, w2, w2, 3, padding=1, groups=g, dtype=dtype),
        ]
        self.project = Conv3dLayer(rng, w2, 1, 1, groups=g, dtype=dtype)

    def __call__(self, patches: Tensor) -> Tensor:
        """[N*P, 1, d, h, w] (patch index fastest) -> per-patch features [N, P]."""
        h = patches
        for stage in (self.stage1, self.stage2):
            for layer in stage:
                h = nn.relu(layer(h))
            h = nn.maxpool3d(h, 2)
        h = nn.global_avg_pool(self.project(h))  # [N*P, 1]
        return nn.reshape(h, (-1, self.patch_count))

    def parameters(self) -> list[Tensor]:
        layers = [*self.stage1, *self.stage2, self.project]
        return [p for layer in layers for p in layer.parameters()]


class BackboneSet:
    """One global backbone plus one local backbone weight set per patch.

    `share_local_weights` reuses a single local weight set across patches
    (faster, less expressive).
    """

    def __init__(self, grid: PatchGrid, seed: int = 0, share_local_weights: bool = False,
                 dtype=np.float32):
        self.grid = grid
        self.share_local_weights = share_local_weights
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.global_backbone = GlobalBackbone(rng, dtype=dtype)
        self.local_stack = LocalBackboneStack(rng, grid.patch_count,
                                              shared=share_local_weights, dtype=dtype)

    @property
    def feature_count(self) -> int:
        return self.grid.feature_count

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"global.{i}", p) for i, p in enumerate(self.global_backbone.parameters())]
        named += [(f"locals.{i}", p) for i, p in enumerate(self.local_stack.parameters())]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward_features(self, volumes: np.ndarray) -> Tensor:
        """Scalar features for a batch of volumes: [N,D,H,W] -> Tensor [N,k].

        Column 0 is the global feature; columns 1..P follow grid order.
        """
        volumes = np.asarray(volumes, dtype=np.float32)
        if volumes.ndim == 3:
            volumes = volumes[None]
        if volumes.shape[1:] != self.grid.volume_shape:
            raise ValueError(
                f"volume shape {volumes.shape[1:]} does not match grid {self.grid.volume_shape}"
            )
        n = volumes.shape[0]
        whole = Tensor(volumes[:, None])
        global_feat = self.global_backbone(whole)  # [N, 1]
        stacked = np.stack(extract_patches(volumes, self.grid), axis=1)  # [N, P, d, h, w]
        patch_tensor = Tensor(stacked.reshape(n * self.grid.patch_count, 1, *self.grid.patch_shape))
        local_feats = self.local_stack(patch_tensor)  # [N, P]
        return nn.concat([global_feat, local_feats], axis=1)


class MlpHead:
    """Fully connected output block used by the black-box variant."""

    HIDDEN = 16

    def __init__(self, feature_count: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.hidden = DenseLayer(rng, feature_count, self.HIDDEN, dtype=dtype)
        self.out = DenseLayer(rng, self.HIDDEN, 1, dtype=dtype)
        self.feature_count = feature_count

    def __call__(self, features: Tensor) -> Tensor:
        return self.out(nn.relu(self.hidden(features)))

    def parameters(self) -> list[Tensor]:
        return self.hidden.parameters() + self.out.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"head.{i}", p) for i, p in enumerate(self.parameters())]


class LinearHead:
    """Single linear output layer; its weights double as naive importances."""

    def __init__(self, feature_count: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.out = DenseLayer(rng, feature_count, 1, dtype=dtype)
        self.feature_count = feature_count

    def __call__(self, features: Tensor) -> Tensor:
        return self.out(features)

    def parameters(self) -> list[Tensor]:
        return self.out.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"head.{i}", p) for i, p in enumerate(self.parameters())]


def forward_logits(backbones: BackboneSet, head, volumes: np.ndarray) -> Tensor:
    """End-to-end logits for the CNN-plus-FC-head variants: [N,1]."""
    if head.feature_count != backbones.feature_count:
        raise ValueError(
            f"head expects {head.feature_count} features, backbones emit {backbones.feature_count}"
        )
    return head(backbones.forward_features(volumes))
