"""VGG-style pyramidal encoders.

An encoder is a list of blocks; block ``i`` (1-based) is ``conv_count`` 3x3
same-padded convolutions with ReLU followed by a 2x2 max-pool.  The post-pool
output of every block is exposed as the pyramid feature at scale ``i``, so a
``s x s`` input yields features of side ``s / 2**i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tape
from .layers import Conv2D, GraphBuilder


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[tuple[int, int], ...]
    input_size: tuple[int, int, int]
    name: str = "custom"

    def __post_init__(self):
        blocks = tuple((int(c), int(ch)) for c, ch in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not blocks:
            raise ValueError("a backbone needs at least one block")
        if any(c < 1 or ch < 1 for c, ch in blocks):
            raise ValueError(f"block conv counts and channels must be positive: {blocks}")
        h, w, c = self.input_size
        factor = 2 ** len(blocks)
        if h % factor or w % factor or h < 1 or w < 1 or c < 1:
            raise ValueError(
                f"input size {h}x{w} is not divisible by 2**{len(blocks)} = {factor}"
            )

    @property
    def n_scales(self) -> int:
        return len(self.blocks)

    @property
    def tap_sizes(self) -> list[int]:
        return [self.input_size[0] // 2 ** i for i in range(1, self.n_scales + 1)]

    def to_dict(self) -> dict:
        return {"name": self.name, "blocks": [list(b) for b in self.blocks],
                "input_size": list(self.input_size)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(tuple(tuple(b) for b in d["blocks"]), tuple(d["input_size"]), d.get("name", "custom"))


VGG16 = BackboneConfig(((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)), (224, 224, 3), "vgg16")
MICRO = BackboneConfig(((1, 8), (1, 16), (1, 32), (1, 64)), (64, 64, 1), "micro")
PRESETS = {"vgg16": VGG16, "micro": MICRO}


@dataclass(frozen=True)
class PyramidFeature:
    scale: int
    node: int
    size: int
    channels: int


def add_backbone(builder: GraphBuilder, config: BackboneConfig, image: int) -> list[PyramidFeature]:
    """Append the encoder to ``builder``'s tape, returning one feature per block."""
    tape = builder.tape
    x = image
    features = []
    for i, (n_convs, channels) in enumerate(config.blocks, start=1):
        for j in range(1, n_convs + 1):
            x = builder.conv(x, f"encoder/block{i}/conv{j}", Conv2D(channels, 3))
        x = tape.max_pool(x, name=f"encoder/block{i}/pool")
        shape = tape.shape(x)
        features.append(PyramidFeature(i, x, shape[1], shape[3]))
    return features


@dataclass
class Backbone:
    tape: Tape
    params: dict[str, np.ndarray]
    image: int
    features: list[PyramidFeature]


def build_backbone(config: BackboneConfig, seed: int = 0, materialize: bool = True) -> Backbone:
    builder = GraphBuilder(seed=seed, materialize=materialize)
    image = builder.tape.input("image", (None,) + config.input_size)
    features = add_backbone(builder, config, image)
    return Backbone(builder.tape, builder.params, image, features)


def count_parameters(table) -> int:
    """Total element count of a parameter table (dict of arrays) or of a tape's parameters."""
    if isinstance(table, Tape):
        return int(sum(int(np.prod(spec.shape)) for spec in table.parameters.values() if spec.trainable))
    return int(sum(np.asarray(v).size for v in table.values()))
