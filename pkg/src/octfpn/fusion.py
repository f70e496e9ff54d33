"""Multi-scale feature fusion and the classifier head.

Given pyramid features ``X_1 .. X_n`` from an encoder, the ``top_k`` coarsest
scales are fused:

* every merged scale is re-channelled by a 1x1 lateral convolution (no
  activation),
* the coarsest projection passes through unchanged and every finer merged
  scale adds the 2x nearest upsampling of the map one level above,
* each merged map gets two 3x3 convolutions, is global-average pooled, and the
  pooled vectors are concatenated in ascending scale order,
* dense(head_units) + ReLU, dropout, dense(n_classes), softmax.

With ``cascade=True`` (default) the map added at scale ``i`` is the already
merged map of scale ``i + 1``; with ``cascade=False`` it is the raw lateral
projection.  The two agree for ``top_k <= 2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, PyramidFeature, add_backbone, count_parameters
from .layers import Conv2D, Dense, GraphBuilder, cce_graph, conv2d, upsample_nearest2x


@dataclass(frozen=True)
class FusionConfig:
    top_k: int
    lateral_channels: int = 256
    head_units: int = 512
    dropout: float = 0.5
    n_classes: int = 3
    head_relu: bool = True
    cascade: bool = True
    upsample: str = "nearest"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be at least 1, got {self.top_k}")
        if self.lateral_channels < 1 or self.head_units < 1 or self.n_classes < 2:
            raise ValueError("lateral_channels and head_units must be positive, n_classes >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.upsample != "nearest":
            raise ValueError(f"only nearest-neighbour upsampling is implemented, got {self.upsample!r}")

    @property
    def concat_width(self) -> int:
        return self.top_k * self.lateral_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FusionConfig":
        return cls(**dict(d))


# full-size and desk-scale fusion heads
FULL_FUSION = FusionConfig(top_k=5)
MICRO_FUSION = FusionConfig(top_k=3, lateral_channels=16, head_units=64)


# ---------------------------------------------------------------------------
# eager reference versions
# ---------------------------------------------------------------------------


def lateral_project(feature, kernel, bias=None) -> np.ndarray:
    """1x1 re-channelling of one pyramid feature, no activation."""
    kernel = np.asarray(kernel)
    if kernel.ndim == 2:
        kernel = kernel[None, None]
    return conv2d(feature, kernel, bias, padding="same")


def top_down_merge(projected, cascade: bool = True) -> list[np.ndarray]:
    """Merge projections ordered coarse -> fine; returns merged maps in the same order."""
    merged = [np.asarray(projected[0])]
    for j in range(1, len(projected)):
        x = np.asarray(projected[j])
        above = merged[j - 1] if cascade else np.asarray(projected[j - 1])
        if x.shape[-3] != 2 * above.shape[-3] or x.shape[-2] != 2 * above.shape[-2]:
            raise ValueError(
                f"scale chain is not dyadic: {above.shape[-3:-1]} does not upsample to {x.shape[-3:-1]}"
            )
        merged.append(x + upsample_nearest2x(above))
    return merged


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass
class FPNModel:
    """A built fusion classifier: tape, parameter values and named anchors."""

    backbone: BackboneConfig
    fusion: FusionConfig
    tape: ad.Tape
    params: dict[str, np.ndarray]
    image: int
    features: list[PyramidFeature]
    merged_scales: list[int]
    laterals: dict[int, int] = field(default_factory=dict)
    merged: dict[int, int] = field(default_factory=dict)
    heads: dict[int, int] = field(default_factory=dict)
    pooled: int = -1
    logits: int = -1
    probs: int = -1
    targets: int = -1
    loss: int = -1

    @property
    def n_classes(self) -> int:
        return self.fusion.n_classes

    def sections(self) -> dict[str, int]:
        counts = {"encoder": 0, "fusion": 0, "classifier": 0}
        for name, spec in self.tape.parameters.items():
            counts[name.split("/", 1)[0]] += int(np.prod(spec.shape))
        return counts

    def n_parameters(self) -> int:
        return count_parameters(self.tape)

    def predict(self, images, params=None, batch_size: int = 64) -> np.ndarray:
        """Class probabilities (inference mode) for ``(N, h, w, c)`` images."""
        params = self.params if params is None else params
        images = np.asarray(images)
        out = []
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            trace = ad.run(self.tape, {"image": batch}, params, [self.probs])
            out.append(trace.values[self.probs])
        if not out:
            return np.zeros((0, self.n_classes))
        return np.concatenate(out).astype(np.float64)


def add_fusion(builder: GraphBuilder, features: list[PyramidFeature], config: FusionConfig):
    """Append lateral projections, top-down merge and scale heads.

    Returns ``(merged_scales, laterals, merged, heads)``; the dicts map scale
    index to node id.
    """
    tape = builder.tape
    n = len(features)
    if config.top_k > n:
        raise ValueError(f"top_k={config.top_k} exceeds the {n} backbone scales")
    scales = list(range(n - config.top_k + 1, n + 1))
    by_scale = {f.scale: f for f in features}
    laterals, merged, heads = {}, {}, {}
    for i in reversed(scales):
        laterals[i] = builder.conv(by_scale[i].node, f"fusion/lateral{i}",
                                   Conv2D(config.lateral_channels, 1, relu=False))
    for i in reversed(scales):
        if i == n:
            merged[i] = laterals[i]
            continue
        above = merged[i + 1] if config.cascade else laterals[i + 1]
        up = tape.upsample(above, name=f"fusion/up{i + 1}to{i}")
        merged[i] = tape.add(laterals[i], up, name=f"fusion/merge{i}")
    for i in reversed(scales):
        h = builder.conv(merged[i], f"fusion/head{i}a", Conv2D(config.lateral_channels, 3, relu=config.head_relu))
        heads[i] = builder.conv(h, f"fusion/head{i}b", Conv2D(config.lateral_channels, 3, relu=config.head_relu))
    return scales, laterals, merged, heads


def add_classifier(builder: GraphBuilder, heads: dict[int, int], config: FusionConfig):
    """GAP every head, concat in ascending scale order, dense head, softmax.

    Returns ``(pooled, logits, probs)`` node ids.
    """
    tape = builder.tape
    vectors = [tape.global_avg_pool(heads[i], name=f"classifier/gap{i}") for i in sorted(heads)]
    pooled = vectors[0] if len(vectors) == 1 else tape.concat(vectors, name="classifier/concat")
    h = builder.dense(pooled, "classifier/dense", Dense(config.head_units, relu=True))
    h = tape.dropout(h, config.dropout, name="classifier/dropout")
    logits = builder.dense(h, "classifier/output", Dense(config.n_classes))
    probs = tape.softmax(logits, name="classifier/probs")
    return pooled, logits, probs


def build_model(backbone: BackboneConfig, fusion: FusionConfig, seed: int = 0,
                materialize: bool = True) -> FPNModel:
    """Build the full single-input fusion classifier including its loss node."""
    builder = GraphBuilder(seed=seed, materialize=materialize)
    tape = builder.tape
    image = tape.input("image", (None,) + backbone.input_size)
    features = add_backbone(builder, backbone, image)
    scales, laterals, merged, heads = add_fusion(builder, features, fusion)
    pooled, logits, probs = add_classifier(builder, heads, fusion)
    targets, loss = cce_graph(tape, probs)
    return FPNModel(backbone, fusion, tape, builder.params, image, features, scales,
                    laterals, merged, heads, pooled, logits, probs, targets, loss)


def scale_increment(backbone: BackboneConfig, fusion: FusionConfig, new_scale: int) -> int:
    """Parameters added by merging ``new_scale`` in addition to the coarser ones."""
    cin = backbone.blocks[new_scale - 1][1]
    c = fusion.lateral_channels
    lateral = cin * c + c
    heads = 2 * (9 * c * c + c)
    dense_columns = c * fusion.head_units
    return lateral + heads + dense_columns
