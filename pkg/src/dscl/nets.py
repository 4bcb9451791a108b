"""Networks: saliency-augmentor backbone, feature extractor, projector, classifier.

The backbone is a four-stage CNN (conv-relu blocks then 2x2 max-pool per
stage, each stage halving resolution) kept deliberately small; the
augmentor and the extractor share this architecture but never share
parameters.  The augmentor additionally carries one 1x1 projection per
stage (producing saliency logits) and a linear head used for its
cross-entropy objective.  The projector maps pooled features to a lower
dimension and normalizes onto the unit hypersphere; the classifier is a
single affine map over pooled extractor features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import DimensionError, ParameterError
from .ndtensor import Tensor


@dataclass
class BackboneConfig:
    channels: tuple = (8, 16, 32, 64)
    blocks_per_stage: int = 2
    input_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ParameterError(f"backbone needs exactly 4 stages, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ParameterError(f"stage channels must be positive: {self.channels}")
        if self.blocks_per_stage < 1:
            raise ParameterError("blocks_per_stage must be >= 1")
        if self.input_size % 16 != 0 or self.input_size < 16:
            raise ParameterError(
                f"input size must be a positive multiple of 16 (four halvings), got {self.input_size}")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def stage_sizes(self) -> tuple:
        return tuple(self.input_size // 2 ** (i + 1) for i in range(4))


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv:
    def __init__(self, rng, c_in, c_out, k, dtype, bias=True):
        self.w = nd.tensor(_he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype),
                           requires_grad=True)
        self.b = nd.tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return nd.conv2d(x, self.w, stride=1, padding=self.padding, bias=self.b)

    def params(self):
        return [("w", self.w)] + ([("b", self.b)] if self.b is not None else [])


class Dense:
    def __init__(self, rng, d_in, d_out, dtype, bias=True):
        self.w = nd.tensor(_he_uniform(rng, (d_in, d_out), d_in, dtype), requires_grad=True)
        self.b = nd.tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nd.linear(x, self.w, self.b)

    def params(self):
        return [("w", self.w)] + ([("b", self.b)] if self.b is not None else [])


class Backbone:
    """Four stages of (conv-relu)^blocks + max-pool; returns stage maps and pooled features."""

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.stages = []
        c_prev = cfg.in_channels
        for c_out in cfg.channels:
            blocks = [Conv(rng, c_prev, c_out, 3, dtype)]
            for _ in range(cfg.blocks_per_stage - 1):
                blocks.append(Conv(rng, c_out, c_out, 3, dtype))
            self.stages.append(blocks)
            c_prev = c_out
        self.forward_calls = 0

    def _check_input(self, x: Tensor) -> None:
        n, c, h, w = x.shape
        if c != self.cfg.in_channels or h != self.cfg.input_size or w != self.cfg.input_size:
            raise DimensionError(
                f"expected input (N,{self.cfg.in_channels},{self.cfg.input_size},"
                f"{self.cfg.input_size}), got {x.shape}")

    def forward(self, x: Tensor) -> tuple[list, Tensor]:
        """-> (four post-pool stage maps, globally pooled (N, D) features)."""
        self._check_input(x)
        self.forward_calls += 1
        h = x
        maps = []
        for blocks in self.stages:
            for conv in blocks:
                h = nd.relu(conv(h))
            h = nd.max_pool2(h)
            maps.append(h)
        return maps, nd.global_avg_pool(h)

    def features(self, x: Tensor) -> Tensor:
        return self.forward(x)[1]

    def params(self):
        out = []
        for si, blocks in enumerate(self.stages):
            for bi, conv in enumerate(blocks):
                out += [(f"stage{si}.conv{bi}.{n}", t) for n, t in conv.params()]
        return out


class SaliencyAugmentor:
    """Backbone + per-stage 1x1 saliency projections + linear aux head.

    Under the default gradient isolation the 1x1 projections receive no
    training signal, so they are initialized to the channel mean (weights
    1/C): once the backbone's cross-entropy training makes its ReLU maps
    respond to discriminative regions, mean activation is a sign-safe
    saliency readout. ``saliency_init`` offers "he" and "zero" as
    alternatives (zero weights give exactly uniform maps).
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32, n_classes: int = 3,
                 saliency_init: str = "mean"):
        self.backbone = Backbone(cfg, rng, dtype)
        self.head = Dense(rng, cfg.feature_dim, n_classes, dtype)
        self.sal_projs = []
        for c in cfg.channels:
            if saliency_init == "mean":
                w = np.full((1, c, 1, 1), 1.0 / c, dtype=dtype)
            elif saliency_init == "zero":
                w = np.zeros((1, c, 1, 1), dtype=dtype)
            elif saliency_init == "he":
                w = _he_uniform(rng, (1, c, 1, 1), c, dtype)
            else:
                raise ParameterError(f"unknown saliency_init: {saliency_init!r}")
            self.sal_projs.append(nd.tensor(w, requires_grad=True))
        self.forward_calls = 0

    def forward(self, x: Tensor) -> tuple[list, Tensor]:
        """-> (four stage maps, aux class logits)."""
        self.forward_calls += 1
        maps, pooled = self.backbone.forward(x)
        return maps, self.head(pooled)

    def params(self):
        out = [(f"backbone.{n}", t) for n, t in self.backbone.params()]
        out += [(f"head.{n}", t) for n, t in self.head.params()]
        out += [(f"sal_proj{i}.w", t) for i, t in enumerate(self.sal_projs)]
        return out


class Projector:
    """Linear map D -> d followed by L2 normalization onto the unit sphere."""

    def __init__(self, rng, d_in, d_out, dtype=np.float32):
        if d_out > d_in:
            raise ParameterError(f"projector must reduce dimension: {d_in} -> {d_out}")
        self.dense = Dense(rng, d_in, d_out, dtype, bias=False)

    def __call__(self, r: Tensor) -> Tensor:
        return nd.l2_normalize(self.dense(r), axis=1)

    def params(self):
        return [(f"dense.{n}", t) for n, t in self.dense.params()]


@dataclass
class ModelBundle:
    """All trainable components plus the configuration that shaped them."""

    backbone_cfg: BackboneConfig
    projector_dim: int
    n_classes: int
    sa: SaliencyAugmentor | None
    extractor: Backbone
    projector: Projector
    classifier: Dense

    def named_parameters(self):
        out = []
        if self.sa is not None:
            out += [(f"sa.{n}", t) for n, t in self.sa.params()]
        out += [(f"extractor.{n}", t) for n, t in self.extractor.params()]
        out += [(f"projector.{n}", t) for n, t in self.projector.params()]
        out += [(f"classifier.{n}", t) for n, t in self.classifier.params()]
        return out

    def sa_parameters(self):
        return [] if self.sa is None else [(f"sa.{n}", t) for n, t in self.sa.params()]

    def fe_parameters(self):
        return ([(f"extractor.{n}", t) for n, t in self.extractor.params()]
                + [(f"projector.{n}", t) for n, t in self.projector.params()])

    def classifier_parameters(self):
        return [(f"classifier.{n}", t) for n, t in self.classifier.params()]


def build_bundle(cfg: BackboneConfig, projector_dim: int = 16, n_classes: int = 3,
                 seed: int = 0, dtype=np.float32, with_sa: bool = True,
                 saliency_init: str = "mean") -> ModelBundle:
    """Deterministically initialize all networks from one seed.

    The augmentor and extractor draw from independent streams, so they are
    architecturally identical but parameter-disjoint.
    """
    dtype = np.dtype(dtype).type
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(0xD5C1,))
    rng_sa, rng_fe, rng_proj, rng_cls = (np.random.default_rng(s) for s in ss.spawn(4))
    sa = SaliencyAugmentor(cfg, rng_sa, dtype, n_classes, saliency_init) if with_sa else None
    extractor = Backbone(cfg, rng_fe, dtype)
    projector = Projector(rng_proj, cfg.feature_dim, projector_dim, dtype)
    classifier = Dense(rng_cls, cfg.feature_dim, n_classes, dtype)
    return ModelBundle(cfg, projector_dim, n_classes, sa, extractor, projector, classifier)
