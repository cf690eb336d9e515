"""Feature and cost aggregation layers.

Self-attention runs over tokens ``[D(i) ; C(i, .)]`` (source side) or ``[D(j) ; C(., j)]``
(target side) and applies one attention map to both value streams. Cross-attention uses the
convolved cost volume itself as the attention map. Sublayers are pre-norm residual.
"""

import logging
import math
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from ufc_matcher.core.config import AttentionKind, CrossAttentionKind, LevelSpec, ModelOptions, SelfAttentionKind
from ufc_matcher.core.exceptions import ConfigurationError, ContractError, DimensionError, NumericError
from ufc_matcher.core.numerics import ensure_finite, layer_norm, matmul, softmax
from ufc_matcher.models.flow import CostVolume, FeatureMap
from ufc_matcher.services.backbone import ACTIVATIONS, l2_normalize
from ufc_matcher.services.cost_volume import build, conv4d_separable, identity_kernel, residual_add

logger = logging.getLogger(__name__)

Side = Literal["source", "target"]


def sinusoidal_embedding(height: int, width: int, channels: int) -> torch.Tensor:
    """Fixed 2D sinusoidal code: first half of the channels encodes rows, the rest columns."""

    def axis_code(length: int, size: int) -> torch.Tensor:
        code = torch.zeros(length, size)
        pairs = size // 2
        if pairs:
            positions = torch.arange(length, dtype=code.dtype)
            freqs = 1.0 / (10000.0 ** (torch.arange(pairs, dtype=code.dtype) / pairs))
            angles = positions[:, None] * freqs[None, :]
            code[:, 0 : 2 * pairs : 2] = torch.sin(angles)
            code[:, 1 : 2 * pairs : 2] = torch.cos(angles)
        return code

    cy = channels // 2
    cx = channels - cy
    rows = axis_code(height, cy)[:, None, :].expand(height, width, cy)
    cols = axis_code(width, cx)[None, :, :].expand(height, width, cx)
    return torch.cat([rows, cols], dim=-1)


def cost_rows(cost: CostVolume, side: Side) -> torch.Tensor:
    """Cost rows ``C(i, .)`` for the source side, cost columns ``C(., j)`` for the target side."""
    matrix = cost.as_matrix()
    return matrix if side == "source" else matrix.transpose(0, 1)


def from_cost_rows(rows: torch.Tensor, like: CostVolume, side: Side) -> CostVolume:
    matrix = rows if side == "source" else rows.transpose(0, 1)
    return CostVolume(level=like.level, grid=matrix.reshape(like.grid.shape))


def make_tokens(
    d: FeatureMap,
    cost: CostVolume,
    side: Side,
    position: torch.Tensor | None = None,
    use_features: bool = True,
    use_cost: bool = True,
) -> torch.Tensor:
    """``hw x (c + hw)`` tokens; the positional code is added to the feature part only."""
    if d.level != cost.level:
        raise ContractError(f"Feature level {d.level} does not match cost level {cost.level}")
    rows = cost_rows(cost, side)
    if rows.shape[0] != d.height * d.width:
        raise DimensionError(
            f"{side} features have {d.height * d.width} pixels but the cost volume has {rows.shape[0]}"
        )
    parts = []
    if use_features:
        feats = d.tokens()
        parts.append(feats if position is None else feats + position)
    if use_cost:
        parts.append(rows)
    return torch.cat(parts, dim=-1)


def elu_feature_map(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x) + 1.0


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Kernelized attention ``phi(q) (phi(k)^T v) / (phi(q) . sum phi(k))`` in ``O(n d^2)``."""
    phi_q = elu_feature_map(q)
    phi_k = elu_feature_map(k)
    kv = matmul(phi_k.transpose(0, 1), v)
    normalizer = matmul(phi_q, phi_k.sum(dim=0, keepdim=True).transpose(0, 1))
    if not bool((normalizer > 0).all()):
        raise NumericError("linear attention normalizer vanished")
    return ensure_finite(matmul(phi_q, kv) / normalizer, "linear_attention")


def softmax_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention with temperature ``sqrt(d_K)``."""
    weights = softmax(matmul(q, k.transpose(0, 1)), axis=-1, temperature=math.sqrt(q.shape[-1]))
    return matmul(weights, v)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, kind: AttentionKind, heads: int = 1) -> torch.Tensor:
    """Split query/key and value channels into ``heads`` groups and attend per group."""
    dk, dv = q.shape[-1], v.shape[-1]
    if dk % heads or dv % heads:
        raise ConfigurationError(f"{heads} heads do not divide key width {dk} and value width {dv}")
    fn = linear_attention if kind == AttentionKind.LINEAR else softmax_attention
    if heads == 1:
        return fn(q, k, v)
    hk, hv = dk // heads, dv // heads
    outs = [
        fn(q[:, h * hk : (h + 1) * hk], k[:, h * hk : (h + 1) * hk], v[:, h * hv : (h + 1) * hv]) for h in range(heads)
    ]
    return torch.cat(outs, dim=-1)


class Norm(nn.Module):
    """Learnable layer norm over the last axis."""

    def __init__(self, width: int) -> None:
        super().__init__()
        self.scale = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.scale, self.bias)


class FeedForward(nn.Module):
    """Two-layer MLP applied per token."""

    def __init__(self, width: int, hidden: int, activation: str = "gelu") -> None:
        super().__init__()
        self.activation = ACTIVATIONS[activation]
        self.w1 = nn.Parameter(torch.randn(width, hidden) / width**0.5)
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.randn(hidden, width) / hidden**0.5)
        self.b2 = nn.Parameter(torch.zeros(width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return matmul(self.activation(matmul(x, self.w1) + self.b1), self.w2) + self.b2


def _projection(rows: int, cols: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(rows, cols) / rows**0.5)


class ResidualStream(nn.Module):
    """Value projection plus the post-attention MLP of one token stream."""

    def __init__(self, width: int, hidden: int, activation: str) -> None:
        super().__init__()
        self.value_norm = Norm(width)
        self.value = _projection(width, width)
        self.mlp_norm = Norm(width)
        self.mlp = FeedForward(width, hidden, activation)

    def values(self, x: torch.Tensor) -> torch.Tensor:
        return matmul(self.value_norm(x), self.value)

    def finish(self, x: torch.Tensor, aggregated: torch.Tensor) -> torch.Tensor:
        x = x + aggregated
        return x + self.mlp(self.mlp_norm(x))


def _hidden(options: ModelOptions, width: int) -> int:
    return options.ffn_hidden or options.mlp_ratio * width


class SelfAttention(nn.Module):
    """Self-attention over feature and/or cost tokens with a single shared attention map.

    With both streams enabled this is integrative self-attention: ``A = norm(Q K^T)`` from
    ``[D ; C]`` tokens aggregates ``V_D = P_VD(D)`` and ``V_C = P_VC(C)`` at once.
    """

    def __init__(
        self,
        channels: int,
        tokens: int,
        key_dim: int,
        options: ModelOptions,
        use_features: bool = True,
        use_cost: bool = True,
    ) -> None:
        super().__init__()
        if not (use_features or use_cost):
            raise ConfigurationError("Self-attention needs at least one token stream")
        self.channels = channels
        self.use_features = use_features
        self.use_cost = use_cost
        self.kind = options.attention_kind
        self.heads = options.heads
        width = channels * use_features + tokens * use_cost
        value_width = width
        if key_dim % self.heads or value_width % self.heads:
            raise ConfigurationError(
                f"{self.heads} heads do not divide key width {key_dim} and value width {value_width}"
            )
        self.token_norm = Norm(width)
        self.query = _projection(width, key_dim)
        self.key = _projection(width, key_dim)
        self.feature_stream = (
            ResidualStream(channels, _hidden(options, channels), options.activation) if use_features else None
        )
        self.cost_stream = ResidualStream(tokens, _hidden(options, tokens), options.activation) if use_cost else None

    def forward(
        self, d: FeatureMap, cost: CostVolume, side: Side, position: torch.Tensor | None = None
    ) -> tuple[FeatureMap, CostVolume]:
        tokens = self.token_norm(make_tokens(d, cost, side, position, self.use_features, self.use_cost))
        q = matmul(tokens, self.query)
        k = matmul(tokens, self.key)

        feats = d.tokens()
        rows = cost_rows(cost, side)
        values = []
        if self.feature_stream is not None:
            values.append(self.feature_stream.values(feats))
        if self.cost_stream is not None:
            values.append(self.cost_stream.values(rows))
        out = attend(q, k, torch.cat(values, dim=-1), self.kind, self.heads)

        offset = 0
        if self.feature_stream is not None:
            feats = self.feature_stream.finish(feats, out[:, : self.channels])
            offset = self.channels
            d = FeatureMap(level=d.level, grid=feats.reshape(d.grid.shape))
        if self.cost_stream is not None:
            rows = self.cost_stream.finish(rows, out[:, offset:])
            cost = from_cost_rows(rows, cost, side)
        return d, cost

    def both_sides(
        self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume, position: torch.Tensor | None = None
    ) -> tuple[FeatureMap, FeatureMap, CostVolume]:
        """Source side first; the target side sees the source-aggregated cost."""
        d_s, cost = self(d_s, cost, "source", position)
        d_t, cost = self(d_t, cost, "target", position)
        return d_s, d_t, cost


class MatchingCrossAttention(nn.Module):
    """Cross-attention whose attention map is the convolved cost volume."""

    def __init__(self, channels: int, key_dim: int, options: ModelOptions) -> None:
        super().__init__()
        self.key_dim = key_dim
        self.match_src = nn.Parameter(identity_kernel())
        self.match_tgt = nn.Parameter(identity_kernel())
        self.stream = ResidualStream(channels, _hidden(options, channels), options.activation)

    def matching_distribution(self, cost: CostVolume) -> CostVolume:
        return conv4d_separable(cost, self.match_src, self.match_tgt)

    def forward(self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume) -> tuple[FeatureMap, FeatureMap]:
        m = self.matching_distribution(cost).as_matrix()
        temperature = math.sqrt(self.key_dim)
        feats_s, feats_t = d_s.tokens(), d_t.tokens()
        v_s = self.stream.values(feats_s)
        v_t = self.stream.values(feats_t)
        to_target = softmax(m.transpose(0, 1), axis=-1, temperature=temperature)
        to_source = softmax(m, axis=-1, temperature=temperature)
        new_t = self.stream.finish(feats_t, matmul(to_target, v_s))
        new_s = self.stream.finish(feats_s, matmul(to_source, v_t))
        return (
            FeatureMap(level=d_s.level, grid=new_s.reshape(d_s.grid.shape)),
            FeatureMap(level=d_t.level, grid=new_t.reshape(d_t.grid.shape)),
        )


class FeatureCrossAttention(nn.Module):
    """Standard query/key cross-attention between the two feature maps."""

    def __init__(self, channels: int, key_dim: int, options: ModelOptions) -> None:
        super().__init__()
        self.query_norm = Norm(channels)
        self.query = _projection(channels, key_dim)
        self.key = _projection(channels, key_dim)
        self.stream = ResidualStream(channels, _hidden(options, channels), options.activation)

    def _attend(self, to: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        q = matmul(self.query_norm(to), self.query)
        k = matmul(self.query_norm(other), self.key)
        return softmax_attention(q, k, self.stream.values(other))

    def forward(self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume) -> tuple[FeatureMap, FeatureMap]:
        feats_s, feats_t = d_s.tokens(), d_t.tokens()
        new_t = self.stream.finish(feats_t, self._attend(feats_t, feats_s))
        new_s = self.stream.finish(feats_s, self._attend(feats_s, feats_t))
        return (
            FeatureMap(level=d_s.level, grid=new_s.reshape(d_s.grid.shape)),
            FeatureMap(level=d_t.level, grid=new_t.reshape(d_t.grid.shape)),
        )


class AggregationStage(nn.Module):
    """One self-attention / cross-attention / cost-fusion repetition."""

    def __init__(self, spec: LevelSpec, options: ModelOptions) -> None:
        super().__init__()
        c = spec.proj_channels
        n = spec.extent * spec.extent
        dk = options.key_dim_for(spec)
        self.kind = options.self_attention
        if self.kind == SelfAttentionKind.INTEGRATIVE:
            layers = [SelfAttention(c, n, dk, options)]
        elif self.kind == SelfAttentionKind.FEATURE:
            layers = [SelfAttention(c, n, dk, options, use_cost=False)]
        elif self.kind == SelfAttentionKind.COST:
            layers = [SelfAttention(c, n, dk, options, use_features=False)]
        else:
            layers = [
                SelfAttention(c, n, dk, options, use_cost=False),
                SelfAttention(c, n, dk, options, use_features=False),
            ]
        self.self_layers = nn.ModuleList(layers)

        self.cross: MatchingCrossAttention | FeatureCrossAttention | None
        if options.cross_attention == CrossAttentionKind.MATCHING:
            self.cross = MatchingCrossAttention(c, dk, options)
        elif options.cross_attention == CrossAttentionKind.FEATURE:
            self.cross = FeatureCrossAttention(c, dk, options)
        else:
            self.cross = None
        self.fuse_src = nn.Parameter(identity_kernel())
        self.fuse_tgt = nn.Parameter(identity_kernel())

    def self_attend(
        self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume, position: torch.Tensor | None
    ) -> tuple[FeatureMap, FeatureMap, CostVolume]:
        if self.kind == SelfAttentionKind.SEQUENTIAL:
            feature_layer, cost_layer = self.self_layers
            d_s, d_t, cost = feature_layer.both_sides(d_s, d_t, cost, position)
            cost = residual_add(cost, build(l2_normalize(d_s), l2_normalize(d_t)))
            _, _, cost = cost_layer.both_sides(d_s, d_t, cost)
            return d_s, d_t, cost
        return self.self_layers[0].both_sides(d_s, d_t, cost, position)

    def forward(
        self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume, position: torch.Tensor | None = None
    ) -> tuple[FeatureMap, FeatureMap, CostVolume, tuple[FeatureMap, FeatureMap, CostVolume]]:
        """Returns the stage outputs and the self-attended intermediates."""
        d_s, d_t, cost = self.self_attend(d_s, d_t, cost, position)
        attended = (d_s, d_t, cost)
        if self.cross is not None:
            d_s, d_t = self.cross(d_s, d_t, cost)
        rebuilt = build(l2_normalize(d_s), l2_normalize(d_t))
        cost = residual_add(cost, conv4d_separable(rebuilt, self.fuse_src, self.fuse_tgt))
        return d_s, d_t, cost, attended


class AttentionBlock(nn.Module):
    """``n_blocks`` interleaved aggregation stages for one pyramid level, each with its own weights."""

    position: torch.Tensor | None

    def __init__(self, spec: LevelSpec, level: int, options: ModelOptions) -> None:
        super().__init__()
        if options.n_blocks < 1:
            raise ConfigurationError(f"n_blocks must be at least 1, got {options.n_blocks}")
        self.level = level
        self.spec = spec
        self.stages = nn.ModuleList(AggregationStage(spec, options) for _ in range(options.n_blocks))
        if options.positional_embedding:
            code = sinusoidal_embedding(spec.extent, spec.extent, spec.proj_channels)
            self.register_buffer("position", code.reshape(-1, spec.proj_channels), persistent=False)
        else:
            self.position = None

    def run(
        self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume
    ) -> tuple[FeatureMap, FeatureMap, CostVolume, tuple[FeatureMap, FeatureMap, CostVolume]]:
        attended = (d_s, d_t, cost)
        for stage in self.stages:
            d_s, d_t, cost, attended = stage(d_s, d_t, cost, self.position)
        return d_s, d_t, cost, attended

    def forward(self, d_s: FeatureMap, d_t: FeatureMap, cost: CostVolume) -> tuple[FeatureMap, FeatureMap, CostVolume]:
        d_s, d_t, cost, _ = self.run(d_s, d_t, cost)
        return d_s, d_t, cost
