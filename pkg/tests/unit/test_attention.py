"""Tests for the attention primitives and aggregation layers."""

import pytest
import torch

from ufc_matcher.core.config import (
    AttentionKind,
    CrossAttentionKind,
    LevelPlan,
    LevelSpec,
    ModelOptions,
    SelfAttentionKind,
)
from ufc_matcher.core.exceptions import ConfigurationError, ContractError, DimensionError
from ufc_matcher.core.numerics import grad_check_parameters, seed_everything
from ufc_matcher.models.flow import CostVolume, FeatureMap
from ufc_matcher.services.aggregation import (
    AggregationStage,
    AttentionBlock,
    MatchingCrossAttention,
    SelfAttention,
    attend,
    elu_feature_map,
    linear_attention,
    make_tokens,
    sinusoidal_embedding,
    softmax_attention,
)
from ufc_matcher.services.backbone import l2_normalize
from ufc_matcher.services.cost_volume import build

SPEC = LevelSpec(extent=2, raw_channels=4, proj_channels=4)


def _quadratic_linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    phi_q, phi_k = elu_feature_map(q), elu_feature_map(k)
    out = torch.zeros(q.shape[0], v.shape[1])
    for i in range(q.shape[0]):
        weights = torch.stack([torch.dot(phi_q[i], phi_k[j]) for j in range(k.shape[0])])
        out[i] = (weights[:, None] * v).sum(dim=0) / weights.sum()
    return out


def _options(**overrides: object) -> ModelOptions:
    plan = LevelPlan.from_lists([1, 2, 4], [4, 4, 4], [4, 4, 4])
    return ModelOptions(plan=plan, n_blocks=1, **overrides)


def _level_inputs(generator: torch.Generator) -> tuple[FeatureMap, FeatureMap, CostVolume]:
    d_s = FeatureMap(level=2, grid=torch.randn(2, 2, 4, generator=generator))
    d_t = FeatureMap(level=2, grid=torch.randn(2, 2, 4, generator=generator))
    return d_s, d_t, build(l2_normalize(d_s), l2_normalize(d_t))


class TestLinearAttention:
    """Tests for the kernelized attention."""

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_quadratic_form(self, seed):
        """The O(n d^2) reordering equals the explicit pairwise normalization."""
        g = torch.Generator().manual_seed(seed)
        n = int(torch.randint(1, 65, (1,), generator=g))
        d = int(torch.randint(1, 17, (1,), generator=g))
        q, k = torch.randn(n, d, generator=g), torch.randn(n, d, generator=g)
        v = torch.randn(n, d, generator=g)
        assert torch.allclose(linear_attention(q, k, v), _quadratic_linear_attention(q, k, v), atol=1e-10)

    def test_single_token_returns_value(self, generator):
        """With one key every query copies its value."""
        q = torch.randn(4, 3, generator=generator)
        k = torch.randn(1, 3, generator=generator)
        v = torch.randn(1, 2, generator=generator)
        assert torch.allclose(linear_attention(q, k, v), v.expand(4, 2))

    def test_convex_combination(self, generator):
        """Every output coordinate lies inside the values' range."""
        q, k = torch.randn(6, 4, generator=generator), torch.randn(6, 4, generator=generator)
        v = torch.randn(6, 3, generator=generator)
        out = linear_attention(q, k, v)
        assert bool((out >= v.min(dim=0).values - 1e-12).all())
        assert bool((out <= v.max(dim=0).values + 1e-12).all())

    def test_feature_map_positive(self):
        """elu + 1 is strictly positive."""
        assert bool((elu_feature_map(torch.linspace(-30, 30, 61)) > 0).all())


class TestSoftmaxAttention:
    """Tests for scaled dot-product attention."""

    def test_rows_are_distributions(self, generator):
        """Attending to all-one values returns ones."""
        q, k = torch.randn(5, 4, generator=generator), torch.randn(3, 4, generator=generator)
        assert torch.allclose(softmax_attention(q, k, torch.ones(3, 2)), torch.ones(5, 2))

    def test_matches_explicit_scaling(self, generator):
        """Logits are scaled by the square root of the key width."""
        q, k = torch.randn(5, 4, generator=generator), torch.randn(3, 4, generator=generator)
        v = torch.randn(3, 2, generator=generator)
        expected = torch.softmax(q @ k.T / 2.0, dim=-1) @ v
        assert torch.allclose(softmax_attention(q, k, v), expected)

    def test_heads_split_channels(self, generator):
        """Two heads equal two independent attentions over channel halves."""
        q, k = torch.randn(4, 6, generator=generator), torch.randn(4, 6, generator=generator)
        v = torch.randn(4, 8, generator=generator)
        out = attend(q, k, v, AttentionKind.SOFTMAX, heads=2)
        expected = torch.cat(
            [softmax_attention(q[:, :3], k[:, :3], v[:, :4]), softmax_attention(q[:, 3:], k[:, 3:], v[:, 4:])], dim=-1
        )
        assert torch.allclose(out, expected)

    def test_heads_must_divide(self, generator):
        """Head counts that do not divide the widths are rejected."""
        q = torch.randn(2, 3, generator=generator)
        with pytest.raises(ConfigurationError):
            attend(q, q, torch.randn(2, 4, generator=generator), AttentionKind.LINEAR, heads=2)


class TestTokens:
    """Tests for make_tokens and the positional code."""

    def test_zero_cost_tokens(self, generator):
        """With a zero cost volume the cost half of every token is zero."""
        d = FeatureMap(level=1, grid=torch.randn(2, 3, 4, generator=generator))
        cost = CostVolume(level=1, grid=torch.zeros(2, 3, 2, 3))
        tokens = make_tokens(d, cost, "source")
        assert tokens.shape == (6, 4 + 6)
        assert torch.equal(tokens[:, :4], d.tokens())
        assert torch.equal(tokens[:, 4:], torch.zeros(6, 6))

    def test_target_side_uses_columns(self, generator):
        """Target tokens carry C(., j)."""
        d = FeatureMap(level=1, grid=torch.randn(2, 2, 3, generator=generator))
        cost = CostVolume(level=1, grid=torch.randn(2, 2, 2, 2, generator=generator))
        tokens = make_tokens(d, cost, "target")
        assert torch.equal(tokens[:, 3:], cost.as_matrix().T)

    def test_position_added_to_features_only(self, generator):
        """The positional code shifts the feature part and leaves the cost part alone."""
        d = FeatureMap(level=1, grid=torch.zeros(2, 2, 4))
        cost = CostVolume(level=1, grid=torch.randn(2, 2, 2, 2, generator=generator))
        position = sinusoidal_embedding(2, 2, 4).reshape(4, 4)
        tokens = make_tokens(d, cost, "source", position)
        assert torch.equal(tokens[:, :4], position)
        assert torch.equal(tokens[:, 4:], cost.as_matrix())

    def test_level_mismatch(self):
        """Features and costs must share a level."""
        with pytest.raises(ContractError):
            make_tokens(
                FeatureMap(level=1, grid=torch.zeros(1, 1, 2)),
                CostVolume(level=2, grid=torch.zeros(1, 1, 1, 1)),
                "source",
            )

    def test_pixel_count_mismatch(self):
        """The cost grid must cover every feature pixel."""
        with pytest.raises(DimensionError):
            make_tokens(
                FeatureMap(level=1, grid=torch.zeros(2, 2, 2)),
                CostVolume(level=1, grid=torch.zeros(1, 1, 1, 1)),
                "source",
            )

    def test_sinusoidal_layout(self):
        """Row channels vary along rows only and column channels along columns only."""
        code = sinusoidal_embedding(3, 5, 4)
        assert code.shape == (3, 5, 4)
        assert torch.equal(code[:, :, :2], code[:, :1, :2].expand(3, 5, 2))
        assert torch.equal(code[:, :, 2:], code[:1, :, 2:].expand(3, 5, 2))
        assert torch.allclose(code[0, 0], torch.tensor([0.0, 1.0, 0.0, 1.0]))


class TestLayers:
    """Tests for the aggregation layers."""

    def test_integrative_updates_both_streams(self, generator):
        """One integrative pass changes features and costs and keeps their shapes."""
        seed_everything(0)
        d_s, d_t, cost = _level_inputs(generator)
        layer = SelfAttention(4, 4, 4, _options())
        new_s, new_t, new_cost = layer.both_sides(d_s, d_t, cost)
        assert new_s.grid.shape == d_s.grid.shape
        assert new_t.grid.shape == d_t.grid.shape
        assert new_cost.grid.shape == cost.grid.shape
        assert not torch.allclose(new_s.grid, d_s.grid)
        assert not torch.allclose(new_cost.grid, cost.grid)

    def test_feature_only_keeps_cost(self, generator):
        """Feature self-attention leaves the cost volume untouched."""
        seed_everything(0)
        d_s, _, cost = _level_inputs(generator)
        _, new_cost = SelfAttention(4, 4, 4, _options(), use_cost=False)(d_s, cost, "source")
        assert torch.equal(new_cost.grid, cost.grid)

    def test_needs_a_stream(self):
        """Disabling both token streams is a configuration error."""
        with pytest.raises(ConfigurationError):
            SelfAttention(4, 4, 4, _options(), use_features=False, use_cost=False)

    def test_matching_distribution_starts_as_cost(self, generator):
        """Centre-one match kernels make the matching distribution equal the cost volume."""
        _, _, cost = _level_inputs(generator)
        layer = MatchingCrossAttention(4, 4, _options())
        assert torch.allclose(layer.matching_distribution(cost).grid, cost.grid)

    @pytest.mark.parametrize("kind", list(SelfAttentionKind))
    def test_stage_shapes(self, generator, kind):
        """Every self-attention variant preserves level shapes."""
        seed_everything(0)
        d_s, d_t, cost = _level_inputs(generator)
        stage = AggregationStage(SPEC, _options(self_attention=kind, cross_attention=CrossAttentionKind.FEATURE))
        out_s, out_t, out_cost, _ = stage(d_s, d_t, cost)
        assert out_s.grid.shape == (2, 2, 4)
        assert out_t.grid.shape == (2, 2, 4)
        assert out_cost.grid.shape == (2, 2, 2, 2)

    def test_block_needs_one_stage(self):
        """n_blocks below one is rejected."""
        with pytest.raises(ConfigurationError):
            AttentionBlock(SPEC, 2, _options().model_copy(update={"n_blocks": 0}))

    def test_block_is_deterministic(self, generator):
        """Same seed and inputs give identical outputs."""
        d_s, d_t, cost = _level_inputs(generator)
        outputs = []
        for _ in range(2):
            seed_everything(3)
            outputs.append(AttentionBlock(SPEC, 2, _options())(d_s, d_t, cost))
        for a, b in zip(outputs[0], outputs[1], strict=True):
            assert torch.equal(a.grid, b.grid)

    @pytest.mark.parametrize("kind", [AttentionKind.LINEAR, AttentionKind.SOFTMAX])
    def test_block_gradients(self, generator, kind):
        """Autograd agrees with central differences on sampled block parameters."""
        seed_everything(0)
        d_s, d_t, cost = _level_inputs(generator)
        block = AttentionBlock(SPEC, 2, _options(attention_kind=kind))

        def loss() -> torch.Tensor:
            out_s, out_t, out_cost = block(d_s, d_t, cost)
            return (out_s.grid**2).sum() + (out_t.grid**2).sum() + (out_cost.grid**2).sum()

        assert grad_check_parameters(loss, block, samples_per_parameter=3) < 1e-3


def _grid_inputs(generator: torch.Generator, n: int = 3, c: int = 4) -> tuple[FeatureMap, FeatureMap, CostVolume]:
    d_s = FeatureMap(level=2, grid=torch.randn(n, n, c, generator=generator))
    d_t = FeatureMap(level=2, grid=torch.randn(n, n, c, generator=generator))
    return d_s, d_t, CostVolume(level=2, grid=torch.randn(n, n, n, n, generator=generator))


def _softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    out = torch.zeros_like(logits)
    for i in range(logits.shape[0]):
        e = torch.exp(logits[i] - logits[i].max())
        out[i] = e / e.sum()
    return out


def _padded_conv4d(grid: torch.Tensor, k_src: torch.Tensor, k_tgt: torch.Tensor) -> torch.Tensor:
    hs, ws, ht, wt = grid.shape
    out = torch.zeros_like(grid)
    for a in range(hs):
        for b in range(ws):
            for c in range(ht):
                for d in range(wt):
                    total = 0.0
                    for p in range(3):
                        for q in range(3):
                            for r in range(3):
                                for s in range(3):
                                    i, j, k, u = a + p - 1, b + q - 1, c + r - 1, d + s - 1
                                    if 0 <= i < hs and 0 <= j < ws and 0 <= k < ht and 0 <= u < wt:
                                        total += k_src[p, q] * k_tgt[r, s] * grid[i, j, k, u]
                    out[a, b, c, d] = total
    return out


class TestIntegrativeSelfAttention:
    """Invariants of the shared-map self-attention on a 3 x 3 grid."""

    @pytest.mark.parametrize("side", ["source", "target"])
    def test_matches_pairwise_oracle(self, generator, side):
        """Both streams equal an explicit per-token softmax over [D ; C] logits."""
        seed_everything(0)
        d_s, d_t, cost = _grid_inputs(generator)
        d = d_s if side == "source" else d_t
        layer = SelfAttention(4, 9, 4, _options(attention_kind=AttentionKind.SOFTMAX))

        rows = cost.as_matrix() if side == "source" else cost.as_matrix().T
        with torch.no_grad():
            tokens = layer.token_norm(torch.cat([d.tokens(), rows], dim=-1))
            q, k = tokens @ layer.query, tokens @ layer.key
            logits = torch.stack([torch.stack([torch.dot(q[i], k[j]) for j in range(9)]) for i in range(9)]) / 2.0
            weights = _softmax_rows(logits)
            values = torch.cat(
                [layer.feature_stream.values(d.tokens()), layer.cost_stream.values(rows)], dim=-1
            )
            aggregated = torch.stack([(weights[i][:, None] * values).sum(dim=0) for i in range(9)])
            expected_d = layer.feature_stream.finish(d.tokens(), aggregated[:, :4])
            expected_rows = layer.cost_stream.finish(rows, aggregated[:, 4:])
            new_d, new_cost = layer(d, cost, side)

        new_rows = new_cost.as_matrix() if side == "source" else new_cost.as_matrix().T
        assert torch.allclose(new_d.tokens(), expected_d, atol=1e-6)
        assert torch.allclose(new_rows, expected_rows, atol=1e-6)

    def test_streams_are_isolated(self, generator):
        """Zeroing one value projection leaves the other stream's output unchanged."""
        seed_everything(0)
        d_s, _, cost = _grid_inputs(generator)
        layer = SelfAttention(4, 9, 4, _options(attention_kind=AttentionKind.SOFTMAX))
        with torch.no_grad():
            base_d, base_cost = layer(d_s, cost, "source")

            layer.cost_stream.value.zero_()
            feats_only_d, zeroed_cost = layer(d_s, cost, "source")
            assert torch.allclose(feats_only_d.grid, base_d.grid, atol=1e-12)
            rows = cost.as_matrix()
            assert torch.allclose(zeroed_cost.as_matrix(), layer.cost_stream.finish(rows, torch.zeros_like(rows)))

        seed_everything(0)
        layer = SelfAttention(4, 9, 4, _options(attention_kind=AttentionKind.SOFTMAX))
        with torch.no_grad():
            layer.feature_stream.value.zero_()
            zeroed_d, cost_only = layer(d_s, cost, "source")
            assert torch.allclose(cost_only.grid, base_cost.grid, atol=1e-12)
            feats = d_s.tokens()
            assert torch.allclose(zeroed_d.tokens(), layer.feature_stream.finish(feats, torch.zeros_like(feats)))

    def test_zero_query_attends_uniformly(self, generator):
        """With a zero query projection every token receives the mean of the values."""
        seed_everything(0)
        d_s, _, cost = _grid_inputs(generator)
        layer = SelfAttention(4, 9, 4, _options(attention_kind=AttentionKind.SOFTMAX))
        with torch.no_grad():
            layer.query.zero_()
            new_d, new_cost = layer(d_s, cost, "source")
            feats, rows = d_s.tokens(), cost.as_matrix()
            mean_d = layer.feature_stream.values(feats).mean(dim=0).expand(9, 4)
            mean_c = layer.cost_stream.values(rows).mean(dim=0).expand(9, 9)
            assert torch.allclose(new_d.tokens(), layer.feature_stream.finish(feats, mean_d), atol=1e-12)
            assert torch.allclose(new_cost.as_matrix(), layer.cost_stream.finish(rows, mean_c), atol=1e-12)

    @pytest.mark.parametrize("kind", [AttentionKind.LINEAR, AttentionKind.SOFTMAX])
    def test_permuting_tokens_permutes_outputs(self, generator, kind):
        """Reordering source pixels together with their cost rows reorders both outputs the same way."""
        seed_everything(0)
        d_s, _, cost = _grid_inputs(generator)
        layer = SelfAttention(4, 9, 4, _options(attention_kind=kind))
        perm = torch.randperm(9, generator=generator)
        d_perm = FeatureMap(level=2, grid=d_s.tokens()[perm].reshape(3, 3, 4))
        cost_perm = CostVolume(level=2, grid=cost.as_matrix()[perm].reshape(3, 3, 3, 3))
        with torch.no_grad():
            new_d, new_cost = layer(d_s, cost, "source")
            perm_d, perm_cost = layer(d_perm, cost_perm, "source")
        assert torch.allclose(perm_d.tokens(), new_d.tokens()[perm], atol=1e-10)
        assert torch.allclose(perm_cost.as_matrix(), new_cost.as_matrix()[perm], atol=1e-10)


class TestMatchingCrossAttention:
    """Invariants of cross-attention driven by the matching distribution."""

    def test_matches_per_pixel_oracle(self, generator):
        """Each pixel aggregates the other image with softmax(conv4d(C) / sqrt(d_K)) weights."""
        seed_everything(0)
        d_s, d_t, cost = _grid_inputs(generator)
        layer = MatchingCrossAttention(4, 4, _options())
        with torch.no_grad():
            layer.match_src.copy_(torch.randn(3, 3, generator=generator))
            layer.match_tgt.copy_(torch.randn(3, 3, generator=generator))
            m = _padded_conv4d(cost.grid, layer.match_src, layer.match_tgt).reshape(9, 9)
            v_s, v_t = layer.stream.values(d_s.tokens()), layer.stream.values(d_t.tokens())
            to_target = torch.stack([(_softmax_rows(m.T / 2.0)[j][:, None] * v_s).sum(dim=0) for j in range(9)])
            to_source = torch.stack([(_softmax_rows(m / 2.0)[i][:, None] * v_t).sum(dim=0) for i in range(9)])
            new_s, new_t = layer(d_s, d_t, cost)
            expected_t = layer.stream.finish(d_t.tokens(), to_target)
            expected_s = layer.stream.finish(d_s.tokens(), to_source)
        assert torch.allclose(new_t.tokens(), expected_t, atol=1e-6)
        assert torch.allclose(new_s.tokens(), expected_s, atol=1e-6)

    def test_one_hot_cost_copies_matched_values(self, generator):
        """A sharply peaked cost hands each pixel the value of its match."""
        seed_everything(0)
        d_s, d_t, _ = _grid_inputs(generator)
        perm = torch.randperm(9, generator=generator)
        matrix = torch.zeros(9, 9)
        matrix[perm, torch.arange(9)] = 1e3
        layer = MatchingCrossAttention(4, 4, _options())
        with torch.no_grad():
            new_s, new_t = layer(d_s, d_t, CostVolume(level=2, grid=matrix.reshape(3, 3, 3, 3)))
            v_s, v_t = layer.stream.values(d_s.tokens()), layer.stream.values(d_t.tokens())
            inverse = torch.argsort(perm)
            assert torch.allclose(new_t.tokens(), layer.stream.finish(d_t.tokens(), v_s[perm]), atol=1e-10)
            assert torch.allclose(new_s.tokens(), layer.stream.finish(d_s.tokens(), v_t[inverse]), atol=1e-10)

    def test_flat_cost_averages_values(self, generator):
        """A constant cost spreads attention evenly over the other image."""
        seed_everything(0)
        d_s, d_t, _ = _grid_inputs(generator)
        layer = MatchingCrossAttention(4, 4, _options())
        with torch.no_grad():
            new_s, new_t = layer(d_s, d_t, CostVolume(level=2, grid=torch.zeros(3, 3, 3, 3)))
            mean_s = layer.stream.values(d_s.tokens()).mean(dim=0).expand(9, 4)
            mean_t = layer.stream.values(d_t.tokens()).mean(dim=0).expand(9, 4)
            assert torch.allclose(new_t.tokens(), layer.stream.finish(d_t.tokens(), mean_s), atol=1e-12)
            assert torch.allclose(new_s.tokens(), layer.stream.finish(d_s.tokens(), mean_t), atol=1e-12)
