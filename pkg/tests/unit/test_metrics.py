"""Tests for AEPE, PCK and keypoint transfer."""

import numpy as np
import pytest
import torch

from ufc_matcher.core.config import WarpKind
from ufc_matcher.core.exceptions import DimensionError, DomainError, EvaluationError
from ufc_matcher.models.flow import FlowField, Keypoint, TransferredKeypoint
from ufc_matcher.services.evaluation import aepe, alpha_key, pck, pck_flow, pck_flow_px, transfer_keypoints
from ufc_matcher.services.synthetic import apply_warp, sample_warp, warp_to_flow


class TestFlowMetrics:
    """Tests for the dense flow metrics."""

    def test_aepe_zero_for_identical(self):
        """A flow scores zero against itself."""
        flow = FlowField.constant(6, 6, 1.0, -1.0)
        assert aepe(flow, flow) == 0.0

    def test_aepe_three_four_five(self):
        """A (3, 4) offset everywhere has AEPE 5."""
        assert aepe(FlowField.constant(10, 10, 3.0, 4.0), FlowField.zeros(10, 10)) == pytest.approx(5.0)

    def test_aepe_uses_joint_mask(self):
        """Only pixels valid in both flows count."""
        valid = torch.zeros(2, 2, dtype=torch.bool)
        valid[1, 1] = True
        pred_grid = torch.full((2, 2, 2), 50.0)
        pred_grid[1, 1] = torch.tensor([0.0, 1.0])
        pred = FlowField(grid=pred_grid, valid=torch.ones(2, 2, dtype=torch.bool))
        gt = FlowField(grid=torch.zeros(2, 2, 2), valid=valid)
        assert aepe(pred, gt) == pytest.approx(1.0)

    def test_aepe_without_overlap(self):
        """Disjoint masks leave nothing to evaluate."""
        gt = FlowField(grid=torch.zeros(2, 2, 2), valid=torch.zeros(2, 2, dtype=torch.bool))
        with pytest.raises(EvaluationError):
            aepe(FlowField.zeros(2, 2), gt)

    def test_shape_mismatch(self):
        """Flows must share extents."""
        with pytest.raises(DimensionError):
            aepe(FlowField.zeros(2, 2), FlowField.zeros(2, 3))

    def test_aepe_matches_masked_mean(self, generator):
        """AEPE under random masks equals the NumPy mean over the jointly valid pixels."""
        pred_grid, gt_grid = torch.randn(9, 7, 2, generator=generator), torch.randn(9, 7, 2, generator=generator)
        pred_valid, gt_valid = torch.rand(9, 7, generator=generator) > 0.3, torch.rand(9, 7, generator=generator) > 0.3
        pred_valid[0, 0] = gt_valid[0, 0] = True
        pred = FlowField(grid=pred_grid, valid=pred_valid)
        gt = FlowField(grid=gt_grid, valid=gt_valid)
        joint = pred_valid.numpy() & gt_valid.numpy()
        expected = np.linalg.norm(pred_grid.numpy() - gt_grid.numpy(), axis=-1)[joint].mean()
        assert aepe(pred, gt) == pytest.approx(float(expected), abs=1e-12)

    def test_pck_boundary_counts(self):
        """An error exactly at alpha * max(H, W) is correct."""
        grid = torch.tensor([1.0, 0.0]).expand(10, 10, 2).clone()
        pred = FlowField(grid=grid, valid=torch.ones(10, 10, dtype=torch.bool))
        assert pck_flow(pred, FlowField.zeros(10, 10), 0.1) == 1.0
        assert pck_flow(pred, FlowField.zeros(10, 10), 0.05) == 0.0

    def test_pck_px(self):
        """Half the pixels within five pixels gives 0.5."""
        grid = torch.zeros(2, 2, 2)
        grid[0, :, 0] = 6.0
        pred = FlowField(grid=grid, valid=torch.ones(2, 2, dtype=torch.bool))
        assert pck_flow_px(pred, FlowField.zeros(2, 2), 5.0) == 0.5

    def test_pck_alpha_domain(self):
        """alpha must be positive."""
        with pytest.raises(DomainError):
            pck_flow(FlowField.zeros(2, 2), FlowField.zeros(2, 2), 0.0)

    def test_alpha_key(self):
        """Alpha keys are compact decimal strings."""
        assert alpha_key(0.1) == "0.1"
        assert alpha_key(0.05) == "0.05"


class TestKeypointPck:
    """Tests for keypoint PCK."""

    def test_three_of_six(self):
        """Three hits out of six keypoints give 0.5, with the boundary counted as a hit."""
        gt = [Keypoint(x=10.0, y=10.0) for _ in range(6)]
        pred = [
            Keypoint(x=10.0, y=10.0),
            Keypoint(x=11.0, y=10.0),
            Keypoint(x=10.0, y=10.5),
            Keypoint(x=15.0, y=10.0),
            Keypoint(x=10.0, y=16.0),
            Keypoint(x=0.0, y=0.0),
        ]
        assert pck(pred, gt, alpha=0.1, h_ref=10, w_ref=10) == 0.5

    def test_unmatched_counts_as_miss(self):
        """Transferred keypoints flagged unmatched never count."""
        gt = [Keypoint(x=1.0, y=1.0)]
        pred = [TransferredKeypoint(x=1.0, y=1.0, matched=False)]
        assert pck(pred, gt, alpha=0.1, h_ref=10, w_ref=10) == 0.0

    def test_aligned_by_pair_id(self):
        """Tagged keypoints are matched by pair id rather than position."""
        gt = [Keypoint(x=1.0, y=1.0, pair_id="a"), Keypoint(x=5.0, y=5.0, pair_id="b")]
        pred = [Keypoint(x=5.0, y=5.0, pair_id="b"), Keypoint(x=1.0, y=1.0, pair_id="a")]
        assert pck(pred, gt, alpha=0.01, h_ref=10, w_ref=10) == 1.0

    def test_pair_id_mismatch(self):
        """Differing pair ids cannot be aligned."""
        with pytest.raises(EvaluationError):
            pck([Keypoint(x=1, y=1, pair_id="a")], [Keypoint(x=1, y=1, pair_id="b")], 0.1, 10, 10)

    def test_empty(self):
        """PCK needs keypoints."""
        with pytest.raises(EvaluationError):
            pck([], [], 0.1, 10, 10)

    def test_monotone_in_alpha(self, generator):
        """A larger alpha never lowers PCK."""
        gt = [Keypoint(x=float(x), y=float(y)) for x, y in 50 * torch.rand(40, 2, generator=generator)]
        offsets = 8 * torch.rand(40, 2, generator=generator)
        pred = [Keypoint(x=kp.x + float(dx), y=kp.y + float(dy)) for kp, (dx, dy) in zip(gt, offsets, strict=True)]
        scores = [pck(pred, gt, alpha=a, h_ref=50, w_ref=50) for a in (0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3)]
        assert scores == sorted(scores)
        assert scores[-1] == 1.0

    def test_exact_threshold_is_correct(self):
        """A keypoint exactly alpha * max(h, w) away is a hit; one just beyond is a miss."""
        gt = [Keypoint(x=10.0, y=10.0), Keypoint(x=10.0, y=10.0)]
        pred = [Keypoint(x=13.0, y=14.0), Keypoint(x=13.0, y=14.001)]
        assert pck(pred, gt, alpha=0.25, h_ref=20, w_ref=10) == 0.5


class TestTransferKeypoints:
    """Tests for transfer_keypoints."""

    def test_zero_flow_keeps_points(self):
        """Zero flow maps every keypoint onto itself."""
        kps = [Keypoint(x=2.0, y=3.0), Keypoint(x=4.5, y=1.25)]
        moved = transfer_keypoints(FlowField.zeros(8, 8), kps)
        for kp, out in zip(kps, moved, strict=True):
            assert out.x == pytest.approx(kp.x, abs=1e-9)
            assert out.y == pytest.approx(kp.y, abs=1e-9)
            assert out.matched

    def test_constant_flow_shifts_back(self):
        """Under F = (2, 1) a source point p lands at p - (2, 1) in the target."""
        kp = Keypoint(x=5.5, y=4.25, pair_id="p")
        (out,) = transfer_keypoints(FlowField.constant(10, 10, 2.0, 1.0), [kp])
        assert out.x == pytest.approx(3.5, abs=1e-9)
        assert out.y == pytest.approx(3.25, abs=1e-9)
        assert out.pair_id == "p"
        assert out.residual == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_affine_flow_moves_points_through_warp(self, seed):
        """Under an affine ground-truth flow each source keypoint lands on its forward-warped position."""
        size = 64
        spec = sample_warp(WarpKind.AFFINE, seed, 0.3)
        flow = warp_to_flow(spec, size, size)
        centre = (size - 1) / 2.0
        sources = np.stack(np.meshgrid(np.linspace(22, 42, 5), np.linspace(22, 42, 5)), axis=-1).reshape(-1, 2)
        expected = apply_warp(spec, (sources - centre) / size) * size + centre
        moved = transfer_keypoints(flow, [Keypoint(x=x, y=y) for x, y in sources])
        for out, (ex, ey) in zip(moved, expected, strict=True):
            assert out.matched
            assert ((out.x - ex) ** 2 + (out.y - ey) ** 2) ** 0.5 < 0.5

    def test_far_points_are_unmatched(self):
        """A keypoint far from every valid mapped pixel is flagged."""
        valid = torch.zeros(10, 10, dtype=torch.bool)
        valid[0, 0] = True
        flow = FlowField(grid=torch.zeros(10, 10, 2), valid=valid)
        (out,) = transfer_keypoints(flow, [Keypoint(x=9.0, y=9.0)])
        assert not out.matched

    def test_empty(self):
        """No keypoints in, none out."""
        assert transfer_keypoints(FlowField.zeros(4, 4), []) == []
