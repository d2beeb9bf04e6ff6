import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mapdiff.encoder import (
    Fusion,
    MomentFeatureMap,
    MultimodalEncoder,
    SentenceEncoder,
    extract_feature_scales,
    l2_normalize,
    max_pool_map,
)
from mapdiff.temporal_map import ScoreMap2D, VideoGrid, extract_multiscale, valid_mask

DT = torch.float64


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)


class TestSentenceEncoder:
    def test_single_word_shape(self):
        enc = SentenceEncoder(5, 7)
        assert enc(torch.randn(2, 1, 5)).shape == (2, 7)

    def test_order_sensitive(self):
        enc = SentenceEncoder(4, 6).double()
        w = torch.randn(1, 2, 4, dtype=DT)
        assert not torch.allclose(enc(w), enc(w.flip(1)))

    def test_deterministic(self):
        enc = SentenceEncoder(4, 6)
        w = torch.randn(3, 5, 4)
        assert torch.equal(enc(w), enc(w))

    def test_padding_ignored(self):
        enc = SentenceEncoder(4, 6).double()
        w = torch.randn(1, 3, 4, dtype=DT)
        padded = torch.cat([w, torch.randn(1, 2, 4, dtype=DT)], dim=1)
        torch.testing.assert_close(enc(w), enc(padded, torch.tensor([3])))

    def test_empty_query(self):
        enc = SentenceEncoder(4, 6)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 0, 4))
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 2, 4), torch.tensor([0]))


class TestFeatureMap:
    def test_base_row_is_projected_segment(self):
        fm = MomentFeatureMap(3, 5).double()
        segs = torch.randn(2, 6, 3, dtype=DT)
        out = fm(segs)
        torch.testing.assert_close(out[:, :, 0], torch.relu(fm.proj(segs)))

    def test_max_pool_receptive_field(self):
        n, d = 6, 3
        base = torch.randn(1, n, d, dtype=DT)
        ref = max_pool_map(base)
        for c in range(n):
            bumped = base.clone()
            bumped[0, c] += 10.0
            changed = (max_pool_map(bumped) != ref).any(-1)[0]
            for a in range(n):
                for b in range(n - a):
                    assert bool(changed[a, b]) == (a <= c <= a + b), (a, b, c)

    def test_max_pool_matches_window_max(self):
        seg = torch.randn(2, 7, 4, dtype=DT)
        out = max_pool_map(seg)
        for a in range(7):
            for b in range(7 - a):
                torch.testing.assert_close(out[:, a, b], seg[:, a:a + b + 1].max(1).values)

    def test_constant_segments(self):
        fm = MomentFeatureMap(3, 4)
        segs = torch.randn(1, 1, 3).expand(1, 5, 3)
        out = fm(segs)[0]
        valid = torch.as_tensor(valid_mask(5))
        cells = out[valid]
        assert torch.allclose(cells, cells[:1].expand_as(cells))

    @pytest.mark.parametrize("mode", ["max-pool", "stacked-conv"])
    def test_invalid_cells_zero(self, mode):
        out = MomentFeatureMap(3, 4, mode)(torch.randn(2, 6, 3))
        assert torch.all(out[:, ~torch.as_tensor(valid_mask(6))] == 0)
        assert out.shape == (2, 6, 6, 4)

    def test_stacked_conv_receptive_field(self):
        fm = MomentFeatureMap(3, 4, "stacked-conv").double()
        base = torch.randn(1, 5, 3, dtype=DT)
        ref = fm(base)
        bumped = base.clone()
        bumped[0, 4] += 5.0
        changed = (fm(bumped) != ref).any(-1)[0]
        # segment 4 cannot influence moments that end before it
        for a in range(5):
            for b in range(5 - a):
                if a + b < 4:
                    assert not changed[a, b]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            MomentFeatureMap(3, 4, "avg-pool")


class TestFusion:
    def test_unit_norm(self):
        fuse = Fusion(4, 3, 6).double()
        out = fuse(torch.randn(2, 5, 5, 4, dtype=DT), torch.randn(2, 3, dtype=DT))
        norms = out.norm(dim=-1)
        valid = torch.as_tensor(valid_mask(5))
        assert torch.all((norms[:, valid] - 1).abs() <= 1e-6)
        assert torch.all(out[:, ~valid] == 0)

    def test_zero_product(self):
        fuse = Fusion(4, 3, 6)
        with torch.no_grad():
            fuse.text.weight.zero_()
            fuse.text.bias.zero_()
        out = fuse(torch.randn(1, 4, 4, 4), torch.randn(1, 3))
        assert torch.all(out == 0)
        assert not torch.isnan(out).any()

    def test_zero_vector_gradient_finite(self):
        x = torch.zeros(3, 4, dtype=DT, requires_grad=True)
        l2_normalize(x).sum().backward()
        assert torch.isfinite(x.grad).all()

    @given(st.floats(1e-3, 1e3))
    @settings(max_examples=25, deadline=None)
    def test_scale_invariance(self, c):
        x = torch.randn(10, 6, generator=torch.Generator().manual_seed(1), dtype=DT)
        torch.testing.assert_close(l2_normalize(c * x), l2_normalize(x), rtol=1e-12, atol=1e-12)


class TestScaleViews:
    def test_single_scale_identity(self):
        f = torch.randn(2, 6, 6, 3)
        (view,) = extract_feature_scales(f * torch.as_tensor(valid_mask(6))[None, :, :, None], 1, 6)
        torch.testing.assert_close(view.permute(0, 2, 3, 1), f * torch.as_tensor(valid_mask(6))[None, :, :, None])

    @pytest.mark.parametrize("n", [1, 3, 8, 11, 16, 23, 32])
    @pytest.mark.parametrize("scales", [1, 2, 3])
    def test_matches_score_map_extraction(self, n, scales):
        anchors = -(-n // 2 ** (scales - 1))
        rng = np.random.default_rng(n * 10 + scales)
        f = rng.standard_normal((1, n, n, 2)) * valid_mask(n)[None, :, :, None]
        views = extract_feature_scales(torch.as_tensor(f), scales, anchors)
        for ch in range(2):
            ms = extract_multiscale(ScoreMap2D(VideoGrid(n), f[0, :, :, ch]), scales, anchors)
            for k in range(scales):
                np.testing.assert_array_equal(views[k][0, ch].numpy(), ms.maps[k])

    def test_invalid_zeroed(self):
        views = extract_feature_scales(torch.ones(1, 8, 8, 2), 2, 4)
        assert views[1][0, :, 3, 3].abs().sum() == 0


def test_encoder_gradients(gradcheck_report):
    enc = [e for e in gradcheck_report.entries if e["tensor"].startswith("encoder.")]
    assert {e["tensor"].split(".")[1] for e in enc} == {"sentence", "visual", "fusion"}
    assert max(e["rel_error"] for e in enc) <= 1e-4


def test_full_encoder_shapes():
    enc = MultimodalEncoder(d_w=4, d_seg=5, d_v=6, d_s=7, d_f=8)
    out = enc(torch.randn(3, 9, 5), torch.randn(3, 4, 4), torch.tensor([4, 2, 1]))
    assert out.shape == (3, 9, 9, 8)
