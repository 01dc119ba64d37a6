import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from clnvc.errors import ConfigError, InputError
from clnvc.fusion import DegenerateFusionWarning, DynamicFusion, LinearFusionPlan, dynamic_fuse, linear_fuse, linear_fusion_mask


def _pair(t, c=3):
    a = np.arange(t * c, dtype=float).reshape(t, c)
    return a, -a - 1


class TestLinearFusion:

    def test_worked_example(self):
        mel1, mel2 = _pair(20)
        out = linear_fuse(mel1, mel2, LinearFusionPlan(0, 5))
        assert np.array_equal(out[:5], mel2[:5]) and np.array_equal(out[5:], mel1[5:])
        assert linear_fusion_mask(20, LinearFusionPlan(0, 5)).mean() == 0.25

    def test_two_segments_when_allowed(self):
        mask = linear_fusion_mask(25, LinearFusionPlan(0, 5))
        assert np.flatnonzero(mask).tolist() == list(range(5)) + list(range(10, 15))

    def test_self_mix(self):
        mel, _ = _pair(30)
        assert np.array_equal(linear_fuse(mel, mel.copy(), LinearFusionPlan(3, 5)), mel)

    def test_last_frame(self):
        mel1, mel2 = _pair(30)
        mask = linear_fusion_mask(30, LinearFusionPlan(29, 1))
        assert mask.sum() == 1 and mask[29]
        out = linear_fuse(mel1, mel2, LinearFusionPlan(29, 1))
        assert np.array_equal(out[29], mel2[29])

    def test_start_out_of_range(self):
        with pytest.raises(InputError):
            linear_fusion_mask(10, LinearFusionPlan(10, 5))

    def test_long_interval_degenerates_with_warning(self):
        mel1, mel2 = _pair(5)
        with pytest.warns(DegenerateFusionWarning):
            out = linear_fuse(mel1, mel2, LinearFusionPlan(0, 5))
        assert out is mel1

    def test_torch_inputs(self):
        a, b = (torch.from_numpy(x) for x in _pair(25))
        out = linear_fuse(a, b, LinearFusionPlan(2, 5))
        assert isinstance(out, torch.Tensor)
        assert np.array_equal(out.numpy(), linear_fuse(a.numpy(), b.numpy(), LinearFusionPlan(2, 5)))

    def test_gradient_flows_to_both_sources(self):
        a, b = (torch.from_numpy(x).requires_grad_() for x in _pair(25))
        linear_fuse(a, b, LinearFusionPlan(2, 5)).sum().backward()
        mask = linear_fusion_mask(25, LinearFusionPlan(2, 5))
        assert torch.equal(b.grad[:, 0] == 1, torch.from_numpy(mask))
        assert torch.equal(a.grad[:, 0] == 1, torch.from_numpy(~mask))

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            linear_fuse(np.zeros((5, 2)), np.zeros((6, 2)), LinearFusionPlan(0, 1))

    @pytest.mark.parametrize("kwargs", [dict(start=-1), dict(start=0, interval=0),
                                        dict(start=0, max_mix_fraction=0.6), dict(start=0, max_mix_fraction=0.0)])
    def test_plan_validation(self, kwargs):
        with pytest.raises(ConfigError):
            LinearFusionPlan(**kwargs)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 200), st.integers(1, 12), st.data())
    def test_matches_enumeration_oracle(self, t, k, data):
        start = data.draw(st.integers(0, t - 1))
        mask = linear_fusion_mask(t, LinearFusionPlan(start, k))
        assert np.array_equal(mask, oracles.linear_fusion_mask(t, start, k))
        assert mask.mean() < 0.5


class TestDynamicFusion:

    def test_single_group_self_is_identity(self, rng):
        g = torch.from_numpy(rng.normal(size=8))
        eye = torch.eye(8, dtype=torch.float64)
        fused, _ = dynamic_fuse(g, g, eye, eye, eye, 1)
        assert torch.equal(fused, g)

    def test_single_group_returns_second(self, rng):
        g1, g2 = (torch.from_numpy(rng.normal(size=8)) for _ in range(2))
        eye = torch.eye(8, dtype=torch.float64)
        fused, w = dynamic_fuse(g1, g2, eye, eye, eye, 1)
        assert torch.equal(w, torch.ones(1, 1, dtype=torch.float64)) and torch.equal(fused, g2)

    def test_matches_explicit_attention(self, rng):
        g1, g2 = rng.normal(size=(2, 12))
        ws = [rng.normal(size=(3, 3)) for _ in range(3)]
        fused, w = dynamic_fuse(torch.from_numpy(g1), torch.from_numpy(g2), *map(torch.from_numpy, ws), 4)
        ref, ref_w = oracles.dynamic_fuse(g1, g2, *ws, 4)
        assert np.allclose(fused.numpy(), ref, atol=1e-14) and np.allclose(w.numpy(), ref_w, atol=1e-14)

    def test_identity_output_in_hull_of_second(self, rng):
        module = DynamicFusion(16, 4).double()
        g1, g2 = (torch.from_numpy(rng.normal(size=16)) for _ in range(2))
        fused = module(g1, g2).detach().reshape(4, 4)
        groups = g2.reshape(4, 4)
        assert (fused >= groups.min(0).values - 1e-12).all() and (fused <= groups.max(0).values + 1e-12).all()

    def test_self_fusion_is_convex_recombination(self, rng):
        g = torch.from_numpy(rng.normal(size=16))
        fused, w = DynamicFusion(16, 4).double()(g, g, return_weights=True)
        assert torch.allclose(fused.detach().reshape(4, 4), w.detach() @ g.reshape(4, 4), atol=1e-15)

    def test_batched(self, rng):
        module = DynamicFusion(8, 4).double()
        g1, g2 = (torch.from_numpy(rng.normal(size=(3, 8))) for _ in range(2))
        batched = module(g1, g2)
        for i in range(3):
            assert torch.allclose(batched[i], module(g1[i], g2[i]), atol=1e-15)

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            DynamicFusion(10, 4)
        eye = torch.eye(2)
        with pytest.raises(ConfigError):
            dynamic_fuse(torch.zeros(10), torch.zeros(10), eye, eye, eye, 4)
