import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from clnvc.attention import scaled_dot_product_attention
from clnvc.errors import ConfigError, InputError
from clnvc.style import STRIDES, ProsodyAligner, StyleEncoder, align_prosody


def _small_encoder(center=True):
    return StyleEncoder(6, embedding_dim=8, channels=(4, 4, 4, 4, 6, 6), center_lpe=center).double()


class TestStyleEncoder:

    def test_matches_numpy_oracle(self):
        enc = _small_encoder()
        mel = torch.randn(1, 37, 6, dtype=torch.float64)
        gse, lpe = enc(mel)
        g_ref, l_ref = oracles.style_encoder(oracles.params(enc), mel[0].numpy(), STRIDES, prefix="")
        assert np.allclose(gse[0].detach().numpy(), g_ref, atol=1e-12)
        assert np.allclose(lpe[0].detach().numpy(), l_ref, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_length_law(self, n):
        enc = StyleEncoder(10, embedding_dim=16)
        gse, lpe = enc(torch.randn(1, 16 * n, 10))
        assert lpe.shape == (1, n, 16) and gse.shape == (1, 16)
        assert enc.output_length(16 * n) == n

    def test_minimum_length(self):
        enc = StyleEncoder(10, embedding_dim=16)
        assert enc.min_frames == 16
        with pytest.raises(InputError, match="16"):
            enc(torch.randn(1, 15, 10))

    def test_deterministic(self):
        enc = StyleEncoder(10, embedding_dim=16)
        mel = torch.randn(1, 48, 10)
        a, b = enc(mel), enc(mel)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_late_frame_change(self):
        # GSE sees the whole utterance; the forward half of uncentered early LPE rows does not
        enc = _small_encoder(center=False)
        a = torch.randn(1, 128, 6, dtype=torch.float64)
        b = a.clone()
        b[0, 120] += 1.0
        (ga, la), (gb, lb) = enc(a), enc(b)
        assert not torch.equal(ga, gb)
        half = enc.embedding_dim // 2
        early = [r for r in range(la.shape[1]) if enc.last_input_frame(r) < 120]
        assert early and torch.equal(la[0, early, :half], lb[0, early, :half])
        # the backward direction carries the late change to every row
        assert not torch.equal(la[0, early, half:], lb[0, early, half:])

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            StyleEncoder(10, embedding_dim=15)


class TestAlignProsody:

    def test_single_lpe_row(self, rng):
        lpe = torch.from_numpy(rng.normal(size=(1, 8)))
        out, w = align_prosody(torch.from_numpy(rng.normal(size=(5, 4))), lpe)
        assert torch.equal(w, torch.ones(5, 1, dtype=torch.float64))
        assert torch.allclose(out, lpe[:, 4:].expand(5, 4), atol=0)

    def test_identical_keys_uniform(self, rng):
        v = rng.normal(size=(6, 3))
        k = np.tile(rng.normal(size=(1, 3)), (6, 1))
        out, w = align_prosody(torch.from_numpy(rng.normal(size=(4, 3))), torch.from_numpy(np.hstack([k, v])))
        assert torch.allclose(w, torch.full((4, 6), 1 / 6, dtype=torch.float64), atol=1e-15)
        assert np.allclose(out.numpy(), np.tile(v.mean(0), (4, 1)), atol=1e-14)

    def test_random_matches_explicit(self, rng):
        q = rng.normal(size=(3, 2))
        lpe = rng.normal(size=(4, 4))
        out, w = align_prosody(torch.from_numpy(q), torch.from_numpy(lpe))
        ref_out, ref_w = oracles.attention(q, lpe[:, :2], lpe[:, 2:])
        assert np.allclose(out.numpy(), ref_out, atol=1e-14) and np.allclose(w.numpy(), ref_w, atol=1e-14)

    def test_projection_used_when_widths_differ(self, rng):
        aligner = ProsodyAligner(5, 8).double()
        assert aligner.query_proj is not None and aligner.query_proj.bias is None
        q = torch.from_numpy(rng.normal(size=(3, 5)))
        lpe = torch.from_numpy(rng.normal(size=(4, 8)))
        out, _ = aligner(q, lpe)
        projected = q.numpy() @ aligner.query_proj.weight.detach().numpy().T
        ref, _ = oracles.attention(projected, lpe.numpy()[:, :4], lpe.numpy()[:, 4:])
        assert np.allclose(out.detach().numpy(), ref, atol=1e-14)
        assert ProsodyAligner(4, 8).query_proj is None

    def test_width_mismatch(self):
        with pytest.raises(ConfigError):
            align_prosody(torch.zeros(3, 5), torch.zeros(4, 8))
        with pytest.raises(ConfigError):
            align_prosody(torch.zeros(3, 5), torch.zeros(4, 7))

    def test_key_value_permutation_equivariance(self, rng):
        q = torch.from_numpy(rng.normal(size=(3, 2)))
        lpe = torch.from_numpy(rng.normal(size=(5, 4)))
        perm = torch.from_numpy(rng.permutation(5))
        a, _ = align_prosody(q, lpe)
        b, _ = align_prosody(q, lpe[perm])
        assert torch.allclose(a, b, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_attention_rows_are_convex(n_q, n_k, width, v_width, seed):
    g = np.random.default_rng(seed)
    v = torch.from_numpy(g.normal(size=(n_k, v_width)))
    out, w = scaled_dot_product_attention(torch.from_numpy(g.normal(size=(n_q, width)) * 3),
                                          torch.from_numpy(g.normal(size=(n_k, width)) * 3), v)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(n_q, dtype=torch.float64), atol=1e-12)
    assert (out >= v.min(0).values - 1e-12).all() and (out <= v.max(0).values + 1e-12).all()
