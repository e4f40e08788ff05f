import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from alvtts.corpus import SyntheticCorpusConfig, generate_synthetic_corpus
from alvtts.errors import ShapeError
from alvtts.features import F0Provider
from alvtts.quantizer import (
    ReferenceEncoder,
    VectorQuantizer,
    extract_alv,
    perplexity,
    straight_through,
    vq_loss,
)


def manual_conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct sliding-window conv, kernel 3, stride 1, zero padding 1.

    x: (C_in, T), weight: (C_out, C_in, 3), bias: (C_out,).
    """
    c_out, c_in, _ = weight.shape
    t = x.shape[1]
    padded = np.zeros((c_in, t + 2), dtype=np.float64)
    padded[:, 1:-1] = x
    out = np.empty((c_out, t), dtype=np.float64)
    for o in range(c_out):
        for pos in range(t):
            out[o, pos] = (weight[o] * padded[:, pos : pos + 3]).sum() + bias[o]
    return out


class TestReferenceEncoder:
    def test_matches_sliding_window_oracle(self):
        torch.manual_seed(0)
        enc = ReferenceEncoder(input_dim=2, width=4).double()
        x = torch.randn(6, 2, dtype=torch.float64)
        with torch.no_grad():
            got = enc(x).numpy()

        xin = x.numpy()
        w_p = enc.proj.weight.detach().numpy()
        b_p = enc.proj.bias.detach().numpy()
        h = xin @ w_p.T + b_p
        h = manual_conv1d(
            h.T, enc.conv1.weight.detach().numpy(), enc.conv1.bias.detach().numpy()
        )
        h = np.maximum(h, 0.0)
        h = manual_conv1d(
            h, enc.conv2.weight.detach().numpy(), enc.conv2.bias.detach().numpy()
        )
        np.testing.assert_allclose(got, h.T, atol=1e-10)

    def test_batched_equals_unbatched(self):
        torch.manual_seed(1)
        enc = ReferenceEncoder(input_dim=1, width=8)
        lens = [5, 3, 7]
        seqs = [torch.randn(n, 1) for n in lens]
        padded = torch.zeros(3, max(lens), 1)
        mask = torch.zeros(3, max(lens), dtype=torch.bool)
        for i, s in enumerate(seqs):
            padded[i, : len(s)] = s
            mask[i, : len(s)] = True
        with torch.no_grad():
            batched = enc(padded, mask)
            for i, s in enumerate(seqs):
                single = enc(s)
                np.testing.assert_allclose(
                    batched[i, : len(s)].numpy(), single.numpy(), atol=1e-6
                )

    def test_padded_positions_are_zero(self):
        torch.manual_seed(2)
        enc = ReferenceEncoder(input_dim=1, width=8)
        padded = torch.randn(2, 6, 1)
        mask = torch.tensor([[1, 1, 1, 0, 0, 0], [1, 1, 1, 1, 1, 0]], dtype=torch.bool)
        with torch.no_grad():
            out = enc(padded, mask)
        assert out[0, 3:].abs().max().item() == 0.0
        assert out[1, 5:].abs().max().item() == 0.0

    def test_rejects_bad_rank(self):
        enc = ReferenceEncoder(input_dim=1, width=4)
        with pytest.raises(ShapeError):
            enc(torch.zeros(2, 3, 4, 5))


class TestVectorQuantizer:
    def test_worked_loss_example(self):
        # Unit displacement between latent and nearest code: codebook
        # term 1, commitment term 1, total 1 + 4*1 = 5.
        q = VectorQuantizer(codebook_size=2, width=4, commitment_weight=4.0)
        with torch.no_grad():
            q.codebook.zero_()
            q.codebook[1] = 100.0
        z_e = torch.zeros(3, 4)
        z_e[:, 0] = 1.0
        _, _, losses = q(z_e)
        assert losses["codebook"].item() == pytest.approx(1.0, abs=1e-6)
        assert losses["commitment"].item() == pytest.approx(1.0, abs=1e-6)
        assert losses["total"].item() == pytest.approx(5.0, abs=1e-6)

    def test_nearest_neighbour_assignment(self):
        q = VectorQuantizer(codebook_size=3, width=2)
        with torch.no_grad():
            q.codebook.copy_(torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        z = torch.tensor([[0.1, 0.0], [0.9, 0.1], [0.2, 0.8]])
        idx, z_q = q.quantize(z)
        assert idx.tolist() == [0, 1, 2]
        np.testing.assert_array_equal(z_q.detach().numpy(), q.codebook[idx].detach().numpy())

    def test_tie_breaks_to_lowest_index(self):
        q = VectorQuantizer(codebook_size=3, width=2)
        with torch.no_grad():
            q.codebook.copy_(torch.tensor([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]))
        idx, _ = q.quantize(torch.tensor([[0.3, -2.0], [5.0, 5.0]]))
        assert idx.tolist() == [0, 0]

    def test_codebook_init_range(self):
        torch.manual_seed(0)
        q = VectorQuantizer(codebook_size=4, width=256)
        cb = q.codebook.detach()
        assert cb.abs().max().item() <= 0.05
        assert cb.abs().max().item() > 0.0

    def test_quantizing_codebook_rows_is_identity(self):
        torch.manual_seed(3)
        q = VectorQuantizer(codebook_size=4, width=8)
        idx, z_q = q.quantize(q.codebook.detach().clone())
        assert idx.tolist() == [0, 1, 2, 3]
        np.testing.assert_array_equal(z_q.detach().numpy(), q.codebook.detach().numpy())

    def test_width_mismatch(self):
        q = VectorQuantizer(codebook_size=2, width=4)
        with pytest.raises(ShapeError):
            q.quantize(torch.zeros(3, 5))

    def test_non_finite_rejected(self):
        from alvtts.errors import NumericError

        q = VectorQuantizer(codebook_size=2, width=4)
        bad = torch.zeros(2, 4)
        bad[1, 0] = float("nan")
        with pytest.raises(NumericError):
            q.quantize(bad)

    def test_usage_counts_accumulate(self):
        q = VectorQuantizer(codebook_size=3, width=2)
        with torch.no_grad():
            q.codebook.copy_(torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        q.quantize(torch.tensor([[0.1, 0.0], [0.9, 0.1], [0.9, 0.0]]))
        assert q.usage_counts.tolist() == [1, 2, 0]
        q.quantize(torch.tensor([[0.0, 0.9]]))
        assert q.usage_counts.tolist() == [1, 2, 1]
        q.reset_usage()
        assert q.usage_counts.tolist() == [0, 0, 0]

    def test_translation_equivariance(self):
        torch.manual_seed(12)
        q = VectorQuantizer(codebook_size=4, width=6)
        z = torch.randn(9, 6)
        idx_before, _ = q.quantize(z)
        shift = torch.randn(6)
        with torch.no_grad():
            q.codebook += shift
        idx_after, _ = q.quantize(z + shift)
        np.testing.assert_array_equal(idx_before.numpy(), idx_after.numpy())

    def test_masked_loss_equals_trimmed_loss(self):
        torch.manual_seed(4)
        q = VectorQuantizer(codebook_size=4, width=6)
        z = torch.randn(2, 5, 6)
        mask = torch.tensor(
            [[1, 1, 1, 0, 0], [1, 1, 1, 1, 0]], dtype=torch.float32
        )
        _, _, masked = q(z, mask)
        flat = torch.cat([z[0, :3], z[1, :4]])
        _, _, trimmed = q(flat)
        assert masked["total"].item() == pytest.approx(trimmed["total"].item(), rel=1e-6)


class TestStraightThrough:
    def test_forward_value_is_quantized(self):
        torch.manual_seed(5)
        q = VectorQuantizer(codebook_size=4, width=8)
        z_e = torch.randn(6, 8, requires_grad=True)
        st_out, idx, _ = q(z_e)
        _, z_q = q.quantize(z_e.detach())
        np.testing.assert_allclose(
            st_out.detach().numpy(), z_q.detach().numpy(), atol=1e-6
        )

    def test_gradient_is_identity_jacobian(self):
        torch.manual_seed(6)
        q = VectorQuantizer(codebook_size=4, width=8)
        z_e = torch.randn(5, 8, requires_grad=True)
        w = torch.randn(5, 8)
        st_out, _, _ = q(z_e)
        (st_out * w).sum().backward()
        np.testing.assert_allclose(z_e.grad.numpy(), w.numpy(), atol=1e-7)

    def test_finite_difference_matches_autograd(self):
        # Autograd through the straight-through path must match central
        # finite differences of the surrogate x -> g(x + const offset),
        # the map ST pretends to differentiate.
        torch.manual_seed(7)
        q = VectorQuantizer(codebook_size=3, width=3).double()
        coeffs = torch.randn(4, 3, dtype=torch.float64)

        def g(v: torch.Tensor) -> torch.Tensor:
            return (coeffs * v**3).sum() + (v.sum()) ** 2

        z0 = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        st_out = straight_through(z0, q.quantize(z0)[1])
        g(st_out).backward()
        grad = z0.grad.numpy()

        offset = (q.quantize(z0.detach())[1] - z0.detach()).clone()
        step = 1e-4
        fd = np.empty_like(grad)
        base = z0.detach().clone()
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                hi, lo = base.clone(), base.clone()
                hi[i, j] += step
                lo[i, j] -= step
                fd[i, j] = (g(hi + offset) - g(lo + offset)).item() / (2 * step)
        rel = np.abs(fd - grad) / np.maximum(np.abs(grad), 1e-8)
        assert rel.max() < 1e-3

    def test_loss_backprop_reaches_codebook_and_encoder_side(self):
        torch.manual_seed(8)
        q = VectorQuantizer(codebook_size=4, width=8)
        z_e = torch.randn(6, 8, requires_grad=True)
        _, _, losses = q(z_e)
        losses["total"].backward()
        assert z_e.grad is not None and z_e.grad.abs().sum() > 0
        assert q.codebook.grad is not None and q.codebook.grad.abs().sum() > 0


class TestPerplexity:
    def test_uniform_usage(self):
        idx = np.repeat(np.arange(4), 25)
        assert perplexity(idx, 4) == pytest.approx(4.0, abs=1e-9)

    def test_single_code(self):
        assert perplexity(np.zeros(50, dtype=int), 4) == pytest.approx(1.0, abs=1e-9)

    def test_hand_computed(self):
        # p = [0.5, 0.5, 0, 0] -> exp(ln 2) = 2
        idx = np.array([0] * 10 + [1] * 10)
        assert perplexity(idx, 4) == pytest.approx(2.0, abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            perplexity(np.array([], dtype=int), 4)

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=100))
    @settings(max_examples=50, deadline=None)
    def test_bounds(self, idx):
        p = perplexity(np.array(idx), 4)
        assert 1.0 - 1e-9 <= p <= 4.0 + 1e-9


class TestExtractAlv:
    def test_one_index_per_phoneme_and_deterministic(self):
        corpus = generate_synthetic_corpus(
            SyntheticCorpusConfig(lexicon_size=8, sentence_count=6, seed=2)
        )
        torch.manual_seed(9)
        enc = ReferenceEncoder(input_dim=1, width=16)
        q = VectorQuantizer(codebook_size=4, width=16)
        provider = F0Provider()
        for utt in corpus.utterances:
            a = extract_alv(utt, enc, q, provider)
            b = extract_alv(utt, enc, q, provider)
            assert a == b
            assert len(a) == len(utt.phonemes)
            assert all(0 <= i < 4 for i in a)

    def test_restores_training_mode(self):
        torch.manual_seed(10)
        enc = ReferenceEncoder(input_dim=1, width=16)
        q = VectorQuantizer(codebook_size=4, width=16)
        corpus = generate_synthetic_corpus(
            SyntheticCorpusConfig(lexicon_size=8, sentence_count=1, seed=2)
        )
        enc.train()
        extract_alv(corpus.utterances[0], enc, q, F0Provider())
        assert enc.training
