import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from alvtts.corpus import SyntheticCorpusConfig, generate_synthetic_corpus
from alvtts.errors import (
    AlignmentError,
    ConfigError,
    LengthError,
    ManifestError,
    OOVError,
    VocabularyError,
)
from alvtts.mdplbert import (
    BertConfig,
    MaskingPolicy,
    PhonemeBert,
    SymbolVocab,
    TextItem,
    apply_masking,
    build_grapheme_vocab,
    build_input_vocab,
    dialect_token,
    encode_item,
    load_text_corpus,
    mlm_loss,
    phoneme_ids,
    save_text_corpus,
    text_items_from_utterances,
    IGNORE_INDEX,
)


def toy_vocabs():
    iv = build_input_vocab("aiueokstn", ["DLA", "DLB"])
    gv = build_grapheme_vocab(["ka", "suto", "ne"])
    return iv, gv


class TestVocab:
    def test_round_trip(self):
        iv, _ = toy_vocabs()
        seq = ("k", "a", "s", "u")
        assert iv.decode(iv.encode(seq)) == seq

    def test_duplicate_rejected(self):
        with pytest.raises(VocabularyError):
            SymbolVocab(("a", "b", "a"))

    def test_oov_names_symbol(self):
        iv, _ = toy_vocabs()
        with pytest.raises(OOVError, match="xx"):
            iv.id("xx")

    def test_layout_is_specials_dialects_phonemes(self):
        iv = build_input_vocab("ba", ["DLB", "DLA"])
        assert iv.symbols == (
            "<pad>", "<mask>", "<dl:DLA>", "<dl:DLB>", "a", "b",
        )
        assert iv.pad_id == 0 and iv.mask_id == 1

    def test_phoneme_ids_exclude_specials(self):
        iv = build_input_vocab("ba", ["DLA"])
        assert phoneme_ids(iv) == [iv.id("a"), iv.id("b")]

    def test_decode_out_of_range(self):
        iv, _ = toy_vocabs()
        with pytest.raises(VocabularyError):
            iv.decode([len(iv)])


class TestEncodeItem:
    def test_layout(self):
        iv, gv = toy_vocabs()
        item = TextItem("DLB", ("ka", "ne"), tuple("kane"))
        ids, g_ids = encode_item(item, iv, gv)
        assert len(ids) == len(g_ids) == 5
        assert ids[0] == iv.id(dialect_token("DLB"))
        assert iv.decode(ids[1:]) == tuple("kane")
        assert g_ids[0] == gv.pad_id
        assert g_ids[1:3] == [gv.id("ka")] * 2
        assert g_ids[3:5] == [gv.id("ne")] * 2

    def test_spelling_mismatch_rejected(self):
        iv, gv = toy_vocabs()
        item = TextItem("DLA", ("ka",), tuple("kane"))
        with pytest.raises(AlignmentError):
            encode_item(item, iv, gv)

    def test_unknown_dialect_is_vocabulary_error(self):
        iv, gv = toy_vocabs()
        item = TextItem("DLX", ("ka",), tuple("ka"))
        with pytest.raises(VocabularyError):
            encode_item(item, iv, gv)

    def test_empty_phonemes_degenerate(self):
        iv, gv = toy_vocabs()
        ids, g_ids = encode_item(TextItem("DLA", (), ()), iv, gv)
        assert ids == [iv.id(dialect_token("DLA"))]
        assert g_ids == [gv.pad_id]

    def test_from_utterances(self):
        corpus = generate_synthetic_corpus(
            SyntheticCorpusConfig(lexicon_size=8, sentence_count=5, seed=3)
        )
        items = text_items_from_utterances(corpus.utterances)
        assert len(items) == 5
        for item, utt in zip(items, corpus.utterances):
            assert item.phonemes == utt.phonemes
            assert item.dialect == utt.dialect


class TestMasking:
    def test_count_rule(self):
        iv, _ = toy_vocabs()
        rng = np.random.default_rng(0)
        for p_len in (1, 5, 7, 13, 20):
            ids = [iv.id(dialect_token("DLA"))] + [iv.id("a")] * p_len
            _, positions, _ = apply_masking(ids, iv, rng)
            assert len(positions) == math.ceil(0.15 * p_len)

    def test_dialect_position_never_selected(self):
        iv, _ = toy_vocabs()
        rng = np.random.default_rng(1)
        ids = [iv.id(dialect_token("DLA"))] + [iv.id("k")] * 6
        for _ in range(200):
            corrupted, positions, labels = apply_masking(ids, iv, rng)
            assert 0 not in positions
            assert corrupted[0] == ids[0]

    def test_unselected_positions_untouched(self):
        iv, _ = toy_vocabs()
        rng = np.random.default_rng(2)
        ids = [iv.id(dialect_token("DLB"))] + iv.encode(tuple("kustone"))
        corrupted, positions, labels = apply_masking(ids, iv, rng)
        for pos in range(len(ids)):
            if pos not in positions:
                assert corrupted[pos] == ids[pos]

    def test_deterministic_given_rng_state(self):
        iv, _ = toy_vocabs()
        ids = [iv.id(dialect_token("DLA"))] + iv.encode(tuple("kustone"))
        a = apply_masking(ids, iv, np.random.default_rng(42))
        b = apply_masking(ids, iv, np.random.default_rng(42))
        assert a == b

    def test_too_short_raises(self):
        iv, _ = toy_vocabs()
        with pytest.raises(LengthError):
            apply_masking([iv.id(dialect_token("DLA"))], iv, np.random.default_rng(0))

    def test_labels_are_originals_at_positions(self):
        iv, _ = toy_vocabs()
        ids = [iv.id(dialect_token("DLA"))] + iv.encode(tuple("kustonekasu"))
        _, positions, labels = apply_masking(ids, iv, np.random.default_rng(11))
        assert labels == [ids[p] for p in positions]

    def test_bad_policy_rejected(self):
        iv, _ = toy_vocabs()
        ids = [iv.id(dialect_token("DLA"))] + iv.encode(tuple("kasu"))
        with pytest.raises(ConfigError):
            apply_masking(
                ids, iv, np.random.default_rng(0),
                MaskingPolicy(replace_mask_prob=0.5),
            )
        with pytest.raises(ConfigError):
            apply_masking(
                ids, iv, np.random.default_rng(0), MaskingPolicy(mask_ratio=0.0)
            )

    def test_corruption_distribution(self):
        # Monte Carlo over many maskings: the mask/random/keep split
        # must land within 0.02 of 80/10/10. Random replacements never
        # equal the original, so the three outcomes are identifiable.
        iv, _ = toy_vocabs()
        rng = np.random.default_rng(7)
        ids = [iv.id(dialect_token("DLA"))] + iv.encode(tuple("kustonekasu"))
        n_mask = n_random = n_keep = 0
        for _ in range(4000):
            corrupted, positions, labels = apply_masking(ids, iv, rng)
            for pos in positions:
                if corrupted[pos] == iv.mask_id:
                    n_mask += 1
                elif corrupted[pos] == ids[pos]:
                    n_keep += 1
                else:
                    n_random += 1
        total = n_mask + n_random + n_keep
        assert n_mask / total == pytest.approx(0.8, abs=0.02)
        assert n_random / total == pytest.approx(0.1, abs=0.02)
        assert n_keep / total == pytest.approx(0.1, abs=0.02)

    def test_random_replacement_is_phoneme(self):
        iv, _ = toy_vocabs()
        rng = np.random.default_rng(3)
        ids = [iv.id(dialect_token("DLA"))] + iv.encode(tuple("kustone"))
        allowed = set(phoneme_ids(iv)) | {iv.mask_id}
        for _ in range(300):
            corrupted, positions, labels = apply_masking(ids, iv, rng)
            for pos in positions:
                assert corrupted[pos] in allowed | {ids[pos]}

    @given(st.integers(2, 40), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_count_property(self, p_len, seed):
        iv, _ = toy_vocabs()
        ids = [iv.id(dialect_token("DLB"))] + [iv.id("u")] * p_len
        _, positions, _ = apply_masking(ids, iv, np.random.default_rng(seed))
        assert len(positions) == math.ceil(0.15 * p_len)
        assert len(set(positions)) == len(positions)
        assert all(1 <= p <= p_len for p in positions)


class TestPhonemeBert:
    def make_model(self):
        iv, gv = toy_vocabs()
        cfg = BertConfig(
            vocab_size=len(iv),
            grapheme_vocab_size=len(gv),
            width=16,
            layers=1,
            heads=2,
            ff_dim=32,
            max_len=16,
        )
        torch.manual_seed(0)
        return PhonemeBert(cfg), iv, gv

    def test_output_shapes(self):
        model, iv, gv = self.make_model()
        ids = torch.randint(2, len(iv), (3, 7))
        h, ph_logits, gr_logits = model(ids)
        assert h.shape == (3, 7, 16)
        assert ph_logits.shape == (3, 7, len(iv))
        assert gr_logits.shape == (3, 7, len(gv))

    def test_max_len_guard(self):
        model, iv, _ = self.make_model()
        with pytest.raises(LengthError):
            model(torch.zeros(1, 17, dtype=torch.long))

    def test_padding_mask_respected(self):
        model, iv, _ = self.make_model()
        model.eval()
        ids_full = torch.randint(2, len(iv), (1, 5))
        padded = torch.cat([ids_full, torch.zeros(1, 3, dtype=torch.long)], dim=1)
        mask = torch.tensor([[True] * 5 + [False] * 3])
        with torch.no_grad():
            h_single = model.encode(ids_full)
            h_padded = model.encode(padded, mask)
        np.testing.assert_allclose(
            h_padded[0, :5].numpy(), h_single[0].numpy(), atol=1e-5
        )
        assert h_padded[0, 5:].abs().max().item() == 0.0


class TestMlmLoss:
    def test_uniform_logits_give_log_vocab(self):
        v, g = 4, 6
        ph_logits = torch.zeros(1, 3, v)
        gr_logits = torch.zeros(1, 3, g)
        ph_t = torch.tensor([[0, IGNORE_INDEX, 2]])
        gr_t = torch.tensor([[IGNORE_INDEX, 1, 5]])
        losses = mlm_loss(ph_logits, gr_logits, ph_t, gr_t)
        assert losses["phoneme_ce"].item() == pytest.approx(math.log(v), abs=1e-6)
        assert losses["grapheme_ce"].item() == pytest.approx(math.log(g), abs=1e-6)
        assert losses["total"].item() == pytest.approx(
            math.log(v) + math.log(g), abs=1e-5
        )

    def test_no_labelled_positions_is_zero(self):
        ph_logits = torch.randn(1, 3, 4)
        gr_logits = torch.randn(1, 3, 6)
        all_ignored = torch.full((1, 3), IGNORE_INDEX)
        gr_t = torch.tensor([[0, 1, 2]])
        losses = mlm_loss(ph_logits, gr_logits, all_ignored, gr_t)
        assert losses["phoneme_ce"].item() == 0.0
        assert torch.isfinite(losses["total"])

    def test_perfect_prediction_near_zero(self):
        ph_logits = torch.full((1, 2, 3), -100.0)
        ph_logits[0, 0, 1] = 100.0
        ph_logits[0, 1, 2] = 100.0
        gr_logits = torch.full((1, 2, 4), -100.0)
        gr_logits[0, :, 0] = 100.0
        ph_t = torch.tensor([[1, 2]])
        gr_t = torch.tensor([[0, 0]])
        losses = mlm_loss(ph_logits, gr_logits, ph_t, gr_t)
        assert losses["total"].item() == pytest.approx(0.0, abs=1e-5)


class TestTextCorpusIO:
    def test_round_trip(self, tmp_path):
        corpus = generate_synthetic_corpus(
            SyntheticCorpusConfig(lexicon_size=8, sentence_count=12, seed=5)
        )
        items = text_items_from_utterances(corpus.utterances)
        p = tmp_path / "text.tsv"
        save_text_corpus(items, p)
        assert load_text_corpus(p) == items

    def test_bad_line_reports_number(self, tmp_path):
        p = tmp_path / "text.tsv"
        p.write_text("DLA\tka\tk a\nDLA\tonly-two-fields\n", encoding="utf-8")
        with pytest.raises(ManifestError, match="line 2"):
            load_text_corpus(p)

    def test_mismatched_spelling_reports_number(self, tmp_path):
        p = tmp_path / "text.tsv"
        p.write_text("DLA\tka\tk a n e\n", encoding="utf-8")
        with pytest.raises(ManifestError, match="line 1"):
            load_text_corpus(p)
