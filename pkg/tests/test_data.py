from collections import Counter

import numpy as np
import pytest

from slash.data import (SPECIALS, DataError, Example, TsvSchema, Vocab, build_input, collate, load_tsv,
                        write_tsv)
from slash.synthetic import (NEGATIVE, NEGATORS, POSITIVE, WORDS, label_of, polarity_margin, synthetic_cls,
                             synthetic_corpus)


class TestVocab:
    def test_specials_first_and_frequency_order(self):
        vocab = Vocab.build(["b a b", "c b a"])
        assert vocab.tokens == list(SPECIALS) + ["b", "a", "c"]
        assert vocab.encode("a zz") == [6, vocab.unk_id]
        assert vocab.decode([5, 6]) == "b a"

    def test_max_size(self):
        assert len(Vocab.build(["a b c d"], max_size=7)) == 7

    def test_validation(self):
        with pytest.raises(ValueError):
            Vocab(["a"])
        with pytest.raises(ValueError):
            Vocab(list(SPECIALS) + ["a", "a"])


class TestBuildInput:
    vocab = Vocab.build(["a b c d e f"])

    def test_single_layout(self):
        x = build_input(Example("a b c"), self.vocab, "mask", 16)
        assert self.vocab.decode(x.ids) == "[CLS] a b c [MASK]"
        assert x.mask_index == 4 and x.token_positions == [1, 2, 3]

    def test_pair_layout(self):
        x = build_input(Example("a b", text_b="c"), self.vocab, "cls", 16)
        assert self.vocab.decode(x.ids) == "[CLS] a b [MASK] c [SEP]"
        assert x.mask_index == 3

    def test_truncates_text_b_first(self):
        x = build_input(Example("a b c", text_b="d e f"), self.vocab, "mask", 8)
        assert self.vocab.decode(x.ids) == "[CLS] a b c [MASK] d e [SEP]"
        x = build_input(Example("a b c d e", text_b="f"), self.vocab, "mask", 6)
        assert self.vocab.decode(x.ids) == "[CLS] a b c [MASK] [SEP]"

    def test_reserve(self):
        assert len(build_input(Example("a b c d e f"), self.vocab, "mask", 6, reserve=1).ids) == 5

    def test_no_room(self):
        with pytest.raises(DataError):
            build_input(Example("a"), self.vocab, "mask", 2)

    def test_bad_pooling(self):
        with pytest.raises(ValueError):
            build_input(Example("a"), self.vocab, "mean", 8)


class TestCollate:
    vocab = Vocab.build(["a b c"])

    def test_padding(self):
        xs = [build_input(Example(t), self.vocab) for t in ("a b c", "a")]
        batch = collate(xs, labels=[1, 0])
        assert batch.tokens.shape == (2, 5)
        np.testing.assert_array_equal(batch.mask.sum(1), [5, 3])
        assert (batch.tokens[1, 3:] == Vocab.pad_id).all()
        np.testing.assert_array_equal(batch.mask_index, [4, 2])
        np.testing.assert_array_equal(batch.labels, [1, 0])

    def test_token_labels(self):
        xs = [build_input(Example(t), self.vocab) for t in ("a b", "c")]
        batch = collate(xs, token_labels=[[1, 2], [3]])
        np.testing.assert_array_equal(batch.label_mask[0], [False, True, True, False])
        assert batch.labels[0, 2] == 2 and batch.labels[1, 1] == 3


class TestTsv:
    def test_classify_round_trip(self, tmp_path):
        path = tmp_path / "d.tsv"
        examples = [Example("a b", 1), Example("c", 0)]
        write_tsv(path, examples, ["neg", "pos"])
        loaded, names = load_tsv(path, TsvSchema())
        assert names == ["neg", "pos"]
        assert [(e.text_a, e.label) for e in loaded] == [("a b", 1), ("c", 0)]

    def test_pair_regress(self, tmp_path):
        path = tmp_path / "d.tsv"
        path.write_text("a\tb\t0.5\r\nc\td\t2\n\n", encoding="utf-8")
        loaded, names = load_tsv(path, TsvSchema(pair=True, kind="regress"))
        assert names is None
        assert [(e.text_b, e.label) for e in loaded] == [("b", 0.5), ("d", 2.0)]

    def test_token_tags(self, tmp_path):
        path = tmp_path / "d.tsv"
        path.write_text("a b\tO B\nc\tO\n", encoding="utf-8")
        loaded, names = load_tsv(path, TsvSchema(kind="token_classify"))
        assert names == ["B", "O"] and loaded[0].label == [1, 0]

    def test_fixed_labels_reject_unknown(self, tmp_path):
        path = tmp_path / "d.tsv"
        path.write_text("a\tmaybe\n", encoding="utf-8")
        with pytest.raises(DataError, match="unknown label"):
            load_tsv(path, TsvSchema(labels=["no", "yes"]))

    @pytest.mark.parametrize("content,schema", [
        ("a\tb\tc\n", TsvSchema()),
        ("a\t\n", TsvSchema()),
        ("a\tx\n", TsvSchema(kind="regress")),
        ("a b\tO\n", TsvSchema(kind="token_classify")),
        ("\n\n", TsvSchema()),
    ])
    def test_malformed(self, tmp_path, content, schema):
        path = tmp_path / "d.tsv"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(DataError):
            load_tsv(path, schema)

    def test_invalid_utf8(self, tmp_path):
        path = tmp_path / "d.tsv"
        path.write_bytes(b"\xff\tpos\n")
        with pytest.raises(UnicodeDecodeError):
            load_tsv(path, TsvSchema())


class TestSynthetic:
    def test_balanced_at_ten_thousand(self):
        examples, desc = synthetic_cls(3, 10_000)
        share = np.mean([e.label for e in examples])
        assert abs(share - 0.5) <= 0.02
        assert desc.n == 10_000 and desc.bayes_accuracy == 1.0

    @pytest.mark.parametrize("difficulty", [0, 1])
    def test_labels_follow_the_rule(self, difficulty):
        for ex in synthetic_cls(4, 300, difficulty)[0]:
            assert label_of(ex.text_a.split(), difficulty) == ex.label

    def test_xor_rule(self):
        assert label_of(["pa00", "not", "n01"], 1) == 0
        assert label_of(["na00", "never", "not"], 1) == 0
        assert label_of(["na00", "never"], 1) == 1

    def test_deterministic(self):
        assert synthetic_cls(8, 50)[0] == synthetic_cls(8, 50)[0]
        assert synthetic_cls(8, 50)[0] != synthetic_cls(9, 50)[0]
        assert synthetic_corpus(1, 20) == synthetic_corpus(1, 20)

    def test_vocabulary_closed(self):
        used = Counter(t for s in synthetic_corpus(2, 500) for t in s.split())
        assert set(used) <= set(WORDS)
        assert POSITIVE & set(used) and NEGATIVE & set(used) and set(NEGATORS) & set(used)

    def test_every_sentence_has_a_majority(self):
        assert all(polarity_margin(s.split()) != 0 for s in synthetic_corpus(5, 500))

    def test_lower_agreement_mixes_polarity(self):
        def mixed(agreement):
            exs = synthetic_cls(6, 1000, mood_agreement=agreement)[0]
            return np.mean([bool(POSITIVE & set(e.text_a.split())) and bool(NEGATIVE & set(e.text_a.split()))
                            for e in exs])
        assert mixed(0.7) > mixed(0.9) > mixed(1.0) == 0.0

    @pytest.mark.parametrize("kwargs", [dict(n=0), dict(difficulty=2), dict(mood_agreement=0.4)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            synthetic_cls(0, **{"n": 10, **kwargs})
