import math

import numpy as np
import pytest

import oracles
from slash import tensor as T
from slash.data import Vocab
from slash.synthetic import WORDS, synthetic_corpus
from slash.tensor import Tensor
from slash.trainer import PretrainConfig, mlm_batches, pretrain
from slash.transformer import (Hooks, MLMBatch, PromptSet, ShiftPosition, ShiftSet, TransformerConfig,
                               TransformerWeights, apply_shift, encode, init_weights, mlm_pretrain_step,
                               parameter_shapes, pool)

SMALL = TransformerConfig(n_layers=2, hidden=16, ffn=32, heads=2, vocab=50, max_len=12, dropout=0.0)


def random_weights(config=SMALL, seed=0):
    return init_weights(config, seed, std=0.3, bias_std=0.1)


def padded_batch(rng, config=SMALL, b=3, s=7):
    tokens = rng.integers(5, config.vocab, size=(b, s))
    lengths = rng.integers(2, s + 1, size=b)
    lengths[0] = s
    mask = np.arange(s)[None, :] < lengths[:, None]
    return tokens, mask


def shift_vectors(rng, config, position, scale=0.5):
    dim = config.site_dim(position)
    return [Tensor(rng.normal(size=dim) * scale) for _ in range(config.n_layers)]


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(hidden=10, heads=4), dict(ffn=8, hidden=16, heads=2),
                                        dict(n_layers=0), dict(dropout=1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TransformerConfig(**kwargs)

    def test_site_dims(self):
        assert [SMALL.site_dim(p) for p in ("attention", "intermediate", "output")] == [16, 32, 16]

    def test_dict_round_trip(self):
        assert TransformerConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_weight_shapes_checked(self):
        w = random_weights()
        tensors = dict(w.items())
        tensors["block0.ffn.out.bias"] = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            TransformerWeights(tensors, SMALL)


class TestEncodeAgainstOracle:
    def test_plain(self, f64, rng):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        out = encode(w, tokens, mask).data
        ref = oracles.encode(oracles.arrays(w), SMALL, tokens, mask)
        assert np.abs(out - ref)[mask].max() < 1e-12

    @pytest.mark.parametrize("position", ["attention", "intermediate", "output"])
    def test_shifted(self, f64, rng, position):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        vecs = shift_vectors(rng, SMALL, position)
        out = encode(w, tokens, mask, Hooks(shifts=ShiftSet(vecs, position))).data
        ref = oracles.encode(oracles.arrays(w), SMALL, tokens, mask, [v.data for v in vecs], position)
        assert np.abs(out - ref)[mask].max() < 1e-12

    @pytest.mark.parametrize("embedding_only", [False, True])
    def test_prompted(self, f64, rng, embedding_only):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        n = 1 if embedding_only else SMALL.n_layers + 1
        prompts = [Tensor(rng.normal(size=SMALL.hidden)) for _ in range(n)]
        out = encode(w, tokens, mask, Hooks(prompts=PromptSet(prompts, embedding_only))).data
        ref = oracles.encode(oracles.arrays(w), SMALL, tokens, mask, prompts=[p.data for p in prompts],
                             embedding_only=embedding_only)
        full_mask = np.concatenate([mask, np.ones((mask.shape[0], 1), bool)], axis=1)
        assert out.shape == (3, 8, SMALL.hidden)
        assert np.abs(out - ref)[full_mask].max() < 1e-12


def test_single_block_hand_case(f64):
    # One block, h=4, every matrix zero: attention and the FFN contribute only
    # biases, so the output is LN(LN(LN(e)) + shift) with e the token embedding.
    config = TransformerConfig(n_layers=1, hidden=4, ffn=4, heads=1, vocab=6, max_len=3, dropout=0.0, ln_eps=1e-5)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        value = np.ones(shape) if name.endswith("ln.gain") else np.zeros(shape)
        tensors[name] = Tensor(value, name=name)
    tensors["embed.token"].data[5] = [1.0, 2.0, 3.0, 4.0]
    w = TransformerWeights(tensors, config)
    shift = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    out = encode(w, np.array([5]), hooks=Hooks(shifts=ShiftSet([shift], "output"))).data[0]

    def ln(v, eps=1e-5):
        mu = sum(v) / 4
        var = sum((x - mu) ** 2 for x in v) / 4
        return [(x - mu) / math.sqrt(var + eps) for x in v]

    # The FFN sees zero weights, so o = gelu(0) @ 0 + 0 = 0 before the shift.
    expected = ln([a + b for a, b in zip(ln(ln([1.0, 2.0, 3.0, 4.0])), [1.0, 0.0, 0.0, 0.0])])
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-14)


class TestHooks:
    def test_zero_shift_is_identity(self, f64, rng):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        plain = encode(w, tokens, mask).data
        for position in ShiftPosition:
            zeros = [Tensor(np.zeros(SMALL.site_dim(position))) for _ in range(SMALL.n_layers)]
            np.testing.assert_array_equal(encode(w, tokens, mask, Hooks(shifts=ShiftSet(zeros, position))).data, plain)

    def test_no_hooks_is_deterministic(self, rng):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        np.testing.assert_array_equal(encode(w, tokens, mask).data, encode(w, tokens, mask, Hooks()).data)

    def test_shift_broadcasts_uniformly(self, rng):
        act = Tensor(np.tile(rng.normal(size=16), (1, 3, 1)))
        out = apply_shift(act, Tensor(rng.normal(size=16)), "output", SMALL).data
        np.testing.assert_array_equal(out[0, 0], out[0, 1])
        np.testing.assert_array_equal(out[0, 1], out[0, 2])

    def test_shift_dimension_checked(self):
        with pytest.raises(ValueError):
            apply_shift(Tensor(np.zeros((1, 2, 16))), Tensor(np.zeros(32)), "output", SMALL)
        with pytest.raises(ValueError):
            apply_shift(Tensor(np.zeros((1, 2, 16))), Tensor(np.zeros(16)), "intermediate", SMALL)

    def test_wrong_number_of_shift_vectors(self):
        w = random_weights()
        with pytest.raises(ValueError):
            encode(w, np.array([5, 6]), hooks=Hooks(shifts=ShiftSet([Tensor(np.zeros(16))], "output")))

    def test_prompt_adds_exactly_one_position(self, rng):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        prompts = PromptSet([Tensor(np.zeros(16)) for _ in range(SMALL.n_layers + 1)])
        assert encode(w, tokens, mask, Hooks(prompts=prompts)).shape[1] == tokens.shape[1] + 1

    def test_prompt_overflow_rejected(self):
        w = random_weights()
        prompts = PromptSet([Tensor(np.zeros(16))], embedding_only=True)
        encode(w, np.full(SMALL.max_len - 1, 5), hooks=Hooks(prompts=prompts))
        with pytest.raises(ValueError):
            encode(w, np.full(SMALL.max_len, 5), hooks=Hooks(prompts=prompts))


class TestEncodeContract:
    def test_overlong_sequence(self):
        with pytest.raises(ValueError):
            encode(random_weights(), np.full(SMALL.max_len + 1, 5))

    def test_token_range(self):
        with pytest.raises(ValueError):
            encode(random_weights(), np.array([SMALL.vocab]))

    def test_padded_positions_get_zero_attention(self, f64, rng):
        # Changing tokens under the padding mask must not move any real position.
        w = random_weights()
        tokens, mask = padded_batch(rng)
        other = np.where(mask, tokens, rng.integers(5, SMALL.vocab, size=tokens.shape))
        a, b = encode(w, tokens, mask).data, encode(w, other, mask).data
        np.testing.assert_array_equal(a[mask], b[mask])

    def test_single_sequence_matches_batch_row(self, rng):
        w = random_weights()
        tokens, mask = padded_batch(rng)
        np.testing.assert_allclose(encode(w, tokens[0]).data, encode(w, tokens, mask).data[0], atol=1e-6)

    def test_dropout_is_seeded(self, rng):
        w = random_weights(SMALL)
        tokens, mask = padded_batch(rng)
        a = encode(w, tokens, mask, dropout=0.3, rng=np.random.default_rng(4)).data
        b = encode(w, tokens, mask, dropout=0.3, rng=np.random.default_rng(4)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, encode(w, tokens, mask).data)


class TestPool:
    def test_cls_and_mask(self, rng):
        hidden = Tensor(rng.normal(size=(2, 5, 4)))
        np.testing.assert_array_equal(pool(hidden, "cls").data, hidden.data[:, 0])
        np.testing.assert_array_equal(pool(hidden, "mask", [3, 1]).data, hidden.data[[0, 1], [3, 1]])

    def test_single_sequence(self, rng):
        hidden = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_array_equal(pool(hidden, "mask", 2).data, hidden.data[2])

    @pytest.mark.parametrize("index", [None, [5, 0], [-1, 0]])
    def test_invalid_mask_index(self, rng, index):
        with pytest.raises(ValueError):
            pool(Tensor(rng.normal(size=(2, 5, 4))), "mask", index)


class TestMLM:
    def batch(self, rng, config=SMALL):
        tokens, mask = padded_batch(rng, config, b=8, s=10)
        return MLMBatch(tokens, mask, mask.copy(), mask_token_id=3, n_special=5)

    def test_initial_loss_near_uniform(self, rng):
        config = TransformerConfig(vocab=1000)
        w = init_weights(config, 0)
        tokens = rng.integers(5, 1000, size=(16, 20))
        batch = MLMBatch(tokens, np.ones_like(tokens, bool), np.ones_like(tokens, bool), 3, 5)
        loss = mlm_pretrain_step(w, batch, 0.15, rng, dropout=0.0).item()
        assert abs(loss - math.log(1000)) < 0.1 * math.log(1000)

    def test_zero_mask_prob_rejected(self, rng):
        with pytest.raises(ValueError):
            mlm_pretrain_step(random_weights(), self.batch(rng), 0.0, rng)

    def test_empty_batch_rejected(self, rng):
        empty = MLMBatch(np.zeros((0, 4), np.int64), np.zeros((0, 4), bool), np.zeros((0, 4), bool), 3)
        with pytest.raises(ValueError):
            mlm_pretrain_step(random_weights(), empty, 0.15, rng)

    def test_gradients_reach_every_weight(self, rng):
        w = random_weights()
        for name in w:
            w[name].requires_grad = True
        T.backward(mlm_pretrain_step(w, self.batch(rng), 0.5, rng, dropout=0.0))
        assert all(w[name].grad is not None for name in w)

    def test_batches_never_mask_specials(self):
        vocab = Vocab.build(["a b c"])
        batch = next(mlm_batches([vocab.encode("a b"), vocab.encode("c")], vocab, 2, np.random.default_rng(0)))
        assert not batch.maskable[batch.tokens < 5].any()
        assert batch.vocab_size == len(vocab)

    def test_loss_decreases_over_200_steps(self):
        # Per-step losses are noisy; means over successive 40-step windows must strictly fall.
        vocab = Vocab.build([" ".join(WORDS)])
        config = PretrainConfig(model=TransformerConfig(vocab=len(vocab) + 10), corpus_size=800, steps=200, seed=3)
        _, losses = pretrain(config, synthetic_corpus(5, 800), vocab)
        windows = np.asarray(losses).reshape(5, 40).mean(axis=1)
        assert np.all(np.diff(windows) < 0), windows

    def test_pretrain_freezes_result(self):
        vocab = Vocab.build([" ".join(WORDS)])
        config = PretrainConfig(model=SMALL.__class__(vocab=len(vocab), n_layers=1, hidden=16, ffn=16, heads=2),
                                corpus_size=50, steps=2, batch_size=4)
        w, _ = pretrain(config, synthetic_corpus(0, 50), vocab)
        assert not any(w[n].requires_grad for n in w)

    def test_pretrain_rejects_small_model_vocab(self):
        vocab = Vocab.build([" ".join(WORDS)])
        with pytest.raises(ValueError):
            pretrain(PretrainConfig(model=TransformerConfig(vocab=10), steps=1), ["n01 n02"], vocab)
