import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from neural_teachers import generator as G
from neural_teachers.core import tensor as T
from neural_teachers.core.gradcheck import check_gradients
from neural_teachers.core.layers import GruParams
from neural_teachers.core.params import named_tensors
from neural_teachers.corpus.vocab import EncodedRecipe

import oracles

V = 11


def small_params(seed=0, d=4, he=3, hd=5, bag_mode="mean", scale=0.7):
    cfg = G.GeneratorConfig(embed_dim=d, enc_hidden=he, dec_hidden=hd, bag_mode=bag_mode)
    p = G.GeneratorParams.init(V, cfg, np.random.default_rng(seed))
    g = np.random.default_rng(seed + 100)
    for t in named_tensors(p).values():
        t.data = g.normal(0, scale, t.shape)
    return p


def recipe(title=(4, 5), ingredients=((6,), (7, 8)), body=(4, 9, 10, 5)):
    return EncodedRecipe(list(title), [list(x) for x in ingredients], list(body))


class TestEncoder:
    def test_matches_oracle(self):
        p = small_params()
        for item in (recipe(), recipe(ingredients=()), recipe(ingredients=((6, 6, 7),))):
            ctx = G.encode_inputs(item, p)
            np.testing.assert_allclose(ctx.h_e.data[0], oracles.generator_context(item, p), rtol=0, atol=1e-12)

    def test_sum_bag_mode(self):
        p = small_params(bag_mode="sum")
        item = recipe()
        np.testing.assert_allclose(G.encode_inputs(item, p).h_e.data[0], oracles.generator_context(item, p),
                                   rtol=0, atol=1e-12)

    def test_context_size(self):
        p = small_params()
        ctx = G.encode_inputs([recipe(), recipe(ingredients=())], p)
        assert ctx.h_e.shape == (2, ctx.g.shape[1] + ctx.e.shape[1]) == (2, p.context_size)

    def test_title_order_free(self):
        p = small_params()
        a = G.encode_inputs(recipe(title=(4, 5, 9)), p).g.data
        b = G.encode_inputs(recipe(title=(9, 4, 5)), p).g.data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    def test_ingredient_order_matters(self):
        p = small_params()
        a = G.encode_inputs(recipe(ingredients=((6,), (7, 8), (9,))), p).e.data
        b = G.encode_inputs(recipe(ingredients=((9,), (6,), (7, 8))), p).e.data
        assert np.abs(a - b).max() > 1e-6

    def test_zero_recurrent_weights(self):
        p = small_params()
        p.enc_fwd, p.enc_bwd = GruParams.zeros(4, 3), GruParams.zeros(4, 3)
        e = G.encode_inputs(recipe(ingredients=((6,),)), p).e.data
        np.testing.assert_array_equal(e, np.zeros((1, 6)))

    def test_batch_rows_independent(self):
        p = small_params(1)
        items = [recipe(), recipe(title=(9,), ingredients=()), recipe(ingredients=((4,), (5,), (6,), (7,)))]
        batched = G.encode_inputs(items, p).h_e.data
        for row, item in zip(batched, items):
            np.testing.assert_allclose(row, G.encode_inputs(item, p).h_e.data[0], rtol=0, atol=1e-13)


class TestDecodeStep:
    def test_zero_gate_weights_halve_context(self):
        p = small_params()
        p.gate_W1.data[:] = 0
        p.gate_W2.data[:] = 0
        p.gate_b1.data[:] = 0
        ctx = G.encode_inputs(recipe(), p)
        x = p.text_emb.data[[4]]
        h = G.initial_state(ctx, p)
        _, got = G.decode_step(T.Tensor(x), h, ctx, p)
        want = oracles.gru(np.concatenate([x[0], 0.5 * ctx.h_e.data[0]]), h.data[0], oracles.gru_arrays(p.dec))
        np.testing.assert_allclose(got.data[0], want, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_oracle(self, seed):
        p = small_params(seed)
        item = recipe()
        ctx = G.encode_inputs(item, p)
        rng = np.random.default_rng(seed)
        x, h = rng.normal(size=4), rng.normal(size=5)
        logits, h_new = G.decode_step(T.Tensor(x[None]), T.Tensor(h[None]), ctx, p)
        want_logits, want_h = oracles.decoder_step(x, h, ctx.h_e.data[0], p)
        np.testing.assert_allclose(logits.data[0], want_logits, rtol=0, atol=1e-12)
        np.testing.assert_allclose(h_new.data[0], want_h, rtol=0, atol=1e-12)

    def test_gate_input_gradient(self):
        p = small_params(2)
        p.gate_W2.requires_grad = True
        item = recipe()

        def f():
            ctx = G.encode_inputs(item, p)
            logits, _ = G.decode_step(T.embedding(p.text_emb, [4]), G.initial_state(ctx, p), ctx, p)
            return T.mean(logits)

        assert check_gradients(f, [p.gate_W2]) < 1e-5


class TestMleLoss:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_oracle(self, seed):
        p = small_params(seed)
        item = recipe()
        assert G.mle_loss(item, p).item() == pytest.approx(oracles.nll(item, p), abs=1e-12)

    def test_batch_is_mean_of_records(self):
        p = small_params(3)
        items = [recipe(), recipe(body=(5,)), recipe(ingredients=(), body=(9, 9, 9, 9, 9, 9))]
        want = np.mean([oracles.nll(it, p) for it in items])
        assert G.batch_mle_loss(items, p).item() == pytest.approx(want, abs=1e-12)
        np.testing.assert_allclose(G.per_record_nll(items, p), [oracles.nll(it, p) for it in items],
                                   rtol=0, atol=1e-12)

    def test_uniform_output(self):
        p = small_params()
        p.out_W.data[:] = 0
        p.out_b.data[:] = 0
        item = recipe(body=(4, 5, 6))
        assert G.mle_loss(item, p).item() == pytest.approx(4 * np.log(V), abs=1e-12)

    def test_forced_path_matches_recorded_log_probs(self):
        p = small_params(5, scale=1.5)
        p.out_b.data[G.EOS_ID] += 2.0
        item = recipe()
        (res,) = G.sample_decode(G.encode_inputs(item, p), p, 1.0, 30, np.random.default_rng(0))
        assert res.reason == "eos" and len(res.tokens) > 2
        forced = EncodedRecipe(item.title, item.ingredients, res.body)
        assert G.mle_loss(forced, p).item() == pytest.approx(-sum(res.log_probs), abs=1e-11)

    def test_empty_body_rejected(self):
        with pytest.raises(ValueError):
            G.mle_loss(recipe(body=()), small_params())

    def test_gradients_all_parameters(self):
        p = small_params(4, scale=0.5)
        leaves = list(named_tensors(p).values())
        for t in leaves:
            t.requires_grad = True
        items = [recipe(), recipe(ingredients=(), body=(9, 5))]
        assert check_gradients(lambda: G.batch_mle_loss(items, p), leaves) < 1e-5

    def test_scheduled_sampling_needs_rng(self):
        with pytest.raises(ValueError):
            G.batch_mle_loss([recipe()], small_params(), schedule_rate=0.5)

    def test_scheduled_sampling_changes_loss(self):
        p = small_params(6)
        items = [recipe(body=tuple(range(4, 11)) * 2)] * 4
        a = G.batch_mle_loss(items, p, 0.5, np.random.default_rng(0)).item()
        assert a != pytest.approx(G.batch_mle_loss(items, p).item(), abs=1e-9)


class TestScheduleRate:
    @pytest.mark.parametrize("epoch,rate", [(0, 0.0), (4, 0.0), (5, 0.05), (25, 0.25), (100, 0.5)])
    def test_examples(self, epoch, rate):
        assert G.schedule_rate(epoch) == pytest.approx(rate, abs=1e-15)

    @given(st.integers(0, 500))
    def test_monotone_capped(self, epoch):
        assert G.schedule_rate(epoch) <= G.schedule_rate(epoch + 1) <= 0.5

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            G.schedule_rate(-1)


class TestDecoding:
    def test_huge_beta_equals_greedy(self):
        p = small_params(8, scale=1.0)
        items = [recipe(), recipe(title=(9,)), recipe(ingredients=())]
        ctx = G.encode_inputs(items, p)
        greedy = G.greedy_decode(ctx, p, 40)
        sampled = G.sample_decode(ctx, p, 1e6, 40, np.random.default_rng(0))
        assert [r.tokens for r in sampled] == [r.tokens for r in greedy]

    def test_seeded_sampling_reproducible(self):
        p = small_params(8)
        ctx = G.encode_inputs([recipe()] * 3, p)
        a = G.sample_decode(ctx, p, 2.0, 25, np.random.default_rng(4))
        b = G.sample_decode(ctx, p, 2.0, 25, np.random.default_rng(4))
        assert [r.tokens for r in a] == [r.tokens for r in b]
        assert all(len(r.tokens) <= 25 and np.all(np.isfinite(r.log_probs)) for r in a)

    def test_greedy_deterministic(self):
        p = small_params(8)
        ctx = G.encode_inputs(recipe(), p)
        assert G.greedy_decode(ctx, p, 30)[0].tokens == G.greedy_decode(ctx, p, 30)[0].tokens

    def test_eos_spike_stops_immediately(self):
        p = small_params(9)
        p.out_W.data[:] = 0
        p.out_b.data[:] = 0
        p.out_b.data[G.EOS_ID] = 50.0
        (r,) = G.greedy_decode(G.encode_inputs(recipe(), p), p, 30)
        assert r.tokens == [G.EOS_ID] and r.reason == "eos" and r.body == []

    def test_max_len(self):
        p = small_params(9)
        p.out_W.data[:] = 0
        p.out_b.data[:] = 0
        p.out_b.data[7] = 50.0
        (r,) = G.greedy_decode(G.encode_inputs(recipe(), p), p, 12)
        assert r.tokens == [7] * 12 and r.reason == "max_len"

    def test_tie_breaks_to_lowest_id(self):
        p = small_params(9)
        p.out_W.data[:] = 0
        p.out_b.data[:] = 0
        p.out_b.data[[6, 8]] = 10.0
        (r,) = G.greedy_decode(G.encode_inputs(recipe(), p), p, 3)
        assert r.tokens == [6, 6, 6]

    def test_uniform_sampling_frequencies(self):
        n, k = 100_000, 10
        probs = np.exp(T._log_softmax(np.zeros((n, k)), -1))
        draws = G.sample_categorical(probs, np.random.default_rng(0))
        counts = np.bincount(draws, minlength=k)
        sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
        assert np.all(np.abs(counts - n / k) < 3 * sigma)

    @settings(max_examples=30)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(-100, 100), st.floats(0.1, 5))
    @example([-1.1754943508222875e-38, 0.0], 1.0, 1.0)
    def test_softmax_shift_invariance(self, logits, c, beta):
        z = np.array([logits])
        a = np.exp(T._log_softmax(beta * z, -1))
        b = np.exp(T._log_softmax(beta * (z + c), -1))
        assert abs(a.sum() - 1) < 1e-12
        # z + c rounds each logit by up to ulp(|z| + |c|), so the tolerance scales with the shift
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12 + 8 * beta * np.spacing(120.0))
        top = np.sort(z[0])[-2:]
        if top[1] - top[0] > 4 * np.spacing(120.0):
            assert np.argmax(z) == np.argmax(z + c)

    def test_scoring_pass_matches_recorded_log_probs(self):
        p = small_params(10)
        ctx = G.encode_inputs([recipe(), recipe(title=(9,))], p)
        res = G.sample_decode(ctx, p, 2.0, 20, np.random.default_rng(1))
        steps, mask = G.token_log_probs(ctx, p, [r.tokens for r in res], beta=2.0)
        for i, r in enumerate(res):
            got = [steps[t].data[i] for t in range(len(r.tokens))]
            np.testing.assert_allclose(got, r.log_probs, rtol=0, atol=1e-12)
            assert mask[i].sum() == len(r.tokens)

    def test_bad_beta(self):
        p = small_params()
        with pytest.raises(ValueError):
            G.sample_decode(G.encode_inputs(recipe(), p), p, 0.0, 5, np.random.default_rng(0))


def _toy_corpus(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a, b = (int(x) for x in rng.integers(4, V, size=2))
        out.append(EncodedRecipe([a], [[b]], [a, b, 5, a, 5]))
    return out


class TestPretrain:
    def test_dev_loss_improves_and_deterministic(self):
        cfg = G.GeneratorConfig(embed_dim=8, enc_hidden=8, dec_hidden=8, epochs=4, lr=1e-2, batch_size=8)
        train, dev = _toy_corpus(40, 0), _toy_corpus(10, 1)
        a = G.pretrain(train, dev, V, cfg, seed=3)
        b = G.pretrain(train, dev, V, cfg, seed=3)
        assert min(a.dev_losses[1:]) < a.dev_losses[0]
        assert a.dev_losses == b.dev_losses
        assert G.mean_nll(dev, a.params) == pytest.approx(min(a.dev_losses), abs=1e-12)

    def test_init_not_mutated(self):
        cfg = G.GeneratorConfig(embed_dim=4, enc_hidden=4, dec_hidden=4, epochs=1, lr=1e-2, batch_size=8)
        init = G.GeneratorParams.init(V, cfg, np.random.default_rng(0))
        before = {k: v.data.copy() for k, v in named_tensors(init).items()}
        G.pretrain(_toy_corpus(8, 0), _toy_corpus(4, 1), V, cfg, seed=0, init=init)
        for k, v in named_tensors(init).items():
            np.testing.assert_array_equal(v.data, before[k])

    @pytest.mark.slow
    def test_overfits_tiny_corpus(self):
        cfg = G.GeneratorConfig(embed_dim=16, enc_hidden=16, dec_hidden=16, epochs=200, lr=1e-2,
                                batch_size=10, dropout=0.0, scheduled_sampling=False)
        train = _toy_corpus(10, 2)
        res = G.pretrain(train, train, V, cfg, seed=0)
        assert res.dev_losses[-1] < 0.1 * res.dev_losses[0]
