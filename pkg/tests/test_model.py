import numpy as np
import pytest

import copulalm.autodiff as ad
from copulalm import rngs
from copulalm.data import BOS, EOS
from copulalm.errors import ConfigError, InputError
from copulalm.lowrank import W_FLOOR
from copulalm.model import (ModelDims, apply_batch_norm, decode_nll, dropout,
                            encode, greedy_decode, infer_posterior, init_params,
                            reparam_z, tensor_shapes)

DIMS = ModelDims(vocab=12, embed=6, hidden=8, latent=4)


def _params(seed=0, dims=DIMS):
    return init_params(dims, np.random.default_rng(seed))


def _batch(rng, n=3, width=5, vocab=12):
    ids = rng.integers(4, vocab, size=(n, width)).astype(np.int64)
    ids[:, 0] = BOS
    lengths = rng.integers(2, width + 1, size=n).astype(np.int64)
    for i in range(n):
        ids[i, lengths[i] - 1] = EOS
        ids[i, lengths[i]:] = 0
    return ids, lengths


class TestEncode:
    def test_zero_length_input_returns_zero_state(self):
        params = _params()
        h = encode(params, np.zeros((2, 0), dtype=np.int64), np.zeros(2, dtype=np.int64),
                   train=False)
        np.testing.assert_array_equal(h.v, np.zeros((2, 8)))

    def test_eval_mode_deterministic(self):
        params = _params()
        ids, lengths = _batch(np.random.default_rng(1))
        h1 = encode(params, ids, lengths, train=False)
        h2 = encode(params, ids, lengths, train=False)
        np.testing.assert_array_equal(h1.v, h2.v)

    def test_output_width_is_hidden_dim(self):
        params = _params()
        for width in (1, 4, 9):
            ids, lengths = _batch(np.random.default_rng(2), width=width)
            assert encode(params, ids, lengths, train=False).v.shape == (3, 8)

    def test_padding_does_not_change_state(self):
        params = _params()
        ids, lengths = _batch(np.random.default_rng(3))
        wider = np.concatenate([ids, np.zeros((3, 4), dtype=np.int64)], axis=1)
        h1 = encode(params, ids, lengths, train=False)
        h2 = encode(params, wider, lengths, train=False)
        np.testing.assert_allclose(h1.v, h2.v, atol=1e-15)

    def test_out_of_vocab_rejected(self):
        params = _params()
        ids = np.array([[BOS, 99, EOS]], dtype=np.int64)
        with pytest.raises(InputError):
            encode(params, ids, np.array([3]), train=False)


class TestInferPosterior:
    def test_zero_heads_give_floor_covariance(self):
        params = _params()
        for name in ("mu_w", "mu_b", "logvar_w", "logvar_b", "covdiag_w", "covdiag_b",
                     "covdir_w", "covdir_b"):
            params[name].v[...] = 0.0
        h = ad.const(np.random.default_rng(4).standard_normal((3, 8)))
        post = infer_posterior(params, h, train=False)
        np.testing.assert_allclose(post.mu.v, 0.0, atol=1e-12)
        np.testing.assert_allclose(post.logvar.v, 0.0)
        np.testing.assert_allclose(post.w.v, W_FLOOR)
        np.testing.assert_allclose(post.a.v, 0.0)

    def test_range_constraints(self):
        params = _params(5)
        h = ad.const(np.random.default_rng(6).standard_normal((16, 8)) * 3.0)
        post = infer_posterior(params, h, train=True)
        assert np.all(np.abs(post.a.v) <= 1.0)
        assert np.all(post.w.v >= W_FLOOR)

    def test_scalar_w_broadcasts(self):
        dims = ModelDims(vocab=12, embed=6, hidden=8, latent=4, scalar_w=True)
        params = _params(7, dims)
        assert params["covdiag_w"].v.shape == (8, 1)
        h = ad.const(np.random.default_rng(8).standard_normal((3, 8)))
        post = infer_posterior(params, h, train=False)
        assert post.w.v.shape == (3, 4)
        for row in post.w.v:
            assert np.all(row == row[0])


class TestReparamZ:
    def test_zero_noise_returns_mean(self):
        mu = ad.const(np.array([[1.0, -2.0]]))
        logvar = ad.const(np.array([[0.3, -0.7]]))
        z = reparam_z(mu, logvar, np.zeros((1, 2)))
        np.testing.assert_allclose(z.v, mu.v)

    def test_arithmetic_example(self):
        z = reparam_z(ad.const(np.array([[1.0]])),
                      ad.const(np.array([[2.0 * np.log(2.0)]])),
                      np.array([[0.5]]))
        np.testing.assert_allclose(z.v, [[2.0]])

    def test_gradient_wrt_mean_is_one(self):
        mu = ad.param(np.zeros((2, 3)), "mu")
        logvar = ad.const(np.zeros((2, 3)))
        z = reparam_z(mu, logvar, np.random.default_rng(9).standard_normal((2, 3)))
        ad.backward(ad.vsum(z))
        np.testing.assert_allclose(mu.grad, np.ones((2, 3)))

    def test_distribution_of_draws(self):
        mu_val = np.array([0.7, -1.2])
        logvar_val = np.array([0.4, -0.6])
        rng = np.random.default_rng(10)
        draws = reparam_z(ad.const(mu_val), ad.const(logvar_val),
                          rng.standard_normal((100_000, 2))).v
        sigma2 = np.exp(logvar_val)
        se_mean = np.sqrt(sigma2 / 100_000)
        assert np.all(np.abs(draws.mean(axis=0) - mu_val) <= 3.0 * se_mean)
        se_var = sigma2 * np.sqrt(2.0 / 100_000)
        assert np.all(np.abs(draws.var(axis=0) - sigma2) <= 3.0 * se_var)


class TestDecodeNll:
    def test_uniform_logits_give_log_vocab(self):
        params = _params()
        params["out_w"].v[...] = 0.0
        params["out_b"].v[...] = 0.0
        z = ad.const(np.zeros((2, 4)))
        input_ids = np.array([[BOS], [BOS]], dtype=np.int64)
        target_ids = np.array([[5], [7]], dtype=np.int64)
        nll = decode_nll(params, z, input_ids, target_ids, train=False)
        np.testing.assert_allclose(nll.v, np.log(12.0), atol=1e-12)

    def test_eval_mode_deterministic(self):
        params = _params(11)
        ids, lengths = _batch(np.random.default_rng(12))
        z = ad.const(np.random.default_rng(13).standard_normal((3, 4)))
        a = decode_nll(params, z, ids[:, :-1], ids[:, 1:], train=False)
        b = decode_nll(params, z, ids[:, :-1], ids[:, 1:], train=False)
        np.testing.assert_array_equal(a.v, b.v)

    def test_nonnegative(self):
        params = _params(14)
        ids, lengths = _batch(np.random.default_rng(15))
        z = ad.const(np.random.default_rng(16).standard_normal((3, 4)))
        nll = decode_nll(params, z, ids[:, :-1], ids[:, 1:], train=False)
        assert np.all(nll.v >= 0.0)

    def test_pad_positions_do_not_contribute(self):
        params = _params(17)
        ids, lengths = _batch(np.random.default_rng(18), width=6)
        z = ad.const(np.random.default_rng(19).standard_normal((3, 4)))
        base = decode_nll(params, z, ids[:, :-1], ids[:, 1:], train=False)
        wider = np.concatenate([ids, np.zeros((3, 3), dtype=np.int64)], axis=1)
        padded = decode_nll(params, z, wider[:, :-1], wider[:, 1:], train=False)
        np.testing.assert_allclose(base.v, padded.v, atol=1e-15)


class TestGreedyDecode:
    def test_deterministic_in_z(self):
        params = _params(20)
        z = np.random.default_rng(21).standard_normal((4, 4))
        a = greedy_decode(params, z, max_len=10, bos=BOS, eos=EOS)
        b = greedy_decode(params, z, max_len=10, bos=BOS, eos=EOS)
        assert a == b

    def test_respects_max_len(self):
        params = _params(22)
        z = np.random.default_rng(23).standard_normal((5, 4))
        for seq in greedy_decode(params, z, max_len=7, bos=BOS, eos=EOS):
            assert len(seq) <= 7


class TestBatchNorm:
    def test_constant_batch_maps_to_beta(self):
        params = _params(24)
        x = ad.const(np.full((4, 4), 3.3))
        out = apply_batch_norm(x, params, train=True)
        np.testing.assert_allclose(out.v, 0.0, atol=1e-10)

    def test_train_mode_standardizes(self):
        params = _params(25)
        x = ad.const(np.random.default_rng(26).standard_normal((64, 4)) * 5.0 + 2.0)
        out = apply_batch_norm(x, params, train=True)
        np.testing.assert_allclose(out.v.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.v.var(axis=0), 1.0, atol=1e-3)

    def test_eval_mode_independent_of_batch_composition(self):
        params = _params(27)
        rng = np.random.default_rng(28)
        # accumulate running stats, then evaluate a row alone and inside a batch
        for _ in range(5):
            apply_batch_norm(ad.const(rng.standard_normal((8, 4))), params, train=True)
        rows = rng.standard_normal((6, 4))
        full = apply_batch_norm(ad.const(rows), params, train=False)
        single = apply_batch_norm(ad.const(rows[:1]), params, train=False)
        np.testing.assert_allclose(full.v[0], single.v[0], atol=1e-14)

    def test_batch_of_one_rejected_in_train_mode(self):
        params = _params(29)
        with pytest.raises(ConfigError):
            apply_batch_norm(ad.const(np.ones((1, 4))), params, train=True)


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = ad.const(np.ones((3, 4)))
        out = dropout(x, 0.0, train=True, rng=np.random.default_rng(30))
        assert out is x

    def test_eval_mode_is_identity(self):
        x = ad.const(np.ones((3, 4)))
        assert dropout(x, 0.5, train=False, rng=None) is x

    def test_preserves_expectation(self):
        x = ad.const(np.full((100_000, 1), 2.0))
        out = dropout(x, 0.5, train=True, rng=np.random.default_rng(31))
        assert abs(out.v.mean() - 2.0) <= 0.02 * 2.0

    def test_bad_rate_rejected(self):
        with pytest.raises(ConfigError):
            dropout(ad.const(np.ones(2)), 1.0, train=True, rng=np.random.default_rng(0))


class TestShapes:
    def test_shapes_depend_only_on_config(self):
        shapes = tensor_shapes(DIMS)
        assert shapes["embedding"] == (12, 6)
        assert shapes["dec_wx"] == (6 + 4, 4 * 8)
        assert shapes["out_w"] == (8, 12)

    def test_init_is_deterministic(self):
        a = _params(seed=42)
        b = _params(seed=42)
        for (name, va), (_, vb) in zip(a.items(), b.items()):
            np.testing.assert_array_equal(va.v, vb.v, err_msg=name)


class TestEndToEndGradients:
    def test_micro_model_objective_differentiates(self):
        # small spot check; the acceptance suite runs the exhaustive version
        from copulalm.data import build_vocab, encode_line
        from copulalm.training import TrainingConfig, batch_objective
        from copulalm.data import batches

        cfg = TrainingConfig(mode="copula", copula_weight=0.4, latent_dim=4, hidden_dim=8,
                             embed_dim=8, vocab_max=20, max_len=12, batch_size=2,
                             epochs=1, dropout=0.0, seed=3)
        lines = ["a b c d", "b d a", "c c b a"]
        vocab = build_vocab(lines, cfg.vocab_max)
        encoded = [encode_line(s, vocab, cfg.max_len) for s in lines]
        params = init_params(ModelDims(vocab.size, 8, 8, 4), np.random.default_rng(33))
        batch = next(iter(batches(encoded, 2)))
        gate = rngs.stream(cfg.seed, "grad_gate")
        eps_z = gate.standard_normal((2, 4))
        eps_q = gate.standard_normal((2, 4))

        def loss_fn():
            objective, _ = batch_objective(params, cfg, batch, anneal_w=1.0, train=False,
                                           eps_z=eps_z, eps_q=eps_q)
            return objective

        report = ad.finite_diff_check(loss_fn, dict(params.items()), step=1e-4, tol=1e-4,
                                      max_coords_per_tensor=4,
                                      rng=np.random.default_rng(34))
        assert report.passed, report.worst
