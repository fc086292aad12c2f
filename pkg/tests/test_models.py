import json
import math
from dataclasses import replace

import numpy as np
import pytest

from civae import autodiff as ad
from civae import gauss, models, objective as ob, synthdata
from civae.flows import make_rng
from civae.models import TrainConfig, build_model

from conftest import conjugate_data, conjugate_logpdf, linear_net


def small_config(**kw):
    base = dict(d_X=5, d_U=1, d_Z=2, hidden=(8,), epochs=2, batch_size=20)
    base.update(kw)
    return TrainConfig(**base)


class TestBuild:
    def test_deterministic(self):
        a, b = build_model(TrainConfig(), seed=4), build_model(TrainConfig(), seed=4)
        for (ka, va), (kb, vb) in zip(a.params().items(), b.params().items()):
            assert ka == kb
            np.testing.assert_array_equal(va, vb)

    def test_sine_encoder_size(self):
        model = build_model(TrainConfig(hidden=(60, 60)))
        assert model.encoder_net.param_count() == 100 * 60 + 60 + 60 * 60 + 60 + 60 * 4 + 4 == 9964

    def test_log_std_heads_start_at_zero(self, rng):
        model = build_model(TrainConfig())
        q_enc, _, prior = model.posterior(rng.normal(size=(3, 100)), rng.normal(size=(3, 1)))
        np.testing.assert_array_equal(q_enc.log_std, 0.0)
        np.testing.assert_array_equal(prior.log_std, 0.0)

    def test_latent_mismatch_rejected(self):
        m = build_model(small_config())
        other = build_model(small_config(d_Z=3))
        with pytest.raises(ad.ShapeError):
            replace(m, decoder_net=other.decoder_net)

    @pytest.mark.parametrize("field,value", [("epochs", 0), ("batch_size", -1), ("learning_rate", 0.0),
                                             ("mode", "vae"), ("alpha_grid_train", 1)])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})


class TestPosterior:
    def test_flat_encoder_gives_prior(self, rng):
        m = build_model(small_config())
        m.encoder_net.layers[-1].b[2:] = 7.0  # std e^7
        q_enc, q_post, prior = m.posterior(rng.normal(size=(4, 5)), rng.normal(size=(4, 1)))
        np.testing.assert_allclose(q_post.mean, prior.mean, atol=1e-5 * (1 + np.abs(q_enc.mean).max()))
        np.testing.assert_allclose(q_post.log_std, prior.log_std, atol=1e-6)

    def test_flat_prior_gives_encoder(self, rng):
        m = build_model(small_config())
        m.prior_net.layers[-1].b[2:] = 7.0
        q_enc, q_post, _ = m.posterior(rng.normal(size=(4, 5)), rng.normal(size=(4, 1)))
        np.testing.assert_allclose(q_post.mean, q_enc.mean, atol=1e-5 * (1 + np.abs(q_enc.mean).max()))
        np.testing.assert_allclose(q_post.log_std, q_enc.log_std, atol=1e-6)

    def test_precisions_add(self, rng):
        m = build_model(small_config(), seed=9)
        for layer in m.encoder_net.layers + m.prior_net.layers:
            layer.W[:] = rng.normal(size=layer.W.shape)
        q_enc, q_post, prior = m.posterior(rng.normal(size=(6, 5)), rng.normal(size=(6, 1)))
        ref = gauss.fuse(q_enc, prior)
        np.testing.assert_array_equal(q_post.mean, ref.mean)
        np.testing.assert_array_equal(q_post.log_std, ref.log_std)
        np.testing.assert_allclose(np.exp(-2 * q_post.log_std),
                                   np.exp(-2 * q_enc.log_std) + np.exp(-2 * prior.log_std), rtol=1e-12)

    def test_non_finite_output_rejected(self):
        m = build_model(small_config())
        with pytest.raises(FloatingPointError):
            m.posterior(np.full((1, 5), np.nan), np.zeros((1, 1)))

    def test_dims_checked(self):
        with pytest.raises(ad.ShapeError):
            build_model(small_config()).posterior(np.zeros((2, 4)), np.zeros((2, 1)))


class TestRecon:
    def test_zero_residual(self, rng):
        m = build_model(small_config())
        z = rng.normal(size=(3, 2))
        val = m.recon_log_prob(m.decode(z), z)
        np.testing.assert_allclose(val, -2.5 * math.log(2 * math.pi), rtol=1e-14)

    def test_doubling_residual(self, rng):
        m = build_model(small_config())
        z = rng.normal(size=(1, 2))
        r = rng.normal(size=(1, 5))
        f = m.decode(z)
        drop = m.recon_log_prob(f + r, z) - m.recon_log_prob(f + 2 * r, z)
        assert float(drop[0]) == pytest.approx(1.5 * float(np.sum(r * r)), rel=1e-12)

    def test_matches_gaussian_density(self, rng):
        m = replace(build_model(small_config()), obs_log_std=0.3)
        z, x = rng.normal(size=(4, 2)), rng.normal(size=(4, 5))
        ref = gauss.log_pdf(gauss.DiagGaussian(m.decode(z), np.full((4, 5), 0.3)), x)
        np.testing.assert_allclose(m.recon_log_prob(x, z), ref, rtol=1e-14)

    def test_draw_axis(self, rng):
        m = build_model(small_config())
        assert m.recon_log_prob(rng.normal(size=(3, 5)), rng.normal(size=(7, 3, 2))).shape == (7, 3)


class TestGenerate:
    def test_zero_noise(self, rng):
        m = build_model(small_config())
        u = rng.normal(size=(4, 1))
        _, _, prior = m.posterior(np.zeros((4, 5)), u)
        np.testing.assert_array_equal(models.generate(m, u, np.zeros((4, 2))), m.decode(prior.mean))

    def test_reproducible(self):
        m = build_model(small_config())
        u = np.ones((3, 1))
        draw = lambda: models.generate(m, u, make_rng(1).standard_normal((3, 2)))
        np.testing.assert_array_equal(draw(), draw())

    def test_batch_mean_matches_pushforward(self):
        m = build_model(small_config(), seed=2)
        u = np.full((10_000, 1), 0.5)
        gen = models.generate(m, u, make_rng(3).standard_normal((10_000, 2)))
        _, _, prior = m.posterior(np.zeros((1, 5)), u[:1])
        # independent pushforward oracle: decode a fresh set of prior draws
        z = prior.mean + np.exp(prior.log_std) * make_rng(4).standard_normal((10_000, 2))
        ref = m.decode(z)
        se = np.sqrt(gen.var(0) / 1e4 + ref.var(0) / 1e4)
        assert np.all(np.abs(gen.mean(0) - ref.mean(0)) < 4 * se)

    def test_observation_noise_flag(self):
        m = build_model(small_config())
        u = np.zeros((2, 1))
        clean = models.generate(m, u, np.zeros((2, 2)))
        noisy = models.generate(m, u, np.zeros((2, 2)), observation_noise=np.ones((2, 5)))
        np.testing.assert_allclose(noisy - clean, 1.0)


class TestTraining:
    def test_conjugate_toy_reaches_marginal_likelihood(self):
        x, u, _ = conjugate_data(2000, seed=1)
        cfg = TrainConfig(d_X=1, d_U=1, d_Z=1, hidden=(), mode="ivae", epochs=100, batch_size=100,
                          learning_rate=5e-3, standardise=False)
        model, hist = models.train(build_model(cfg), x, u, cfg)
        assert len(hist.losses("train")) == 100
        noise = make_rng(9).standard_normal((256, len(x), 1))
        neg_elbo = -float(ob.elbo_endpoint(model, x, u, "post", noise=noise).mean())
        target = -float(conjugate_logpdf(x[:, 0], u[:, 0]).mean())
        assert abs(neg_elbo - target) < 0.05

    def test_shared_encoder_ci_matches_ivae(self, rng):
        x, u = rng.normal(size=(120, 5)), rng.normal(size=(120, 1))
        cfg = small_config(posterior="encoder", epochs=3)
        runs = {}
        for mode in ("ivae", "ci"):
            c = replace(cfg, mode=mode)
            _, hist = models.train(build_model(c), x[:100], u[:100], c, x[100:], u[100:])
            runs[mode] = hist.rows
        assert runs["ivae"] == runs["ci"]

    def test_ivae_loss_is_posterior_elbo(self, rng):
        m = build_model(small_config(mode="ivae"))
        x, u = rng.normal(size=(10, 5)), rng.normal(size=(10, 1))
        noise = rng.standard_normal((1, 10, 2))
        a = models.batch_loss(m, x, u, None, noise, None)
        b = -np.mean(ob.elbo_endpoint(m, x, u, "post", noise=noise))
        c = models.batch_loss(replace(m, mode="ci"), x, u, np.zeros(10), noise, None)
        assert float(a) == float(b) == float(c)

    def test_sine_loss_decreases_early(self):
        ds = synthdata.generate("sine", 5000, 0)
        tr, va = ds.subset("train"), ds.subset("val")
        cfg = TrainConfig(epochs=5, seed=0)
        _, hist = models.train(build_model(cfg), tr.X, tr.U, cfg, va.X, va.U)
        losses = hist.losses("train")
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_training_gradient_matches_finite_differences(self, rng):
        m = build_model(small_config(mode="ci"), seed=5)
        for layer in m.encoder_net.layers + m.prior_net.layers:
            layer.W[:] = rng.normal(size=layer.W.shape) * 0.5
            layer.b[:] = rng.normal(size=layer.b.shape) * 0.3
        x, u = rng.normal(size=(6, 5)), rng.normal(size=(6, 1))
        noise = rng.standard_normal((2, 6, 2))
        alpha = rng.uniform(size=6)
        params = m.params()
        _, grads = models.loss_and_grads(m, x, u, alpha, noise, params)
        names = list(params)
        for _ in range(100):
            k = names[rng.integers(len(names))]
            pos = tuple(rng.integers(s) for s in params[k].shape)
            h = 1e-5
            bumped = {n: v.copy() for n, v in params.items()}
            bumped[k][pos] += h
            up = float(models.batch_loss(m, x, u, alpha, noise, bumped))
            bumped[k][pos] -= 2 * h
            down = float(models.batch_loss(m, x, u, alpha, noise, bumped))
            fd = (up - down) / (2 * h)
            assert abs(grads[k][pos] - fd) <= 1e-4 * max(abs(fd), 1e-4), (k, pos)

    def test_deterministic(self, rng):
        x, u = rng.normal(size=(60, 5)), rng.normal(size=(60, 1))
        cfg = small_config(mode="ci")
        a, ha = models.train(build_model(cfg), x, u, cfg)
        b, hb = models.train(build_model(cfg), x, u, cfg)
        assert ha.rows == hb.rows
        assert a.param_hash() == b.param_hash()

    def test_modes_differ(self, rng):
        x, u = rng.normal(size=(60, 5)), rng.normal(size=(60, 1))
        hashes = set()
        for mode in models.MODES:
            cfg = small_config(mode=mode)
            hashes.add(models.train(build_model(cfg), x, u, cfg)[0].param_hash())
        assert len(hashes) == 3

    def test_non_finite_batches_abort(self, rng):
        x, u = rng.normal(size=(60, 5)), rng.normal(size=(60, 1))
        x[::2] = np.nan
        cfg = small_config()
        with pytest.raises(models.TrainingAborted, match="3 consecutive"):
            models.train(build_model(cfg), x, u, cfg)

    def test_isolated_bad_batch_skipped(self, rng, caplog):
        x, u = rng.normal(size=(60, 5)), rng.normal(size=(60, 1))
        x[7] = np.inf
        cfg = small_config(epochs=1)
        _, hist = models.train(build_model(cfg), x, u, cfg)
        assert hist.skipped_batches == 1
        assert "skipped" in caplog.text

    def test_batch_size_checked(self, rng):
        cfg = small_config(batch_size=500)
        with pytest.raises(ValueError):
            models.train(build_model(cfg), rng.normal(size=(50, 5)), rng.normal(size=(50, 1)), cfg)

    def test_learnable_noise_moves(self, rng):
        x, u = 3 * rng.normal(size=(60, 5)), rng.normal(size=(60, 1))
        cfg = small_config(obs_noise_fixed=False, learning_rate=1e-2, epochs=5)
        m, _ = models.train(build_model(cfg), x, u, cfg)
        assert m.obs_log_std > 0.05


class TestCheckpoint:
    def test_json_roundtrip(self, rng):
        m = build_model(small_config(), seed=3).standardised(rng.normal(size=(10, 5)) * 4)
        again = models.CiModel.from_json(json.loads(json.dumps(m.to_json())))
        assert again.param_hash() == m.param_hash()
        x, u = rng.normal(size=(3, 5)), rng.normal(size=(3, 1))
        np.testing.assert_array_equal(again.posterior(x, u)[1].mean, m.posterior(x, u)[1].mean)

    def test_version_checked(self):
        doc = build_model(small_config()).to_json()
        doc["format_version"] = 99
        with pytest.raises(ValueError):
            models.CiModel.from_json(doc)

    def test_linear_toy_net_helper(self):
        net = linear_net([[2.0]], [1.0])
        assert float(net(np.array([[3.0]]))[0, 0]) == 7.0
