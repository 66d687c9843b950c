import math

import numpy as np
import pytest
from sklearn.base import clone

from immunolab import tensor as T
from immunolab.data import render_shapes
from immunolab.diffusion import (
    Adam,
    BundleConfig,
    Img2ImgEditor,
    NoiseSchedule,
    TextEmbedder,
    ToyLdmBundle,
    edit_img2img,
    pretrain_toy,
    sample_from,
)
from immunolab.metrics import psnr
from immunolab.tensor import GradientTape, Tensor

# exact rational cumulative product of (1 - beta_k), linear betas 1e-4 .. 2e-2 over 50 steps
ALPHA_BAR_ORACLE = {1: 0.9999, 10: 0.9808841293000299, 25: 0.8827129294402375, 40: 0.7243248224706007, 50: 0.6029515973297149}


class TestSchedule:
    def test_alpha_bars_match_oracle(self):
        s = NoiseSchedule()
        for k, v in ALPHA_BAR_ORACLE.items():
            assert abs(s.alpha_bars[k] - v) < 1e-12
        a, b = s.coefficients(50)
        assert abs(a[0] - math.sqrt(ALPHA_BAR_ORACLE[50])) < 1e-7
        assert abs(b[0] - math.sqrt(1 - ALPHA_BAR_ORACLE[50])) < 1e-7

    def test_monotone_and_bounds(self):
        ab = NoiseSchedule().alpha_bars
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert 0 < ab[-1] < 1

    def test_add_noise_identities(self, rng):
        s = NoiseSchedule()
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        eps = rng.standard_normal(x.shape).astype(np.float32)
        assert np.array_equal(s.add_noise(x, 0, eps), x)
        np.testing.assert_allclose(s.add_noise(np.zeros_like(x), 17, eps), math.sqrt(1 - s.alpha_bars[17]) * eps, rtol=1e-6)

    def test_per_item_timesteps_and_tiling(self, rng):
        s = NoiseSchedule()
        x = rng.standard_normal((1, 4, 2, 2))
        eps = rng.standard_normal((3, 4, 2, 2))
        out = s.add_noise(x, np.array([0, 5, 50]), eps)
        assert out.shape == (3, 4, 2, 2)
        np.testing.assert_allclose(out[0], x[0])
        np.testing.assert_allclose(out[2], s.add_noise(x[0], 50, eps[2]))

    def test_tensor_path_is_differentiable(self, rng):
        s = NoiseSchedule()
        with T.precision("float64"):
            x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
            with GradientTape() as tape:
                loss = T.sum(s.add_noise(x, np.array([10, 30]), rng.standard_normal((2, 3))))
            (g,) = tape.gradient(loss, [x])
        np.testing.assert_allclose(g[:, 0], np.sqrt(s.alpha_bars[[10, 30]]))

    @pytest.mark.parametrize("k", [-1, 51, 2.5])
    def test_bad_timestep(self, k):
        with pytest.raises(ValueError):
            NoiseSchedule().add_noise(np.zeros(3), k, np.zeros(3))


class TestEmbedder:
    def test_deterministic_padded_and_truncated(self):
        e = TextEmbedder()
        a = e.embed("a photo of a red circle")
        assert a.shape == (8, 32)
        assert np.array_equal(a, TextEmbedder().embed("a photo of a red circle"))
        assert np.array_equal(a[6], e.pad) and np.array_equal(a[7], e.pad)
        assert np.array_equal(e.embed("zebra")[0], e.oov)
        long = e.embed(" ".join(["red"] * 20))
        assert long.shape == (8, 32)


class TestDenoiser:
    def test_shapes_and_trace(self, tiny_bundle, rng):
        z = rng.standard_normal((2,) + tiny_bundle.latent_shape)
        out, tr = tiny_bundle.forward_with_trace(z, 10, tiny_bundle.embed("a photo of a red circle"))
        assert out.shape == z.shape
        assert len(tr) == tiny_bundle.config.n_blocks
        assert tr.layers[0].attn.shape == (2, 64, 8)
        np.testing.assert_allclose(tr.layers[0].attn.data.sum(-1), 1.0, rtol=1e-5)

    def test_wrong_latent_shape(self, tiny_bundle):
        with pytest.raises(T.DimensionError):
            tiny_bundle.forward_with_trace(np.zeros((1, 4, 7, 7)), 1, tiny_bundle.embed("x"))

    def test_zero_output_projection_removes_prompt(self, rng):
        b = ToyLdmBundle(BundleConfig(seed=5))
        for l in range(b.config.n_blocks):
            b.denoiser.params[f"b{l}.wca"].data[:] = 0
        z = rng.standard_normal((2,) + b.latent_shape)
        e1 = b.predict_eps(z, 20, b.embed("a photo of a red circle"))
        e2 = b.predict_eps(z, 20, b.embed("a photo of a blue ring"))
        assert np.abs(e1 - e2).max() == 0.0

    def test_single_token_attention_is_all_ones(self, tiny_bundle, rng):
        z = rng.standard_normal((1,) + tiny_bundle.latent_shape)
        _, tr = tiny_bundle.forward_with_trace(z, 5, tiny_bundle.embed("red")[:1])
        for lt in tr.layers:
            assert np.all(lt.attn.data == 1.0)

    def test_value_transform_keeps_maps_bit_identical(self, tiny_bundle, rng):
        z = rng.standard_normal((2,) + tiny_bundle.latent_shape)
        y = tiny_bundle.embed("a photo of a green square")
        _, tr = tiny_bundle.forward_with_trace(z, 15, y)
        base = tiny_bundle.retrace(tr, y)
        w = {l: tiny_bundle.denoiser.p(f"b{l}.wv").data @ (np.eye(32) + 0.3 * rng.standard_normal((32, 32))) for l in range(4)}
        moved = tiny_bundle.retrace(tr, y, w)
        for a, b in zip(base.layers, moved.layers):
            assert np.array_equal(a.attn.data, b.attn.data)
        assert max(np.abs(a.ca.data - b.ca.data).max() for a, b in zip(base.layers, moved.layers)) > 1e-3

    def test_retrace_reproduces_forward(self, tiny_bundle, rng):
        z = rng.standard_normal((1,) + tiny_bundle.latent_shape)
        y = tiny_bundle.embed("a photo of a red ring")
        _, tr = tiny_bundle.forward_with_trace(z, 3, y)
        for a, b in zip(tr.layers, tiny_bundle.retrace(tr, y).layers):
            assert np.array_equal(a.ca.data, b.ca.data)

    def test_partial_forward(self, tiny_bundle, rng):
        z = rng.standard_normal((1,) + tiny_bundle.latent_shape)
        out, tr = tiny_bundle.forward_with_trace(z, 3, tiny_bundle.embed("x"), n_layers=2)
        assert out is None and len(tr) == 2


class TestBundle:
    def test_save_load_round_trip(self, tiny_bundle, tmp_path, rng):
        tiny_bundle.save(tmp_path / "b.ckpt")
        back = ToyLdmBundle.load(tmp_path / "b.ckpt")
        assert back.weights_hash() == tiny_bundle.weights_hash()
        z = rng.standard_normal((1,) + tiny_bundle.latent_shape)
        y = tiny_bundle.embed("a photo of a red circle")
        assert np.array_equal(back.predict_eps(z, 7, y), tiny_bundle.predict_eps(z, 7, y))

    def test_astype_float64(self, tiny_bundle):
        b64 = tiny_bundle.astype(np.float64)
        assert b64.dtype == np.float64
        assert tiny_bundle.dtype == np.float32

    def test_vae_shapes(self, tiny_bundle, rng):
        x = rng.uniform(0, 1, (2, 3, 32, 32))
        z = tiny_bundle.encode(x)
        assert z.shape == (2, 4, 8, 8)
        y = tiny_bundle.decode(z).data
        assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1


class TestPretraining:
    def test_zero_lr_step_changes_nothing(self, tiny_bundle, rng):
        b = tiny_bundle.astype(np.float32)
        before = {k: v.data.copy() for k, v in b.named_parameters().items()}
        b.vae.requires_grad_(True)
        opt = Adam(b.vae.parameters(), lr=0.0)
        x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
        with GradientTape() as tape:
            loss = T.mse(b.vae.decode(b.vae.encode(x)), x)
        tape.backward(loss)
        opt.step()
        for k, v in b.named_parameters().items():
            assert np.array_equal(v.data, before[k])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            pretrain_toy(np.zeros((0, 3, 32, 32)), [], steps=1, vae_steps=1)

    def test_short_run_reduces_heldout_loss(self, small_bundle):
        before, after = small_bundle.train_log["heldout_loss"]
        assert after < before

    @pytest.mark.slow
    def test_full_pretraining_quality(self, toy_bundle):
        before, after = toy_bundle.train_log["heldout_loss"]
        assert after < before
        images, _ = render_shapes(200, 32, 0)
        rec = toy_bundle.decode(toy_bundle.encode(images)).data
        assert np.mean([psnr(a, b) for a, b in zip(images, rec)]) >= 20.0


class TestEditing:
    def test_start_step_uses_ceiling(self, small_bundle, rng, monkeypatch):
        seen = {}
        import immunolab.diffusion as D

        real = D.sample_from

        def spy(bundle, z0, k_start, *a, **kw):
            seen["k"] = k_start
            return real(bundle, z0, k_start, *a, **kw)

        monkeypatch.setattr(D, "sample_from", spy)
        x = rng.uniform(0, 1, (3, 32, 32))
        for strength, k in [(0.8, 40), (0.01, 1), (0.31, 16), (1.0, 50)]:
            edit_img2img(small_bundle, x, "a photo of a red ring", strength=strength, steps=2)
            assert seen["k"] == k

    @pytest.mark.parametrize("strength", [0.0, -0.1, 1.5])
    def test_bad_strength(self, small_bundle, strength):
        with pytest.raises(ValueError):
            edit_img2img(small_bundle, np.zeros((3, 32, 32)), "x", strength=strength)

    def test_zero_start_is_autoencoder_round_trip(self, small_bundle, rng):
        x = rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32)
        z0 = small_bundle.encode(x).data
        z = sample_from(small_bundle, z0, 0, small_bundle.embed("x"), 7.5, 50, 0)
        assert np.array_equal(small_bundle.decode(z).data, small_bundle.decode(z0).data)

    def test_zero_guidance_is_unconditional(self, small_bundle, rng):
        z0 = small_bundle.encode(rng.uniform(0, 1, (2, 3, 32, 32))).data
        y = small_bundle.embed("a photo of a blue square")
        g0 = sample_from(small_bundle, z0, 30, y, 0.0, 50, 4)
        unc = sample_from(small_bundle, z0, 30, small_bundle.embed(""), None, 50, 4)
        np.testing.assert_allclose(g0, unc, atol=1e-5)

    def test_default_edit_is_deterministic(self, small_bundle):
        images, recs = render_shapes(2, 32, 8)
        a = edit_img2img(small_bundle, images, [r.edit_prompts[0] for r in recs], seed=3)
        b = edit_img2img(small_bundle, images, [r.edit_prompts[0] for r in recs], seed=3)
        assert np.abs(a - b).max() == 0.0
        assert a.shape == images.shape

    def test_editor_estimator(self, small_bundle):
        ed = Img2ImgEditor(small_bundle, prompt="a photo of a red ring", steps=3)
        assert clone(ed).get_params()["steps"] == 3
        images, _ = render_shapes(2, 32, 8)
        assert ed.fit(images).transform(images).shape == images.shape
