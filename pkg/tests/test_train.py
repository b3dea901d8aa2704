import numpy as np
import numpy.testing as npt
import pytest

from lcmkit import data, losses, nets, train
from lcmkit import tensor as T
from lcmkit.train import NumericsError, TrainConfig


@pytest.fixture(scope="module")
def toy_images():
    return data.synthetic_images(16, 16, seed=42)


def _all_phi_within_box(state, box=0.01):
    for lat in state.latents:
        for p in lat.phi:
            if np.abs(p.value.data).max() > box:
                return False
    return True


class TestTrainStep:
    def test_lr_zero_is_noop(self, toy_images):
        cfg = TrainConfig(steps=1, batch_size=4, preset="toy16", seed=0,
                          lr_latent=0.0, lr_generator=0.0)
        state = train.init_state(16, cfg, "lcm")
        before = [p.value.data.copy() for p in state.generator.theta]
        loss = train.train_step(state, [0, 1, 2, 3], toy_images, cfg)
        for b, p in zip(before, state.generator.theta):
            npt.assert_array_equal(b, p.value.data)
        ev = train.eval_loss(state, toy_images[:4], cfg, mode="train")
        assert loss == pytest.approx(ev, abs=1e-6)

    def test_box_after_step(self, toy_images):
        cfg = TrainConfig(steps=1, batch_size=8, preset="toy16", seed=1)
        state = train.init_state(16, cfg, "lcm")
        train.train_step(state, list(range(8)), toy_images, cfg)
        assert _all_phi_within_box(state)

    def test_one_step_matches_hand_oracle(self):
        """Scalar-channel chain: every update reproduces w - lr * dL/dw."""
        lat_arch = nets.ArchSpec(
            (nets.LayerSpec("conv", 1, 1, kernel=1, act=False),), (1, 2, 2), (1, 2, 2))
        gen_arch = nets.ArchSpec(
            (nets.LayerSpec("conv", 1, 1, kernel=1, act=False),), (1, 2, 2), (1, 2, 2))
        cfg = TrainConfig(steps=1, batch_size=1, preset="toy16", seed=0,
                          lr_latent=0.5, lr_generator=0.5, pyramid_levels=1)
        codec = nets.init_latent_codec(lat_arch, seed=3)
        gen = nets.init_generator(gen_arch, seed=4)
        noise = nets.init_noise((1, 2, 2), seed=5)
        state = train.TrainState(variant="lcm", generator=gen, latents=[codec],
                                 noise=noise, latent_arch=lat_arch, config=cfg)
        target = np.full((1, 1, 2, 2), 0.75, dtype=np.float32)

        s = noise.data.astype(np.float64)
        wf, bf = (codec.phi[0].value.item(), codec.phi[1].value.item())
        wg, bg = (gen.params[0]["w"].value.item(), gen.params[0]["b"].value.item())
        z = wf * s + bf
        u = wg * z + bg
        xh = 1 / (1 + np.exp(-u))
        d = xh - target
        # J=1 pyramid: loss = mean|d| + mean d^2
        dl_dx = (np.sign(d) + 2 * d) / d.size
        dl_du = dl_dx * xh * (1 - xh)
        grads = {
            "wf": float((dl_du * wg * s).sum()),
            "bf": float((dl_du * wg).sum()),
            "wg": float((dl_du * z).sum()),
            "bg": float(dl_du.sum()),
        }
        exp_wf = np.clip(wf - 0.5 * grads["wf"], -0.01, 0.01)
        exp_bf = np.clip(bf - 0.5 * grads["bf"], -0.01, 0.01)

        train.train_step(state, [0], target, cfg)
        assert codec.phi[0].value.item() == pytest.approx(exp_wf, rel=1e-4)
        assert codec.phi[1].value.item() == pytest.approx(exp_bf, rel=1e-4)
        assert gen.params[0]["w"].value.item() == pytest.approx(wg - 0.5 * grads["wg"],
                                                                rel=1e-4)
        assert gen.params[0]["b"].value.item() == pytest.approx(bg - 0.5 * grads["bg"],
                                                                rel=1e-4)

    def test_bad_indices(self, toy_images):
        cfg = TrainConfig(steps=1, preset="toy16")
        state = train.init_state(4, cfg, "lcm")
        with pytest.raises(IndexError):
            train.train_step(state, [0, 9], toy_images, cfg)

    def test_nan_aborts_with_diagnostic(self, toy_images):
        cfg = TrainConfig(steps=1, batch_size=2, preset="toy16", seed=0)
        state = train.init_state(4, cfg, "lcm")
        state.generator.params[0]["w"].value.data[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericsError, match="checkpoint"):
            train.train_step(state, [0, 1], toy_images, cfg)


class TestTrain:
    def test_one_epoch_lr_zero_keeps_loss(self, toy_images):
        cfg = TrainConfig(epochs=2, batch_size=16, preset="toy16", seed=0,
                          lr_latent=0.0, lr_generator=0.0)
        state = train.train(toy_images, cfg, "lcm")
        losses_ = [l for _, _, l in state.loss_history]
        assert losses_[0] == pytest.approx(losses_[-1], rel=1e-6)

    def test_toy_convergence_smoke(self, toy_images):
        cfg = TrainConfig(steps=300, batch_size=8, preset="toy16", seed=0)
        state = train.train(toy_images, cfg, "lcm")
        assert state.step_losses[-1] < 0.5 * state.step_losses[0]
        assert _all_phi_within_box(state)

    def test_deterministic_histories(self, toy_images):
        cfg = TrainConfig(steps=30, batch_size=8, preset="toy16", seed=7)
        a = train.train(toy_images, cfg, "lcm")
        b = train.train(toy_images, cfg, "lcm")
        assert a.step_losses == b.step_losses

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            train.train(np.zeros((0, 3, 16, 16), dtype=np.float32),
                        TrainConfig(epochs=1, preset="toy16"), "lcm")

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            train.train(np.zeros((4, 3, 8, 8), dtype=np.float32),
                        TrainConfig(epochs=1, preset="toy16"), "lcm")

    def test_unknown_variant(self, toy_images):
        with pytest.raises(ValueError, match="variant"):
            train.train(toy_images, TrainConfig(epochs=1, preset="toy16"), "vae")

    def test_loss_csv_and_checkpoint_written(self, toy_images, tmp_path):
        cfg = TrainConfig(steps=4, batch_size=8, preset="toy16", seed=0)
        state = train.train(toy_images, cfg, "lcm", out_dir=tmp_path)
        assert (tmp_path / "model.lcmk").exists()
        lines = (tmp_path / "loss_history.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,loss"
        assert len(lines) >= 2

    def test_windowed_trend_non_increasing(self, toy_images):
        cfg = TrainConfig(steps=420, batch_size=8, preset="toy16", seed=3)
        state = train.train(toy_images, cfg, "lcm")
        ls = np.array(state.step_losses)
        window = 200
        means = np.convolve(ls, np.ones(window) / window, mode="valid")
        assert np.all(means[1:] <= means[:-1] * 1.05)


class TestGloVariants:
    def test_glo_map_trains(self, toy_images):
        cfg = TrainConfig(steps=60, batch_size=8, preset="toy16", seed=0)
        state = train.train(toy_images, cfg, "glo_map")
        assert state.step_losses[-1] < state.step_losses[0]
        assert state.latents[0].kind == "map"

    def test_glo_vector_trains(self, toy_images):
        cfg = TrainConfig(steps=60, batch_size=8, preset="toy16", seed=0, vector_dim=32)
        state = train.train(toy_images, cfg, "glo_vector")
        assert state.step_losses[-1] < state.step_losses[0]
        assert state.latents[0].value.value.shape == (1, 32)

    def test_glo_latents_unbounded(self, toy_images):
        cfg = TrainConfig(steps=5, batch_size=8, preset="toy16", seed=0)
        state = train.train(toy_images, cfg, "glo_map")
        assert all(lat.value.bound is None for lat in state.latents)


class TestEvalLoss:
    def test_matches_train_epoch_with_frozen_params(self, toy_images):
        cfg = TrainConfig(epochs=1, batch_size=16, preset="toy16", seed=0,
                          lr_latent=0.0, lr_generator=0.0)
        state = train.train(toy_images, cfg, "lcm")
        ev = train.eval_loss(state, toy_images, cfg, mode="train")
        assert ev == pytest.approx(state.loss_history[-1][2], abs=1e-6)

    def test_empty_split_is_error(self, toy_images):
        cfg = TrainConfig(epochs=1, preset="toy16")
        state = train.init_state(16, cfg, "lcm")
        with pytest.raises(ValueError, match="empty"):
            train.eval_loss(state, toy_images[:0], cfg)

    def test_eval_mode_does_not_update_params(self, toy_images):
        cfg = TrainConfig(steps=20, batch_size=8, preset="toy16", seed=0)
        state = train.train(toy_images, cfg, "lcm")
        before = [p.value.data.copy() for p in state.generator.theta]
        train.eval_loss(state, toy_images, cfg, mode="eval")
        for b, p in zip(before, state.generator.theta):
            npt.assert_array_equal(b, p.value.data)
