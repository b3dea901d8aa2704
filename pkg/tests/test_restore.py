import numpy as np
import numpy.testing as npt
import pytest

from lcmkit import data, degrade, metrics, restore, train
from lcmkit.degrade import DegradationSpec
from lcmkit.restore import DivergenceError, RestoreConfig
from lcmkit.tensor import TensorMap


@pytest.fixture(scope="module")
def trained():
    """Small but genuinely converged toy16 model shared by the module's tests."""
    images = data.synthetic_images(16, 16, seed=42)
    cfg = train.TrainConfig(steps=700, batch_size=8, preset="toy16", seed=0)
    state = train.train(images, cfg, "lcm")
    return state, images


def _identity_spec(h, w):
    return DegradationSpec("inpaint", mask=np.ones((h, w), dtype=np.float32))


class TestRestoreConfig:
    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError, match="steps"):
            RestoreConfig(steps=0)

    def test_negative_penalty_rejected(self):
        with pytest.raises(ValueError):
            RestoreConfig(latent_penalty=-1.0)


class TestRestoreManifold:
    def test_identity_fit_on_training_image(self, trained):
        state, images = trained
        y = TensorMap(images[3:4])
        cfg = RestoreConfig(steps=400, seed=5)
        res = restore.restore_manifold(state.generator, state.latent_arch,
                                       state.noise, y, _identity_spec(16, 16), cfg)
        assert res.mode == "manifold"
        assert res.final_known_mse < 0.02
        assert res.energy_trace[-1] < res.energy_trace[0]

    def test_generator_bit_identical_after_restore(self, trained):
        state, images = trained
        before = [p.value.data.copy() for p in state.generator.theta]
        stats_before = [(st.mean.copy(), st.var.copy())
                        for st in state.generator.norm_stats if st is not None]
        y = TensorMap(images[0:1])
        cfg = RestoreConfig(steps=50, seed=1)
        restore.restore_manifold(state.generator, state.latent_arch, state.noise,
                                 y, _identity_spec(16, 16), cfg)
        for b, p in zip(before, state.generator.theta):
            npt.assert_array_equal(b, p.value.data)
            assert not p.frozen
        for (m, v), st in zip(stats_before,
                              [s for s in state.generator.norm_stats if s is not None]):
            npt.assert_array_equal(m, st.mean)
            npt.assert_array_equal(v, st.var)

    def test_box_respected_and_deterministic(self, trained):
        state, images = trained
        y = TensorMap(degrade.apply_degradation(
            images[1:2], DegradationSpec("inpaint", mask=degrade.center_mask(16, 16, 6, 6))))
        spec = DegradationSpec("inpaint", mask=degrade.center_mask(16, 16, 6, 6))
        cfg = RestoreConfig(steps=60, seed=9)
        a = restore.restore_manifold(state.generator, state.latent_arch, state.noise,
                                     y, spec, cfg)
        b = restore.restore_manifold(state.generator, state.latent_arch, state.noise,
                                     y, spec, cfg)
        npt.assert_array_equal(a.image.data, b.image.data)
        assert a.energy_trace == b.energy_trace

    def test_best_energy_bookkeeping(self, trained):
        state, images = trained
        spec = DegradationSpec("inpaint", mask=degrade.center_mask(16, 16, 4, 4))
        y = TensorMap(degrade.apply_degradation(images[2:3], spec))
        cfg = RestoreConfig(steps=80, seed=3)
        res = restore.restore_manifold(state.generator, state.latent_arch, state.noise,
                                       y, spec, cfg)
        recomputed = degrade.energy(res.image, y, spec).item()
        assert res.best_energy <= recomputed + 1e-6
        assert res.best_energy == pytest.approx(min(res.energy_trace))
        assert res.image.data.min() >= 0 and res.image.data.max() <= 1

    def test_hole_beats_mean_image_baseline(self, trained):
        state, images = trained
        spec = DegradationSpec("inpaint", mask=degrade.center_mask(16, 16, 6, 6))
        mean_img = images.mean(axis=0, keepdims=True)
        wins = 0
        for i in (0, 4, 9):
            y = TensorMap(degrade.apply_degradation(images[i:i + 1], spec))
            cfg = RestoreConfig(steps=400, seed=20 + i)
            res = restore.restore_manifold(state.generator, state.latent_arch,
                                           state.noise, y, spec, cfg)
            hole = metrics.mse_region(res.image.data, images[i:i + 1], spec.mask, "hole")
            base = metrics.mse_region(mean_img, images[i:i + 1], spec.mask, "hole")
            wins += hole < base
        assert wins >= 2


class TestRestoreZspace:
    def test_deterministic(self, trained):
        state, images = trained
        y = TensorMap(images[5:6])
        cfg = RestoreConfig(steps=40, seed=2)
        a = restore.restore_zspace(state.generator, state.latent_arch, state.noise,
                                   y, _identity_spec(16, 16), cfg)
        b = restore.restore_zspace(state.generator, state.latent_arch, state.noise,
                                   y, _identity_spec(16, 16), cfg)
        npt.assert_array_equal(a.image.data, b.image.data)
        assert a.mode == "zspace"

    def test_penalty_increases_total_energy(self, trained):
        state, images = trained
        spec = DegradationSpec("inpaint", mask=degrade.center_mask(16, 16, 4, 4))
        y = TensorMap(degrade.apply_degradation(images[6:7], spec))
        base = restore.restore_zspace(state.generator, state.latent_arch, state.noise,
                                      y, spec, RestoreConfig(steps=150, seed=4))
        pen = restore.restore_zspace(
            state.generator, state.latent_arch, state.noise, y, spec,
            RestoreConfig(steps=150, seed=4, latent_penalty=1e-2))
        assert pen.best_energy > base.best_energy

    def test_superres_and_colorize_energies(self, trained):
        state, images = trained
        for spec in (DegradationSpec("superres", factor=2),
                     DegradationSpec("colorize")):
            y = TensorMap(degrade.apply_degradation(images[7:8], spec))
            res = restore.restore_zspace(state.generator, state.latent_arch,
                                         state.noise, y, spec,
                                         RestoreConfig(steps=120, seed=8))
            assert res.energy_trace[-1] < res.energy_trace[0]
            assert res.final_known_mse < 0.05


class TestRestoreGlo:
    @pytest.fixture(scope="class")
    def constant_glo(self):
        # the degenerate dataset needs no aggressive step size; lr 10 oscillates
        images = np.full((4, 3, 16, 16), 0.42, dtype=np.float32)
        cfg = train.TrainConfig(steps=600, batch_size=4, preset="toy16", seed=0,
                                lr_glo=1.0)
        state = train.train(images, cfg, "glo_map")
        return state, images

    def test_constant_dataset_restores_constant(self, constant_glo):
        state, images = constant_glo
        y = TensorMap(images[0:1])
        res = restore.restore_glo(state.generator, y, _identity_spec(16, 16),
                                  RestoreConfig(steps=250, seed=1, lr=1.0), kind="map")
        assert res.best_energy < 1e-3

    def test_deterministic(self, constant_glo):
        state, images = constant_glo
        y = TensorMap(images[0:1])
        cfg = RestoreConfig(steps=30, seed=6)
        a = restore.restore_glo(state.generator, y, _identity_spec(16, 16), cfg, "map")
        b = restore.restore_glo(state.generator, y, _identity_spec(16, 16), cfg, "map")
        npt.assert_array_equal(a.image.data, b.image.data)
        assert a.mode == "glo_map"


class TestDivergenceGuard:
    def test_explosion_raises(self, trained):
        # the data fit is bounded by the sigmoid, but the latent penalty is not
        state, images = trained
        y = TensorMap(images[0:1])
        cfg = RestoreConfig(steps=400, seed=0, lr=1e6, latent_penalty=1.0)
        with pytest.raises(DivergenceError) as err:
            restore.restore_zspace(state.generator, state.latent_arch, state.noise,
                                   y, _identity_spec(16, 16), cfg)
        assert len(err.value.trace) >= 1
