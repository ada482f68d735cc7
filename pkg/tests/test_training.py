import numpy as np
import pytest

from latentdepth.autodiff import ShapeMismatchError, Tensor
from latentdepth.data import synth_scene
from latentdepth.losses import LossWeights
from latentdepth.network import DepthModel, NetworkConfig, save_checkpoint
from latentdepth.training import (SgdOptimizer, TrainConfig, TrainingError,
                                  constant_predictor_rmse, evaluate, sgd_step,
                                  train_color, train_guided)

NET16 = NetworkConfig(input_channels=1, base_width=2, bottleneck_blocks=1,
                      input_h=16, input_w=16)
NET16_RGB = NetworkConfig(input_channels=3, base_width=2, bottleneck_blocks=1,
                          input_h=16, input_w=16)


def _samples(n, seed=0, h=16, w=16):
    return [synth_scene(seed * 1000 + i, h, w, 2) for i in range(n)]


class TestSgdStep:
    def test_two_step_unroll(self):
        # from rest with constant gradient g: v1 = g, v2 = m*g + g,
        # total displacement after two steps = lr * (2 + m) * g
        p = np.array([1.0, -2.0])
        g = np.array([0.5, 0.25])
        v = np.zeros(2)
        lr, m = 0.1, 0.9
        p1, v1 = sgd_step(p, g, v, lr, m)
        np.testing.assert_allclose(v1, g, rtol=1e-15)
        p2, v2 = sgd_step(p1, g, v1, lr, m)
        np.testing.assert_allclose(v2, (1 + m) * g, rtol=1e-15)
        np.testing.assert_allclose(p - p2, lr * (2 + m) * g, rtol=1e-14)

    def test_zero_momentum_is_plain_sgd(self):
        p, g = np.array([3.0]), np.array([2.0])
        p1, v1 = sgd_step(p, g, np.zeros(1), 0.5, 0.0)
        assert p1[0] == 2.0 and v1[0] == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.9)

    def test_pure_no_mutation(self):
        p = np.array([1.0])
        g = np.array([1.0])
        v = np.array([1.0])
        sgd_step(p, g, v, 0.1, 0.9)
        assert p[0] == 1.0 and v[0] == 1.0


class TestSgdOptimizer:
    def test_matches_manual_updates(self):
        rng = np.random.default_rng(0)
        params = [Tensor(rng.random(4), requires_grad=True) for _ in range(2)]
        want = [p.data.copy() for p in params]
        vel = [np.zeros(4) for _ in params]
        opt = SgdOptimizer(params, lr=0.2, momentum=0.5)
        for _ in range(3):
            grads = [rng.random(4) for _ in params]
            for p, g in zip(params, grads):
                p.grad = g.copy()
            opt.step()
            for i in range(2):
                want[i], vel[i] = sgd_step(want[i], grads[i], vel[i],
                                           0.2, 0.5)
        for p, w in zip(params, want):
            np.testing.assert_array_equal(p.data, w)

    def test_none_grad_treated_as_zero(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = SgdOptimizer([p], lr=0.1, momentum=0.9)
        opt.step()
        assert p.data[0] == 5.0


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="stage"):
            TrainConfig(stage="finetune", net=NET16, steps=1)
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig(stage="guided", net=NET16, steps=1, momentum=1.0)
        with pytest.raises(ValueError, match="learning rate"):
            TrainConfig(stage="guided", net=NET16, steps=1, learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(stage="guided", net=NET16, steps=1, batch_size=0)


class TestTrainGuided:
    def test_zero_steps_returns_seed_init(self):
        config = TrainConfig(stage="guided", net=NET16, steps=0, seed=5)
        model, history = train_guided(config, _samples(2))
        fresh = DepthModel(NET16, seed=5)
        assert history == []
        for (_, a), (_, b) in zip(model.state_items(), fresh.state_items()):
            np.testing.assert_array_equal(a, b)

    def test_loss_decreases(self):
        config = TrainConfig(stage="guided", net=NET16, steps=30,
                             batch_size=4, learning_rate=0.02, seed=3)
        _, history = train_guided(config, _samples(4, seed=3))
        assert history[-1].data < history[0].data

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            config = TrainConfig(stage="guided", net=NET16, steps=5,
                                 batch_size=2, seed=9)
            model, history = train_guided(config, _samples(3, seed=9))
            runs.append((history, [a.tobytes()
                                   for _, a in model.state_items()]))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_empty_dataset(self):
        config = TrainConfig(stage="guided", net=NET16, steps=1)
        with pytest.raises(TrainingError, match="empty"):
            train_guided(config, [])

    def test_wrong_stage(self):
        config = TrainConfig(stage="color", net=NET16_RGB, steps=1)
        with pytest.raises(ValueError):
            train_guided(config, _samples(1))

    def test_artifacts_written(self, tmp_path):
        ckpt = str(tmp_path / "g.ckpt")
        csv = str(tmp_path / "g.csv")
        config = TrainConfig(stage="guided", net=NET16, steps=3,
                             batch_size=2, seed=1, checkpoint_path=ckpt,
                             loss_csv_path=csv)
        _, history = train_guided(config, _samples(2, seed=1))
        lines = open(csv).read().splitlines()
        assert lines[0] == "step,data,latent,grad_image,grad_feature,total"
        assert len(lines) == 4
        assert float(lines[1].split(",")[5]) == history[0].total
        from latentdepth.network import load_checkpoint
        assert load_checkpoint(ckpt).config == NET16


class TestTrainColor:
    def _guided(self, seed=0, steps=20):
        config = TrainConfig(stage="guided", net=NET16, steps=steps,
                             batch_size=2, learning_rate=0.02, seed=seed)
        model, _ = train_guided(config, _samples(3, seed=seed))
        return model

    def test_loss_decreases_full_objective(self):
        guided = self._guided(seed=2)
        config = TrainConfig(
            stage="color", net=NET16_RGB, steps=30, batch_size=4,
            learning_rate=0.01, seed=2,
            weights=LossWeights(1.0, 0.02, 1.0, 0.005))
        _, history = train_color(config, _samples(4, seed=2), guided)
        assert history[-1].total < history[0].total
        assert history[0].latent > 0 and history[0].grad_feature > 0

    def test_guided_left_byte_identical(self):
        guided = self._guided(seed=4)
        before = [a.tobytes() for _, a in guided.state_items()]
        config = TrainConfig(stage="color", net=NET16_RGB, steps=5,
                             batch_size=2, seed=4,
                             weights=LossWeights(1.0, 0.02, 1.0, 0.005))
        train_color(config, _samples(2, seed=4), guided)
        after = [a.tobytes() for _, a in guided.state_items()]
        assert before == after

    def test_zero_feature_weights_degrades_to_supervised(self):
        guided = self._guided(seed=6, steps=1)
        config = TrainConfig(
            stage="color", net=NET16_RGB, steps=30, batch_size=4,
            learning_rate=0.01, seed=6,
            weights=LossWeights(1.0, 0.0, 1.0, 0.0))
        _, history = train_color(config, _samples(4, seed=6), guided)
        assert history[-1].total < history[0].total
        assert all(h.latent == 0.0 and h.grad_feature == 0.0
                   for h in history)

    def test_size_mismatch_rejected(self):
        guided = DepthModel(NetworkConfig(input_channels=1, base_width=2,
                                          bottleneck_blocks=1, input_h=32,
                                          input_w=32), seed=0)
        config = TrainConfig(stage="color", net=NET16_RGB, steps=1)
        with pytest.raises(ShapeMismatchError):
            train_color(config, _samples(1), guided)

    def test_latent_layer_subset(self):
        guided = self._guided(seed=8, steps=1)
        config = TrainConfig(stage="color", net=NET16_RGB, steps=2,
                             batch_size=2, seed=8, latent_layers=(4,),
                             weights=LossWeights(1.0, 0.02, 1.0, 0.0))
        _, history = train_color(config, _samples(2, seed=8), guided)
        assert len(history) == 2 and history[0].latent > 0


class TestEvaluate:
    def test_perfect_guided_identity_is_cheap(self):
        # evaluate routes depth input to a 1-channel model
        model = DepthModel(NET16, seed=0)
        samples = _samples(2, seed=11)
        result = evaluate(model, samples)
        assert result.n_images == 2
        assert result.n_valid_pixels == 2 * 16 * 16

    def test_restores_training_flag_and_state(self):
        model = DepthModel(NET16_RGB, seed=1)
        model.train()
        samples = _samples(2, seed=12)
        before = [a.tobytes() for _, a in model.state_items()]
        evaluate(model, samples)
        assert model.training is True
        assert [a.tobytes() for _, a in model.state_items()] == before

    def test_empty_set_rejected(self):
        with pytest.raises(TrainingError, match="empty"):
            evaluate(DepthModel(NET16, seed=0), [])


class TestConstantPredictor:
    def test_hand_case(self):
        def mk(depth_vals, mask_vals):
            d = np.array(depth_vals, float)[None]
            m = np.array(mask_vals, bool)
            from latentdepth.data import RgbdSample
            return RgbdSample(rgb=np.zeros((3,) + d.shape[1:]), depth=d,
                              mask=m, scene_id="h")

        train = [mk([[2.0, 4.0]], [[True, True]])]     # mean 3
        evalset = [mk([[3.0, 5.0]], [[True, True]])]   # diffs 0, 2
        result = constant_predictor_rmse(train, evalset)
        assert result.rmse == pytest.approx(np.sqrt(2.0), rel=1e-15)

    def test_mask_respected_in_mean(self):
        from latentdepth.data import RgbdSample
        d = np.array([[[2.0, 100.0]]])
        m = np.array([[True, False]])
        train = [RgbdSample(rgb=np.zeros((3, 1, 2)), depth=d, mask=m,
                            scene_id="h")]
        result = constant_predictor_rmse(train, train)
        assert result.rmse == 0.0


class TestLrSweep:
    def test_larger_lr_moves_params_farther_in_one_step(self):
        # one step from identical init: displacement is linear in lr
        samples = _samples(2, seed=13)
        norms = {}
        for lr in (0.001, 0.01):
            config = TrainConfig(stage="guided", net=NET16, steps=1,
                                 batch_size=2, learning_rate=lr, seed=13)
            model, _ = train_guided(config, samples)
            init = DepthModel(NET16, seed=13)
            sq = 0.0
            for p, q in zip(model.parameters(), init.parameters()):
                sq += float(np.sum((p.data - q.data) ** 2))
            norms[lr] = np.sqrt(sq)
        assert norms[0.01] == pytest.approx(10 * norms[0.001], rel=1e-8)
