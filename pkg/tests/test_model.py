import math

import numpy as np
import pytest

import oracles
from dmqca import tensor as T
from dmqca.errors import ArgumentError, CheckpointError, DimensionError, NumericError, TrainingError
from dmqca.gradcheck import toy_batch, toy_model
from dmqca.model import (
    ABLATIONS,
    DMQCA,
    Adam,
    AblationConfig,
    ModelConfig,
    TrainConfig,
    ablation,
    load_checkpoint,
    loss,
    quantize,
    save_checkpoint,
    train,
    train_step,
)
from dmqca.phantom import Sample


def head_oracle(feats, p):
    z = np.concatenate(feats)
    z = oracles.leaky(oracles.matmul(p["head.fc1.w"].data, z[:, None])[:, 0] + p["head.fc1.b"].data)
    return oracles.leaky(oracles.matmul(p["head.out.w"].data, z[:, None])[:, 0] + p["head.out.b"].data)


class TestLoss:
    def test_exact_match_is_zero(self, rng):
        y = rng.uniform(1, 5, (3, 6))
        assert loss(T.Tensor(y.copy()), y).item() == 0.0

    def test_unit_residuals(self):
        assert loss(T.Tensor(np.full((1, 6), 2.0)), np.ones((1, 6))).item() == 1.0

    def test_regulariser_closed_form(self, rng):
        y = rng.uniform(1, 5, (2, 6))
        pred = T.Tensor(y + 0.5)
        w = T.parameter(np.ones((4, 5)))
        assert loss(pred, y, [w], 1e-6).item() == pytest.approx(0.5 + 1e-6 * 20, abs=1e-15)

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            loss(T.Tensor(np.full((1, 6), np.nan)), np.zeros((1, 6)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss(T.Tensor(np.zeros((2, 6))), np.zeros((1, 6)))


class TestForward:
    def test_zero_everything_gives_leaky_output_bias(self, rng):
        model = DMQCA(seed=1)
        for t in model.params.values():
            t.data[...] = 0.0
        bo = np.array([1.0, -2.0, 0.5, -0.25, 3.0, 0.0])
        model.params["head.out.b"].data[...] = bo
        c = model.config
        s = Sample(np.zeros((c.frames, c.height, c.width)), np.zeros((c.frames, c.height, c.width)),
                   np.zeros((c.height, c.width)), np.zeros(6))
        np.testing.assert_array_equal(model(s).data, np.where(bo >= 0, bo, 0.2 * bo))

    def test_key_only_head_width(self):
        model = DMQCA(ModelConfig(feature_dim=128), ablation("Key"))
        assert model.params["head.fc1.w"].shape == (512, 128)
        assert not any(n.startswith(("main.", "support.")) for n in model.params)

    def test_full_head_width(self):
        assert DMQCA(ModelConfig(feature_dim=16)).params["head.fc1.w"].shape == (512, 48)

    def test_matches_composition_oracle(self, rng):
        model = toy_model(3)
        s = toy_batch(model, rng, 1)[0]
        p, vc, kc = model.params, model.view_cfg, model.key_cfg
        feats = [oracles.view_oracle(s.main_view, vc, p, "main"), oracles.view_oracle(s.support_view, vc, p, "support"),
                 oracles.keyframe_oracle(s.keyframe, kc, p, "key")]
        np.testing.assert_array_equal(model(s).data, head_oracle(feats, p))

    def test_self_attention_flag_equals_frozen_gamma(self, rng):
        full = toy_model(5)
        for name, t in full.params.items():
            if name.endswith("gamma"):
                t.data[...] = 0.0
        off = DMQCA(full.config, ABLATIONS["Ours-SelfAtt"], seed=5)
        for name, t in off.params.items():
            t.data[...] = full.params[name].data
        for s in toy_batch(full, rng, 2):
            assert full(s).data.tobytes() == off(s).data.tobytes()

    def test_finite_for_large_inputs(self, rng):
        model = toy_model(0)
        c = model.config
        big = lambda *shape: rng.uniform(-1e3, 1e3, shape)
        s = Sample(big(c.frames, c.height, c.width), big(c.frames, c.height, c.width), big(c.height, c.width), np.zeros(6))
        assert np.isfinite(model(s).data).all()

    def test_shape_mismatch(self, rng):
        model = toy_model(0)
        s = toy_batch(model, rng, 1)[0]
        s.main_view = s.main_view[:, :32]
        with pytest.raises(DimensionError):
            model(s)

    def test_disabled_branch_inputs_ignored(self, rng):
        model = DMQCA(toy_model(0).config, ablation("Key"), seed=2)
        s = toy_batch(model, rng, 1)[0]
        ref = model(s).data
        s.main_view = s.support_view = None
        np.testing.assert_array_equal(model(s).data, ref)

    def test_unknown_ablation(self):
        with pytest.raises(ArgumentError, match="Ours"):
            ablation("Everything")

    def test_no_branches(self):
        with pytest.raises(ArgumentError):
            AblationConfig(use_main=False, use_support=False, use_keyframe=False)

    def test_seeded_init_is_deterministic(self):
        a, b = DMQCA(seed=4), DMQCA(seed=4)
        assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


class TestAdam:
    def test_quadratic_matches_hand_recurrence(self):
        x0, c = [1.0, -2.0, 0.25], [0.5, 0.5, 0.5]
        x = T.parameter(np.array(x0))
        opt = Adam([x])
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        ref, m, v = list(x0), [0.0] * 3, [0.0] * 3
        for t in range(1, 4):
            x.zero_grad()
            T.tsum(T.square(T.sub(x, T.Tensor(np.array(c))))).backward()
            opt.step(lr)
            for i in range(3):
                g = 2.0 * (ref[i] - c[i])
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                ref[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
            np.testing.assert_allclose(x.data, ref, rtol=0, atol=1e-15)

    def test_zero_lr_leaves_parameters(self, rng):
        model = toy_model(1)
        before = {n: t.data.copy() for n, t in model.params.items()}
        train_step(model, toy_batch(model, rng), Adam(model.params.values()), 0.0, 1e-6)
        assert all(np.array_equal(before[n], t.data) for n, t in model.params.items())

    def test_divergence_reports_step(self, rng):
        model = toy_model(1)
        model.params["head.out.b"].data[...] = np.nan
        with pytest.raises(TrainingError) as info:
            train_step(model, toy_batch(model, rng), Adam(model.params.values()), 1e-3, 0.0, step=17)
        assert info.value.step == 17


class TestTraining:
    def test_reproducible_trajectory(self, rng):
        data = toy_batch(toy_model(0), rng, 4)
        cfg = TrainConfig(epochs=2, batch_size=2, lr=1e-3)
        runs = []
        for _ in range(2):
            model = toy_model(0)
            runs.append((train(model, data, cfg), {n: t.data.copy() for n, t in model.params.items()}))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])

    def test_loss_decreases_on_tiny_batch(self, rng):
        model = toy_model(0)
        data = toy_batch(model, rng, 2)
        hist = train(model, data, TrainConfig(epochs=100, batch_size=2, lr=1e-2, lr_decay=1.0, lam=0.0))
        assert hist[-1] < 0.5 * hist[0]

    def test_label_normalisation_round_trip(self, rng):
        model = toy_model(0)
        data = toy_batch(model, rng, 4)
        train(model, data, TrainConfig(epochs=1, batch_size=2, normalize_labels=True))
        labels = np.stack([s.label for s in data])
        np.testing.assert_allclose(model.label_mean, labels.mean(0))
        raw = model.raw(data[0]).data
        np.testing.assert_allclose(model(data[0]).data, raw * labels.std(0) + labels.mean(0))

    def test_invalid_config(self):
        with pytest.raises(ArgumentError):
            TrainConfig(lam=-1.0)

    def test_decay_schedule(self):
        cfg = TrainConfig(lr=2e-4, lr_decay=0.97)
        assert cfg.lr_at(0) == 2e-4
        assert cfg.lr_at(2) == pytest.approx(2e-4 * 0.97**2)


class TestCheckpoint:
    def test_round_trip_at_stored_precision(self, rng, tmp_path):
        model = quantize(toy_model(2))
        path = tmp_path / "m.dmqc"
        save_checkpoint(model, path)
        back = load_checkpoint(path, expect=model)
        for s in toy_batch(model, rng, 2):
            assert back(s).data.tobytes() == model(s).data.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        save_checkpoint(toy_model(2), tmp_path / "a")
        save_checkpoint(toy_model(2), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_label_stats_survive(self, rng, tmp_path):
        model = toy_model(2)
        model.set_label_stats(rng.uniform(1, 9, (5, 6)))
        quantize(model)
        save_checkpoint(model, tmp_path / "m")
        back = load_checkpoint(tmp_path / "m")
        np.testing.assert_array_equal(back.label_mean, model.label_mean)
        np.testing.assert_array_equal(back.label_scale, model.label_scale)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m"
        save_checkpoint(toy_model(2), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(path)

    def test_bit_flip(self, tmp_path):
        path = tmp_path / "m"
        save_checkpoint(toy_model(2), path)
        buf = bytearray(path.read_bytes())
        buf[len(buf) // 2] ^= 1
        path.write_bytes(bytes(buf))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_ablation(self, tmp_path):
        path = tmp_path / "m"
        save_checkpoint(toy_model(2), path)
        other = DMQCA(toy_model(2).config, ablation("Key"))
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path, expect=other)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "m"
        path.write_bytes(b"hello world" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
