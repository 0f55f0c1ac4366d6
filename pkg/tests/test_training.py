import dataclasses

import numpy as np
import pytest

from dualpath import losses as L
from dualpath.data import split_dataset, synthesize
from dualpath.errors import CheckpointError, ConfigurationError, NumericError
from dualpath.model import init_model
from dualpath.numgrad import ParamTensor
from dualpath.retrieval import evaluate
from dualpath.training import (
    LOG_COLUMNS,
    AdamState,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    dims_for_data,
    format_loss_log,
    load_checkpoint,
    save_checkpoint,
    train,
)

from conftest import TINY_ARCH, tiny_spec


def _cfg(data, **kw):
    return TrainConfig(dims=dims_for_data(data.dims, **TINY_ARCH), **kw)


def _poison(data, path):
    """Copy of ``data`` whose ``path`` features are all NaN."""
    def swap(recs):
        return {k: dataclasses.replace(r, **{f"{path}_feature": np.full_like(getattr(r, f"{path}_feature"), np.nan)})
                for k, r in recs.items()}
    return dataclasses.replace(data, videos=swap(data.videos), musics=swap(data.musics))


class TestAdam:
    def _setup(self, g):
        p = ParamTensor(np.zeros((2, 3)), name="w")
        p.grad[...] = g
        cfg = TrainConfig(dims=_dummy_dims())
        return p, cfg

    def test_unit_gradient_first_step(self):
        p, cfg = self._setup(1.0)
        adam_step([p], AdamState(), cfg)
        np.testing.assert_allclose(p.value, -1e-4, rtol=1e-6)

    def test_zero_gradient(self):
        p, cfg = self._setup(0.0)
        adam_step([p], AdamState(), cfg)
        assert not np.any(p.value)

    def test_deterministic(self):
        p, cfg = self._setup(0.3)
        q, _ = self._setup(0.3)
        s1, s2 = AdamState(), AdamState()
        for _ in range(3):
            adam_step([p], s1, cfg)
            adam_step([q], s2, cfg)
        assert p.value.tobytes() == q.value.tobytes()
        assert s1.step == s2.step == 3

    def test_non_finite_gradient(self):
        p, cfg = self._setup(np.inf)
        with pytest.raises(NumericError, match=r"w at step 1"):
            adam_step([p], AdamState(), cfg)


def _dummy_dims():
    from dualpath.model import ModelDims
    return ModelDims(4, 4, 2, 2, content_code_dim=2, emotion_code_dim=2, fused_dim=2,
                     content_hidden_dim=3, emotion_hidden_dim=3)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig(dims=_dummy_dims())
        assert (c.epochs, c.batch_size, c.learning_rate, c.beta1, c.beta2) == (100, 16, 1e-4, 0.5, 0.999)

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=1), dict(learning_rate=0.0),
                                    dict(beta1=1.0), dict(ablation="both")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(dims=_dummy_dims(), **kw)

    def test_fusion_ablation_sets_mode(self):
        c = TrainConfig(dims=_dummy_dims(), ablation="splicing")
        assert c.loss.fusion_mode == "splicing"

    def test_dict_round_trip(self):
        c = TrainConfig(dims=_dummy_dims(), loss=L.LossConfig(metric_variant="ppml"), seed=9)
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert TrainConfig.from_dict(c.to_dict()).digest() == c.digest()


class TestTrain:
    def test_step_count(self):
        data, _ = synthesize(tiny_spec(num_pairs=32))
        _, history = train(_cfg(data, epochs=1), data)
        assert history.shape == (2, len(LOG_COLUMNS))
        np.testing.assert_array_equal(history[:, 1], [1, 2])

    @pytest.mark.parametrize("ablation", ["content_only", "emotion_only", "splicing", "interactive"])
    @pytest.mark.parametrize("metric", ["contrastive", "ppml"])
    def test_deterministic(self, tiny_data, ablation, metric):
        cfg = _cfg(tiny_data, epochs=2, ablation=ablation, loss=L.LossConfig(metric_variant=metric), seed=4)
        a, ha = train(cfg, tiny_data)
        b, hb = train(cfg, tiny_data)
        assert format_loss_log(ha, cfg) == format_loss_log(hb, cfg)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_loss_decreases(self):
        data, _ = synthesize(tiny_spec(num_pairs=200, noise_sigma=0.1, seed=3))
        ckpt, _ = train(_cfg(data, epochs=100, seed=0), data)
        means = ckpt.mean_loss_by_epoch()
        assert len(means) == 100
        assert means[-1] < means[0]

    def test_content_only_ignores_emotion(self, tiny_data):
        ckpt, history = train(_cfg(tiny_data, epochs=1, ablation="content_only"), _poison(tiny_data, "emotion"))
        assert np.all(np.isfinite(history))
        assert not np.any(history[:, LOG_COLUMNS.index("L_D")])

    def test_emotion_only_ignores_content(self, tiny_data):
        _, history = train(_cfg(tiny_data, epochs=1, ablation="emotion_only"), _poison(tiny_data, "content"))
        assert np.all(np.isfinite(history))
        assert not np.any(history[:, LOG_COLUMNS.index("L_R")])

    def test_poisoned_input_aborts(self, tiny_data):
        with pytest.raises(NumericError, match="epoch 1"):
            train(_cfg(tiny_data, epochs=1, ablation="interactive"), _poison(tiny_data, "emotion"))

    def test_zero_weights_no_update(self, tiny_data):
        zero = L.LossConfig(lambda1=0, lambda2=0, mu1=0, mu2=0, k1=0, k2=0, k3=0)
        cfg = _cfg(tiny_data, epochs=1, loss=zero)
        start = init_model(cfg.dims, 0)
        before = [p.value.copy() for p in start.parameters()]
        ckpt, _ = train(cfg, tiny_data, params=start)
        for b, p in zip(before, ckpt.params.parameters()):
            np.testing.assert_array_equal(b, p.value)

    def test_dims_mismatch(self, tiny_data):
        other, _ = synthesize(tiny_spec(video_content_dim=30))
        with pytest.raises(ConfigurationError):
            train(_cfg(other, epochs=1), tiny_data)

    def test_log_format(self, tiny_data):
        cfg = _cfg(tiny_data, epochs=1)
        _, history = train(cfg, tiny_data)
        text = format_loss_log(history, cfg)
        lines = text.splitlines()
        assert "# learning_rate=0.0001" in lines
        assert "# " + ",".join(LOG_COLUMNS) in lines
        body = [ln for ln in lines if not ln.startswith("#")]
        assert len(body) == len(history)
        assert [float(x) for x in body[0].split(",")[2:]] == list(history[0, 2:])


class TestCheckpoint:
    @pytest.fixture
    def trained(self, tiny_data):
        return train(_cfg(tiny_data, epochs=1, seed=2), tiny_data)[0]

    def test_round_trip(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "c.dpvm")
        back = load_checkpoint(path)
        assert back.config == trained.config and back.dims == trained.dims
        for (n1, p1), (n2, p2) in zip(trained.params.named_parameters(), back.params.named_parameters()):
            assert n1 == n2 and p1.value.dtype == p2.value.dtype and p1.value.tobytes() == p2.value.tobytes()
        np.testing.assert_array_equal(back.loss_history, trained.loss_history)

    def test_truncated(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "c.dpvm")
        blob = path.read_bytes()
        for cut in (4, len(blob) // 2, len(blob) - 1):
            path.write_bytes(blob[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(path)

    def test_corrupted_byte(self, tmp_path, trained):
        path = save_checkpoint(trained, tmp_path / "c.dpvm")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_reload_gives_same_report(self, tmp_path, tiny_data):
        train_set, test_set = split_dataset(tiny_data, 0)
        ckpt, _ = train(_cfg(tiny_data, epochs=1), train_set)
        back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.dpvm"))
        assert evaluate(ckpt, test_set).recall_at == evaluate(back, test_set).recall_at

    def test_no_partial_file_on_failure(self, tmp_path, trained, monkeypatch):
        import dualpath.training as T

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(T.os, "replace", boom)
        with pytest.raises(OSError):
            save_checkpoint(trained, tmp_path / "c.dpvm")
        assert list(tmp_path.iterdir()) == []
