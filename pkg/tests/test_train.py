import math

import numpy as np
import pytest

from bmqa.errors import ConfigError, ContractError, DataError, ShapeError
from bmqa.head import HeadConfig
from bmqa.image import ImageEncoderConfig
from bmqa.model import BMQAModel, ModelConfig
from bmqa.text import QsdEncoderConfig
from bmqa.train import (
    PUBLISHED, Adam, Schedule, StageData, StageResult, TrainConfig, TrainingDiverged, adam_step, lr_at, preset,
    read_config, run_stage,
)


def tiny_model(modalities="both", seed=0):
    cfg = ModelConfig(
        image=ImageEncoderConfig(input_size=16, patch=8, d_model=8, n_blocks=1, n_heads=2),
        qsd=QsdEncoderConfig(d_model=8, n_heads=2, n_max=6),
        head=HeadConfig(n_heads=2, d_proj=8, d_ff=8, d_aligned=8, d_fuse=8),
        modalities=modalities,
    )
    return BMQAModel(cfg, 12, seed=seed)


def tiny_data(n, seed=0, mos=None):
    rng = np.random.default_rng(seed)
    # each pair gets its own word so the pairs are distinguishable
    ids = np.zeros((n, 6), dtype=np.int64)
    mask = np.zeros((n, 6), dtype=bool)
    for i in range(n):
        k = 1 + i % 5
        ids[i, :k] = 4 + (i + np.arange(k)) % 8
        mask[i, :k] = True
    images = rng.integers(0, 256, size=(n, 16, 16, 3), dtype=np.uint8)
    mos = rng.random(n) if mos is None else np.full(n, mos)
    return StageData(images, ids, mask, mos)


def test_adam_single_step():
    p = [np.array([1.0])]
    adam_step(p, [np.array([1.0])], {}, lr=0.1)
    assert p[0][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_is_identity():
    p = [np.array([0.3, -2.0])]
    adam_step(p, [np.zeros(2)], {}, lr=0.1)
    assert p[0].tolist() == [0.3, -2.0]


def _reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_reference_over_ten_steps():
    grads = np.random.default_rng(0).normal(size=10)
    p, state = [np.array([0.5])], {}
    for g in grads:
        adam_step(p, [np.array([g])], state, lr=0.01)
    assert abs(p[0][0] - _reference_adam(0.5, grads, 0.01)) < 1e-12


def test_adam_shape_and_length_errors():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], {}, 0.1)
    with pytest.raises(ContractError):
        adam_step([np.zeros(2)], [], {}, 0.1)


def test_lr_schedules():
    cos = Schedule("cosine", 1e-3)
    assert lr_at(cos, 0, 10) == 1e-3
    assert lr_at(cos, 5, 10) == pytest.approx(5e-4)
    step = Schedule("step", 8e-5, (150, 250), 0.95)
    assert lr_at(step, 100, 300) == 8e-5
    assert lr_at(step, 200, 300) == pytest.approx(7.6e-5, rel=1e-12)
    assert lr_at(step, 300, 300) == pytest.approx(7.22e-5, rel=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(schedule="step", milestones=(5, 5)).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr0=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    cfg = preset("st", epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_published_presets():
    st = preset("st", "published")
    assert (st.batch_size, st.epochs, st.lr0, st.milestones, st.factor) == (16, 300, 8e-5, (150, 250), 0.95)
    assert PUBLISHED["pt"]["batch_size"] == 768 and PUBLISHED["ss"]["batch_size"] == 256
    with pytest.raises(ConfigError):
        preset("st", "huge")


def test_read_config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[st]\nepochs = 4\nmilestones = 1, 3\n[pipeline]\npt_kind = cl\n")
    sections = read_config(path)
    assert sections["st"] == {"epochs": 4, "milestones": (1, 3)}
    assert sections["pipeline"] == {"pt_kind": "cl"}
    path.write_text("[st]\nwarmup = 4\n")
    with pytest.raises(ConfigError, match="warmup"):
        read_config(path)


def test_ss_stage_loss_decreases():
    model = tiny_model()
    res = run_stage(preset("ss", epochs=20, batch_size=8, lr0=3e-3), model, tiny_data(32))
    assert len(res.history) == 20
    assert res.final_loss < res.history[0]
    assert res.window_hit is not None


def test_st_constant_mos_converges():
    model = tiny_model("image")
    data = tiny_data(16, mos=0.4)
    res = run_stage(preset("st", epochs=150, batch_size=8, lr0=3e-3, schedule="step"), model, data)
    assert res.final_loss < 1e-4
    pred = model.predict(data.batch(np.arange(16))[0])
    assert np.abs(pred - 0.4).max() < 0.02


def test_same_seed_same_history():
    def run():
        return run_stage(preset("st", epochs=3, batch_size=4), tiny_model(), tiny_data(10)).history

    assert run() == run()


def test_freeze_keeps_parameters():
    model = tiny_model()
    before = model.image_encoder.embed.weight.data.copy()
    run_stage(preset("st", epochs=2, batch_size=4, freeze=("image_encoder",)), model, tiny_data(8))
    assert np.array_equal(model.image_encoder.embed.weight.data, before)


def test_nan_parameter_aborts_with_coordinates():
    model = tiny_model()
    model.fusion.score.bias.data[...] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        run_stage(preset("st", epochs=2, batch_size=4), model, tiny_data(8))
    assert (info.value.epoch, info.value.batch) == (1, 1)


def test_empty_split_is_data_error():
    data = tiny_data(4)
    empty = StageData(data.images[:0], data.ids[:0], data.mask[:0], data.mos[:0])
    with pytest.raises(DataError):
        run_stage(preset("st", epochs=1), tiny_model(), empty)


def test_adam_optimizer_skips_missing_gradients():
    model = tiny_model()
    opt = Adam(model.parameters())
    before = [p.data.copy() for p in model.parameters()]
    opt.step(0.1)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


def test_history_csv():
    assert StageResult("st", [0.5, 0.25]).history_csv() == "epoch,loss\n1,0.5\n2,0.25\n"
