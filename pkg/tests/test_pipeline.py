import dataclasses

import numpy as np
import pytest

from bmqa.errors import ConfigError
from bmqa.pipeline import (
    ABLATIONS, BMQASystem, PipelineConfig, ablation_csv, ablation_table, evaluate, run_ablation, train_pipeline,
)
from bmqa.text import tokenize
from bmqa.train import preset


def tiny_config(**kw):
    cfg = PipelineConfig(**kw)
    cfg.pt_corpus.n_scenes = 10
    for name, epochs in (("pt", 1), ("ss", 1), ("st", 2), ("cap", 1)):
        cfg.stages[name] = preset(name, epochs=epochs)
    return cfg


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    return train_pipeline(tiny_dataset, tiny_config())


def test_all_stages_ran(trained):
    assert set(trained.histories) == {"pt", "ss", "st", "cap"}
    assert trained.system.meta["stages"] == ["pt", "ss", "st", "cap"]
    assert trained.window_hit is not None


def test_splits_are_scene_disjoint(trained):
    scenes = [{s.scene for s in part.samples} for part in trained.splits]
    assert not (scenes[0] & scenes[1] or scenes[0] & scenes[2] or scenes[1] & scenes[2])


def test_predictions_are_clamped(trained):
    ds = trained.splits[2]
    preds = trained.system.predict(ds.images, ds.transcripts)
    assert np.all((preds >= 0) & (preds <= 1))
    only = trained.system.predict_image_only(ds.images)
    assert np.all((only >= 0) & (only <= 1))


def test_image_only_equals_image_audio_on_exact_transcript(trained):
    system = trained.system
    image = trained.splits[0].images[0]
    generated = system.generate_ids(image)[0]
    text = " ".join(system.vocab.tokens[i] for i in generated)
    assert system.predict_image_only(image)[0] == system.predict(image, [text])[0]


def test_missing_captioner_is_config_error(trained):
    bare = BMQASystem(trained.system.model, trained.system.vocab)
    with pytest.raises(ConfigError):
        bare.predict_image_only(trained.splits[0].images[:1])


def test_checkpoint_round_trip_preserves_predictions(trained):
    from bmqa.checkpoint import from_bytes, to_bytes

    ds = trained.splits[2]
    back = BMQASystem.from_checkpoint(from_bytes(to_bytes(trained.system.to_checkpoint())))
    a = trained.system.predict(ds.images, ds.transcripts)
    b = back.predict(ds.images, ds.transcripts)
    assert np.abs(a - b).max() < 1e-4
    assert back.vocab == trained.system.vocab


def test_evaluate_groups_and_determinism(trained):
    ds = trained.splits[0]
    rep = evaluate(trained.system, ds, group_key="device")
    assert sum(g.n for g in rep.groups.values()) + sum(rep.flagged.values()) == rep.n
    assert evaluate(trained.system, ds, group_key="device").to_text() == rep.to_text()


def test_same_seed_same_training(tiny_dataset):
    cfg = tiny_config(pt_kind="none", train_captioner=False)
    a = train_pipeline(tiny_dataset, cfg).histories
    b = train_pipeline(tiny_dataset, cfg).histories
    assert a == b


def test_resume_from_checkpointed_system(trained, tiny_dataset):
    copy = BMQASystem.from_checkpoint(trained.system.to_checkpoint())
    res = train_pipeline(tiny_dataset, tiny_config(), init=copy, first="st", last="st")
    assert list(res.histories) == ["st"]
    assert res.system.vocab == trained.system.vocab


def test_bad_stage_range(tiny_dataset):
    with pytest.raises(ConfigError):
        train_pipeline(tiny_dataset, tiny_config(), first="st", last="pt")


def test_ablation_grid_is_complete_and_distinct():
    assert sorted(ABLATIONS) == list("abcdefgh")
    keys = {(s.pt_kind, s.ss, s.modalities) for s in ABLATIONS.values()}
    assert len(keys) == 8


def test_small_ablation_table(tiny_dataset):
    reports = run_ablation(tiny_dataset, tiny_config(), methods=["a", "b"])
    table = ablation_table(reports)
    assert "(a) PT=- SS=- ST=image" in table and "(b)" in table
    assert ablation_csv(reports).splitlines()[0] == "method,pt,ss,st,plcc,srcc,rmse"


def test_full_recipe_ablation_matches_pipeline(trained, tiny_dataset):
    # method (h) is the default recipe, so both routes must give the same scores
    h = run_ablation(tiny_dataset, tiny_config(), methods=["h"])["h"]
    rep = evaluate(trained.system, trained.splits[2])
    assert (h.plcc, h.srcc, h.rmse) == (rep.plcc, rep.srcc, rep.rmse)


def test_config_sections():
    cfg = PipelineConfig.from_sections({"pipeline": {"pt_kind": "cl", "run_ss": "no"}, "st": {"epochs": 3}}, seed=5)
    assert (cfg.pt_kind, cfg.run_ss, cfg.seed, cfg.stages["st"].epochs) == ("cl", False, 5, 3)
    with pytest.raises(ConfigError):
        PipelineConfig.from_sections({"pipeline": {"warp": "1"}})
