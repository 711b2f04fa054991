import numpy as np
import pytest

from mblab.corpus import CorpusSpec, TrainingDropoutPolicy, generate_corpus
from mblab.model import AdapterConfig, ModelConfig, ModelStateError, build, insert_adapters
from mblab.numerics import ContractError
from mblab.objectives import LossWeights
from mblab.training import (RecipeError, TrainingAborted, TrainLog, TrainRecipe, run_recipe, train_adapters,
                            train_audio_only, train_student_mda_kd, train_teacher)

SMALL = ModelConfig(d_model=16, n_heads=2, d_ffn=24, n_audio_blocks=1, n_video_blocks=1, n_joint_blocks=2,
                    n_decoder_blocks=1)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_utterances=48, seed=3))


def recipe(kind, **kw):
    base = dict(kind=kind, epochs=2, batch_size=16, learning_rate=3e-3, warmup_steps=4, seed=1)
    base.update(kw)
    return TrainRecipe(**base)


@pytest.fixture(scope="module")
def teacher(corpus):
    return train_teacher(corpus, SMALL, recipe("teacher", epochs=3))


def test_teacher_reduces_loss(teacher):
    _, log = teacher
    totals = log.epoch_means("total")
    assert totals[-1] < totals[0]
    assert len(log.val_cer) == 3


def test_training_is_deterministic(corpus, teacher):
    again, _ = train_teacher(corpus, SMALL, recipe("teacher", epochs=3))
    assert again.checksum() == teacher[0].checksum()


def test_recipe_validation():
    with pytest.raises(RecipeError):
        recipe("teacher", dropout_policy=TrainingDropoutPolicy(0.5)).validate()
    with pytest.raises(RecipeError):
        recipe("nonsense").validate()
    with pytest.raises(RecipeError):
        recipe("teacher", flow_flags={"disable_everything": True}).validate()
    assert recipe("teacher", flow_flags={"disable_audio_to_video": 1}).echo()["flow_flags"] == {
        "disable_audio_to_video": True}


def test_audio_only_model_ignores_video(corpus):
    m, _ = train_audio_only(corpus, SMALL, recipe("audio_only", epochs=1))
    assert m.config.disable_video


def test_mda_kd_leaves_teacher_untouched(corpus, teacher):
    t = teacher[0]
    before = t.checksum()
    policy = TrainingDropoutPolicy(0.5, ("segment", "utterance", "interval", "per_frame"), 0.5)
    student, log = train_student_mda_kd(corpus, t, recipe("mda_kd", epochs=1, dropout_policy=policy,
                                                         weights=LossWeights(w_kd=0.5)))
    assert t.checksum() == before
    assert student.checksum() != before
    assert all(np.isfinite(r["kd"]) and r["kd"] >= 0 for r in log.records)


def test_mda_kd_rejects_config_mismatch(corpus, teacher):
    audio_only = teacher[0].copy()
    audio_only.config = audio_only.config.__class__(**{**audio_only.config.__dict__, "disable_video": True})
    with pytest.raises(ContractError):
        train_student_mda_kd(corpus, audio_only, recipe("mda_kd", epochs=1))
    with pytest.raises(RecipeError):
        train_student_mda_kd(corpus, None, recipe("mda_kd", epochs=1))


def test_adapter_training_touches_only_adapters(corpus, teacher):
    m = insert_adapters(teacher[0].copy(), AdapterConfig(rank=2))
    trained, _ = train_adapters(m, corpus, recipe("adapter", epochs=1))
    for name in m.base_names():
        assert trained.params[name].data.tobytes() == m.params[name].data.tobytes(), name
    assert any(trained.params[n].data.tobytes() != m.params[n].data.tobytes() for n in m.adapter_names())
    with pytest.raises(ModelStateError):
        train_adapters(teacher[0], corpus, recipe("adapter", epochs=1))


def test_frozen_scopes(corpus):
    m, _ = train_teacher(corpus, SMALL, recipe("teacher", epochs=1, frozen_scopes=("audio.", "audio_frontend")))
    fresh = build(SMALL, 1)
    assert m.params["audio.0.ffn.fc1.W"].data.tobytes() == fresh.params["audio.0.ffn.fc1.W"].data.tobytes()
    assert m.params["video.0.ffn.fc1.W"].data.tobytes() != fresh.params["video.0.ffn.fc1.W"].data.tobytes()


def test_nan_aborts_with_step(corpus):
    m = build(SMALL, 1)
    m.params["ctc_head.W"].data[0, 0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train_teacher(corpus, SMALL, recipe("teacher", epochs=1), init=m)
    assert info.value.step == 1


def test_augmentation_doubles_samples(corpus):
    _, log = run_recipe(recipe("teacher", epochs=1, augment=True, validate_every_epoch=False), corpus, SMALL)
    _, plain = run_recipe(recipe("teacher", epochs=1, validate_every_epoch=False), corpus, SMALL)
    assert plain.samples_per_epoch < log.samples_per_epoch <= 2 * plain.samples_per_epoch


def test_log_files(tmp_path, teacher):
    log: TrainLog = teacher[1]
    log.write(tmp_path)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,ctc,att,kd,total,lr" and len(lines) == len(log.records) + 1
    assert (tmp_path / "train_summary.json").exists()
