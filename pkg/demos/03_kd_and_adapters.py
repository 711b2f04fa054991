"""Distil a dropout-robust student from a complete-input teacher, then add audio-only adapters.

The student sees video with frames dropped while the frozen teacher sees the
full batch; a feature-level distillation term keeps the student's fused
representation near the teacher's. Low-rank adapters are then trained on the
student's audio-only path, which skips the video branch entirely, and the
FLOP counter shows what that path saves.

    python demos/03_kd_and_adapters.py
"""

from mblab.corpus import CorpusSpec, DropoutSpec, TrainingDropoutPolicy, generate_corpus
from mblab.evaluation import degradation_curve, model_cer
from mblab.model import AdapterConfig, ModelConfig, count_flops_params, insert_adapters
from mblab.objectives import LossWeights
from mblab.training import TrainRecipe, train_adapters, train_student_mda_kd, train_teacher

spec = CorpusSpec(n_utterances=600)
train = generate_corpus(spec)
test = generate_corpus(spec.test_split(150)).utterances
video_off = DropoutSpec("utterance", 1.0, "video")

teacher, _ = train_teacher(train, ModelConfig(), TrainRecipe(kind="teacher", epochs=12, warmup_steps=60,
                                                             validate_every_epoch=False))
student, log = train_student_mda_kd(train, teacher, TrainRecipe(
    kind="mda_kd", epochs=3, warmup_steps=60, dropout_policy=TrainingDropoutPolicy(0.5, rate=0.5),
    weights=LossWeights(w_kd=0.1), validate_every_epoch=False))
print("distillation term per epoch:", [round(x, 4) for x in log.epoch_means("kd")])

for name, model in (("teacher", teacher), ("student", student)):
    curve = degradation_curve(model, test)
    print(f"{name:>8}: averaged CER by test rate " + " ".join(f"{c:.3f}" for c in curve.averaged))

adapted, _ = train_adapters(insert_adapters(student, AdapterConfig(rank=8)), train,
                            TrainRecipe(kind="adapter", epochs=2, warmup_steps=60, validate_every_epoch=False))
print(f"\nvideo removed, full path:       {model_cer(adapted, test, input_mode=video_off):.3f}")
print(f"video removed, audio-only path: {model_cer(adapted, test, input_mode='audio_only'):.3f}")
full, audio = count_flops_params(adapted, "full"), count_flops_params(adapted, "audio_only")
print(f"FLOPs per utterance: full {full['flops']:,}, audio-only {audio['flops']:,} "
      f"({audio['flops'] / full['flops']:.2f}x)")
