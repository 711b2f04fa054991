"""Watch video dropout push a recogniser toward audio-only behaviour.

Trains a small audio-only reference and an audio-visual teacher, then
fine-tunes plain-dropout students at increasing training rates. For each one
it prints the CER with complete input, the CER with video removed, and how
close its fused representation is to the audio-only model's. Runs in a few
minutes on one CPU core with the reduced budget below.

    python demos/02_dropout_bias.py
"""

from mblab.corpus import CorpusSpec, DropoutSpec, TrainingDropoutPolicy, generate_corpus
from mblab.evaluation import model_cer, similarity_matrix
from mblab.model import ModelConfig
from mblab.training import TrainRecipe, train_audio_only, train_plain_dropout, train_teacher

spec = CorpusSpec(n_utterances=600)
train = generate_corpus(spec)
test = generate_corpus(spec.test_split(150)).utterances
video_off = DropoutSpec("utterance", 1.0, "video")
cfg = ModelConfig()


def recipe(kind, epochs, policy=TrainingDropoutPolicy()):
    return TrainRecipe(kind=kind, epochs=epochs, dropout_policy=policy, warmup_steps=60, validate_every_epoch=False)


reference, _ = train_audio_only(train, cfg, recipe("audio_only", 8))
teacher, _ = train_teacher(train, cfg, recipe("teacher", 12))
print(f"audio-only reference: CER {model_cer(reference, test):.3f}")
print(f"teacher: complete {model_cer(teacher, test):.3f}, video removed {model_cer(teacher, test, input_mode=video_off):.3f}")

print("\nrate  complete  no-video  similarity-to-audio-only")
for rate in (0.0, 0.3, 0.7):
    student, _ = train_plain_dropout(train, None, recipe("plain_dropout", 3, TrainingDropoutPolicy(1.0, rate=rate)),
                                     init=teacher)
    sim = similarity_matrix(student, reference, test).diag_mean
    print(f"{rate:4.1f}  {model_cer(student, test):8.3f}  {model_cer(student, test, input_mode=video_off):8.3f}  "
          f"{sim:.4f}")
