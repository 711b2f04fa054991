"""Build the synthetic audio-visual corpus and look at what each stream can tell apart.

Audio-confusable token pairs share one audio prototype, so an audio-only
recogniser must guess between them. Video resolves them. This script prints
the analytic floor, a brute-force estimate of it, and how the training-time
dropout methods damage the video stream.

    python demos/01_corpus_and_floor.py
"""

import numpy as np

from mblab.corpus import (CorpusSpec, DropoutSpec, apply_dropout, bayes_token_error, generate_corpus,
                          nearest_prototype_error, token_classes)

spec = CorpusSpec(vocab_size=12, n_general=8, n_audio_pairs=2, n_video_pairs=0, sigma_audio=0.0)
print("token classes:", token_classes(spec))
print(f"audio-only floor: analytic {bayes_token_error(spec):.4f}, "
      f"nearest-prototype estimate {nearest_prototype_error(spec):.4f}")
print(f"with both streams the floor is {bayes_token_error(spec, 'both'):.4f}")

utt = generate_corpus(CorpusSpec(n_utterances=1)).utterances[0]
print(f"\nutterance {utt.id}: labels {utt.labels.tolist()}, audio {utt.audio.shape}, video {utt.video.shape}")
for method in ("segment", "interval", "utterance", "per_frame"):
    dropped = apply_dropout(utt, DropoutSpec(method, 0.5, "video", seed=3))
    kept = dropped.video.any(axis=1)
    print(f"{method:>10} @ 0.5  " + "".join("#" if k else "." for k in kept))
print("(# = video frame kept, . = zeroed)")
