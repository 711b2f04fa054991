"""Synthetic paired audio/video corpus, frame dropout policies and the corpus file format.

Token classes
-------------
Token ids run 1..V (0 is the CTC blank). The vocabulary is split into three
contiguous groups:

* general tokens: a distinct prototype in both streams;
* audio-confusable pairs: the two tokens share one audio prototype and differ
  only in video;
* video-confusable pairs: shared video prototype, distinct audio prototypes.

Each token emits ``F_a`` audio frames and ``F_v`` video frames equal to its
prototype plus iid Gaussian noise. Frames are stored as float32.

Randomness
----------
All randomness comes from numpy's Philox4x64 counter-based generator. A
substream is keyed by hashing ``(seed, *tags)`` with BLAKE2b into the 128-bit
Philox key, so e.g. the noise of utterance ``train-000017`` never depends on how
many other utterances were drawn before it.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

METHODS = ("segment", "utterance", "interval", "per_frame", "av_utterance", "none")
SUITE_METHODS = ("segment", "utterance", "interval")
CORPUS_MAGIC = b"MBLABCO1"


class CorpusSpecError(ValueError):
    pass


class PolicyError(ValueError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def substream(seed: int, *tags) -> np.random.Generator:
    """Independent Philox generator keyed by ``seed`` and arbitrary tags."""
    h = hashlib.blake2b(repr((int(seed),) + tuple(str(t) for t in tags)).encode(), digest_size=16)
    key = np.frombuffer(h.digest(), dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 12
    n_general: int = 6
    n_audio_pairs: int = 2
    n_video_pairs: int = 1
    frames_per_token_audio: int = 4
    frames_per_token_video: int = 2
    d_audio: int = 16
    d_video: int = 12
    sigma_audio: float = 0.6
    sigma_video: float = 0.4
    min_len: int = 3
    max_len: int = 8
    n_utterances: int = 2000
    seed: int = 0
    split: str = "train"
    prototype_scale: float = 1.0

    def validate(self) -> None:
        counts = (self.n_general, self.n_audio_pairs, self.n_video_pairs)
        if self.vocab_size < 2:
            raise CorpusSpecError("vocab_size must be >= 2")
        if min(counts) < 0 or self.n_utterances < 0:
            raise CorpusSpecError("class and utterance counts must be nonnegative")
        if self.n_general + 2 * self.n_audio_pairs + 2 * self.n_video_pairs != self.vocab_size:
            raise CorpusSpecError(
                f"n_general + 2*n_audio_pairs + 2*n_video_pairs = "
                f"{self.n_general + 2 * self.n_audio_pairs + 2 * self.n_video_pairs} != vocab_size {self.vocab_size}")
        if self.frames_per_token_audio < 1 or self.frames_per_token_video < 1:
            raise CorpusSpecError("frames per token must be >= 1")
        if self.d_audio < 1 or self.d_video < 1:
            raise CorpusSpecError("feature dims must be >= 1")
        if self.sigma_audio < 0 or self.sigma_video < 0:
            raise CorpusSpecError("noise std must be >= 0")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusSpecError("need 1 <= min_len <= max_len")
        if self.vocab_size > 65535:
            raise CorpusSpecError("labels are stored as uint16")

    def test_split(self, n_utterances: int = 300) -> "CorpusSpec":
        """Same prototypes, disjoint utterance substreams."""
        return replace(self, split="test", n_utterances=n_utterances)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)


@dataclass
class Utterance:
    id: str
    audio: np.ndarray  # [T_a, d_a] float32
    video: np.ndarray  # [T_v, d_v] float32
    labels: np.ndarray  # [L] int64, ids in 1..V
    natural_video_mask: np.ndarray = None  # [T_v] bool, True = frame available

    def __post_init__(self):
        if self.natural_video_mask is None:
            self.natural_video_mask = np.ones(len(self.video), dtype=bool)


@dataclass
class Corpus:
    spec: CorpusSpec
    utterances: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def split_validation(self, fraction: float = 0.1, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        n = len(self.utterances)
        order = substream(seed, self.spec.seed, "validation-split").permutation(n)
        n_val = int(round(fraction * n))
        val = sorted(order[:n_val])
        train = sorted(order[n_val:])
        return (Corpus(self.spec, [self.utterances[i] for i in train]),
                Corpus(self.spec, [self.utterances[i] for i in val]))


@dataclass(frozen=True)
class DropoutSpec:
    method: str = "none"
    rate: float = 0.0
    target: str = "video"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise PolicyError(f"unknown dropout method {self.method!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise PolicyError(f"rate {self.rate} outside [0, 1]")
        if self.target not in ("video", "audio"):
            raise PolicyError(f"unknown target {self.target!r}")


@dataclass(frozen=True)
class TrainingDropoutPolicy:
    d_prob: float = 0.0
    method_pool: tuple = ("segment", "utterance", "interval", "per_frame")
    rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "method_pool", tuple(self.method_pool))
        if not 0.0 <= self.d_prob <= 1.0:
            raise PolicyError(f"d_prob {self.d_prob} outside [0, 1]")
        if not 0.0 <= self.rate <= 1.0:
            raise PolicyError(f"rate {self.rate} outside [0, 1]")
        if self.d_prob > 0 and not self.method_pool:
            raise PolicyError("empty method pool with d_prob > 0")
        for m in self.method_pool:
            if m not in METHODS:
                raise PolicyError(f"unknown dropout method {m!r}")


# ---------------------------------------------------------------- generation


def token_classes(spec: CorpusSpec) -> dict:
    """Token ids per class; pairs are listed as tuples."""
    g = list(range(1, spec.n_general + 1))
    start = spec.n_general + 1
    ap = [(start + 2 * i, start + 2 * i + 1) for i in range(spec.n_audio_pairs)]
    start += 2 * spec.n_audio_pairs
    vp = [(start + 2 * i, start + 2 * i + 1) for i in range(spec.n_video_pairs)]
    return {"general": g, "audio_pairs": ap, "video_pairs": vp}


def prototype_index(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-token prototype row in the audio and video tables (index 0 unused)."""
    cls = token_classes(spec)
    a_idx = np.zeros(spec.vocab_size + 1, dtype=np.int64)
    v_idx = np.zeros(spec.vocab_size + 1, dtype=np.int64)
    na = nv = 0
    for t in cls["general"]:
        a_idx[t], v_idx[t] = na, nv
        na, nv = na + 1, nv + 1
    for a, b in cls["audio_pairs"]:
        a_idx[a] = a_idx[b] = na
        v_idx[a], v_idx[b] = nv, nv + 1
        na, nv = na + 1, nv + 2
    for a, b in cls["video_pairs"]:
        a_idx[a], a_idx[b] = na, na + 1
        v_idx[a] = v_idx[b] = nv
        na, nv = na + 2, nv + 1
    return a_idx, v_idx


def prototypes(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-token audio [V+1, d_a] and video [V+1, d_v] prototypes (row 0 is zeros)."""
    spec.validate()
    a_idx, v_idx = prototype_index(spec)
    na, nv = int(a_idx.max()) + 1, int(v_idx.max()) + 1
    table_a = substream(spec.seed, "prototypes", "audio").normal(0.0, spec.prototype_scale, (na, spec.d_audio))
    table_v = substream(spec.seed, "prototypes", "video").normal(0.0, spec.prototype_scale, (nv, spec.d_video))
    pa, pv = table_a[a_idx], table_v[v_idx]
    pa[0] = 0.0
    pv[0] = 0.0
    return pa, pv


def utterance_id(split: str, index: int) -> str:
    return f"{split}-{index:06d}"


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Draw ``spec.n_utterances`` utterances; a pure function of ``spec``."""
    spec.validate()
    pa, pv = prototypes(spec)
    utts = []
    for i in range(spec.n_utterances):
        uid = utterance_id(spec.split, i)
        rng = substream(spec.seed, spec.split, i, "utterance")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        labels = rng.integers(1, spec.vocab_size + 1, size=n)
        audio = np.repeat(pa[labels], spec.frames_per_token_audio, axis=0)
        audio = audio + rng.normal(0.0, 1.0, audio.shape) * spec.sigma_audio
        video = np.repeat(pv[labels], spec.frames_per_token_video, axis=0)
        video = video + rng.normal(0.0, 1.0, video.shape) * spec.sigma_video
        utts.append(Utterance(uid, audio.astype(np.float32), video.astype(np.float32), labels.astype(np.int64)))
    return Corpus(spec, utts)


def bayes_token_error(spec: CorpusSpec, stream: str = "audio") -> float:
    """Noise-free token error of the best single-token classifier.

    Tokens sharing a prototype in the observed stream(s) are indistinguishable,
    so each of them is wrong half the time.
    """
    if stream == "audio":
        tied = 2 * spec.n_audio_pairs
    elif stream == "video":
        tied = 2 * spec.n_video_pairs
    elif stream == "both":
        tied = 0
    else:
        raise ValueError(stream)
    return tied / spec.vocab_size * 0.5


def nearest_prototype_error(spec: CorpusSpec, n_tokens: int = 10_000, stream: str = "audio", seed: int = 0) -> float:
    """Brute-force estimate of token error for a nearest-prototype classifier.

    Samples tokens uniformly, synthesises their frames with the corpus noise,
    averages frames per token, picks the closest prototype and breaks exact
    ties uniformly at random.
    """
    pa, pv = prototypes(spec)
    rng = substream(seed, "nearest-prototype", stream)
    toks = rng.integers(1, spec.vocab_size + 1, size=n_tokens)
    feats, protos = [], []
    if stream in ("audio", "both"):
        x = pa[toks][:, None, :] + rng.normal(0, 1, (n_tokens, spec.frames_per_token_audio, spec.d_audio)) * spec.sigma_audio
        feats.append(x.mean(axis=1))
        protos.append(pa[1:])
    if stream in ("video", "both"):
        x = pv[toks][:, None, :] + rng.normal(0, 1, (n_tokens, spec.frames_per_token_video, spec.d_video)) * spec.sigma_video
        feats.append(x.mean(axis=1))
        protos.append(pv[1:])
    f = np.concatenate(feats, axis=1)
    p = np.concatenate(protos, axis=1)
    d = ((f[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    best = d.min(axis=1, keepdims=True)
    tied = np.isclose(d, best, rtol=0, atol=1e-12)
    errors = 0
    for i in range(n_tokens):
        cands = np.flatnonzero(tied[i]) + 1
        errors += int(cands[rng.integers(len(cands))] != toks[i])
    return errors / n_tokens


# ---------------------------------------------------------------- dropout


def _rng(seed, utt: Utterance, tag: str) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return substream(seed, utt.id, tag)


def _stream(utt: Utterance, target: str) -> np.ndarray:
    return utt.video if target == "video" else utt.audio


def _with_stream(utt: Utterance, target: str, frames: np.ndarray) -> Utterance:
    if target == "video":
        return replace(utt, video=frames)
    return replace(utt, audio=frames)


def segment_length(rate: float, n_frames: int) -> int:
    return min(n_frames, round_half_up(rate * n_frames))


def apply_segment_dropout(utt: Utterance, rate: float, start_seed=0, target: str = "video",
                          start: int | None = None) -> Utterance:
    """Zero one contiguous span of ``round(rate * T)`` frames.

    The start index is uniform over valid positions unless given explicitly.
    """
    frames = _stream(utt, target)
    n = segment_length(rate, len(frames))
    if n == 0:
        return utt
    if start is None:
        start = int(_rng(start_seed, utt, "segment").integers(0, len(frames) - n + 1))
    if not 0 <= start <= len(frames) - n:
        raise ValueError(f"segment start {start} invalid for {n} of {len(frames)} frames")
    out = frames.copy()
    out[start:start + n] = 0.0
    return _with_stream(utt, target, out)


def apply_utterance_dropout(utt: Utterance, rate: float, coin_seed=0, target: str = "video") -> Utterance:
    """With probability ``rate`` zero the whole stream."""
    if rate <= 0.0:
        return utt
    if rate < 1.0 and _rng(coin_seed, utt, "utterance").random() >= rate:
        return utt
    return _with_stream(utt, target, np.zeros_like(_stream(utt, target)))


def interval_mask(rate: float, n_frames: int) -> np.ndarray:
    """Boolean mask of frames to zero under interval dropout."""
    idx = np.arange(n_frames)
    if rate <= 0.0:
        return np.zeros(n_frames, dtype=bool)
    if rate >= 1.0:
        return np.ones(n_frames, dtype=bool)
    # strides beyond the sequence length all give the same mask; clamping avoids inf for tiny rates
    if rate <= 0.5:
        k = round_half_up(min(1.0 / rate, n_frames + 1.0))
        return (idx + 1) % k == 0
    k = round_half_up(min(1.0 / (1.0 - rate), n_frames + 1.0))
    return (idx + 1) % k != 0


def apply_interval_dropout(utt: Utterance, rate: float, target: str = "video") -> Utterance:
    """Zero frames on a fixed stride (rate <= 0.5) or keep only strided frames (rate > 0.5)."""
    mask = interval_mask(rate, len(_stream(utt, target)))
    if not mask.any():
        return utt
    out = _stream(utt, target).copy()
    out[mask] = 0.0
    return _with_stream(utt, target, out)


def apply_per_frame_dropout(utt: Utterance, rate: float, seed=0, target: str = "video") -> Utterance:
    """Zero each frame independently with probability ``rate``."""
    frames = _stream(utt, target)
    mask = _rng(seed, utt, "per_frame").random(len(frames)) < rate
    if not mask.any():
        return utt
    out = frames.copy()
    out[mask] = 0.0
    return _with_stream(utt, target, out)


def apply_av_utterance_dropout(utt: Utterance, rate: float, seed=0) -> Utterance:
    """With probability ``rate`` zero one whole stream, chosen by a fair coin."""
    rng = _rng(seed, utt, "av_utterance")
    if rng.random() >= rate:
        return utt
    target = "video" if rng.random() < 0.5 else "audio"
    return _with_stream(utt, target, np.zeros_like(_stream(utt, target)))


def apply_dropout(utt: Utterance, spec: DropoutSpec) -> Utterance:
    """Dispatch on ``spec.method``; randomness keyed by ``(spec.seed, utt.id)``."""
    m, r, tgt, s = spec.method, spec.rate, spec.target, spec.seed
    if m == "none" or r == 0.0:
        return utt
    if m == "segment":
        return apply_segment_dropout(utt, r, s, tgt)
    if m == "utterance":
        return apply_utterance_dropout(utt, r, s, tgt)
    if m == "interval":
        return apply_interval_dropout(utt, r, tgt)
    if m == "per_frame":
        return apply_per_frame_dropout(utt, r, s, tgt)
    return apply_av_utterance_dropout(utt, r, s)


def policy_assignments(batch: Sequence[Utterance], policy: TrainingDropoutPolicy, seed: int) -> list:
    """Method drawn for each sample, or None when the sample is left complete."""
    out = []
    for utt in batch:
        rng = substream(seed, utt.id, "policy")
        if policy.d_prob > 0 and rng.random() < policy.d_prob:
            out.append(policy.method_pool[int(rng.integers(len(policy.method_pool)))])
        else:
            out.append(None)
    return out


def apply_training_policy(batch: Sequence[Utterance], policy: TrainingDropoutPolicy, seed: int) -> list:
    """Augment a batch: each sample is selected with probability ``d_prob`` and
    receives one method drawn uniformly from the pool, at the policy rate."""
    out = []
    for utt, method in zip(batch, policy_assignments(batch, policy, seed)):
        if method is None:
            out.append(utt)
        else:
            out.append(apply_dropout(utt, DropoutSpec(method, policy.rate, "video", seed)))
    return out


# ---------------------------------------------------------------- augmentation for adapter training


def speed_perturb(utt: Utterance, factor: float) -> Utterance:
    """Resample the audio frame axis by ``factor`` (>1 shortens, <1 stretches) with
    nearest-frame indexing; video is resampled the same way."""
    def resample(x):
        n = max(1, int(round(len(x) / factor)))
        idx = np.minimum((np.arange(n) * factor).astype(np.int64), len(x) - 1)
        return x[idx]

    return replace(utt, id=f"{utt.id}+sp{factor:g}", audio=resample(utt.audio), video=resample(utt.video),
                   natural_video_mask=None)


def concat_utterances(a: Utterance, b: Utterance) -> Utterance:
    return Utterance(f"{a.id}+{b.id}", np.concatenate([a.audio, b.audio]), np.concatenate([a.video, b.video]),
                     np.concatenate([a.labels, b.labels]))


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: list
    audio: np.ndarray  # [B, T_a, d_a] float64, zero padded
    video: np.ndarray  # [B, T_v, d_v]
    audio_lens: np.ndarray
    video_lens: np.ndarray
    labels: list  # list of int arrays

    def __len__(self) -> int:
        return len(self.ids)


def collate(utts: Sequence[Utterance], pad_audio_to: int | None = None, pad_video_to: int | None = None) -> Batch:
    a_lens = np.array([len(u.audio) for u in utts], dtype=np.int64)
    v_lens = np.array([len(u.video) for u in utts], dtype=np.int64)
    ta = max(int(a_lens.max(initial=1)), pad_audio_to or 0)
    tv = max(int(v_lens.max(initial=1)), pad_video_to or 0)
    da = utts[0].audio.shape[1] if utts else 1
    dv = utts[0].video.shape[1] if utts else 1
    audio = np.zeros((len(utts), ta, da))
    video = np.zeros((len(utts), tv, dv))
    for i, u in enumerate(utts):
        audio[i, :len(u.audio)] = u.audio
        video[i, :len(u.video)] = u.video
    return Batch([u.id for u in utts], audio, video, a_lens, v_lens, [np.asarray(u.labels) for u in utts])


# ---------------------------------------------------------------- file format


def pack_header(manifest: dict, magic: bytes = CORPUS_MAGIC) -> bytes:
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(body)) + body


def write_corpus(path, corpus: Corpus) -> None:
    """Serialise: magic, u32 manifest length, JSON manifest, then a float32/uint16 blob."""
    index, chunks, off = [], [], 0
    for u in corpus.utterances:
        a = np.ascontiguousarray(u.audio, dtype="<f4").tobytes()
        v = np.ascontiguousarray(u.video, dtype="<f4").tobytes()
        lab = np.ascontiguousarray(u.labels, dtype="<u2").tobytes()
        index.append({"id": u.id, "label_len": int(len(u.labels)), "audio_frames": int(len(u.audio)),
                      "video_frames": int(len(u.video)), "audio_offset": off,
                      "video_offset": off + len(a), "label_offset": off + len(a) + len(v)})
        chunks += [a, v, lab]
        off += len(a) + len(v) + len(lab)
    manifest = {"spec": asdict(corpus.spec), "utterances": index, "blob_bytes": off}
    with open(path, "wb") as f:
        f.write(pack_header(manifest))
        for c in chunks:
            f.write(c)


def read_manifest(raw: bytes, magic: bytes = CORPUS_MAGIC, error=CorpusFormatError) -> tuple[dict, int]:
    """Parse the shared magic / length / JSON header; returns (manifest, blob start)."""
    if raw[:8] != magic:
        raise error(f"bad magic {raw[:8]!r}, expected {magic!r}", 0)
    if len(raw) < 12:
        raise error("truncated header", len(raw))
    (n,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n:
        raise error("truncated manifest", len(raw))
    try:
        manifest = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise error(f"manifest is not valid JSON: {e}", 12) from None
    return manifest, 12 + n


def read_corpus(path) -> Corpus:
    raw = Path(path).read_bytes()
    manifest, base = read_manifest(raw)
    spec = CorpusSpec.from_dict(manifest["spec"])
    blob = memoryview(raw)[base:]
    da, dv = spec.d_audio, spec.d_video
    utts = []

    def take(offset, count, dtype, itemsize, what):
        end = offset + count * itemsize
        if offset < 0 or end > len(blob):
            raise CorpusFormatError(f"{what} out of range", base + min(max(offset, 0), len(blob)))
        return np.frombuffer(blob[offset:end], dtype=dtype)

    for entry in manifest["utterances"]:
        ta, tv, nl = entry["audio_frames"], entry["video_frames"], entry["label_len"]
        a = take(entry["audio_offset"], ta * da, "<f4", 4, f"audio of {entry['id']}").reshape(ta, da)
        v = take(entry["video_offset"], tv * dv, "<f4", 4, f"video of {entry['id']}").reshape(tv, dv)
        lab = take(entry["label_offset"], nl, "<u2", 2, f"labels of {entry['id']}")
        if nl and (lab.min() < 1 or lab.max() > spec.vocab_size):
            raise CorpusFormatError(f"label id out of range in {entry['id']}", base + entry["label_offset"])
        utts.append(Utterance(entry["id"], a.astype(np.float32), v.astype(np.float32), lab.astype(np.int64)))
    if len(blob) != manifest.get("blob_bytes", len(blob)):
        raise CorpusFormatError("blob length does not match manifest", base + len(blob))
    return Corpus(spec, utts)
