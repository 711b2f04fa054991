"""Decoding, error rates, missing-video test suites and representation similarity."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import SUITE_METHODS, DropoutSpec, Utterance, apply_dropout, collate, substream
from .model import AVModel, ModelStateError, decoder_logits, encode
from .numerics import ContractError

RATES = (0.0, 0.25, 0.5, 0.75, 1.0)
REPORT_KEYS = ("cer_complete", "cer_video_missing", "cer_audio_missing",
               "diag_mean_complete", "diag_mean_video_missing", "tap")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "ctc_greedy"
    beam_width: int = 4
    max_decode_len: int = 16

    def __post_init__(self):
        if self.mode not in ("attention_greedy", "attention_beam", "ctc_greedy"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.beam_width < 1 or self.max_decode_len < 1:
            raise ValueError("beam_width and max_decode_len must be >= 1")


@dataclass
class DecodeResult:
    ids: list
    hyps: list  # list of int lists
    scores: list  # mean token log-prob (attention modes) or nan
    truncated: list

    def as_dict(self) -> dict:
        return dict(zip(self.ids, self.hyps))


# ---------------------------------------------------------------- input modes


def _path_for(model: AVModel, input_mode) -> str:
    if input_mode == "audio_only":
        if not model.has_adapters and not model.config.disable_video:
            raise ModelStateError("audio_only decoding requires a model with adapters")
        return "audio_only"
    return "audio_only" if model.config.disable_video else "full"


def prepare_inputs(utts: Sequence[Utterance], input_mode) -> list:
    """Apply the test-time video dropout named by ``input_mode`` (a DropoutSpec)."""
    if isinstance(input_mode, DropoutSpec):
        return [apply_dropout(u, input_mode) for u in utts]
    if input_mode not in ("complete", "audio_only"):
        raise ValueError(f"unknown input mode {input_mode!r}")
    return list(utts)


def _batches(utts: list, size: int):
    for i in range(0, len(utts), size):
        yield collate(utts[i:i + size])


# ---------------------------------------------------------------- decoding


def ctc_collapse(frame_ids) -> list:
    out, prev = [], None
    for k in frame_ids:
        k = int(k)
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _dec_step(model: AVModel, memory, mem_lens, prefixes: np.ndarray, lora: bool) -> np.ndarray:
    logits = decoder_logits(model, memory, mem_lens, prefixes, lora=lora).data[:, -1]
    return _log_softmax(logits)


def _greedy(model, memory, mem_lens, max_len, lora):
    b = memory.shape[0]
    eos = model.config.eos
    prefixes = np.full((b, 1), eos, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    total = np.zeros(b)
    count = np.zeros(b)
    for _ in range(max_len):
        lp = _dec_step(model, memory, mem_lens, prefixes, lora)
        lp[:, 0] = -np.inf  # blank is never emitted by the decoder
        nxt = lp.argmax(axis=-1)
        total += np.where(done, 0.0, lp[np.arange(b), nxt])
        count += ~done
        nxt = np.where(done, eos, nxt)
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        done |= nxt == eos
        if done.all():
            break
    hyps = []
    for row in prefixes[:, 1:]:
        stop = np.flatnonzero(row == eos)
        hyps.append([int(t) for t in row[:stop[0] if stop.size else len(row)]])
    return hyps, list(total / np.maximum(count, 1)), list(~done)


def _beam_one(model, memory, mem_len, width, max_len, lora):
    eos = model.config.eos
    live = [([eos], 0.0)]
    finished = []
    for _ in range(max_len):
        prefixes = np.array([p for p, _ in live], dtype=np.int64)
        mem = nx.Tensor(np.repeat(memory, len(live), axis=0))
        lp = _dec_step(model, mem, np.full(len(live), mem_len), prefixes, lora)
        lp[:, 0] = -np.inf
        cand = []
        for (p, s), row in zip(live, lp):
            for k in np.argsort(-row, kind="stable")[:width]:
                cand.append((p + [int(k)], s + float(row[k])))
        cand.sort(key=lambda c: -c[1])
        live = []
        for p, s in cand[:width]:
            (finished if p[-1] == eos else live).append((p, s))
        if not live or len(finished) >= width:
            break
    truncated = not finished
    pool = finished or live
    best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))
    p, s = best
    toks = p[1:-1] if p[-1] == eos else p[1:]
    return toks, s / (len(p) - 1), truncated


def decode(model: AVModel, utts: Sequence[Utterance], config: DecodeConfig = DecodeConfig(),
           input_mode="complete", batch_size: int = 64) -> DecodeResult:
    """One token sequence per utterance.

    ``input_mode`` is "complete", "audio_only" (switched path) or a
    :class:`DropoutSpec` applied to the video stream before decoding.
    Beam search ranks finished hypotheses by mean token log-prob and also
    considers the greedy hypothesis, so beam scores never fall below greedy.
    """
    path = _path_for(model, input_mode)
    lora = path == "audio_only"
    utts = prepare_inputs(utts, input_mode)
    res = DecodeResult([u.id for u in utts], [], [], [])
    with nx.no_grad():
        for batch in _batches(utts, batch_size):
            video = None if path == "audio_only" else batch.video
            memory, ctc, _ = encode(model, batch.audio, batch.audio_lens, video, batch.video_lens, path)
            if config.mode == "ctc_greedy":
                ids = ctc[max(ctc)].data.argmax(axis=-1)
                for row, n in zip(ids, batch.audio_lens):
                    res.hyps.append(ctc_collapse(row[:n]))
                    res.scores.append(math.nan)
                    res.truncated.append(False)
                continue
            hyps, scores, trunc = _greedy(model, memory, batch.audio_lens, config.max_decode_len, lora)
            if config.mode == "attention_beam" and config.beam_width > 1:
                for i in range(len(batch)):
                    n = int(batch.audio_lens[i])
                    bh, bs, bt = _beam_one(model, memory.data[i:i + 1, :n], n, config.beam_width,
                                           config.max_decode_len, lora)
                    if bs > scores[i]:
                        hyps[i], scores[i], trunc[i] = bh, bs, bt
            res.hyps.extend(hyps)
            res.scores.extend(scores)
            res.truncated.extend(bool(t) for t in trunc)
    return res


# ---------------------------------------------------------------- error rates


def edit_distance(ref, hyp) -> int:
    ref, hyp = [int(t) for t in ref], [int(t) for t in hyp]
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def cer(reference, hypothesis) -> float:
    """Edit distance over reference length; an empty reference scores len(hypothesis)."""
    d = edit_distance(reference, hypothesis)
    return float(d) / len(reference) if len(reference) else float(len(hypothesis))


def corpus_cer(references: Sequence, hypotheses: Sequence) -> float:
    """Total edits over total reference length."""
    if len(references) != len(hypotheses):
        raise ContractError("corpus_cer: length mismatch")
    edits = sum(edit_distance(r, h) for r, h in zip(references, hypotheses))
    n = sum(len(r) for r in references)
    return edits / n if n else float(edits)


def relative_cer(hyps_a: dict, hyps_b: dict) -> float:
    """Corpus CER of B measured against A's transcriptions (asymmetric)."""
    if set(hyps_a) != set(hyps_b):
        raise ContractError("relative_cer: utterance ids differ")
    ids = sorted(hyps_a)
    return corpus_cer([hyps_a[i] for i in ids], [hyps_b[i] for i in ids])


def render(tokens) -> str:
    """Tokens as single characters (ids 1..62)."""
    alphabet = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    return "".join(alphabet[t] for t in tokens)


def model_cer(model: AVModel, utts: Sequence[Utterance], config: DecodeConfig = DecodeConfig(),
              input_mode="complete") -> float:
    res = decode(model, utts, config, input_mode)
    return corpus_cer([u.labels for u in utts], res.hyps)


# ---------------------------------------------------------------- degradation suite


def suite_spec(method: str, rate: float, suite_seed: int = 0) -> DropoutSpec:
    seed = int(substream(suite_seed, "suite", method, f"{rate:.4f}").integers(2**62))
    return DropoutSpec(method, rate, "video", seed)


@dataclass
class DegradationCurve:
    rates: tuple
    per_method: dict  # method -> list of CER per rate
    averaged: list

    def rows(self) -> list:
        out = [{"method": m, "rate": r, "cer": c}
               for m in SUITE_METHODS for r, c in zip(self.rates, self.per_method[m])]
        out += [{"method": "average", "rate": r, "cer": c} for r, c in zip(self.rates, self.averaged)]
        return out


def degradation_curve(model: AVModel, utts: Sequence[Utterance], config: DecodeConfig = DecodeConfig(),
                      suite_seed: int = 0, threads: int = 1, base_mode: str = "complete") -> DegradationCurve:
    """CER for every (method, rate) on the five-point grid plus the method average.

    With ``base_mode="audio_only"`` the switched path is decoded (video is
    ignored, so the curve is flat).
    """
    points = [(m, r) for m in SUITE_METHODS for r in RATES]

    def run(point):
        m, r = point
        dropped = [apply_dropout(u, suite_spec(m, r, suite_seed)) for u in utts]
        return model_cer(model, dropped, config, base_mode)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            values = list(ex.map(run, points))
    else:
        values = [run(p) for p in points]
    per = {m: [values[i * len(RATES) + j] for j in range(len(RATES))] for i, m in enumerate(SUITE_METHODS)}
    avg = [sum(per[m][j] for m in SUITE_METHODS) / len(SUITE_METHODS) for j in range(len(RATES))]
    return DegradationCurve(RATES, per, avg)


def curve_csv(curve: DegradationCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rate", "cer"])
    for row in curve.rows():
        w.writerow([row["method"], f"{row['rate']:.2f}", repr(float(row["cer"]))])
    return buf.getvalue()


def curve_svg(curve: DegradationCurve, width: int = 320, height: int = 200) -> str:
    """Bare line plot of CER against test rate, one polyline per row group."""
    series = {**curve.per_method, "average": curve.averaged}
    top = max(max(v) for v in series.values()) or 1.0
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for name, ys in series.items():
        pts = " ".join(f"{20 + r * (width - 40):.1f},{height - 20 - y / top * (height - 40):.1f}"
                       for r, y in zip(curve.rates, ys))
        lines.append(f'<polyline fill="none" stroke="black" points="{pts}"><title>{name}</title></polyline>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- similarity


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray
    tap: str
    diag_mean: float = field(init=False)

    def __post_init__(self):
        self.diag_mean = float(np.mean(np.diag(self.matrix)))

    def as_dict(self) -> dict:
        return {"tap": self.tap, "n": int(self.matrix.shape[0]), "diag_mean": self.diag_mean,
                "matrix": [float(x) for x in self.matrix.reshape(-1)]}


def pooled_taps(model: AVModel, utts: Sequence[Utterance], tap: str, input_mode="complete",
                batch_size: int = 64) -> np.ndarray:
    """Time-mean of a tap over each utterance's valid frames, [n, d]."""
    path = _path_for(model, input_mode)
    utts = prepare_inputs(utts, input_mode)
    rows = []
    with nx.no_grad():
        for batch in _batches(utts, batch_size):
            video = None if path == "audio_only" else batch.video
            _, _, taps = encode(model, batch.audio, batch.audio_lens, video, batch.video_lens, path)
            if tap not in taps:
                raise ContractError(f"tap {tap!r} not produced on the {path} path")
            lens = batch.video_lens if tap.startswith("video") else batch.audio_lens
            x = taps[tap].data
            mask = (np.arange(x.shape[1])[None, :] < lens[:, None])[..., None]
            rows.append((x * mask).sum(axis=1) / np.maximum(lens, 1)[:, None])
    return np.concatenate(rows, axis=0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.clip(an @ bn.T, -1.0, 1.0)


def similarity_matrix(model_a: AVModel, model_b: AVModel, utts: Sequence[Utterance], tap: str = "fusion_out",
                      input_mode_a="complete", input_mode_b="complete") -> SimilarityMatrix:
    a = pooled_taps(model_a, utts, tap, input_mode_a)
    b = pooled_taps(model_b, utts, tap, input_mode_b)
    return SimilarityMatrix(cosine_matrix(a, b), tap)


def bias_proxy_report(model: AVModel, utts: Sequence[Utterance], reference: AVModel | None = None,
                      config: DecodeConfig = DecodeConfig(), tap: str = "fusion_out") -> dict:
    """Behavioural stand-ins for modality reliance.

    Keys: cer_complete, cer_video_missing, cer_audio_missing (whole stream
    zeroed), diag_mean_complete / diag_mean_video_missing (fusion tap
    similarity to ``reference``, None without one) and tap.
    """
    video_off = DropoutSpec("utterance", 1.0, "video")
    audio_off = DropoutSpec("utterance", 1.0, "audio")
    report = {
        "cer_complete": model_cer(model, utts, config),
        "cer_video_missing": model_cer(model, utts, config, video_off),
        "cer_audio_missing": model_cer(model, utts, config, audio_off),
        "diag_mean_complete": None,
        "diag_mean_video_missing": None,
        "tap": tap,
    }
    if reference is not None:
        report["diag_mean_complete"] = similarity_matrix(model, reference, utts, tap).diag_mean
        report["diag_mean_video_missing"] = similarity_matrix(model, reference, utts, tap, video_off).diag_mean
    return report


def dumps(obj) -> str:
    """Canonical JSON used for every report file."""
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"
