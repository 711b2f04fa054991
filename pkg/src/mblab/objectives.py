"""Training losses: CTC, attention cross-entropy, their multitask blend,
frame-level feature distillation and the combined student objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

BLANK = 0


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.7  # CTC share of the multitask loss
    w_kd: float = 0.1  # distillation share of the student loss
    temperature: float = 1.0
    kd_taps: tuple = ("fusion_out",)

    def __post_init__(self):
        object.__setattr__(self, "kd_taps", tuple(self.kd_taps))
        if not 0.0 <= self.lam <= 1.0 or not 0.0 <= self.w_kd <= 1.0:
            raise ValueError(f"weights outside [0, 1]: lam={self.lam}, w_kd={self.w_kd}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------- CTC


def _lse(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(x - safe) for x in xs))


def ctc_min_frames(labels) -> int:
    """Frames needed: one per label plus a blank between each repeated pair."""
    labels = np.asarray(labels)
    return int(len(labels) + np.count_nonzero(labels[1:] == labels[:-1]))


def _extend(labels: list, s_max: int) -> tuple:
    b = len(labels)
    ext = np.zeros((b, s_max), dtype=np.int64)
    valid = np.zeros((b, s_max), dtype=bool)
    skip = np.zeros((b, s_max), dtype=bool)
    for i, y in enumerate(labels):
        s = 2 * len(y) + 1
        ext[i, 1:s:2] = y
        valid[i, :s] = True
        if len(y) > 1:
            odd = np.arange(3, s, 2)
            skip[i, odd] = ext[i, odd] != ext[i, odd - 2]
    return ext, valid, skip


def ctc_loss_batch(log_probs: Tensor, labels: list, lengths=None) -> tuple:
    """Per-utterance CTC negative log-likelihood.

    ``log_probs`` is [B, T, C] (already log-normalised, blank = 0). Returns
    ``(losses [B], feasible [B] bool)``; infeasible utterances get +inf and a
    zero gradient.
    """
    lp = log_probs.data
    b, t_max, n_cls = lp.shape
    lengths = np.full(b, t_max) if lengths is None else np.asarray(lengths, dtype=np.int64)
    labels = [np.asarray(y, dtype=np.int64) for y in labels]
    if len(labels) != b:
        raise ContractError(f"ctc_loss: {len(labels)} label sequences for batch of {b}")
    for y in labels:
        if y.size and (y.min() <= BLANK or y.max() >= n_cls):
            raise ContractError("ctc_loss: labels must lie in 1..C-1")
    s_max = 2 * max((len(y) for y in labels), default=0) + 1
    ext, valid, skip = _extend(labels, s_max)
    rows = np.arange(b)[:, None]
    emit = lp[rows, :, ext].transpose(0, 2, 1)  # [B, T, S]
    emit = np.where(valid[:, None, :], emit, -np.inf)

    ninf = np.full((b, s_max), -np.inf)
    alpha = np.full((b, t_max, s_max), -np.inf)
    a = ninf.copy()
    a[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        a[:, 1] = emit[:, 0, 1]
    alpha[:, 0] = a
    for t in range(1, t_max):
        prev1 = np.concatenate([ninf[:, :1], a[:, :-1]], axis=1)
        prev2 = np.where(skip, np.concatenate([ninf[:, :2], a[:, :-2]], axis=1), -np.inf)
        a = _lse(a, prev1, prev2) + emit[:, t]
        alpha[:, t] = a

    s_last = np.array([2 * len(y) for y in labels])
    last_t = np.clip(lengths - 1, 0, None)
    fin = alpha[np.arange(b), last_t]
    end1 = fin[np.arange(b), s_last]
    end2 = np.where(s_last > 0, fin[np.arange(b), np.maximum(s_last - 1, 0)], -np.inf)
    log_p = _lse(end1, end2)
    feasible = np.isfinite(log_p) & (lengths > 0)
    losses = np.where(feasible, -log_p, np.inf)

    def bw(g):
        beta = np.full((b, t_max, s_max), -np.inf)
        nb = ninf.copy()
        init = ninf.copy()
        init[np.arange(b), s_last] = 0.0
        has_label = s_last > 0
        init[np.flatnonzero(has_label), s_last[has_label] - 1] = 0.0
        for t in range(t_max - 1, -1, -1):
            next1 = np.concatenate([nb[:, 1:], ninf[:, :1]], axis=1)
            skip_next = np.concatenate([skip[:, 2:], np.zeros((b, 2), dtype=bool)], axis=1)[:, :s_max]
            next2 = np.where(skip_next, np.concatenate([nb[:, 2:], ninf[:, :2]], axis=1)[:, :s_max], -np.inf)
            rec = _lse(nb, next1, next2)
            here = np.where((t == lengths - 1)[:, None], init, np.where((t < lengths - 1)[:, None], rec, -np.inf))
            nb = here + emit[:, t]
            beta[:, t] = nb
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - emit - np.where(feasible, log_p, 0.0)[:, None, None])
        occ = np.where(np.isfinite(occ) & feasible[:, None, None], occ, 0.0)
        onehot = np.zeros((b, s_max, n_cls))
        onehot[rows, np.arange(s_max)[None, :], ext] = valid
        grad = -np.einsum("bts,bsc->btc", occ, onehot)
        return (grad * np.where(feasible, g, 0.0)[:, None, None],)

    out = nx.custom_op(losses, (log_probs,), bw, "ctc_loss", allow_nonfinite=True)
    return out, feasible


def ctc_loss(log_probs: Tensor, labels) -> Tensor:
    """CTC negative log-likelihood for a single [T, C] log-probability matrix."""
    lp = nx.reshape(log_probs, (1,) + log_probs.shape)
    losses, _ = ctc_loss_batch(lp, [labels])
    return nx.custom_op(losses.data.reshape(()), (losses,), lambda g: (g.reshape(1),), "reshape",
                        allow_nonfinite=True)


def ctc_mean_loss(logits: Tensor, labels: list, lengths) -> Tensor:
    """Mean CTC loss over feasible utterances from unnormalised logits."""
    losses, feasible = ctc_loss_batch(nx.log_softmax(logits, axis=-1), labels, lengths)
    if not feasible.any():
        raise ContractError("ctc: no feasible utterance in batch")
    if not feasible.all():
        losses = nx.slice_(losses, np.flatnonzero(feasible))
    return nx.mean(losses)


# ---------------------------------------------------------------- attention


def attention_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy; target entries < 0 are padding."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"attention_ce: logits {logits.shape} vs targets {targets.shape}")
    keep = targets >= 0
    n = int(keep.sum())
    if n == 0:
        raise ContractError("attention_ce: every position is masked")
    onehot = np.zeros(logits.shape)
    idx = np.nonzero(keep)
    onehot[idx + (targets[idx],)] = 1.0
    return nx.scale(nx.sum_(nx.mul(nx.log_softmax(logits, axis=-1), onehot)), -1.0 / n)


def multitask_loss(out, labels: list, weights: LossWeights = LossWeights(), parts: dict | None = None) -> Tensor:
    """lam * mean over CTC taps + (1 - lam) * attention CE."""
    from .model import teacher_forcing_targets

    lam = weights.lam
    ctc = att = None
    if lam > 0:
        taps = [ctc_mean_loss(lg, labels, out.audio_lens) for _, lg in sorted(out.ctc_logits.items())]
        ctc = taps[0] if len(taps) == 1 else nx.scale(sum(taps[1:], taps[0]), 1.0 / len(taps))
    if lam < 1:
        if out.decoder_logits is None:
            raise ContractError("multitask_loss: decoder logits missing")
        _, ys_out, _ = teacher_forcing_targets(labels, out.decoder_logits.shape[-1] - 1)
        att = attention_ce(out.decoder_logits, ys_out)
    if parts is not None:
        parts["ctc"] = ctc.item() if ctc is not None else float("nan")
        parts["att"] = att.item() if att is not None else float("nan")
    if att is None:
        return ctc
    if ctc is None:
        return att
    return nx.scale(ctc, lam) + nx.scale(att, 1.0 - lam)


# ---------------------------------------------------------------- distillation


def _frame_kd(teacher: np.ndarray, student: Tensor, temperature: float, mask: np.ndarray | None) -> Tensor:
    z = teacher / temperature
    z = z - z.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    log_q = nx.log_softmax(nx.scale(student, 1.0 / temperature), axis=-1)
    kl = nx.sum_(nx.mul(p, nx.sub(log_p, log_q)), axis=-1)  # [..., T]
    if mask is None:
        return nx.mean(kl)
    mask = np.asarray(mask, dtype=float)
    return nx.scale(nx.sum_(nx.mul(kl, mask)), 1.0 / mask.sum())


def kd_loss(teacher_taps: dict, student_taps: dict, temperature: float = 1.0, tap_tags=("fusion_out",),
            masks: dict | None = None) -> Tensor:
    """Frame-level KL(softmax(teacher/T) || softmax(student/T)) over features, times T^2.

    Teacher taps are constants (arrays or tensors whose graph is ignored).
    ``masks`` optionally maps tags to [B, T] validity masks.
    """
    tap_tags = tuple(tap_tags)
    if not tap_tags:
        raise ContractError("kd_loss: no tap tags")
    terms = []
    for tag in tap_tags:
        if tag not in teacher_taps or tag not in student_taps:
            raise ContractError(f"kd_loss: tap {tag!r} missing on one side")
        t = teacher_taps[tag]
        t = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        s = nx.as_tensor(student_taps[tag])
        if t.shape != s.shape:
            raise ContractError(f"kd_loss: tap {tag!r} shapes {t.shape} vs {s.shape}")
        terms.append(_frame_kd(t, s, temperature, None if masks is None else masks.get(tag)))
    total = terms[0] if len(terms) == 1 else sum(terms[1:], terms[0])
    return nx.scale(total, temperature**2 / len(terms))


def tap_masks(out) -> dict:
    """Frame-validity masks for each tap in a forward output."""
    masks = {}
    for tag, t in out.taps.items():
        lens = out.video_lens if tag.startswith("video") else out.audio_lens
        masks[tag] = np.arange(t.shape[1])[None, :] < np.asarray(lens)[:, None]
    return masks


def student_loss(out_st, teacher_taps: dict, labels: list, weights: LossWeights = LossWeights(),
                 parts: dict | None = None) -> Tensor:
    """w_kd * kd_loss + (1 - w_kd) * multitask_loss; the endpoints skip the unused term."""
    w = weights.w_kd
    kd = mtl = None
    if w > 0:
        kd = kd_loss(teacher_taps, out_st.taps, weights.temperature, weights.kd_taps, tap_masks(out_st))
    if w < 1:
        mtl = multitask_loss(out_st, labels, weights, parts)
    if parts is not None:
        parts["kd"] = kd.item() if kd is not None else float("nan")
    if kd is None:
        return mtl
    if mtl is None:
        return kd
    return nx.scale(kd, w) + nx.scale(mtl, 1.0 - w)
