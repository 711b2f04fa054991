"""Training recipes: audio-only reference, complete-input teacher, plain
frame-dropout students, distillation-anchored students and adapters."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import (Corpus, TrainingDropoutPolicy, Utterance, apply_training_policy, collate,
                     concat_utterances, speed_perturb, substream)
from .evaluation import DecodeConfig, model_cer
from .model import (AVModel, ModelConfig, ModelStateError, build, forward_audio_only, forward_full,
                    set_adapter_active)
from .numerics import AdamState, ContractError, adam_step, warmup_inverse_sqrt
from .objectives import LossWeights, multitask_loss, student_loss

KINDS = ("audio_only", "teacher", "plain_dropout", "mda_kd", "adapter")


class RecipeError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainRecipe:
    kind: str = "teacher"
    init_from: str | None = None  # provenance only; the caller passes the model
    dropout_policy: TrainingDropoutPolicy = TrainingDropoutPolicy()
    weights: LossWeights = LossWeights()
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    seed: int = 0
    frozen_scopes: tuple = ()
    flow_flags: tuple = ()  # (("disable_audio_to_video", True), ...)
    augment: bool = False
    val_fraction: float = 0.1
    validate_every_epoch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "frozen_scopes", tuple(self.frozen_scopes))
        flags = self.flow_flags.items() if isinstance(self.flow_flags, dict) else self.flow_flags
        object.__setattr__(self, "flow_flags", tuple(sorted((str(k), bool(v)) for k, v in flags)))

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise RecipeError(f"unknown recipe kind {self.kind!r}")
        if self.kind in ("teacher", "audio_only", "adapter") and self.dropout_policy.d_prob > 0:
            raise RecipeError(f"{self.kind} recipe trains on complete pairs; d_prob must be 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise RecipeError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise RecipeError("val_fraction must lie in [0, 1)")
        for k, _ in self.flow_flags:
            if k not in ("disable_audio_to_video", "disable_video"):
                raise RecipeError(f"unknown flow flag {k!r}")

    def echo(self) -> dict:
        d = asdict(self)
        d["flow_flags"] = dict(self.flow_flags)
        return d


@dataclass
class TrainLog:
    recipe: dict
    seed: int
    records: list = field(default_factory=list)  # one dict per optimizer step
    val_cer: list = field(default_factory=list)  # one per epoch
    samples_per_epoch: int = 0
    wall_time: float = 0.0

    def epoch_means(self, key: str) -> list:
        by_epoch = {}
        for r in self.records:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "epoch", "ctc", "att", "kd", "total", "lr"])
            for r in self.records:
                w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in ("ctc", "att", "kd", "total", "lr")])
        summary = {"recipe": self.recipe, "seed": self.seed, "steps": len(self.records),
                   "val_cer": self.val_cer, "samples_per_epoch": self.samples_per_epoch}
        (d / "train_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- loop


def _epoch_seed(seed: int, epoch: int, tag: str) -> int:
    return int(substream(seed, tag, epoch).integers(2**62))


def _augmented(utts: list, seed: int, epoch: int) -> list:
    """Originals plus one augmented copy each: speed 0.9/1.1 or concatenation with a neighbour."""
    rng = substream(seed, "augment", epoch)
    out = list(utts)
    for i, u in enumerate(utts):
        choice = int(rng.integers(3))
        if choice == 2 and len(utts) > 1:
            out.append(concat_utterances(u, utts[(i + 1) % len(utts)]))
        else:
            out.append(speed_perturb(u, (0.9, 1.1)[choice % 2]))
    return out


def _fits(model: AVModel, u: Utterance) -> bool:
    return len(u.audio) <= model.config.max_len and len(u.video) <= model.config.max_len


def _train_loop(model: AVModel, corpus: Corpus, recipe: TrainRecipe, trainable: list, step_loss,
                val_mode="complete") -> TrainLog:
    """Shared optimizer loop. ``step_loss(batch_utts, epoch, parts)`` returns the scalar loss."""
    recipe.validate()
    train, val = corpus.split_validation(recipe.val_fraction, recipe.seed) if recipe.val_fraction else (corpus, None)
    log = TrainLog(recipe.echo(), recipe.seed)
    state = AdamState(learning_rate=recipe.learning_rate)
    params = model.params
    frozen = tuple(recipe.frozen_scopes)
    names = [n for n in trainable if not n.startswith(frozen)] if frozen else list(trainable)
    tensors = [params[n] for n in names]
    start = time.perf_counter()
    step = 0
    for epoch in range(recipe.epochs):
        utts = list(train.utterances)
        if recipe.augment:
            utts = [u for u in _augmented(utts, recipe.seed, epoch) if _fits(model, u)]
        log.samples_per_epoch = len(utts)
        order = substream(recipe.seed, "shuffle", epoch).permutation(len(utts))
        for i in range(0, len(order), recipe.batch_size):
            step += 1
            batch = [utts[j] for j in order[i:i + recipe.batch_size]]
            lr = warmup_inverse_sqrt(step, recipe.learning_rate, recipe.warmup_steps)
            parts = {}
            try:
                loss = step_loss(batch, epoch, parts)
            except nx.NumericError as e:
                raise TrainingAborted(step, str(e)) from None
            if not np.isfinite(loss.item()):
                raise TrainingAborted(step)
            grads = nx.grad(loss, tensors)
            if not all(np.isfinite(g).all() for g in grads):
                raise TrainingAborted(step, "non-finite gradient")
            adam_step(params, dict(zip(names, grads)), state, lr)
            for t in tensors:
                t.data[...] = t.data.astype(np.float32)
            log.records.append({"step": step, "epoch": epoch + 1, "ctc": parts.get("ctc", np.nan),
                                "att": parts.get("att", np.nan), "kd": parts.get("kd", np.nan),
                                "total": loss.item(), "lr": lr})
        if recipe.validate_every_epoch and val is not None and len(val):
            log.val_cer.append(model_cer(model, val.utterances, DecodeConfig(), val_mode))
    log.wall_time = time.perf_counter() - start
    return log


def _policy_batch(batch: list, recipe: TrainRecipe, epoch: int) -> list:
    if recipe.dropout_policy.d_prob == 0:
        return batch
    return apply_training_policy(batch, recipe.dropout_policy, _epoch_seed(recipe.seed, epoch, "policy"))


def _with_flags(model: AVModel, recipe: TrainRecipe) -> AVModel:
    flags = dict(recipe.flow_flags)
    flags.setdefault("disable_video", recipe.kind == "audio_only")
    model.config = replace(model.config, **flags)
    return model


def _multitask_step(model: AVModel, recipe: TrainRecipe, forward):
    def step_loss(batch, epoch, parts):
        b = collate(_policy_batch(batch, recipe, epoch))
        return multitask_loss(forward(model, b), b.labels, recipe.weights, parts)

    return step_loss


# ---------------------------------------------------------------- recipes


def train_audio_only(corpus: Corpus, config: ModelConfig, recipe: TrainRecipe) -> tuple:
    """Audio-only reference: the full model with its video path disabled."""
    if recipe.kind != "audio_only":
        raise RecipeError(f"expected an audio_only recipe, got {recipe.kind!r}")
    model = _with_flags(build(replace(config, disable_video=True), recipe.seed), recipe)
    log = _train_loop(model, corpus, recipe, model.base_names(), _multitask_step(model, recipe, forward_full))
    return model, log


def train_teacher(corpus: Corpus, config: ModelConfig, recipe: TrainRecipe, init: AVModel | None = None) -> tuple:
    """Complete-input multimodal training, from scratch or from ``init`` (e.g. the audio-only model)."""
    if recipe.kind != "teacher":
        raise RecipeError(f"expected a teacher recipe, got {recipe.kind!r}")
    recipe.validate()
    model = init.copy() if init is not None else build(config, recipe.seed)
    model.config = replace(model.config, disable_video=False)
    model = _with_flags(model, recipe)
    log = _train_loop(model, corpus, recipe, model.base_names(), _multitask_step(model, recipe, forward_full))
    return model, log


def train_plain_dropout(corpus: Corpus, config: ModelConfig, recipe: TrainRecipe,
                        init: AVModel | None = None) -> tuple:
    """Multitask training on frame-dropout-augmented video."""
    if recipe.kind != "plain_dropout":
        raise RecipeError(f"expected a plain_dropout recipe, got {recipe.kind!r}")
    model = init.copy() if init is not None else build(config, recipe.seed)
    model.config = replace(model.config, disable_video=False)
    model = _with_flags(model, recipe)
    log = _train_loop(model, corpus, recipe, model.base_names(), _multitask_step(model, recipe, forward_full))
    return model, log


def train_student_mda_kd(corpus: Corpus, teacher: AVModel, recipe: TrainRecipe) -> tuple:
    """Student initialised from the frozen teacher; the teacher sees complete
    input, the student the dropout-augmented copy of the same batch."""
    if recipe.kind != "mda_kd":
        raise RecipeError(f"expected an mda_kd recipe, got {recipe.kind!r}")
    if teacher is None:
        raise RecipeError("mda_kd requires a teacher checkpoint")
    if teacher.config.disable_video:
        raise ContractError("teacher must be a multimodal model")
    student = _with_flags(teacher.copy(), recipe)
    if replace(student.config, disable_audio_to_video=False) != replace(teacher.config, disable_audio_to_video=False):
        raise ContractError("teacher and student configs differ")
    tags = recipe.weights.kd_taps

    def step_loss(batch, epoch, parts):
        complete = collate(batch)
        b = collate(_policy_batch(batch, recipe, epoch))
        teacher_taps = {}
        if recipe.weights.w_kd > 0:
            with nx.no_grad():
                out_t = forward_full(teacher, complete, with_decoder=False)
            teacher_taps = {t: out_t.taps[t].data for t in tags}
        out_s = forward_full(student, b, with_decoder=recipe.weights.w_kd < 1)
        return student_loss(out_s, teacher_taps, b.labels, recipe.weights, parts)

    log = _train_loop(student, corpus, recipe, student.base_names(), step_loss)
    return student, log


def train_adapters(model: AVModel, corpus: Corpus, recipe: TrainRecipe) -> tuple:
    """Update only adapter tensors on the audio-only path (video never read)."""
    if recipe.kind != "adapter":
        raise RecipeError(f"expected an adapter recipe, got {recipe.kind!r}")
    if not model.has_adapters:
        raise ModelStateError("adapter recipe needs a model with attached adapters")
    model = model.copy()
    set_adapter_active(model, True)
    base_before = model.checksum(model.base_names())
    log = _train_loop(model, corpus, recipe, model.adapter_names(), _multitask_step(model, recipe, forward_audio_only),
                      val_mode="audio_only")
    if model.checksum(model.base_names()) != base_before:
        raise ModelStateError("frozen base tensors changed during adapter training")
    return model, log


def run_recipe(recipe: TrainRecipe, corpus: Corpus, config: ModelConfig | None = None,
               init: AVModel | None = None, teacher: AVModel | None = None) -> tuple:
    """Dispatch on ``recipe.kind``."""
    recipe.validate()
    config = config or (init.config if init is not None else ModelConfig())
    if recipe.kind == "audio_only":
        return train_audio_only(corpus, config, recipe)
    if recipe.kind == "teacher":
        return train_teacher(corpus, config, recipe, init)
    if recipe.kind == "plain_dropout":
        return train_plain_dropout(corpus, config, recipe, init)
    if recipe.kind == "mda_kd":
        return train_student_mda_kd(corpus, teacher, recipe)
    if init is None:
        raise RecipeError("adapter recipe needs an initial model with adapters")
    return train_adapters(init, corpus, recipe)
