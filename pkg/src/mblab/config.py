"""Flat dotted-key run configuration (``section.key = value``)."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .corpus import CorpusSpec
from .model import ModelConfig

SECTIONS = ("corpus", "model", "train", "eval")

TRAIN_DEFAULTS = {
    "epochs": 10,
    "batch_size": 32,
    "learning_rate": 1e-3,
    "warmup_steps": 200,
    "d_prob": 0.0,
    "rate": 0.5,
    "method_pool": ("segment", "utterance", "interval", "per_frame"),
    "lam": 0.7,
    "w_kd": 0.1,
    "temperature": 1.0,
    "kd_taps": ("fusion_out",),
    "augment": False,
    "val_fraction": 0.1,
    "validate_every_epoch": True,
    "frozen_scopes": (),
    "disable_audio_to_video": False,
    "adapter_rank": 8,
    "adapter_insert_part": "encoder",
}

EVAL_DEFAULTS = {
    "mode": "ctc_greedy",
    "beam_width": 4,
    "max_decode_len": 16,
    "n_utterances": 0,  # 0 = whole corpus
}


class RunConfigError(ValueError):
    pass


def _defaults() -> dict:
    d = {"seed": 0}
    for f in fields(CorpusSpec):
        if f.name != "seed":
            d[f"corpus.{f.name}"] = f.default
    for f in fields(ModelConfig):
        d[f"model.{f.name}"] = f.default
    d.update({f"train.{k}": v for k, v in TRAIN_DEFAULTS.items()})
    d.update({f"eval.{k}": v for k, v in EVAL_DEFAULTS.items()})
    return d


DEFAULTS = _defaults()


def _coerce(key: str, text: str):
    default = DEFAULTS[key]
    t = text.strip()
    try:
        if isinstance(default, bool):
            if t.lower() not in ("true", "false"):
                raise ValueError(t)
            return t.lower() == "true"
        if isinstance(default, tuple):
            items = [s.strip() for s in t.split(",") if s.strip()]
            if key == "model.intermediate_ctc_taps":
                return tuple(int(s) for s in items)
            return tuple(items)
        if default is None or key == "model.cross_attn_window":
            return None if t.lower() == "none" else float(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        return t
    except ValueError:
        raise RunConfigError(f"bad value {text!r} for {key}") from None


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration: defaults, then file entries, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise RunConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(**self.section("corpus"), seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.section("model"))

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self.values.items()))

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise RunConfigError(f"line {n}: expected 'key = value'")
            k, v = line.split("=", 1)
            cfg.set(k.strip(), v)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))
