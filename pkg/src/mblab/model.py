"""Dual-branch audio-visual recogniser built on :mod:`mblab.numerics`.

Layout (all blocks pre-norm, residual)::

    audio frames -> linear + pos -> N_a self-attention blocks ----------+
                                                                        |
    video frames -> linear + pos -> N_v self-attention blocks --+       |
                  [video_frontend_out] [video_block_1]          |       |
                                                                v       v
                      fusion block(s): per-stream self-attention, audio<-video and
                      video<-audio cross-attention; the audio-rate stream is merged
                      with its video read-out by concat-then-project     [fusion_out]
                                                                        |
                      joint encoder, M blocks, CTC heads at tapped blocks  [joint_mid, joint_out]
                                                                        |
                      attention decoder, K blocks -> logits over V + 2 symbols

Symbol ids: 0 is the CTC blank, 1..V are tokens, V + 1 is the shared
start/end symbol of the decoder.

The audio-only path never touches the video branch and skips both
cross-attentions; the merge projection then only sees the audio half.
Low-rank adapters (``W0 + B A``) attach to audio-branch and joint-encoder
self-attention projections and are applied only on that path.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import Batch, CorpusFormatError, pack_header, read_manifest, substream
from .numerics import Tensor

CHECKPOINT_MAGIC = b"MBLABCK1"
TAP_TAGS = ("video_frontend_out", "video_block_1", "fusion_out", "joint_mid", "joint_out")
NEG_INF = -1e9


class ConfigError(ValueError):
    pass


class ModelStateError(RuntimeError):
    pass


class CheckpointFormatError(CorpusFormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_audio_blocks: int = 2
    n_video_blocks: int = 2
    n_fusion_blocks: int = 1
    n_joint_blocks: int = 2
    n_decoder_blocks: int = 2
    vocab_size_with_blank: int = 13
    max_len: int = 64
    d_audio: int = 16
    d_video: int = 12
    intermediate_ctc_taps: tuple = (1, 2)
    audio_time_scale: float = 1.0
    video_time_scale: float = 2.0
    cross_attn_window: float | None = 2.0
    disable_video: bool = False
    disable_audio_to_video: bool = False

    def __post_init__(self):
        object.__setattr__(self, "intermediate_ctc_taps", tuple(int(t) for t in self.intermediate_ctc_taps))

    @property
    def n_symbols(self) -> int:
        """Decoder output size: blank slot, V tokens, shared sos/eos."""
        return self.vocab_size_with_blank + 1

    @property
    def eos(self) -> int:
        return self.vocab_size_with_blank

    def validate(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        counts = (self.n_audio_blocks, self.n_video_blocks, self.n_fusion_blocks,
                  self.n_joint_blocks, self.n_decoder_blocks)
        if min(counts) < 1:
            raise ConfigError("all block counts must be >= 1")
        if self.vocab_size_with_blank < 2 or self.d_ffn < 1 or self.max_len < 1:
            raise ConfigError("vocab_size_with_blank >= 2, d_ffn >= 1, max_len >= 1 required")
        if not self.intermediate_ctc_taps or not set(self.intermediate_ctc_taps) <= set(range(1, self.n_joint_blocks + 1)):
            raise ConfigError(f"ctc taps {self.intermediate_ctc_taps} not within 1..{self.n_joint_blocks}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    insert_part: str = "encoder"
    scaling: float | None = None

    @property
    def scale(self) -> float:
        return 1.0 / self.rank if self.scaling is None else float(self.scaling)

    def validate(self, d_model: int) -> None:
        if not 1 <= self.rank < d_model:
            raise ConfigError(f"adapter rank {self.rank} must satisfy 1 <= r < d_model={d_model}")
        if self.insert_part not in ("encoder", "encoder_and_decoder"):
            raise ConfigError(f"unknown insert_part {self.insert_part!r}")


@dataclass
class ForwardOutput:
    decoder_logits: Tensor | None
    ctc_logits: dict  # joint block index -> [B, T_a, V+1]
    taps: dict  # tag -> [B, T, d]
    audio_lens: np.ndarray
    video_lens: np.ndarray | None
    path: str


# ---------------------------------------------------------------- parameters


def _param_shapes(cfg: ModelConfig) -> dict:
    d, f, c = cfg.d_model, cfg.d_ffn, cfg.vocab_size_with_blank
    shapes = {}

    def lin(name, din, dout, bias=True):
        shapes[f"{name}.W"] = (din, dout)
        if bias:
            shapes[f"{name}.b"] = (dout,)

    def ln(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def attn(name):
        for p in "qkvo":
            lin(f"{name}.{p}", d, d)

    def ffn(name):
        lin(f"{name}.fc1", d, f)
        lin(f"{name}.fc2", f, d)

    def enc_block(name):
        ln(f"{name}.ln1")
        attn(f"{name}.attn")
        ln(f"{name}.ln2")
        ffn(f"{name}.ffn")

    lin("audio_frontend", cfg.d_audio, d)
    shapes["audio_pos"] = (cfg.max_len, d)
    for i in range(cfg.n_audio_blocks):
        enc_block(f"audio.{i}")
    lin("video_frontend", cfg.d_video, d)
    shapes["video_pos"] = (cfg.max_len, d)
    for i in range(cfg.n_video_blocks):
        enc_block(f"video.{i}")
    for i in range(cfg.n_fusion_blocks):
        p = f"fusion.{i}"
        last = i == cfg.n_fusion_blocks - 1
        ln(f"{p}.ln_a")
        attn(f"{p}.sa_a")
        ln(f"{p}.ln_v")
        attn(f"{p}.sa_v")
        ln(f"{p}.lnx_a")
        ln(f"{p}.lnx_v")
        attn(f"{p}.ca_av")
        lin(f"{p}.merge", 2 * d, d)
        ln(f"{p}.ln_fa")
        ffn(f"{p}.ffn_a")
        if not last:
            attn(f"{p}.ca_va")
            ln(f"{p}.ln_fv")
            ffn(f"{p}.ffn_v")
    for i in range(cfg.n_joint_blocks):
        enc_block(f"joint.{i}")
    ln("enc_norm")
    lin("ctc_head", d, c)
    shapes["dec_embed"] = (cfg.n_symbols, d)
    shapes["dec_pos"] = (cfg.max_len, d)
    for i in range(cfg.n_decoder_blocks):
        p = f"decoder.{i}"
        ln(f"{p}.ln1")
        attn(f"{p}.self_attn")
        ln(f"{p}.ln2")
        attn(f"{p}.cross_attn")
        ln(f"{p}.ln3")
        ffn(f"{p}.ffn")
    ln("dec_norm")
    lin("dec_out", d, cfg.n_symbols)
    return shapes


def _init_param(name: str, shape: tuple, seed: int, d_model: int) -> np.ndarray:
    rng = substream(seed, "init", name)
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith(".b") or name.endswith(".B"):
        return np.zeros(shape)
    if name.endswith("_pos") or name == "dec_embed":
        return rng.normal(0.0, 1.0 / math.sqrt(d_model), shape)
    bound = 1.0 / math.sqrt(shape[0])
    w = rng.uniform(-bound, bound, shape)
    if ".merge.W" in name:
        w[shape[0] // 2:] = 0.0  # video read-out rows start silent
    return w


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def adapter_targets(cfg: ModelConfig, insert_part: str) -> list:
    """Base projection names that receive a low-rank delta."""
    names = [f"audio.{i}.attn.{p}" for i in range(cfg.n_audio_blocks) for p in "qkvo"]
    names += [f"joint.{i}.attn.{p}" for i in range(cfg.n_joint_blocks) for p in "qkvo"]
    if insert_part == "encoder_and_decoder":
        names += [f"decoder.{i}.self_attn.{p}" for i in range(cfg.n_decoder_blocks) for p in "qkvo"]
    return names


class AVModel:
    """Parameter store plus flags; computation lives in module-level functions."""

    def __init__(self, config: ModelConfig, params: dict, init_seed: int = 0):
        self.config = config
        self.params = params
        self.init_seed = init_seed
        self.adapter_config: AdapterConfig | None = None
        self.adapter_active = False
        self.frozen_base = False

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def has_adapters(self) -> bool:
        return self.adapter_config is not None

    def base_names(self) -> list:
        return [n for n in self.params if not n.startswith("adapter.")]

    def adapter_names(self) -> list:
        return [n for n in self.params if n.startswith("adapter.")]

    def n_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    def quantize(self) -> None:
        """Round every parameter to float32 precision (checkpoint storage precision)."""
        for p in self.params.values():
            p.data[...] = _f32(p.data)

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "AVModel":
        m = AVModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
                    self.init_seed)
        m.adapter_config = self.adapter_config
        m.adapter_active = self.adapter_active
        m.frozen_base = self.frozen_base
        return m


def build(config: ModelConfig, init_seed: int = 0) -> AVModel:
    """Initialise parameters: uniform +-1/sqrt(fan_in) projections, zero biases,
    unit layer-norm gains, N(0, 1/d) embeddings; each tensor has its own
    substream keyed by ``(init_seed, name)``."""
    config.validate()
    params = {}
    for name, shape in _param_shapes(config).items():
        params[name] = Tensor(_f32(_init_param(name, shape, init_seed, config.d_model)), requires_grad=True, name=name)
    return AVModel(config, params, init_seed)


def insert_adapters(model: AVModel, adapter_config: AdapterConfig) -> AVModel:
    """Attach ``A [r x d]`` (random) and ``B [d x r]`` (zeros) to every target projection."""
    if model.has_adapters:
        raise ModelStateError("adapters already attached")
    cfg = model.config
    adapter_config.validate(cfg.d_model)
    r = adapter_config.rank
    for t in adapter_targets(cfg, adapter_config.insert_part):
        din, dout = model.params[f"{t}.W"].shape
        a = substream(model.init_seed, "init", f"adapter.{t}.A").uniform(-1 / math.sqrt(r), 1 / math.sqrt(r), (r, dout))
        model.params[f"adapter.{t}.A"] = Tensor(_f32(a), requires_grad=True, name=f"adapter.{t}.A")
        model.params[f"adapter.{t}.B"] = Tensor(np.zeros((din, r)), requires_grad=True, name=f"adapter.{t}.B")
    model.adapter_config = adapter_config
    model.frozen_base = True
    return model


def set_adapter_active(model: AVModel, active: bool) -> AVModel:
    if not model.has_adapters:
        raise ModelStateError("no adapters attached")
    model.adapter_active = bool(active)
    return model


# ---------------------------------------------------------------- layers


def _linear(model: AVModel, name: str, x: Tensor, lora: bool = False) -> Tensor:
    p = model.params
    y = nx.matmul(x, p[f"{name}.W"])
    if f"{name}.b" in p:
        y = y + p[f"{name}.b"]
    if lora and f"adapter.{name}.B" in p:
        delta = nx.matmul(nx.matmul(x, p[f"adapter.{name}.B"]), p[f"adapter.{name}.A"])
        y = y + nx.scale(delta, model.adapter_config.scale)
    return y


def _ln(model: AVModel, name: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, model.params[f"{name}.g"], model.params[f"{name}.b"])


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))


def _attention(model: AVModel, name: str, xq: Tensor, xkv: Tensor, add_mask: np.ndarray, lora: bool = False) -> Tensor:
    """Multi-head attention; ``add_mask`` is an additive [B|1, 1, Tq, Tk] array
    holding NEG_INF at disallowed keys plus any positional bias."""
    h = model.config.n_heads
    b, tq, d = xq.shape
    q = _split_heads(_linear(model, f"{name}.q", xq, lora), h)
    k = _split_heads(_linear(model, f"{name}.k", xkv, lora), h)
    v = _split_heads(_linear(model, f"{name}.v", xkv, lora), h)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // h))
    att = nx.softmax(scores + add_mask, axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, tq, d))
    return _linear(model, f"{name}.o", ctx, lora)


def _ffn(model: AVModel, name: str, x: Tensor) -> Tensor:
    return _linear(model, f"{name}.fc2", nx.gelu(_linear(model, f"{name}.fc1", x)))


def _enc_block(model: AVModel, name: str, x: Tensor, mask: np.ndarray, lora: bool = False) -> Tensor:
    y = _ln(model, f"{name}.ln1", x)
    x = x + _attention(model, f"{name}.attn", y, y, mask, lora)
    return x + _ffn(model, f"{name}.ffn", _ln(model, f"{name}.ln2", x))


def _key_mask(lens: np.ndarray, t: int) -> np.ndarray:
    valid = np.arange(t)[None, :] < np.asarray(lens)[:, None]
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def _cross_mask(cfg: ModelConfig, q_scale: float, k_scale: float, tq: int, k_lens: np.ndarray, tk: int) -> np.ndarray:
    m = _key_mask(k_lens, tk)
    if cfg.cross_attn_window is None:
        return m
    tq_pos = (np.arange(tq) + 0.5) * q_scale
    tk_pos = (np.arange(tk) + 0.5) * k_scale
    bias = -((tq_pos[:, None] - tk_pos[None, :]) ** 2) / (2.0 * cfg.cross_attn_window**2)
    return m + bias[None, None]


def _check_len(cfg: ModelConfig, t: int, what: str) -> None:
    if t > cfg.max_len:
        raise nx.ContractError(f"{what} length {t} exceeds max_len {cfg.max_len}")


# ---------------------------------------------------------------- forward passes


def encode(model: AVModel, audio: np.ndarray, audio_lens: np.ndarray, video: np.ndarray | None = None,
           video_lens: np.ndarray | None = None, path: str = "full") -> tuple:
    """Run the encoder stack; returns (memory, ctc_logits, taps).

    ``path`` is "full" (both branches, fusion) or "audio_only" (video branch
    and cross-attention skipped, adapter deltas applied when attached).
    """
    cfg, p = model.config, model.params
    audio = np.asarray(audio, dtype=np.float64)
    b, ta, _ = audio.shape
    _check_len(cfg, ta, "audio")
    audio_lens = np.asarray(audio_lens)
    amask = _key_mask(audio_lens, ta)
    lora = path == "audio_only" and model.has_adapters
    taps = {}

    a = _linear(model, "audio_frontend", Tensor(audio)) + p["audio_pos"][:ta]
    for i in range(cfg.n_audio_blocks):
        a = _enc_block(model, f"audio.{i}", a, amask, lora)

    v = vmask = None
    if path == "full":
        video = np.asarray(video, dtype=np.float64)
        tv = video.shape[1]
        _check_len(cfg, tv, "video")
        vmask = _key_mask(video_lens, tv)
        v = _linear(model, "video_frontend", Tensor(video)) + p["video_pos"][:tv]
        taps["video_frontend_out"] = v
        for i in range(cfg.n_video_blocks):
            v = _enc_block(model, f"video.{i}", v, vmask)
            if i == 0:
                taps["video_block_1"] = v

    d = cfg.d_model
    for i in range(cfg.n_fusion_blocks):
        f = f"fusion.{i}"
        last = i == cfg.n_fusion_blocks - 1
        y = _ln(model, f"{f}.ln_a", a)
        a = a + _attention(model, f"{f}.sa_a", y, y, amask)
        xa = _ln(model, f"{f}.lnx_a", a)
        if path == "full":
            y = _ln(model, f"{f}.ln_v", v)
            v = v + _attention(model, f"{f}.sa_v", y, y, vmask)
            xv = _ln(model, f"{f}.lnx_v", v)
            ca = _attention(model, f"{f}.ca_av", xa, xv,
                            _cross_mask(cfg, cfg.audio_time_scale, cfg.video_time_scale, ta, video_lens, tv))
            merged = nx.matmul(nx.concat([xa, ca], axis=-1), p[f"{f}.merge.W"]) + p[f"{f}.merge.b"]
            if not last:
                if not cfg.disable_audio_to_video:
                    v = v + _attention(model, f"{f}.ca_va", xv, xa,
                                       _cross_mask(cfg, cfg.video_time_scale, cfg.audio_time_scale, tv, audio_lens, ta))
                v = v + _ffn(model, f"{f}.ffn_v", _ln(model, f"{f}.ln_fv", v))
        else:
            merged = nx.matmul(xa, p[f"{f}.merge.W"][:d]) + p[f"{f}.merge.b"]
        a = a + merged
        a = a + _ffn(model, f"{f}.ffn_a", _ln(model, f"{f}.ln_fa", a))
    taps["fusion_out"] = a

    ctc_logits = {}
    mid = (cfg.n_joint_blocks + 1) // 2
    x = a
    for i in range(1, cfg.n_joint_blocks + 1):
        x = _enc_block(model, f"joint.{i - 1}", x, amask, lora)
        if i == mid:
            taps["joint_mid"] = x
        if i in cfg.intermediate_ctc_taps and i != cfg.n_joint_blocks:
            ctc_logits[i] = _linear(model, "ctc_head", _ln(model, "enc_norm", x))
    memory = _ln(model, "enc_norm", x)
    taps["joint_out"] = memory
    if cfg.n_joint_blocks in cfg.intermediate_ctc_taps:
        ctc_logits[cfg.n_joint_blocks] = _linear(model, "ctc_head", memory)
    return memory, ctc_logits, taps


def decoder_logits(model: AVModel, memory: Tensor, mem_lens: np.ndarray, ys_in: np.ndarray,
                   ys_lens: np.ndarray | None = None, lora: bool = False) -> Tensor:
    """Teacher-forced decoder over input ids ``ys_in`` [B, U]."""
    cfg, p = model.config, model.params
    ys_in = np.asarray(ys_in, dtype=np.int64)
    b, u = ys_in.shape
    _check_len(cfg, u, "decoder")
    if ys_lens is None:
        ys_lens = np.full(b, u)
    causal = np.triu(np.full((u, u), NEG_INF), k=1)[None, None]
    self_mask = _key_mask(ys_lens, u) + causal
    mem_mask = _key_mask(mem_lens, memory.shape[1])
    lora_dec = lora and model.adapter_config is not None and model.adapter_config.insert_part == "encoder_and_decoder"
    x = nx.embedding_lookup(p["dec_embed"], ys_in) + p["dec_pos"][:u]
    for i in range(cfg.n_decoder_blocks):
        n = f"decoder.{i}"
        y = _ln(model, f"{n}.ln1", x)
        x = x + _attention(model, f"{n}.self_attn", y, y, self_mask, lora_dec)
        x = x + _attention(model, f"{n}.cross_attn", _ln(model, f"{n}.ln2", x), memory, mem_mask)
        x = x + _ffn(model, f"{n}.ffn", _ln(model, f"{n}.ln3", x))
    return _linear(model, "dec_out", _ln(model, "dec_norm", x))


def teacher_forcing_targets(labels: list, eos: int) -> tuple:
    """(ys_in [B, U], ys_out [B, U] with -1 padding, lengths) for label lists."""
    u = max(len(y) for y in labels) + 1
    ys_in = np.full((len(labels), u), eos, dtype=np.int64)
    ys_out = np.full((len(labels), u), -1, dtype=np.int64)
    for i, y in enumerate(labels):
        ys_in[i, 1:len(y) + 1] = y
        ys_out[i, :len(y)] = y
        ys_out[i, len(y)] = eos
    return ys_in, ys_out, np.array([len(y) + 1 for y in labels])


def _forward(model: AVModel, batch: Batch, path: str, with_decoder: bool, audio=None, video=None) -> ForwardOutput:
    audio = batch.audio if audio is None else audio
    video = batch.video if video is None else video
    memory, ctc, taps = encode(model, audio, batch.audio_lens, video, batch.video_lens, path)
    dec = None
    if with_decoder and batch.labels is not None:
        ys_in, _, ys_lens = teacher_forcing_targets(batch.labels, model.config.eos)
        dec = decoder_logits(model, memory, batch.audio_lens, ys_in, ys_lens, lora=path == "audio_only")
    return ForwardOutput(dec, ctc, taps, batch.audio_lens, batch.video_lens if path == "full" else None, path)


def forward_full(model: AVModel, batch: Batch, with_decoder: bool = True) -> ForwardOutput:
    """Multimodal path. Models built with ``disable_video`` fall back to the audio path."""
    if model.config.disable_video:
        return _forward(model, batch, "audio_only", with_decoder)
    return _forward(model, batch, "full", with_decoder)


def forward_audio_only(model: AVModel, batch: Batch, with_decoder: bool = True) -> ForwardOutput:
    """Switched path: video branch and fusion cross-attention are never executed."""
    if not model.has_adapters and not model.config.disable_video:
        raise ModelStateError("audio-only path requires attached adapters")
    return _forward(model, batch, "audio_only", with_decoder)


def forward(model: AVModel, batch: Batch, with_decoder: bool = True) -> ForwardOutput:
    """Route by adapter state: active adapters select the audio-only path."""
    if model.adapter_active:
        return forward_audio_only(model, batch, with_decoder)
    return forward_full(model, batch, with_decoder)


# ---------------------------------------------------------------- accounting


def _path_param_names(model: AVModel, path: str) -> list:
    cfg = model.config
    if path == "full" and not cfg.disable_video:
        return model.base_names()
    skip = ("video_frontend.", "video_pos", "video.")
    fusion_skip = (".sa_v.", ".ln_v.", ".lnx_v.", ".ca_av.", ".ca_va.", ".ln_fv.", ".ffn_v.")
    names = [n for n in model.base_names()
             if not n.startswith(skip) and not (n.startswith("fusion.") and any(s in n for s in fusion_skip))]
    if path == "audio_only":
        names += model.adapter_names()
    return names


def count_flops_params(model: AVModel, path: str = "full", audio_len: int = 32, video_len: int | None = None,
                       target_len: int = 9) -> dict:
    """Analytic matmul FLOPs (2 per multiply-accumulate) for one utterance.

    Counted: every projection, attention score and weighted-sum product, FFN,
    CTC heads, decoder output layer and adapter deltas on the audio-only path.
    Not counted: layer norms, softmax, GELU, additions, embedding lookups.
    """
    if path not in ("full", "audio_only"):
        raise ValueError(f"unknown path {path!r}")
    cfg = model.config
    d, f, h = cfg.d_model, cfg.d_ffn, cfg.n_heads
    ta = audio_len
    tv = video_len if video_len is not None else max(1, int(round(audio_len * cfg.audio_time_scale / cfg.video_time_scale)))
    u = target_len
    audio_only = path == "audio_only" or cfg.disable_video
    r = model.adapter_config.rank if (model.has_adapters and audio_only) else 0

    def lin(t, din, dout):
        return 2 * t * din * dout

    def attn(tq, tk, lora_r=0):
        fl = 2 * lin(tq, d, d) + 2 * lin(tk, d, d) + 2 * 2 * tq * tk * d
        if lora_r:
            fl += 2 * lin(tq, d, lora_r) + 2 * lin(tq, lora_r, d) + 2 * lin(tk, d, lora_r) + 2 * lin(tk, lora_r, d)
        return fl

    def ffn(t):
        return lin(t, d, f) + lin(t, f, d)

    def block(t, lora_r=0):
        return attn(t, t, lora_r) + ffn(t)

    total = lin(ta, cfg.d_audio, d) + sum(block(ta, r) for _ in range(cfg.n_audio_blocks))
    if not audio_only:
        total += lin(tv, cfg.d_video, d) + sum(block(tv) for _ in range(cfg.n_video_blocks))
    for i in range(cfg.n_fusion_blocks):
        last = i == cfg.n_fusion_blocks - 1
        total += attn(ta, ta) + ffn(ta)
        if audio_only:
            total += lin(ta, d, d)
        else:
            total += attn(tv, tv) + attn(ta, tv) + lin(ta, 2 * d, d)
            if not last:
                total += (0 if cfg.disable_audio_to_video else attn(tv, ta)) + ffn(tv)
    total += sum(block(ta, r) for _ in range(cfg.n_joint_blocks))
    total += len(cfg.intermediate_ctc_taps) * lin(ta, d, cfg.vocab_size_with_blank)
    r_dec = r if (r and model.adapter_config.insert_part == "encoder_and_decoder") else 0
    total += sum(attn(u, u, r_dec) + attn(u, ta) + ffn(u) for _ in range(cfg.n_decoder_blocks))
    total += lin(u, d, cfg.n_symbols)
    return {"flops": int(total), "params": model.n_params(_path_param_names(model, path))}


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: AVModel, provenance: dict | None = None) -> str:
    """Write the checkpoint file; returns its id (sha256 prefix of the bytes)."""
    tensors, chunks, off = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "dtype": "f32", "offset": off})
        chunks.append(raw)
        off += len(raw)
    manifest = {
        "config": asdict(model.config),
        "init_seed": model.init_seed,
        "adapter": None if model.adapter_config is None else {**asdict(model.adapter_config),
                                                              "active": model.adapter_active},
        "provenance": provenance or {},
        "tensors": tensors,
    }
    data = pack_header(manifest, CHECKPOINT_MAGIC) + b"".join(chunks)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()[:16]


def file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def read_checkpoint_manifest(path) -> dict:
    return read_manifest(Path(path).read_bytes(), CHECKPOINT_MAGIC, CheckpointFormatError)[0]


def load_checkpoint(path, config: ModelConfig | None = None, with_adapters: bool = True) -> AVModel:
    """Read a checkpoint. With ``config`` given, shapes are validated against a
    model built from it and the first mismatching tensor is reported."""
    raw = Path(path).read_bytes()
    manifest, base = read_manifest(raw, CHECKPOINT_MAGIC, CheckpointFormatError)
    stored = ModelConfig.from_dict(manifest["config"])
    cfg = stored if config is None else config
    model = build(cfg, manifest.get("init_seed", 0))
    ad = manifest.get("adapter")
    if ad is not None and with_adapters:
        active = ad.pop("active", False)
        insert_adapters(model, AdapterConfig(**ad))
        model.adapter_active = active
    blob = memoryview(raw)[base:]
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name.startswith("adapter.") and not model.has_adapters:
            continue
        if name not in model.params:
            raise CheckpointFormatError(f"unexpected tensor {name!r}", base + entry["offset"])
        target = model.params[name]
        if tuple(entry["shape"]) != target.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {tuple(entry['shape'])}, model expects {target.shape}",
                base + entry["offset"])
        n = int(np.prod(entry["shape"])) * 4
        if entry["offset"] + n > len(blob):
            raise CheckpointFormatError(f"tensor {name!r} truncated", base + len(blob))
        target.data[...] = np.frombuffer(blob[entry["offset"]:entry["offset"] + n], dtype="<f4").reshape(target.shape)
        seen.add(name)
    missing = [n for n in model.params if n not in seen]
    if missing:
        raise CheckpointFormatError(f"tensor {missing[0]!r} missing from checkpoint", base)
    return model
