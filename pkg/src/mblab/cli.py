"""``mblab`` command line: corpus generation, training, evaluation, analysis.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file-format
error, 4 numeric abort during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import RunConfig, RunConfigError
from .corpus import CorpusFormatError, CorpusSpecError, PolicyError, TrainingDropoutPolicy, generate_corpus, \
    read_corpus, write_corpus
from .evaluation import (DecodeConfig, corpus_cer, curve_csv, curve_svg, decode, degradation_curve, dumps,
                         similarity_matrix)
from .model import (AdapterConfig, ConfigError, ModelStateError, count_flops_params, file_id, insert_adapters,
                    load_checkpoint, save_checkpoint)
from .numerics import ContractError, NumericError
from .objectives import LossWeights
from .training import RecipeError, TrainingAborted, TrainRecipe, run_recipe

RECIPES = {"teacher": "teacher", "plain-dropout": "plain_dropout", "mda-kd": "mda_kd",
           "adapter": "adapter", "audio-only": "audio_only"}
MODES = {"complete": "complete", "audio-only": "audio_only"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- plumbing


def _resolve(args, overrides: list) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    i = 0
    while i < len(overrides):
        tok = overrides[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(overrides):
                raise UsageError(f"missing value for {tok}")
            value = overrides[i + 1]
            i += 2
        cfg.set(key, value)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    return max(1, int(os.environ.get("MBLAB_THREADS", "1")))


def _ledger(out_dir: Path, subcommand: str, cfg: RunConfig, inputs: dict, outputs: list, wall: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    key = json.dumps([subcommand, cfg.dumps(), sorted(inputs.items())], sort_keys=True).encode()
    record = {"run_id": hashlib.sha256(key).hexdigest()[:16], "subcommand": subcommand, "inputs": inputs,
              "outputs": [str(p) for p in outputs], "wall_time": round(wall, 3), "version": __version__}
    with open(out_dir / "manifest.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _sidecar(path: Path, cfg: RunConfig) -> Path:
    side = path.with_name(path.name + ".config")
    side.write_text(cfg.dumps(), encoding="utf-8")
    return side


def _utts(corpus, cfg: RunConfig) -> list:
    n = cfg["eval.n_utterances"]
    return corpus.utterances[:n] if n else corpus.utterances


def _decode_config(cfg: RunConfig) -> DecodeConfig:
    return DecodeConfig(cfg["eval.mode"], cfg["eval.beam_width"], cfg["eval.max_decode_len"])


# ---------------------------------------------------------------- subcommands


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    spec = cfg.corpus_spec()
    spec.validate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    write_corpus(out, generate_corpus(spec))
    side = _sidecar(out, cfg)
    _ledger(out.parent, "gen-corpus", cfg, {}, [out, side], time.perf_counter() - start)
    print(f"wrote {spec.n_utterances} utterances to {out} (id {file_id(out)})")
    return 0


def _recipe(kind: str, cfg: RunConfig, init_id: str | None) -> TrainRecipe:
    t = cfg.section("train")
    flags = {"disable_audio_to_video": True} if t["disable_audio_to_video"] else {}
    return TrainRecipe(
        kind=kind, init_from=init_id,
        dropout_policy=TrainingDropoutPolicy(t["d_prob"], t["method_pool"], t["rate"]),
        weights=LossWeights(t["lam"], t["w_kd"], t["temperature"], t["kd_taps"]),
        epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
        warmup_steps=t["warmup_steps"], seed=cfg.seed, frozen_scopes=t["frozen_scopes"], flow_flags=flags,
        augment=t["augment"], val_fraction=t["val_fraction"], validate_every_epoch=t["validate_every_epoch"])


def cmd_train(args, cfg: RunConfig) -> int:
    kind = RECIPES[args.recipe]
    if kind == "mda_kd" and not args.teacher:
        raise UsageError("mda-kd needs --teacher")
    if kind == "adapter" and not args.init:
        raise UsageError("adapter recipe needs an adapter-attached --init checkpoint")
    corpus = read_corpus(args.corpus)
    spec = corpus.spec
    mcfg = replace(cfg.model_config(), vocab_size_with_blank=spec.vocab_size + 1, d_audio=spec.d_audio,
                   d_video=spec.d_video)
    init = load_checkpoint(args.init) if args.init else None
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    if kind == "adapter" and not init.has_adapters:
        raise UsageError("--init checkpoint has no adapters (run attach-adapters first)")
    inputs = {"corpus": file_id(args.corpus)}
    if args.init:
        inputs["init"] = file_id(args.init)
    if args.teacher:
        inputs["teacher"] = file_id(args.teacher)
    recipe = _recipe(kind, cfg, inputs.get("init") or inputs.get("teacher"))
    start = time.perf_counter()
    model, log = run_recipe(recipe, corpus, mcfg, init, teacher)
    provenance = {"recipe": kind, "seed": cfg.seed, "parent": inputs.get("init") or inputs.get("teacher"),
                  "corpus": inputs["corpus"]}
    if kind == "adapter":
        unchanged = model.checksum(model.base_names()) == init.checksum(init.base_names())
        provenance["base_tensors_unchanged"] = unchanged
        print(f"base tensors unchanged: {str(unchanged).lower()}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cid = save_checkpoint(out, model, provenance)
    log_dir = out.with_name(out.name + ".log")
    log.write(log_dir)
    side = _sidecar(out, cfg)
    _ledger(out.parent, "train", cfg, inputs, [out, side, log_dir], time.perf_counter() - start)
    final = log.val_cer[-1] if log.val_cer else float("nan")
    print(f"checkpoint {out} (id {cid}); steps {len(log.records)}; final validation CER {final:.4f}")
    return 0


def cmd_attach_adapters(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.model)
    t = cfg.section("train")
    insert_adapters(model, AdapterConfig(t["adapter_rank"], t["adapter_insert_part"]))
    model.adapter_active = True
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest_parent = file_id(args.model)
    cid = save_checkpoint(out, model, {"recipe": "attach_adapters", "seed": cfg.seed, "parent": manifest_parent})
    side = _sidecar(out, cfg)
    _ledger(out.parent, "attach-adapters", cfg, {"model": manifest_parent}, [out, side], 0.0)
    print(f"checkpoint {out} (id {cid}) with rank-{t['adapter_rank']} adapters")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.model)
    mode = MODES[args.mode]
    if mode == "audio_only" and not model.has_adapters:
        raise UsageError("audio-only mode needs a checkpoint with adapters")
    corpus = read_corpus(args.corpus)
    utts = _utts(corpus, cfg)
    dc = _decode_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    provenance = {"model": file_id(args.model), "corpus": file_id(args.corpus), "seed": cfg.seed,
                  "suite": args.suite, "mode": args.mode, "decode": asdict(dc), "version": __version__}
    if args.suite == "degradation":
        curve = degradation_curve(model, utts, dc, cfg.seed, _threads(args), mode)
        csv_text = curve_csv(curve)
        bundle = {"curves": curve.rows(), "provenance": provenance}
        (out / "degradation.svg").write_text(curve_svg(curve), encoding="utf-8")
    else:
        res = decode(model, utts, dc, mode)
        value = corpus_cer([u.labels for u in utts], res.hyps)
        csv_text = f"method,rate,cer\nnone,0.00,{value!r}\n"
        bundle = {"cer": value, "truncated": int(sum(res.truncated)), "provenance": provenance}
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    (out / "report.json").write_text(dumps(bundle), encoding="utf-8")
    side = _sidecar(out / "report.json", cfg)
    _ledger(out, "eval", cfg, {"model": provenance["model"], "corpus": provenance["corpus"]},
            [out / "report.csv", out / "report.json", side], time.perf_counter() - start)
    print(csv_text, end="")
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    a, b = load_checkpoint(args.model_a), load_checkpoint(args.model_b)
    ma, mb = MODES[args.mode_a], MODES[args.mode_b]
    for m, mode in ((a, ma), (b, mb)):
        if mode == "audio_only" and not (m.has_adapters or m.config.disable_video):
            raise UsageError("audio-only mode needs a checkpoint with adapters")
    corpus = read_corpus(args.corpus)
    utts = _utts(corpus, cfg)
    start = time.perf_counter()
    try:
        sim = similarity_matrix(a, b, utts, args.tap, ma, mb)
    except ContractError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = {"matrices": [sim.as_dict()],
              "provenance": {"model_a": file_id(args.model_a), "model_b": file_id(args.model_b),
                             "corpus": file_id(args.corpus), "seed": cfg.seed, "tap": args.tap,
                             "mode_a": args.mode_a, "mode_b": args.mode_b, "version": __version__}}
    (out / "similarity.json").write_text(dumps(bundle), encoding="utf-8")
    outputs = [out / "similarity.json"]
    if args.svg:
        (out / "similarity.svg").write_text(_heat_strip(sim.matrix), encoding="utf-8")
        outputs.append(out / "similarity.svg")
    outputs.append(_sidecar(out / "similarity.json", cfg))
    _ledger(out, "analyze", cfg, {k: bundle["provenance"][k] for k in ("model_a", "model_b", "corpus")}, outputs,
            time.perf_counter() - start)
    print(f"diag_mean {sim.diag_mean:.6f} over {len(utts)} utterances")
    return 0


def _heat_strip(matrix) -> str:
    n = matrix.shape[0]
    cell = max(1, 300 // max(n, 1))
    rects = []
    for i in range(n):
        for j in range(n):
            g = int(round(255 * (1 - (matrix[i, j] + 1) / 2)))
            rects.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{n * cell}" height="{n * cell}">\n'
            + "\n".join(rects) + "\n</svg>\n")


def cmd_flops(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.model)
    paths = [args.path.replace("-", "_")] if args.path else ["full", "audio_only"]
    rows = {p: count_flops_params(model, p) for p in paths}
    print(f"{'path':<12}{'flops':>14}{'params':>12}")
    for p, r in rows.items():
        print(f"{p:<12}{r['flops']:>14}{r['params']:>12}")
    if len(rows) == 2:
        print(f"ratio audio_only/full: flops {rows['audio_only']['flops'] / rows['full']['flops']:.4f} "
              f"params {rows['audio_only']['params'] / rows['full']['params']:.4f}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mblab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat 'section.key = value' file")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen-corpus", help="generate a synthetic corpus file"))
    g.add_argument("--out", required=True)

    t = common(sub.add_parser("train", help="run a training recipe"))
    t.add_argument("--recipe", required=True, choices=sorted(RECIPES))
    t.add_argument("--corpus", required=True)
    t.add_argument("--init")
    t.add_argument("--teacher")
    t.add_argument("--out", required=True)

    a = common(sub.add_parser("attach-adapters", help="add fresh adapters to a checkpoint"))
    a.add_argument("--model", required=True)
    a.add_argument("--out", required=True)

    e = common(sub.add_parser("eval", help="decode and score"))
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--suite", choices=("degradation", "single"), default="single")
    e.add_argument("--mode", choices=sorted(MODES), default="complete")
    e.add_argument("--threads", type=int)
    e.add_argument("--out", required=True)

    n = common(sub.add_parser("analyze", help="similarity matrix between two models"))
    n.add_argument("--model-a", required=True)
    n.add_argument("--model-b", required=True)
    n.add_argument("--corpus", required=True)
    n.add_argument("--tap", default="fusion_out")
    n.add_argument("--mode-a", choices=sorted(MODES), default="complete")
    n.add_argument("--mode-b", choices=sorted(MODES), default="complete")
    n.add_argument("--svg", action="store_true")
    n.add_argument("--out", required=True)

    f = common(sub.add_parser("flops", help="FLOP and parameter counts per path"))
    f.add_argument("--model", required=True)
    f.add_argument("--path", choices=("full", "audio-only"))
    return p


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "attach-adapters": cmd_attach_adapters,
            "eval": cmd_eval, "analyze": cmd_analyze, "flops": cmd_flops}


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        cfg = _resolve(args, rest)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, RunConfigError, ConfigError, CorpusSpecError, PolicyError, RecipeError, ModelStateError,
            ContractError, ValueError) as e:
        if isinstance(e, CorpusFormatError):
            print(f"mblab: format error: {e}", file=sys.stderr)
            return 3
        print(f"mblab: error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"mblab: {e}", file=sys.stderr)
        return 4
    except NumericError as e:
        print(f"mblab: numeric error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"mblab: I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
