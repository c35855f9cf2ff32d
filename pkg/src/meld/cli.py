"""``meld`` command line: one subcommand per pipeline stage.

Every stage writes into ``<run-dir>/<stage>/`` a ``config.toml`` snapshot and
a ``manifest.json`` (config hash, package versions, input and output hashes).
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import numerics as nx
from .codebook import Codebook, kmeans_fit
from .config import ExperimentConfig, dump_toml, load_config
from .corpus import generate_corpus, read_manifest, write_corpus
from .data import Example
from .dsp import (
    MelSpectrogram, NormStats, extract_mel, fit_norm_stats, invert_mel_griffin_lim, load_mel,
    normalize, read_wav, save_mel, stack_frames, write_wav,
)
from .errors import CheckpointError, ConfigError, EmptyInputError, ShapeError
from .eval import evaluation_report, mel_stat_similarity, write_report
from .inference import (
    GenerationTrace, duration_report, generate_tts, hypothesis_text, mean_frame_baseline,
    prompt_length, regenerate, regeneration_mse, transcribe_beam,
)
from .model import MeldModel, load_checkpoint
from .plot import loss_csv, mel_to_gray, write_pgm
from .tokenizer import BpeModel, train_bpe
from .trainer import resume, train

log = logging.getLogger("meld")

VALIDATION_ERRORS = (ConfigError, EmptyInputError, ShapeError, CheckpointError)


# -- run-directory plumbing ---------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def begin_stage(run_dir: Path, name: str, cfg: ExperimentConfig, force: bool, keep: bool = False) -> Path:
    out = run_dir / name
    if out.exists() and any(out.iterdir()) and not keep:
        if not force:
            raise ConfigError(f"--run-dir: {out} already exists; rerun with --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(cfg))
    return out


def finish_stage(out: Path, cfg: ExperimentConfig, command: str, inputs=(), outputs=(), extra=None) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "meld": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__,
        },
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(out)): sha256_file(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def require(path: Path, key: str, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{key}: {path} not found ({hint})")
    return path


def corpus_rows(run_dir: Path) -> list[dict]:
    path = require(run_dir / "corpus" / "manifest.jsonl", "corpus.manifest", "run `meld gen-corpus` first")
    rows = read_manifest(path)
    if not rows:
        raise EmptyInputError("corpus.manifest: no utterances")
    return rows


def load_stats(run_dir: Path) -> NormStats:
    path = require(run_dir / "featurize" / "norm_stats.json", "featurize.norm_stats", "run `meld featurize` first")
    return NormStats.from_dict(json.loads(path.read_text()))


def load_bpe(run_dir: Path) -> BpeModel:
    return BpeModel.load(require(run_dir / "bpe" / "bpe.json", "bpe.model", "run `meld train-bpe` first"))


def load_codebook(run_dir: Path) -> Codebook:
    return Codebook.load(require(run_dir / "codebook" / "codebook.mcbk", "codebook.file", "run `meld kmeans-init` first"))


def load_examples(run_dir: Path, cfg: ExperimentConfig, bpe: BpeModel | None) -> tuple[list, list[Example], NormStats]:
    rows = corpus_rows(run_dir)
    stats = load_stats(run_dir)
    out = []
    for r in rows:
        mel, _ = load_mel(require(run_dir / "featurize" / f"{r['utt_id']}.mel", "featurize.mel", "run `meld featurize` first"))
        frames = stack_frames(normalize(mel, stats), cfg.mel.stack_factor).frames.astype(np.float32)
        tokens = np.array(bpe.encode(r["transcript"]) if bpe else [], dtype=np.int64)
        out.append(Example(r["utt_id"], r["transcript"], tokens, frames, int(r.get("speaker_id", 0))))
    return rows, out, stats


def latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted((run_dir / "train" / "checkpoints").glob("step*.ckpt"))
    if not ckpts:
        raise ConfigError(f"train.checkpoint: no checkpoints under {run_dir / 'train' / 'checkpoints'} (run `meld train` first)")
    return ckpts[-1]


def select(examples: list[Example], cfg: ExperimentConfig, ids) -> list[Example]:
    if ids:
        by_id = {e.utt_id: e for e in examples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ConfigError(f"--utt: unknown utterance ids {missing}")
        return [by_id[i] for i in ids]
    n = cfg.eval.max_utterances
    return examples[:n] if n > 0 else examples


# -- subcommands --------------------------------------------------------------


def cmd_gen_corpus(args, cfg: ExperimentConfig, run_dir: Path) -> int:
    out = begin_stage(run_dir, "corpus", cfg, args.force)
    utts = generate_corpus(cfg.synth, cfg.corpus.n_utterances)
    manifest = write_corpus(out, utts)
    wavs = sorted((out / "wav").glob("*.wav"))
    finish_stage(out, cfg, "gen-corpus", outputs=[manifest, *wavs], extra={"n_utterances": len(utts)})
    print(f"wrote {len(utts)} utterances to {out}")
    return 0


def cmd_featurize(args, cfg, run_dir) -> int:
    rows = corpus_rows(run_dir)
    out = begin_stage(run_dir, "featurize", cfg, args.force)
    mels = []
    for r in rows:
        wave = read_wav(r["wav_path"])
        if wave.sample_rate_hz != cfg.mel.sample_rate_hz:
            raise ConfigError(f"mel.sample_rate_hz: {r['wav']} is {wave.sample_rate_hz} Hz")
        mel = extract_mel(wave, cfg.mel)
        save_mel(out / f"{r['utt_id']}.mel", mel, {"utt_id": r["utt_id"]})
        mels.append(mel)
    stats = fit_norm_stats(mels)
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True))
    outputs = sorted(out.glob("*.mel")) + [out / "norm_stats.json"]
    finish_stage(out, cfg, "featurize", inputs=[run_dir / "corpus" / "manifest.jsonl"], outputs=outputs)
    print(f"wrote {len(mels)} mel files to {out}")
    return 0


def cmd_train_bpe(args, cfg, run_dir) -> int:
    rows = corpus_rows(run_dir)
    out = begin_stage(run_dir, "bpe", cfg, args.force)
    bpe = train_bpe([r["transcript"] for r in rows], cfg.bpe.target_vocab)
    bpe.save(out / "bpe.json")
    finish_stage(out, cfg, "train-bpe", inputs=[run_dir / "corpus" / "manifest.jsonl"], outputs=[out / "bpe.json"], extra={"vocab_size": bpe.size})
    print(f"BPE vocabulary of {bpe.size} tokens")
    return 0


def cmd_kmeans_init(args, cfg, run_dir) -> int:
    _, examples, _ = load_examples(run_dir, cfg, None)
    out = begin_stage(run_dir, "codebook", cfg, args.force)
    frames = np.concatenate([e.frames for e in examples]).astype(np.float64)
    cb = kmeans_fit(frames, cfg.model.k_latent, cfg.codebook.max_iters, cfg.seed, cfg.codebook.tau)
    cb.save(out / "codebook.mcbk")
    finish_stage(out, cfg, "kmeans-init", inputs=[run_dir / "featurize" / "norm_stats.json"], outputs=[out / "codebook.mcbk"],
                 extra={"distortion": cb.distortion_history[-1], "iterations": len(cb.distortion_history), "digest": cb.digest()})
    print(f"codebook K={cb.k} d={cb.dim} distortion {cb.distortion_history[-1]:.4f}")
    return 0


def cmd_train(args, cfg, run_dir) -> int:
    bpe = load_bpe(run_dir)
    cb = load_codebook(run_dir)
    _, examples, _ = load_examples(run_dir, cfg, bpe)
    tcfg = cfg.train_config().validate()
    nx.set_deterministic(cfg.seed)
    meta = {"experiment_hash": cfg.digest()}
    ckpts = sorted((run_dir / "train" / "checkpoints").glob("step*.ckpt"))
    if args.resume and ckpts:
        out = begin_stage(run_dir, "train", cfg, False, keep=True)
        model, result = resume(ckpts[-1], cb, examples, tcfg, out, expected_hash=cfg.model_config(bpe.size).digest())
    else:
        out = begin_stage(run_dir, "train", cfg, args.force)
        model = MeldModel(cfg.model_config(bpe.size))
        result = train(model, cb, examples, tcfg, out, meta=meta)
    ckpts = sorted((out / "checkpoints").glob("step*.ckpt"))
    finish_stage(out, cfg, "train", inputs=[run_dir / "bpe" / "bpe.json", run_dir / "codebook" / "codebook.mcbk"],
                 outputs=ckpts, extra={"final_step": result.final_step, "clip_violations": result.clip_violations})
    last = result.rows[-1] if result.rows else {}
    print(f"trained to step {result.final_step}; last loss {last.get('weighted_total', float('nan')):.4f}")
    return 0


def _trace_row(utt_id: str, trace: GenerationTrace) -> str:
    return json.dumps({"utt_id": utt_id, **trace.to_dict()}, sort_keys=True)


def cmd_synthesize(args, cfg, run_dir) -> int:
    bpe = load_bpe(run_dir)
    cb = load_codebook(run_dir)
    _, examples, stats = load_examples(run_dir, cfg, bpe)
    model, _, _ = load_checkpoint(latest_checkpoint(run_dir))
    model.eval()
    gcfg = cfg.generation_config()
    out = begin_stage(run_dir, "synth", cfg, args.force)
    mel_cfg = cfg.mel
    traces, outputs = [], []
    if args.text is not None:
        prompt = select(examples, cfg, [args.prompt_utt] if args.prompt_utt else [examples[0].utt_id])[0]
        n = prompt_length(prompt.frames.shape[0], gcfg)
        cont, trace = generate_tts(model, cb, bpe.encode(args.text), prompt.frames[:n], gcfg)
        jobs = [("text", prompt.frames[:n], cont, trace)]
    else:
        jobs = []
        for ex in select(examples, cfg, args.utt):
            cont, _, trace = regenerate(model, cb, ex, gcfg)
            jobs.append((ex.utt_id, ex.frames[: prompt_length(ex.frames.shape[0], gcfg)], cont, trace))
    for name, prompt, cont, trace in jobs:
        mel = MelSpectrogram(cont.astype(np.float32), mel_cfg, True)
        save_mel(out / f"{name}.mel", mel, {"utt_id": name, "prompt_frames": int(prompt.shape[0])})
        full = MelSpectrogram(np.concatenate([prompt, cont]).astype(np.float64), mel_cfg, True)
        write_wav(out / f"{name}.wav", invert_mel_griffin_lim(full, stats, cfg.eval.griffin_lim_iters, cfg.seed))
        outputs += [out / f"{name}.mel", out / f"{name}.wav"]
        traces.append((name, trace))
    with open(out / "traces.jsonl", "w") as f:
        for name, trace in traces:
            f.write(_trace_row(name, trace) + "\n")
    duration = duration_report([t for _, t in traces], mel_cfg.frame_rate_hz)
    (out / "duration.json").write_text(json.dumps(duration, indent=2, sort_keys=True))
    outputs += [out / "traces.jsonl", out / "duration.json"]
    finish_stage(out, cfg, "synthesize", inputs=[latest_checkpoint(run_dir)], outputs=outputs)
    print(f"generated {len(traces)} continuations, {duration['total_seconds']:.2f} s of audio frames")
    return 0


def cmd_transcribe(args, cfg, run_dir) -> int:
    bpe = load_bpe(run_dir)
    model, _, _ = load_checkpoint(latest_checkpoint(run_dir))
    model.eval()
    gcfg = cfg.generation_config()
    if args.mel:
        mel, _ = load_mel(args.mel)
        if not mel.normalized:
            mel = stack_frames(normalize(mel, load_stats(run_dir)), cfg.mel.stack_factor)
        hyp = transcribe_beam(model, mel.frames, gcfg.beam_size, gcfg.max_text_tokens)
        print(hypothesis_text(hyp, bpe, model.vocab))
        return 0
    _, examples, _ = load_examples(run_dir, cfg, bpe)
    out = begin_stage(run_dir, "transcribe", cfg, args.force)
    with open(out / "hyps.jsonl", "w") as f:
        for ex in select(examples, cfg, args.utt):
            hyp = transcribe_beam(model, ex.frames, gcfg.beam_size, gcfg.max_text_tokens)
            f.write(json.dumps({"utt_id": ex.utt_id, "ref": ex.transcript, "hyp": hypothesis_text(hyp, bpe, model.vocab), "score": hyp.score}, sort_keys=True) + "\n")
    finish_stage(out, cfg, "transcribe", inputs=[latest_checkpoint(run_dir)], outputs=[out / "hyps.jsonl"])
    print(f"wrote {out / 'hyps.jsonl'}")
    return 0


def cmd_eval(args, cfg, run_dir) -> int:
    hyps_path = require(run_dir / "transcribe" / "hyps.jsonl", "transcribe.hyps", "run `meld transcribe` first")
    rows = [json.loads(line) for line in hyps_path.read_text().splitlines() if line.strip()]
    synth = run_dir / "synth"
    duration = None
    inputs = [hyps_path]
    if (synth / "traces.jsonl").exists():
        _, examples, _ = load_examples(run_dir, cfg, None)
        by_id = {e.utt_id: e for e in examples}
        for r in rows:
            path = synth / f"{r['utt_id']}.mel"
            if not path.exists():
                continue
            mel, meta = load_mel(path)
            ex = by_id[r["utt_id"]]
            n = int(meta["prompt_frames"])
            ref_tail = ex.frames[n:]
            r["regen_mse"] = regeneration_mse(mel.frames, ref_tail)
            r["baseline_mse"] = mean_frame_baseline(ref_tail)
            if mel.n_frames:
                r["similarity"] = mel_stat_similarity(ex.frames[:n], mel.frames)
        duration = json.loads((synth / "duration.json").read_text())
        inputs += [synth / "traces.jsonl"]
    out = begin_stage(run_dir, "eval", cfg, args.force)
    report = evaluation_report(rows, duration)
    report["similarity_note"] = "mel-statistics cosine proxy, not a speaker-verification score"
    path = write_report(out / "report.json", report)
    finish_stage(out, cfg, "eval", inputs=inputs, outputs=[path])
    s = report["summary"]
    print(f"WER {s['wer']['wer']:.4f} (S={s['wer']['S']} D={s['wer']['D']} I={s['wer']['I']})")
    return 0


def cmd_inspect_checkpoint(args, cfg, run_dir) -> int:
    path = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(run_dir)
    model, adam, meta = load_checkpoint(require(path, "--checkpoint", "no such file"))
    info = {
        "path": str(path), "step": meta.get("step"), "config_hash": meta["config_hash"],
        "experiment_hash": meta.get("experiment_hash"), "dtype": meta.get("dtype"),
        "n_parameters": sum(p.numel() for p in model.parameters()),
        "adam_step": adam.step if adam else None, "model_config": meta["model_config"],
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_tokenize(args, cfg, run_dir) -> int:
    bpe = load_bpe(run_dir)
    if args.ids is not None:
        try:
            ids = [int(t) for t in args.ids.replace(",", " ").split()]
        except ValueError:
            raise ConfigError("--ids: expected integers") from None
        if any(not 0 <= i < bpe.size for i in ids):
            raise ConfigError(f"--ids: ids must lie in [0, {bpe.size})")
        print(bpe.decode(ids))
    elif args.text is not None:
        print(" ".join(str(i) for i in bpe.encode(args.text)))
    else:
        raise ConfigError("tokenize: give --text or --ids")
    return 0


def cmd_plot(args, cfg, run_dir) -> int:
    src = require(Path(args.input), "--input", "no such file")
    dst = Path(args.output)
    if src.suffix == ".csv":
        loss_csv(src, dst)
    else:
        mel, _ = load_mel(src)
        write_pgm(dst, mel_to_gray(mel.frames))
    print(f"wrote {dst}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "featurize": cmd_featurize,
    "train-bpe": cmd_train_bpe,
    "kmeans-init": cmd_kmeans_init,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "transcribe": cmd_transcribe,
    "eval": cmd_eval,
    "inspect-checkpoint": cmd_inspect_checkpoint,
    "tokenize": cmd_tokenize,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--set", dest="overrides", nargs="+", action="extend", default=[], metavar="KEY=VALUE",
                        help="override config values, e.g. --set model.n_heads=4 train.total_steps=100")
    common.add_argument("--run-dir", default="run", help="all outputs go under this directory")
    common.add_argument("--force", action="store_true", help="replace an existing stage directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="meld", description="Mel-spectrogram discrete-latent speech-text model")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
        if name in ("synthesize", "transcribe"):
            sp.add_argument("--utt", nargs="+", default=[], help="utterance ids (default: eval.max_utterances)")
        if name == "tokenize":
            sp.add_argument("--text", help="print the BPE ids of this text")
            sp.add_argument("--ids", help="print the text of these space- or comma-separated ids")
        if name == "synthesize":
            sp.add_argument("--text", help="synthesize this text instead of regenerating corpus utterances")
            sp.add_argument("--prompt-utt", help="utterance whose head is the voice prompt for --text")
        if name == "transcribe":
            sp.add_argument("--mel", help="transcribe one mel file and print the text")
        if name == "inspect-checkpoint":
            sp.add_argument("--checkpoint", help="checkpoint path (default: latest in the run)")
        if name == "plot":
            sp.add_argument("--input", required=True, help=".mel file or training-log .csv")
            sp.add_argument("--output", required=True, help=".pgm for mels, .csv for logs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg, Path(args.run_dir))
    except VALIDATION_ERRORS as e:
        print(f"meld: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"meld: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
