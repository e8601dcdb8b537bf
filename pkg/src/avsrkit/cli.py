"""Command-line entry point.

Subcommands: synth-data, train, decode, eval-wer, gradcheck, augment,
train-lm.  Training reads a key=value config file; decode weights come
from flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataflow, harness, search
from .config import build_augment_policy, build_train_configs, parse_kv_file
from .dataflow import AugmentPolicy, CorpusSpec
from .errors import AvsrError, ConfigError
from .fusion_decoder import Vocabulary
from .model import ModelConfig
from .search import DecodeConfig, LMConfig

_MODALITY = {"a": "audio", "v": "visual", "av": "audio-visual"}
_LETTERS = "abcdefghij"


def _cmd_synth_data(args) -> int:
    spec = CorpusSpec(
        alphabet=_LETTERS[: args.alphabet],
        n_train=args.utts,
        n_val=args.val_utts,
        n_test=args.test_utts,
        min_len=args.min_len,
        max_len=args.max_len,
        frame_size=args.frame_size,
    )
    manifests = dataflow.synth_corpus(spec, args.seed, args.out)
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest)} utterances -> {Path(args.out) / (split + '.tsv')}")
    return 0


def _infer_alphabet(manifest) -> str:
    chars = sorted({c for rec in manifest.records for c in rec.transcript})
    return "".join(chars)


def _cmd_train(args) -> int:
    kv = parse_kv_file(args.config) if args.config else {}
    manifest = dataflow.read_manifest(args.manifest, split="train")
    if "alphabet" not in kv:
        kv["alphabet"] = _infer_alphabet(manifest)
    model_cfg, train_cfg = build_train_configs(kv)
    if args.modality:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "modality": _MODALITY[args.modality]})
    val_manifest = dataflow.read_manifest(args.val_manifest, split="val") if args.val_manifest else None
    result = harness.train(model_cfg, train_cfg, manifest, val_manifest, out_dir=args.out)
    print(f"trained {result.steps} steps; skipped {result.n_skipped} infeasible samples")
    if result.best_val_wer != float("inf"):
        print(f"best validation WER {result.best_val_wer:.4f}")
    print(f"checkpoints: {result.checkpoint_path} (last), {result.best_checkpoint_path} (best)")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_decode(args) -> int:
    model, data = harness.load_model(args.checkpoint)
    stats = harness.stats_from_extra(data.extra)
    manifest = dataflow.read_manifest(args.manifest, split="test")
    cfg = DecodeConfig(
        ctc_weight=getattr(args, "lambda"),
        lm_weight=args.beta,
        beam=args.beam,
        nbest=args.nbest,
    )
    lm = harness.load_lm(args.lm) if args.lm else None
    utts = harness.load_dataset(manifest, model.cfg, stats, 0)
    nbest_lines = []
    top1 = []
    for utt in utts:
        memory, ctc_lp = model.encode(utt.audio, utt.video)
        hyps = search.beam_search(model.decoder, memory, ctc_lp.data, cfg, lm)
        block = search.format_nbest(hyps, cfg, model.vocab)
        for line in block.splitlines():
            nbest_lines.append(f"{utt.utt_id}\t{line}")
        top1.append(f"{utt.utt_id}\t{model.vocab.decode(hyps[0].tokens)}")
    out_text = "\n".join(nbest_lines) + "\n"
    if args.out:
        Path(args.out).write_text(out_text, encoding="utf-8")
    else:
        sys.stdout.write(out_text)
    if args.hyp_out:
        Path(args.hyp_out).write_text("\n".join(top1) + "\n", encoding="utf-8")
    return 0


def _read_transcripts(path) -> dict[str, str] | list[str]:
    """id->text mapping for 2- or 4-column TSV, else plain ordered lines."""
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip() and not l.startswith("#")]
    cols = [l.split("\t") for l in lines]
    widths = {len(c) for c in cols}
    if widths == {2}:
        return {c[0]: c[1] for c in cols}
    if widths == {4}:  # manifest: id, wav, frames, transcript
        return {c[0]: c[3] for c in cols}
    return lines


def _cmd_eval_wer(args) -> int:
    hyp = _read_transcripts(args.hyp)
    ref = _read_transcripts(args.ref)
    if isinstance(hyp, dict) and isinstance(ref, dict):
        ids = sorted(ref)
        missing = [i for i in ids if i not in hyp]
        if missing:
            raise ConfigError(f"hypotheses missing for ids: {missing[:5]}")
        hyps = [hyp[i] for i in ids]
        refs = [ref[i] for i in ids]
    else:
        hyps = list(hyp.values()) if isinstance(hyp, dict) else hyp
        refs = list(ref.values()) if isinstance(ref, dict) else ref
    result = harness.evaluate_wer(hyps, refs, unit=args.unit)
    print(
        f"{args.unit} error rate: {result.wer:.4f} "
        f"(S={result.substitutions} D={result.deletions} I={result.insertions} N={result.ref_len}, "
        f"{result.n_scored} scored, {result.n_excluded} excluded)"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    reports = harness.gradcheck(args.module, seed=args.seed, samples=args.samples)
    failed = False
    for report in reports:
        for line in report.lines():
            print(line)
        failed = failed or not report.passed
    return 1 if failed else 0


def _cmd_augment(args) -> int:
    policy = build_augment_policy(parse_kv_file(args.policy)) if args.policy else AugmentPolicy()
    src = Path(getattr(args, "in"))
    if src.suffix == ".avf":
        clip = dataflow.read_frames(src)
        out = dataflow.augment_video(clip, policy, args.seed, training=True)
        dataflow.write_frames(args.out, out)
    else:
        clip = dataflow.read_wav(src)
        out = dataflow.augment_waveform(clip, policy, args.seed)
        peak = np.abs(out.samples).max()
        if peak > 1.0:  # keep PCM16 in range after noise injection
            out = dataflow.AudioClip(out.samples / peak, out.sample_rate)
        dataflow.write_wav(args.out, out)
    print(f"augmented {src} -> {args.out}")
    return 0


def _cmd_train_lm(args) -> int:
    manifest = dataflow.read_manifest(args.manifest, split="train")
    texts = [rec.transcript for rec in manifest.records]
    vocab = Vocabulary(args.alphabet or _infer_alphabet(manifest))
    lm = harness.train_char_lm(texts, vocab, LMConfig(), seed=args.seed, epochs=args.epochs)
    harness.save_lm(args.out, lm)
    print(f"language model saved to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsrkit", description="Desk-scale audio-visual speech recognition kit")
    parser.add_argument("--version", action="version", version=f"avsrkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic audio-visual corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--alphabet", type=int, required=True, help="alphabet size (2-10)")
    p.add_argument("--utts", type=int, required=True, help="training utterances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-utts", type=int, default=50)
    p.add_argument("--test-utts", type=int, default=50)
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--frame-size", type=int, default=24)
    p.set_defaults(fn=_cmd_synth_data)

    p = sub.add_parser("train", help="train a recognizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--modality", choices=sorted(_MODALITY), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--val-manifest", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("decode", help="beam-search decode a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--lambda", type=float, default=0.1, help="decode CTC weight")
    p.add_argument("--beta", type=float, default=0.6, help="language model weight")
    p.add_argument("--lm", default=None, help="language model checkpoint")
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--out", default=None, help="n-best output file (default stdout)")
    p.add_argument("--hyp-out", default=None, help="top-1 transcripts as id<TAB>text")
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("eval-wer", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--unit", choices=("word", "char"), default="word")
    p.set_defaults(fn=_cmd_eval_wer)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--module", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("augment", help="apply the augmentation pipeline to one file")
    p.add_argument("--in", required=True)
    p.add_argument("--policy", default=None, help="key=value policy file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_augment)

    p = sub.add_parser("train-lm", help="train the tiny character language model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphabet", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.set_defaults(fn=_cmd_train_lm)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except AvsrError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
