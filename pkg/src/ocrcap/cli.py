"""Command line: ``ocrcap {synth,build-vocab,train,caption,eval}``.

Exit codes: 0 success, 2 usage error, 3 data/contract error, 4 numerical failure.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from ocrcap import __version__
from ocrcap import autodiff as ad
from ocrcap import decoding, features, metrics, training
from ocrcap import model as M
from ocrcap import vocab as V
from ocrcap.captioner import Captioner

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("ocrcap")


class DataError(Exception):
    pass


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, inputs=(), artifacts=(), seed=None):
    """Atomic write of the run manifest. Paths are stored by basename only."""
    manifest = {
        "tool": "ocrcap",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {Path(p).name: _digest(p) for p in inputs},
        "artifacts": sorted(artifacts),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return manifest


def _require(parser, *paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            parser.error(f"input not found: {p}")


# ------------------------------------------------------------------ commands


def cmd_synth(args, parser):
    if not 0.0 <= args.copy_rate <= 1.0:
        parser.error(f"--copy-rate must be in [0, 1], got {args.copy_rate}")
    if args.n_images < 1 or args.n_eval < 0:
        parser.error("--n-images must be >= 1 and --n-eval >= 0")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = features.SynthConfig(
        n_images=args.n_images + args.n_eval,
        copy_rate=args.copy_rate,
        captions_per_image=args.captions_per_image,
    )
    artifacts = ["bundles.jsonl", "captions.json", "fixed_words.txt"]
    if args.n_eval:
        artifacts += ["eval_bundles.jsonl", "eval_captions.json"]
    config = {k: v for k, v in asdict(cfg).items()}
    config["n_train"], config["n_eval"] = args.n_images, args.n_eval
    write_manifest(out / "manifest.json", "synth", config, artifacts=artifacts, seed=args.seed)
    bundles, records = features.synth_generate(cfg, args.seed)
    n = args.n_images
    features.write_bundles(out / "bundles.jsonl", bundles[:n])
    features.write_captions(out / "captions.json", records[:n])
    (out / "fixed_words.txt").write_text("\n".join(sorted(cfg.fixed_vocab_words)) + "\n")
    if args.n_eval:
        features.write_bundles(out / "eval_bundles.jsonl", bundles[n:])
        features.write_captions(out / "eval_captions.json", records[n:])
    print(f"wrote {n} train / {args.n_eval} eval images to {out}")
    return 0


def cmd_build_vocab(args, parser):
    if args.threshold < 1:
        parser.error(f"--threshold must be >= 1, got {args.threshold}")
    if args.min_count < 1:
        parser.error(f"--min-count must be >= 1, got {args.min_count}")
    _require(parser, args.captions, args.ocr_from_bundles, args.fixed_words)
    inputs = [p for p in (args.captions, args.ocr_from_bundles, args.fixed_words) if p]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {"threshold": args.threshold, "min_count": args.min_count}
    write_manifest(out.with_name(out.name + ".manifest.json"), "build-vocab", config, inputs, [out.name])
    records = features.load_captions(args.captions)
    restrict = None
    if args.fixed_words:
        restrict = Path(args.fixed_words).read_text(encoding="utf-8").split()
    base = V.build_fixed_vocab(
        [list(c) for r in records for c in r.captions], args.min_count, restrict_to=restrict
    )
    vocab = V.as_extended(base)
    if args.ocr_from_bundles:
        bundles = features.load_bundles(args.ocr_from_bundles)
        corpus = [V.clean_ocr_tokens(b.ocr_tokens) for b in bundles]
        vocab = V.extend_with_ocr(base, corpus, args.threshold)
    V.save_vocab(out, vocab)
    print(f"fixed vocabulary: {vocab.fixed_size} tokens; OCR words added: {vocab.added}")
    return 0


def cmd_train(args, parser):
    if args.variant == "baseline" and args.ocr_threshold is not None:
        parser.error("--ocr-threshold does not apply to the baseline variant (it reads no OCR)")
    if args.ocr_threshold is not None and args.ocr_threshold < 1:
        parser.error("--ocr-threshold must be >= 1")
    if args.epochs is not None and args.epochs < 1:
        parser.error("--epochs must be >= 1")
    data = Path(args.data) if args.data else None
    bundles_path = args.bundles or (data / "bundles.jsonl" if data else None)
    captions_path = args.captions or (data / "captions.json" if data else None)
    if bundles_path is None or captions_path is None:
        parser.error("give --data DIR or both --bundles and --captions")
    _require(parser, bundles_path, captions_path, args.vocab)
    cfg = training.preset_config(
        args.preset, args.variant, epochs=args.epochs, seed=args.seed,
        batch_size=args.batch_size, d_model=args.d_model, learning_rate=args.lr,
    )
    vocab = V.load_vocab(args.vocab)
    bundles = features.load_bundles(bundles_path)
    records = features.load_captions(captions_path)
    if args.ocr_threshold is not None:
        corpus = [V.clean_ocr_tokens(b.ocr_tokens) for b in bundles]
        vocab = V.extend_with_ocr(vocab.base, corpus, args.ocr_threshold)
    if vocab.threshold is not None:
        cfg.ocr_threshold = vocab.threshold
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = ["vocab.txt", "train_log.jsonl", "checkpoint.npz"] + [
        f"checkpoint_epoch_{e + 1:03d}.npz" for e in range(cfg.epochs)
    ]
    config = asdict(cfg)
    config["preset"] = args.preset
    write_manifest(
        out / "manifest.json", "train", config,
        [bundles_path, captions_path, args.vocab], artifacts, seed=cfg.seed,
    )
    V.save_vocab(out / "vocab.txt", vocab)
    result = training.train(bundles, records, vocab, cfg, out_dir=out)
    last = result.history[-1]
    print(f"trained {cfg.variant} for {cfg.epochs} epochs; final mean loss {last['mean_loss']:.4f}")
    return 0


def cmd_caption(args, parser):
    _require(parser, args.checkpoint, args.bundles, args.vocab)
    if args.beam_size < 1 or args.k < 1 or args.max_len < 1 or not args.temperature > 0:
        parser.error("--beam-size, --k, --max-len must be >= 1 and --temperature > 0")
    vocab = V.load_vocab(args.vocab)
    cfg, params, _ = M.load_checkpoint(args.checkpoint, expected_vocab_hash=V.vocab_hash(vocab))
    captioner = Captioner(cfg, params, vocab)
    bundles = features.load_bundles(args.bundles)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config = {
        "mode": args.mode, "beam_size": args.beam_size, "k": args.k,
        "temperature": args.temperature, "max_len": args.max_len,
    }
    write_manifest(
        out.with_name(out.name + ".manifest.json"), "caption", config,
        [args.checkpoint, args.bundles, args.vocab], [out.name], seed=args.seed,
    )
    reports = []
    for i, b in enumerate(bundles):
        if args.mode == "beam":
            rep = decoding.beam_search(captioner, b, args.beam_size, args.max_len)
        else:
            rep = decoding.top_k_sample(
                captioner, b, args.k, args.temperature, args.max_len, seed=args.seed + i
            )
        reports.append(rep)
    with open(out, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_json(include_p_gen=cfg.uses_pointer)) + "\n")
    rate = decoding.repetition_rate(reports) if reports else 0.0
    print(f"captioned {len(reports)} images; repetition rate {rate:.3f}")
    return 0


def cmd_eval(args, parser):
    _require(parser, args.captions, args.references)
    candidates = {}
    with open(args.captions, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "image_id" not in obj or "caption" not in obj:
                raise DataError(f"{args.captions}:{lineno}: needs image_id and caption")
            candidates[obj["image_id"]] = V.tokenize(obj["caption"])
    refs = {
        r.image_id: [V.tokenize(" ".join(c)) for c in r.captions]
        for r in features.load_captions(args.references)
    }
    try:
        corpus = metrics.make_corpus(candidates, refs)
    except KeyError as exc:
        raise DataError(str(exc)) from exc
    scores = metrics.evaluate(corpus)
    text = json.dumps(scores, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_manifest(
            out.with_name(out.name + ".manifest.json"), "eval", {}, [args.captions, args.references],
            [out.name],
        )
        out.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="ocrcap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ocrcap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a seeded synthetic copy-task dataset")
    s.add_argument("--n-images", type=int, default=200)
    s.add_argument("--n-eval", type=int, default=0)
    s.add_argument("--copy-rate", type=float, default=1.0)
    s.add_argument("--captions-per-image", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-vocab", help="fixed vocabulary plus OCR extension")
    s.add_argument("--captions", required=True)
    s.add_argument("--ocr-from-bundles")
    s.add_argument("--threshold", type=int, default=2)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--fixed-words", help="closed list of words allowed in the fixed vocabulary")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("train", help="train one model variant")
    s.add_argument("--variant", choices=M.VARIANTS, required=True)
    s.add_argument("--data", help="directory holding bundles.jsonl and captions.json")
    s.add_argument("--bundles")
    s.add_argument("--captions")
    s.add_argument("--vocab", required=True)
    s.add_argument("--preset", choices=sorted(training.PRESETS), default="synthetic")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--d-model", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--ocr-threshold", type=int, help="re-extend the vocabulary from the training OCR")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("caption", help="decode captions for feature bundles")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bundles", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--mode", choices=("beam", "topk"), default="beam")
    s.add_argument("--beam-size", type=int, default=3)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--max-len", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("eval", help="BLEU-4 / ROUGE-L / CIDEr-D against references")
    s.add_argument("--captions", required=True, help="caption JSONL from `ocrcap caption`")
    s.add_argument("--references", required=True, help="captions.json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("OCRCAP_LOG_LEVEL", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except ad.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        DataError, M.CheckpointError, features.FeatureError, V.VocabError, ValueError, KeyError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
