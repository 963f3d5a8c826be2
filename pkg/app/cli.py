"""
Command-line surface.

    python -m app synth --out DIR --n N --seed S [--noise A]
    python -m app bpe-train --manifest F --vocab-size V --out VOCABFILE
    python -m app train [--config F] --manifest F --val-manifest F --vocab VOCABFILE --out DIR
    python -m app transcribe --ckpt F --vocab VOCABFILE --audio WAV
    python -m app eval --ckpt F --vocab VOCABFILE --manifest F [--manifest F ...] [--report-dir DIR]
    python -m app bench [--lengths 256,512,1024,2048,4096]
    python -m app serve [--host H] [--port P]

Exit codes: 0 success, 1 runtime error (message on stderr), 2 usage error.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from app.config import describe_validation_error, get_settings, load_experiment_config
from app.errors import ConfigError, SambaError
from app.models import SynthSpec
from app.services.logger import app_logger

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _lengths(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samba-asr", description="Mamba encoder-decoder speech recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic tone corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise amplitude")

    p = sub.add_parser("bpe-train", help="train a byte-level BPE vocabulary on manifest transcripts")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--vocab-size", type=int, default=516)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="train (or resume) a model")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--val-manifest", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("transcribe", help="transcribe one WAV file")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--audio", required=True, type=Path)

    p = sub.add_parser("eval", help="pooled WER over one or more manifests")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path, action="append")
    p.add_argument("--report-dir", type=Path, default=None, help="defaults to the checkpoint's directory")

    p = sub.add_parser("bench", help="time the parallel scan across sequence lengths")
    p.add_argument("--lengths", type=_lengths, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def cmd_synth(args) -> int:
    from app.services.synth import synth_corpus

    try:
        spec = SynthSpec(n_utterances=args.n, seed=args.seed, noise_amplitude=args.noise)
    except ValidationError as e:
        raise ConfigError(f"invalid synth options: {describe_validation_error(e)}") from e
    manifests = synth_corpus(spec, args.out)
    for split, path in manifests.items():
        print(f"{split}\t{path}")
    return EXIT_OK


def cmd_bpe_train(args) -> int:
    from app.services.evaluation import read_manifest
    from app.services.tokenizer import save_vocab, train_bpe

    vocab = train_bpe([entry.text for entry in read_manifest(args.manifest)], args.vocab_size)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, args.out)
    app_logger.vocab_trained(str(args.out), vocab.n_merges)
    print(f"{vocab.n_merges} merges, {vocab.size} ids -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from app.services.trainer import train_loop

    result = train_loop(args.manifest, args.val_manifest, args.vocab, args.out, load_experiment_config(args.config))
    best = f"{result.best_wer:.4f}" if result.best_wer is not None else "n/a"
    print(f"run {result.run_id} {result.status}: {result.step} steps, best val WER {best}")
    return EXIT_OK if result.status == "completed" else EXIT_RUNTIME


def cmd_transcribe(args) -> int:
    from app.services.audio import load_audio
    from app.services.evaluation import load_for_inference

    settings = get_settings()
    model, vocab, frontend = load_for_inference(args.ckpt, args.vocab, settings.scan_partition, settings.scan_workers)
    text, _ = model.transcribe(load_audio(args.audio, frontend), vocab)
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    from app.services.evaluation import evaluate_many, load_for_inference, record_evaluation, write_report

    settings = get_settings()
    model, vocab, frontend = load_for_inference(args.ckpt, args.vocab, settings.scan_partition, settings.scan_workers)
    manifests = {str(path): path for path in args.manifest}
    reports, average = evaluate_many(manifests, model, vocab, frontend, settings.scan_workers)

    report_dir = args.report_dir or args.ckpt.parent
    skipped = 0
    for name, report in reports.items():
        path = Path(name)
        write_report(report_dir / f"{path.stem}_report.csv", report)
        record_evaluation(args.ckpt, path, report)
        skipped += len(report.skipped)
        print(f"{name}\tWER={report.corpus_wer:.4f}\tutterances={len(report.rows)}"
              f"\tskipped={len(report.skipped)}\tRTF={report.real_time_factor:.4f}")
        for audio in report.skipped:
            print(f"skipped: {audio}", file=sys.stderr)
    if len(reports) > 1:
        print(f"average\tWER={average:.4f}")
    return EXIT_RUNTIME if skipped else EXIT_OK


def cmd_bench(args) -> int:
    from app.services.bench import bench_scan

    result = bench_scan(args.lengths, args.d_model, args.d_state, args.repeats)
    sys.stdout.write(result.to_tsv())
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "bpe-train": cmd_bpe_train,
    "train": cmd_train,
    "transcribe": cmd_transcribe,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 for --help
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    from app.database import init_db

    try:
        init_db()
        return COMMANDS[args.command](args)
    except (SambaError, OSError) as e:
        app_logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
