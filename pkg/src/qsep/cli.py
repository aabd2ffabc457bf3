"""Command-line entry point: ``qsep <mix|train|separate|eval|query|plot> ...``.

Every option may also come from ``--config FILE.json``.  The file holds either
flat ``{"option_name": value}`` pairs or one such object per subcommand
(``{"train": {...}, "mix": {...}}``).  Precedence: flags, then the config
file, then the built-in defaults listed in ``DEFAULTS``.

Exit codes: 0 success, 1 usage or invalid input, 2 I/O error,
3 numeric failure (divergence), 4 provider error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dsp import StftConfig, magnitude, read_wav, stft, write_wav
from .metrics import EmbedderConfig, build_report, embed_audio, evaluate_pair, fit_gaussian, frechet_distance
from .mixer import DatasetConfig, MixtureManifest, build_dataset
from .pipeline import estimate_path, load_entries, training_samples
from .querygen import (
    ChatClient,
    ProviderConfig,
    ProviderError,
    RegionalDescription,
    SceneDescription,
    fallback_subtract,
    global_describe,
    regional_describe,
    text_to_embedding,
    textual_subtract,
)
from .separator import (
    ModelConfig,
    ideal_binary_mask,
    load_checkpoint,
    save_checkpoint,
    separate,
    separate_with_masks,
)
from .trainer import TrainConfig, TrainingDivergedError, train
from .unet import UNetConfig

log = logging.getLogger("qsep")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_PROVIDER = 0, 1, 2, 3, 4

DEFAULTS: dict[str, dict] = {
    "mix": {
        "fg": None, "bg": None, "out": None, "seed": 0, "pairs": "exhaustive", "n_entries": None,
        "snr_db": None, "snr_range": [-5.0, 5.0], "duration": 4.0, "rate": 16000, "target_rms": 0.1,
        "val_fraction": 0.1, "jobs": 1,
    },
    "train": {
        "manifest": None, "out": None, "split": None, "epochs": 100, "lr": 1e-3, "batch_size": 8,
        "seed": 0, "init_seed": 0, "optimizer": "adam", "widths": "8,16", "channels": 16,
        "embed_dim": 16, "embed_seed": 0, "warp_bins": None, "window": 512, "hop": 256,
        "weight_floor": 1e-3, "threshold": 0.5,
    },
    "separate": {
        "checkpoint": None, "input": None, "query": None, "embedding": None, "manifest": None,
        "split": None, "oracle": False, "out": None, "embed_seed": None, "window": 512, "hop": 256,
        "threshold": 0.5,
    },
    "eval": {"manifest": None, "estimates": None, "out": None, "split": None, "sources": None, "jobs": 1},
    "query": {
        "offline": False, "scene": None, "region": None, "frame": None, "mask": None, "vlm": None,
        "describer": None, "llm": None, "audit_log": None, "out": None,
    },
    "plot": {"mixture": None, "estimate": None, "reference": None, "input": None, "out": None,
             "window": 512, "hop": 256},
}


class UsageError(Exception):
    pass


class CliIOError(OSError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qsep", description="Text-queried spectrogram-mask source separation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of option defaults")
        return p

    def opt(p, flag, **kw):
        kw.setdefault("default", None)
        p.add_argument(flag, **kw)

    p = command("mix", "build a foreground-over-background mixture dataset")
    opt(p, "--fg", help="directory of foreground WAVs")
    opt(p, "--bg", help="directory of background WAVs")
    opt(p, "--out", help="output directory (audio/ and manifest.jsonl)")
    opt(p, "--seed", type=int)
    opt(p, "--pairs", choices=["exhaustive", "random"])
    opt(p, "--n-entries", type=int, help="entry count for random pairing")
    opt(p, "--snr-db", type=float, help="fixed SNR; default draws from --snr-range")
    opt(p, "--snr-range", type=float, nargs=2, metavar=("LO", "HI"))
    opt(p, "--duration", type=float, help="seconds per mixture")
    opt(p, "--rate", type=int, help="output sample rate")
    opt(p, "--target-rms", type=float)
    opt(p, "--val-fraction", type=float)
    opt(p, "--jobs", type=int)

    p = command("train", "train the mask predictor on a manifest")
    opt(p, "--manifest")
    opt(p, "--out", help="output directory for model.npz and train_log.tsv")
    opt(p, "--split", choices=["train", "val"], help="restrict to one split (default: all entries)")
    opt(p, "--epochs", type=int)
    opt(p, "--lr", type=float)
    opt(p, "--batch-size", type=int)
    opt(p, "--seed", type=int, help="minibatch shuffling seed")
    opt(p, "--init-seed", type=int, help="parameter initialisation seed")
    opt(p, "--optimizer", choices=["adam", "sgd"])
    opt(p, "--widths", help="comma-separated encoder widths, '' for the 1x1 model")
    opt(p, "--channels", type=int)
    opt(p, "--embed-dim", type=int)
    opt(p, "--embed-seed", type=int, help="seed of the text hasher")
    opt(p, "--warp-bins", type=int, help="log-frequency bins ahead of the network")
    opt(p, "--window", type=int)
    opt(p, "--hop", type=int)
    opt(p, "--weight-floor", type=float)
    opt(p, "--threshold", type=float, help="ideal-binary-mask dominance threshold")

    p = command("separate", "separate audio with a trained model or oracle masks")
    opt(p, "--checkpoint")
    opt(p, "--input", help="mixture WAV")
    opt(p, "--query", action="append", help="query text (repeatable)")
    opt(p, "--embedding", action="append", help=".npy query vector (repeatable)")
    opt(p, "--manifest", help="separate every entry of a manifest with its own query texts")
    opt(p, "--split", choices=["train", "val"])
    opt(p, "--oracle", action="store_true", help="use ideal binary masks from stored sources")
    opt(p, "--out")
    opt(p, "--embed-seed", type=int)
    opt(p, "--window", type=int, help="STFT window for --oracle")
    opt(p, "--hop", type=int, help="STFT hop for --oracle")
    opt(p, "--threshold", type=float)

    p = command("eval", "score separated estimates against manifest references")
    opt(p, "--manifest")
    opt(p, "--estimates", help="directory of <id>_s<k>.wav estimates")
    opt(p, "--out", help="output directory for report.json")
    opt(p, "--split", choices=["train", "val"])
    opt(p, "--sources", type=int, nargs="+", help="source indices to score (default: all)")
    opt(p, "--jobs", type=int)

    p = command("query", "produce a text query by textual subtraction")
    opt(p, "--offline", action="store_true", help="token-set fallback, no network")
    opt(p, "--scene", help="global scene description text")
    opt(p, "--region", help="masked-region description text")
    opt(p, "--frame", help="frame image for the describers")
    opt(p, "--mask", help="region mask image")
    opt(p, "--vlm", help="provider JSON for the scene describer")
    opt(p, "--describer", help="provider JSON for the region describer")
    opt(p, "--llm", help="provider JSON for the subtraction LLM")
    opt(p, "--audit-log", help="JSON Lines log of provider requests")
    opt(p, "--out", help="optional directory for query.json")

    p = command("plot", "render log-magnitude spectrogram PNGs")
    opt(p, "--mixture")
    opt(p, "--estimate")
    opt(p, "--reference")
    opt(p, "--input", action="append", help="extra WAV (repeatable), named after its stem")
    opt(p, "--out")
    opt(p, "--window", type=int)
    opt(p, "--hop", type=int)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over the config file over ``DEFAULTS[command]``."""
    merged = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliIOError(f"--config: file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: invalid JSON ({exc})") from None
        if isinstance(data.get(command), dict):
            data = data[command]
        unknown = sorted(set(data) - set(merged) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"--config: unknown option(s) for {command}: {', '.join(unknown)}")
        merged.update({k: v for k, v in data.items() if k in merged})
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _require(opts: dict, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if opts.get(n) in (None, "", [])]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _existing_dir(opts, name) -> Path:
    p = Path(opts[name])
    if not p.is_dir():
        raise CliIOError(f"--{name.replace('_', '-')}: directory not found: {p}")
    return p


def _existing_file(opts, name) -> Path:
    p = Path(opts[name])
    if not p.is_file():
        raise CliIOError(f"--{name.replace('_', '-')}: file not found: {p}")
    return p


def _read_manifest(opts) -> MixtureManifest:
    manifest = MixtureManifest.read(_existing_file(opts, "manifest"))
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# subcommands


def cmd_mix(opts: dict) -> int:
    _require(opts, "fg", "bg", "out")
    fg, bg = _existing_dir(opts, "fg"), _existing_dir(opts, "bg")
    config = DatasetConfig(
        pairs=opts["pairs"],
        n_entries=opts["n_entries"],
        seed=opts["seed"],
        snr_db=opts["snr_db"],
        snr_range=tuple(opts["snr_range"]),
        duration_s=opts["duration"],
        target_rate=opts["rate"],
        target_rms=opts["target_rms"],
        val_fraction=opts["val_fraction"],
    )
    manifest = build_dataset(fg, bg, opts["out"], config, jobs=opts["jobs"])
    print(f"wrote {len(manifest)} entries to {Path(opts['out']) / 'manifest.jsonl'}")
    return EXIT_OK


def _parse_widths(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(w) for w in text)
    return tuple(int(w) for w in str(text).split(",") if w.strip())


def cmd_train(opts: dict) -> int:
    _require(opts, "manifest", "out")
    manifest = _read_manifest(opts)
    entries = load_entries(manifest, opts["split"])
    if not entries:
        raise UsageError(f"--split {opts['split']}: no entries selected")
    stft_cfg = StftConfig(opts["window"], opts["hop"])
    model_cfg = ModelConfig(
        UNetConfig(out_channels=opts["channels"], widths=_parse_widths(opts["widths"])),
        embed_dim=opts["embed_dim"],
        warp_bins=opts["warp_bins"],
    )
    train_cfg = TrainConfig(
        batch_size=opts["batch_size"],
        learning_rate=opts["lr"],
        epochs=opts["epochs"],
        seed=opts["seed"],
        weight_floor=opts["weight_floor"],
        optimizer_kind=opts["optimizer"],
    )
    samples = training_samples(entries, stft_cfg, opts["embed_dim"], opts["embed_seed"], opts["threshold"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    history: list[float] = []
    with open(out / "train_log.tsv", "w", encoding="utf-8") as log_file:
        params = train(samples, train_cfg, opts["init_seed"], model_cfg, history=history, log_file=log_file)
    extra = {
        "embed_seed": opts["embed_seed"],
        "train": {k: opts[k] for k in ("epochs", "lr", "batch_size", "seed", "init_seed", "optimizer", "split")},
        "loss_initial": history[0],
        "loss_final": history[-1],
        "n_samples": len(samples),
    }
    save_checkpoint(out / "model.npz", params, stft_cfg, extra)
    print(f"trained on {len(samples)} entries: loss {history[0]:.4f} -> {history[-1]:.4f}; wrote {out / 'model.npz'}")
    return EXIT_OK


def slugify(text: str, limit: int = 40) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")[:limit].strip("-")
    return slug or "query"


def _query_vectors(opts, dim, embed_seed) -> list[tuple[str, np.ndarray]]:
    named = []
    for text in opts["query"] or []:
        named.append((slugify(text), text_to_embedding(text, dim, embed_seed).values))
    for path in opts["embedding"] or []:
        p = Path(path)
        if not p.is_file():
            raise CliIOError(f"--embedding: file not found: {p}")
        vec = np.load(p, allow_pickle=False)
        if vec.shape != (dim,):
            raise UsageError(f"--embedding {p}: expected a vector of length {dim}, got shape {vec.shape}")
        named.append((slugify(p.stem), vec))
    return named


def cmd_separate(opts: dict) -> int:
    _require(opts, "out")
    out = Path(opts["out"])
    if opts["oracle"]:
        if not opts["manifest"]:
            raise UsageError("--oracle needs --manifest (reference sources come from it)")
        manifest = _read_manifest(opts)
        cfg = StftConfig(opts["window"], opts["hop"])
        count = 0
        for le in load_entries(manifest, opts["split"]):
            spec = stft(le.mixture, cfg)
            mix_mag = magnitude(spec)
            masks = [ideal_binary_mask(magnitude(stft(s, cfg)), mix_mag, opts["threshold"]) for s in le.sources]
            for k, est in enumerate(separate_with_masks(spec, masks)):
                write_wav(estimate_path(out, le.entry.id, k), est)
                count += 1
        print(f"wrote {count} oracle estimates to {out}")
        return EXIT_OK

    _require(opts, "checkpoint")
    params, stft_cfg, extra = load_checkpoint(_existing_file(opts, "checkpoint"))
    embed_seed = opts["embed_seed"] if opts["embed_seed"] is not None else extra.get("embed_seed", 0)
    dim = params.config.embed_dim
    if opts["manifest"]:
        if opts["input"]:
            raise UsageError("--input and --manifest are mutually exclusive")
        manifest = _read_manifest(opts)
        count = 0
        for le in load_entries(manifest, opts["split"]):
            queries = [text_to_embedding(t, dim, embed_seed) for t in le.entry.query_texts]
            for k, est in enumerate(separate(le.mixture, queries, params, stft_cfg)):
                write_wav(estimate_path(out, le.entry.id, k), est)
                count += 1
        print(f"wrote {count} estimates to {out}")
        return EXIT_OK

    _require(opts, "input")
    named = _query_vectors(opts, dim, embed_seed)
    if not named:
        raise UsageError("give at least one --query or --embedding")
    clip = read_wav(_existing_file(opts, "input"))
    stem = Path(opts["input"]).stem
    outputs = separate(clip, [v for _, v in named], params, stft_cfg)
    for i, ((slug, _), est) in enumerate(zip(named, outputs)):
        path = out / f"{stem}_q{i}_{slug}.wav"
        write_wav(path, est)
        print(path)
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    _require(opts, "manifest", "estimates", "out")
    manifest = _read_manifest(opts)
    est_dir = _existing_dir(opts, "estimates")
    jobs = []
    for le in load_entries(manifest, opts["split"]):
        indices = opts["sources"] if opts["sources"] is not None else range(len(le.sources))
        for k in indices:
            if not 0 <= k < len(le.sources):
                raise UsageError(f"--sources: entry {le.entry.id} has no source {k}")
            path = estimate_path(est_dir, le.entry.id, k)
            if not path.is_file():
                raise CliIOError(f"--estimates: missing {path}")
            jobs.append((f"{le.entry.id}_s{k}", path, le.sources[k]))
    if not jobs:
        raise UsageError("no (estimate, reference) pairs selected")
    cfg = EmbedderConfig()

    def score(job):
        pair_id, path, ref = job
        est = read_wav(path)
        if len(est) != len(ref):
            raise ValueError(f"{path}: {len(est)} samples, reference has {len(ref)}")
        return evaluate_pair(pair_id, est, ref, cfg), embed_audio(est, cfg), embed_audio(ref, cfg)

    n_jobs = max(1, opts["jobs"])
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(score, jobs))
    else:
        results = [score(j) for j in jobs]
    rows = [r[0] for r in results]
    dataset_fd = None
    if len(results) >= 2:
        est_emb = np.stack([r[1] for r in results])
        ref_emb = np.stack([r[2] for r in results])
        dataset_fd = frechet_distance(fit_gaussian(est_emb), fit_gaussian(ref_emb))
    report = build_report(rows, dataset_fd)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    agg = report["aggregate"]
    print(f"{agg['count']} pairs: si_sdr {agg['si_sdr']:.2f} dB, sdr {agg['sdr']:.2f} dB, "
          f"fd {agg['fd']:.3f}, kld {agg['kld']:.4f}; wrote {out / 'report.json'}")
    return EXIT_OK


def _provider(opts, name) -> ProviderConfig:
    return ProviderConfig.from_file(_existing_file(opts, name))


def cmd_query(opts: dict) -> int:
    if opts["offline"]:
        _require(opts, "scene", "region")
        query = fallback_subtract(opts["scene"], opts["region"])
        scene, region = opts["scene"], opts["region"]
    else:
        _require(opts, "llm")
        audit = opts["audit_log"]
        if opts["scene"]:
            d_v = SceneDescription(opts["scene"], "manual", opts["frame"] or "")
        else:
            _require(opts, "frame", "vlm")
            vlm = _provider(opts, "vlm")
            d_v = global_describe(opts["frame"], vlm, ChatClient(vlm, audit_log=audit))
        if opts["region"]:
            d_a = RegionalDescription(opts["region"], "manual", opts["frame"] or "", opts["mask"] or "")
        else:
            _require(opts, "frame", "mask", "describer")
            desc = _provider(opts, "describer")
            d_a = regional_describe(opts["frame"], opts["mask"], desc, ChatClient(desc, audit_log=audit))
        llm = _provider(opts, "llm")
        query = textual_subtract(d_v, d_a, llm, ChatClient(llm, audit_log=audit))
        scene, region = d_v.text, d_a.text
    print(query.text)
    if opts["out"]:
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        record = {"text": query.text, "origin": query.origin, "scene": scene, "region": region}
        (out / "query.json").write_text(json.dumps(record, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_plot(opts: dict) -> int:
    from .plot import write_spectrogram_png

    _require(opts, "out")
    targets = [(role, opts[role]) for role in ("mixture", "estimate", "reference") if opts[role]]
    targets += [(Path(p).stem, p) for p in opts["input"] or []]
    if not targets:
        raise UsageError("give at least one of --mixture, --estimate, --reference, --input")
    cfg = StftConfig(opts["window"], opts["hop"])
    for role, path in targets:
        p = Path(path)
        if not p.is_file():
            raise CliIOError(f"--{role if role in ('mixture', 'estimate', 'reference') else 'input'}: file not found: {p}")
        print(write_spectrogram_png(Path(opts["out"]) / f"{role}.png", read_wav(p), cfg))
    return EXIT_OK


COMMANDS = {
    "mix": cmd_mix,
    "train": cmd_train,
    "separate": cmd_separate,
    "eval": cmd_eval,
    "query": cmd_query,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        opts = resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except ProviderError as exc:
        code, msg = EXIT_PROVIDER, str(exc)
    except (TrainingDivergedError, FloatingPointError, np.linalg.LinAlgError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, str(exc)
    except ValueError as exc:
        code, msg = EXIT_USAGE, str(exc)
    print(f"qsep {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
