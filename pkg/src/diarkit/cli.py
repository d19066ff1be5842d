"""One binary, eight subcommands, wiring the modules into a pipeline.

Every option can also come from a plain-text ``key=value`` config file
(``--config``); explicit flags win. ``--dry-run`` stops after validating the
configuration and the input paths. Exit codes: 0 success, 2 usage or config
error, 3 missing or malformed file, 4 invalid input, 5 diverged training,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import synthdata
from .backend import (
    CONV_PCA_FRACTION,
    EmbeddingRecord,
    load_backend,
    read_embeddings,
    save_backend,
    write_embeddings,
)
from .clustering import GRID_SIZE, calibrate_threshold
from .der import (
    DEFAULT_COLLAR_S,
    by_conversation,
    build_hypothesis,
    compute_der,
    der_report,
    read_rttm,
    read_speaker_counts,
    speaker_counts,
    write_rttm,
)
from .errors import FormatError, InvalidInputError, TrainingDivergedError
from .features import (
    CMN_WINDOW_FRAMES,
    compute_mfcc,
    read_features,
    read_sad,
    read_wav,
    segment_speech,
    sliding_cmn,
    write_features,
)
from .network import (
    DimOverrides,
    build_architecture,
    initialize_network,
    load_network,
    save_network,
)
from .pipeline import (
    conversation_embeddings,
    conversation_scores,
    diarize_conversation,
    fit_backend,
    utterance_embeddings,
    windowed_utterance_embeddings,
)
from .training import TrainConfig, load_train_set, train

_TRAIN_DEFAULTS = TrainConfig()
_DIM_DEFAULTS = DimOverrides()
_SYNTH_DEFAULTS = synthdata.CorpusSpec()


class _UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_taps(raw: str) -> tuple[str, ...]:
    return tuple(t for t in (p.strip() for p in raw.split(",")) if t)


_FLAG = object()  # sentinel converter for boolean switches


@dataclass(frozen=True)
class _Opt:
    flag: str
    conv: object = str
    default: object = None
    required: bool = False
    help: str = ""
    choices: tuple = ()

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_COMMON = (
    _Opt("--config", str, help="key=value file supplying any unset option"),
    _Opt("--dry-run", _FLAG, help="validate configuration and inputs, then stop"),
)

_SEED = _Opt("--seed", int, help="RNG seed (falls back to DIARKIT_SEED, then 0)")
_JOBS = _Opt("--jobs", int, default=1, help="parallel workers for per-conversation stages")

_COMMANDS: dict[str, tuple[str, tuple[_Opt, ...]]] = {
    "features": (
        "compute MFCC+CMN features for every conversation in a SAD file",
        (
            _Opt("--wav-dir", required=True, help="directory of {conversation}.wav files"),
            _Opt("--sad", required=True, help="speech regions, one 'conv start end' per line"),
            _Opt("--out", required=True, help="output directory for {conversation}.fea"),
            _Opt("--cmn-window", int, CMN_WINDOW_FRAMES, help="sliding CMN window in frames"),
            _JOBS,
        ),
    ),
    "synth": (
        "generate a synthetic train/eval corpus",
        (
            _Opt("--out", required=True, help="corpus root directory"),
            _Opt("--speakers", int, _SYNTH_DEFAULTS.n_speakers),
            _Opt("--separation", float, _SYNTH_DEFAULTS.separation,
                 help="radius of the speaker-mean sphere"),
            _Opt("--train-utts", int, _SYNTH_DEFAULTS.train_utts, help="utterances per speaker"),
            _Opt("--train-utt-s", float, _SYNTH_DEFAULTS.train_utt_s),
            _Opt("--convs", int, _SYNTH_DEFAULTS.n_convs),
            _Opt("--conv-s", float, _SYNTH_DEFAULTS.conv_s),
            _Opt("--turn-min", float, _SYNTH_DEFAULTS.turn_min_s),
            _Opt("--turn-max", float, _SYNTH_DEFAULTS.turn_max_s),
            _Opt("--speakers-per-conv", int, _SYNTH_DEFAULTS.speakers_per_conv),
            _Opt("--smoothing", float, _SYNTH_DEFAULTS.smoothing),
            _Opt("--audio", _FLAG, help="also synthesize waveforms and derive features from them"),
            _SEED,
        ),
    ),
    "train": (
        "train an embedding network on a labeled utterance manifest",
        (
            _Opt("--manifest", required=True, help="'utt_id speaker_id feature_path' lines"),
            _Opt("--out", required=True, help="output model file"),
            _Opt("--arch", str, "ftdnn-msa", choices=("tdnn", "etdnn", "ftdnn", "ftdnn-msa")),
            _Opt("--taps", _parse_taps, help="comma-separated pooling taps (ftdnn-msa only)"),
            _Opt("--epochs", int, _TRAIN_DEFAULTS.epochs),
            _Opt("--batch-size", int, _TRAIN_DEFAULTS.batch_size),
            _Opt("--lr-start", float, _TRAIN_DEFAULTS.lr_start),
            _Opt("--lr-end", float, _TRAIN_DEFAULTS.lr_end),
            _Opt("--momentum", float, _TRAIN_DEFAULTS.momentum),
            _Opt("--l2", float, _TRAIN_DEFAULTS.l2_coeff),
            _Opt("--dropout", float, _TRAIN_DEFAULTS.dropout_prob),
            _Opt("--ortho-interval", int, _TRAIN_DEFAULTS.ortho_interval),
            _Opt("--window-frames", int, _TRAIN_DEFAULTS.window_frames),
            _Opt("--window-shift", int, _TRAIN_DEFAULTS.window_shift),
            _Opt("--min-window-frames", int, _TRAIN_DEFAULTS.min_window_frames),
            _Opt("--pooling", str, _TRAIN_DEFAULTS.pooling, choices=("windowed", "whole")),
            _Opt("--feat-dim", int, _DIM_DEFAULTS.feat_dim),
            _Opt("--width", int, _DIM_DEFAULTS.width),
            _Opt("--factor-width", int, _DIM_DEFAULTS.factor_width),
            _Opt("--inner-dim", int, _DIM_DEFAULTS.inner_dim),
            _Opt("--pool-width", int, _DIM_DEFAULTS.pool_width),
            _Opt("--branch-dim", int, _DIM_DEFAULTS.branch_dim),
            _Opt("--embed-dim", int, _DIM_DEFAULTS.embed_dim),
            _SEED,
        ),
    ),
    "embed": (
        "extract embeddings, either per manifest utterance or per SAD segment",
        (
            _Opt("--model", required=True),
            _Opt("--out", required=True, help="output embedding archive"),
            _Opt("--manifest", help="labeled utterances (one embedding each)"),
            _Opt("--window", _FLAG,
                 help="with --manifest: embed sliding windows of each utterance "
                      "instead of the whole thing (for backend training)"),
            _Opt("--features", help="feature directory (segment mode, with --sad)"),
            _Opt("--sad", help="speech regions (segment mode, with --features)"),
            _JOBS,
        ),
    ),
    "backend-fit": (
        "fit the PCA whitener and PLDA on labeled embeddings",
        (
            _Opt("--embeddings", required=True, help="archive of speaker-labeled embeddings"),
            _Opt("--out", required=True, help="output backend file"),
            _Opt("--pca-dim", int, help="keep this many whitened dimensions"),
        ),
    ),
    "diarize": (
        "cluster each conversation's segments and write an RTTM hypothesis",
        (
            _Opt("--model", required=True),
            _Opt("--backend", required=True),
            _Opt("--features", required=True, help="directory of {conversation}.fea"),
            _Opt("--sad", required=True),
            _Opt("--out", required=True, help="output RTTM"),
            _Opt("--threshold", float, help="stop merging below this score"),
            _Opt("--oracle-k", help="file of 'conversation num_speakers' lines"),
            _Opt("--pca-fraction", float, CONV_PCA_FRACTION,
                 help="retained fraction for conversation-level PCA"),
            _JOBS,
        ),
    ),
    "score": (
        "score a hypothesis RTTM against a reference",
        (
            _Opt("--ref", required=True),
            _Opt("--hyp", required=True),
            _Opt("--sad", required=True),
            _Opt("--collar", float, DEFAULT_COLLAR_S),
            _Opt("--breakdown", _FLAG, help="add per-speaker-count groups to the report"),
        ),
    ),
    "calibrate": (
        "pick clustering thresholds by cross-validated DER and write held-out labels",
        (
            _Opt("--model", required=True),
            _Opt("--backend", required=True),
            _Opt("--features", required=True),
            _Opt("--sad", required=True),
            _Opt("--ref", required=True),
            _Opt("--out", required=True, help="RTTM from each conversation's held-out fold"),
            _Opt("--folds", int, 2),
            _Opt("--grid-size", int, GRID_SIZE),
            _Opt("--pca-fraction", float, CONV_PCA_FRACTION),
            _Opt("--collar", float, DEFAULT_COLLAR_S),
        ),
    ),
}


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="diarkit", description=__doc__.splitlines()[0])
    subs = top.add_subparsers(dest="command", metavar="command")
    for name, (help_text, opts) in _COMMANDS.items():
        sub = subs.add_parser(name, help=help_text, description=help_text)
        for opt in opts + _COMMON:
            if opt.conv is _FLAG:
                sub.add_argument(opt.flag, action="store_const", const=True,
                                 default=None, help=opt.help)
            else:
                # raw strings here; one shared conversion path handles both
                # command-line and config-file values
                sub.add_argument(opt.flag, default=None, help=opt.help, metavar=opt.dest.upper())
    return top


def _read_config(path) -> dict[str, str]:
    values = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise _UsageError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, _, value = text.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _convert(opt: _Opt, raw, source: str):
    if opt.conv is _FLAG:
        value = _parse_bool(raw) if isinstance(raw, str) else bool(raw)
    else:
        try:
            value = opt.conv(raw)
        except (TypeError, ValueError) as exc:
            raise _UsageError(f"{source} {opt.flag}: {exc}") from exc
    if opt.choices and value not in opt.choices:
        raise _UsageError(
            f"{source} {opt.flag}: {value!r} is not one of {', '.join(opt.choices)}")
    return value


def _finalize(command: str, ns: argparse.Namespace) -> argparse.Namespace:
    """Merge config-file values under explicit flags, convert, apply defaults."""
    opts = _COMMANDS[command][1] + _COMMON
    known = {o.dest: o for o in opts}
    config = _read_config(ns.config) if ns.config else {}
    for key in config:
        if key not in known or key == "config":
            raise _UsageError(f"config key {key!r} is not an option of '{command}'")
    for opt in opts:
        raw = getattr(ns, opt.dest)
        if raw is not None:
            value = raw if opt.conv is _FLAG else _convert(opt, raw, "argument")
        elif opt.dest in config:
            value = _convert(opt, config[opt.dest], "config")
        else:
            value = False if opt.conv is _FLAG else opt.default
        setattr(ns, opt.dest, value)
    missing = [o.flag for o in opts if o.required and getattr(ns, o.dest) is None]
    if missing:
        raise _UsageError(f"diarkit {command}: missing {', '.join(missing)}")
    if hasattr(ns, "jobs") and ns.jobs < 1:
        raise _UsageError("--jobs must be at least 1")
    return ns


def _resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("DIARKIT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise _UsageError(f"DIARKIT_SEED must be an integer, got {env!r}") from None


def _require_file(path, what: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _atomic(path, write_fn: Callable) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    parent = os.path.dirname(os.path.abspath(os.fspath(path)))
    os.makedirs(parent, exist_ok=True)
    tmp = os.path.join(parent, f".{os.path.basename(os.fspath(path))}.{os.getpid()}.tmp")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _sad_by_conversation(path) -> dict[str, list]:
    marks = read_sad(path)
    if not marks:
        raise InvalidInputError(f"{path}: no speech regions")
    by_conv: dict[str, list] = {}
    for m in marks:
        by_conv.setdefault(m.conversation_id, []).append(m)
    return {cid: by_conv[cid] for cid in sorted(by_conv)}


def _run_jobs(jobs: int, fn, tasks, initializer=None, initargs=()):
    """Ordered map over tasks, in-process when jobs == 1."""
    if jobs == 1 or len(tasks) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=initializer,
                             initargs=initargs) as pool:
        return list(pool.map(fn, tasks))


# ------------------------------------------------------------------ features

def _features_one(task):
    conv, wav_path, out_path, cmn_window, marks = task
    feats = sliding_cmn(compute_mfcc(read_wav(wav_path)), cmn_window)
    _atomic(out_path, lambda p: write_features(p, feats))
    return f"{conv} {feats.num_frames} frames, {len(segment_speech(marks))} segments"


def _cmd_features(ns) -> int:
    by_conv = _sad_by_conversation(ns.sad)
    tasks = []
    for conv, marks in by_conv.items():
        wav_path = os.path.join(ns.wav_dir, f"{conv}.wav")
        _require_file(wav_path, f"waveform for {conv}")
        tasks.append((conv, wav_path, os.path.join(ns.out, f"{conv}.fea"),
                      ns.cmn_window, marks))
    if ns.dry_run:
        print(f"dry run: {len(tasks)} conversations validated")
        return 0
    for line in _run_jobs(ns.jobs, _features_one, tasks):
        print(line)
    return 0


# --------------------------------------------------------------------- synth

def _cmd_synth(ns) -> int:
    spec = synthdata.CorpusSpec(
        n_speakers=ns.speakers,
        separation=ns.separation,
        train_utts=ns.train_utts,
        train_utt_s=ns.train_utt_s,
        n_convs=ns.convs,
        conv_s=ns.conv_s,
        turn_min_s=ns.turn_min,
        turn_max_s=ns.turn_max,
        speakers_per_conv=ns.speakers_per_conv,
        smoothing=ns.smoothing,
        seed=_resolve_seed(ns.seed),
        audio=ns.audio,
    )
    if ns.dry_run:
        print(f"dry run: corpus spec valid ({spec.n_speakers} speakers, {spec.n_convs} conversations)")
        return 0
    paths = synthdata.write_corpus(ns.out, spec)
    for key in sorted(paths):
        print(f"{key} {paths[key]}")
    return 0


# --------------------------------------------------------------------- train

def _cmd_train(ns) -> int:
    dims = DimOverrides(
        feat_dim=ns.feat_dim, width=ns.width, factor_width=ns.factor_width,
        inner_dim=ns.inner_dim, pool_width=ns.pool_width,
        branch_dim=ns.branch_dim, embed_dim=ns.embed_dim,
    )
    cfg = TrainConfig(
        epochs=ns.epochs, batch_size=ns.batch_size, lr_start=ns.lr_start,
        lr_end=ns.lr_end, momentum=ns.momentum, l2_coeff=ns.l2,
        dropout_prob=ns.dropout, ortho_interval=ns.ortho_interval,
        window_frames=ns.window_frames, window_shift=ns.window_shift,
        min_window_frames=ns.min_window_frames, pooling=ns.pooling,
        seed=_resolve_seed(ns.seed),
    )
    _require_file(ns.manifest, "manifest")
    ts = load_train_set(ns.manifest)
    arch = ns.arch.replace("-", "_")
    spec = build_architecture(arch, num_speakers=len(ts.speakers),
                              taps=ns.taps, dims=dims)
    if ns.dry_run:
        print(f"dry run: {arch} with {len(ts.speakers)} speakers, "
              f"{len(ts.features)} utterances")
        return 0
    print(f"training {arch}: {len(ts.features)} utterances, {len(ts.speakers)} speakers")
    net = initialize_network(spec, seed=cfg.seed)
    train(net, ts, cfg, log=print)
    _atomic(ns.out, lambda p: save_network(net, p))
    print(f"model {ns.out}")
    return 0


# --------------------------------------------------------------------- embed

_EMBED_STATE: dict = {}


def _embed_init(model_path):
    _EMBED_STATE["net"] = load_network(model_path)


def _embed_one(task):
    conv, feats_path, marks = task
    segments, vecs = conversation_embeddings(_EMBED_STATE["net"], read_features(feats_path), marks)
    return [EmbeddingRecord(conv, s.start_s, s.end_s, "", v)
            for s, v in zip(segments, vecs)]


def _cmd_embed(ns) -> int:
    segment_mode = ns.features is not None or ns.sad is not None
    if segment_mode == (ns.manifest is not None):
        raise _UsageError("diarkit embed: use either --manifest or --features with --sad")
    if segment_mode and (ns.features is None or ns.sad is None):
        raise _UsageError("diarkit embed: segment mode needs both --features and --sad")
    _require_file(ns.model, "model")

    if not segment_mode:
        _require_file(ns.manifest, "manifest")
        if ns.dry_run:
            print("dry run: manifest mode")
            return 0
        extract = windowed_utterance_embeddings if ns.window else utterance_embeddings
        records = extract(load_network(ns.model), ns.manifest)
    else:
        if ns.window:
            raise _UsageError("diarkit embed: --window only applies to --manifest mode")
        by_conv = _sad_by_conversation(ns.sad)
        tasks = []
        for conv, marks in by_conv.items():
            feats_path = os.path.join(ns.features, f"{conv}.fea")
            _require_file(feats_path, f"features for {conv}")
            tasks.append((conv, feats_path, marks))
        if ns.dry_run:
            print(f"dry run: {len(tasks)} conversations validated")
            return 0
        records = []
        for batch in _run_jobs(ns.jobs, _embed_one, tasks,
                               initializer=_embed_init, initargs=(ns.model,)):
            records.extend(batch)
    _atomic(ns.out, lambda p: write_embeddings(p, records))
    print(f"{len(records)} embeddings {ns.out}")
    return 0


# --------------------------------------------------------------- backend-fit

def _cmd_backend_fit(ns) -> int:
    _require_file(ns.embeddings, "embedding archive")
    if ns.dry_run:
        print("dry run: inputs present")
        return 0
    records = read_embeddings(ns.embeddings)
    whitener, plda = fit_backend(records, pca_dim=ns.pca_dim)
    _atomic(ns.out, lambda p: save_backend(p, whitener, plda))
    print(f"backend on {len(records)} embeddings, "
          f"{whitener.transform.shape[1]} -> {whitener.transform.shape[0]} dims, {ns.out}")
    return 0


# ------------------------------------------------------------------- diarize

_DIARIZE_STATE: dict = {}


def _diarize_init(model_path, backend_path):
    _DIARIZE_STATE["net"] = load_network(model_path)
    _DIARIZE_STATE["whitener"], _DIARIZE_STATE["plda"] = load_backend(backend_path)


def _diarize_one(task):
    conv, feats_path, marks, threshold, oracle_k, pca_fraction = task
    segments, vecs = conversation_embeddings(
        _DIARIZE_STATE["net"], read_features(feats_path), marks)
    return diarize_conversation(
        segments, vecs, _DIARIZE_STATE["whitener"], _DIARIZE_STATE["plda"],
        threshold=threshold, oracle_k=oracle_k, pca_fraction=pca_fraction)


def _cmd_diarize(ns) -> int:
    if (ns.threshold is None) == (ns.oracle_k is None):
        raise _UsageError("diarkit diarize: use exactly one of --threshold or --oracle-k")
    _require_file(ns.model, "model")
    _require_file(ns.backend, "backend")
    counts = None
    if ns.oracle_k is not None:
        _require_file(ns.oracle_k, "oracle speaker counts")
        counts = read_speaker_counts(ns.oracle_k)
    by_conv = _sad_by_conversation(ns.sad)
    tasks = []
    for conv, marks in by_conv.items():
        feats_path = os.path.join(ns.features, f"{conv}.fea")
        _require_file(feats_path, f"features for {conv}")
        k = None
        if counts is not None:
            if conv not in counts:
                raise InvalidInputError(f"{ns.oracle_k}: no speaker count for {conv}")
            k = counts[conv]
        tasks.append((conv, feats_path, marks, ns.threshold, k, ns.pca_fraction))
    if ns.dry_run:
        print(f"dry run: {len(tasks)} conversations validated")
        return 0
    entries = []
    for conv_entries in _run_jobs(ns.jobs, _diarize_one, tasks,
                                  initializer=_diarize_init,
                                  initargs=(ns.model, ns.backend)):
        entries.extend(conv_entries)
    _atomic(ns.out, lambda p: write_rttm(entries, p))
    print(f"{len(by_conv)} conversations {ns.out}")
    return 0


# --------------------------------------------------------------------- score

def _grouped_scores(ref_entries, hyp_entries, sad_path, collar_s):
    ref_by = by_conversation(ref_entries)
    hyp_by = by_conversation(hyp_entries)
    sad_by = _sad_by_conversation(sad_path)
    unmatched = sorted(set(hyp_by) - set(ref_by))
    if unmatched:
        raise InvalidInputError(
            f"hypothesis has conversations missing from the reference: {', '.join(unmatched)}")
    results = {}
    for conv in sorted(ref_by):
        if conv not in sad_by:
            raise InvalidInputError(f"no SAD regions for {conv}")
        results[conv] = compute_der(ref_by[conv], hyp_by.get(conv, []),
                                    sad_by[conv], collar_s=collar_s)
    return results


def _cmd_score(ns) -> int:
    for path, what in ((ns.ref, "reference RTTM"), (ns.hyp, "hypothesis RTTM"),
                       (ns.sad, "SAD file")):
        _require_file(path, what)
    if ns.dry_run:
        print("dry run: inputs present")
        return 0
    ref_entries = read_rttm(ns.ref)
    results = _grouped_scores(ref_entries, read_rttm(ns.hyp), ns.sad, ns.collar)
    counts = speaker_counts(ref_entries) if ns.breakdown else None
    print(der_report(results, counts=counts))
    return 0


# ----------------------------------------------------------------- calibrate

def _cmd_calibrate(ns) -> int:
    for path, what in ((ns.model, "model"), (ns.backend, "backend"),
                       (ns.ref, "reference RTTM"), (ns.sad, "SAD file")):
        _require_file(path, what)
    by_conv = _sad_by_conversation(ns.sad)
    for conv in by_conv:
        _require_file(os.path.join(ns.features, f"{conv}.fea"), f"features for {conv}")
    if ns.dry_run:
        print(f"dry run: {len(by_conv)} conversations validated")
        return 0

    net = load_network(ns.model)
    whitener, plda = load_backend(ns.backend)
    ref_by = by_conversation(read_rttm(ns.ref))
    missing = sorted(set(by_conv) - set(ref_by))
    if missing:
        raise InvalidInputError(f"reference lacks conversations: {', '.join(missing)}")

    segments_by: dict[str, list] = {}
    scores_by: dict[str, np.ndarray] = {}
    for conv, marks in by_conv.items():
        segments, vecs = conversation_embeddings(
            net, read_features(os.path.join(ns.features, f"{conv}.fea")), marks)
        segments_by[conv] = segments
        scores_by[conv] = (conversation_scores(vecs, whitener, plda, ns.pca_fraction)
                           if len(segments) > 1 else np.zeros((1, 1)))

    def der_fn(conv: str, labels: np.ndarray) -> float:
        hyp = build_hypothesis(segments_by[conv], labels.tolist())
        return compute_der(ref_by[conv], hyp, by_conv[conv], collar_s=ns.collar).der

    labels_by, reports = calibrate_threshold(scores_by, der_fn, folds=ns.folds,
                                             grid_size=ns.grid_size)
    print("fold threshold dev_der eval_der")
    for r in reports:
        print(f"{r.fold} {r.threshold:.6f} {r.dev_der:.4f} {r.eval_der:.4f}")
    entries = []
    for conv in sorted(labels_by):
        entries.extend(build_hypothesis(segments_by[conv], labels_by[conv].tolist()))
    _atomic(ns.out, lambda p: write_rttm(entries, p))
    print(f"{len(labels_by)} conversations {ns.out}")
    return 0


# ---------------------------------------------------------------- entry point

_HANDLERS = {
    "features": _cmd_features,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "backend-fit": _cmd_backend_fit,
    "diarize": _cmd_diarize,
    "score": _cmd_score,
    "calibrate": _cmd_calibrate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        ns = _finalize(ns.command, ns)
        return _HANDLERS[ns.command](ns)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - last resort
        print(f"unexpected error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
