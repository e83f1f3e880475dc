"""Command-line driver.

    camhfa synth     CONFIG OUT.feats [--heldout N]
    camhfa trials    FEATURES OUT.trials
    camhfa train     CONFIG FEATURES OUT.ckpt [--log LOG]
    camhfa extract   CHECKPOINT FEATURES OUT.emb [--attention direct|conv]
    camhfa score     EMBEDDINGS TRIALS OUT.scores [--cohort COHORT.emb --top-k K]
    camhfa eval      SCORES TRIALS
    camhfa gradcheck [CONFIG]
    camhfa equiv     [CONFIG]

Exit status is 0 on success, 1 on a failed check or runtime error, 2 on a
usage error.  Outputs are written to a temporary file and renamed into place,
so a failed command leaves nothing behind.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
import tempfile

from threadpoolctl import threadpool_limits

from . import checks, evaluation, synth, train

logger = logging.getLogger("camhfa")

THREADS_ENV = "CAMHFA_THREADS"


# ---------------------------------------------------------------------------
# key=value run configuration
# ---------------------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


# key -> (section, field name, parser)
CONFIG_KEYS = {
    "num_speakers": ("synth", "num_speakers", int),
    "utts_per_speaker": ("synth", "utts_per_speaker", int),
    "frames": ("synth", "frames", int),
    "feature_dim": ("synth", "feature_dim", int),
    "num_layers": ("synth", "num_layers", int),
    "speaker_snr_per_layer": ("synth", "speaker_snr_per_layer", _floats),
    "context_cue_period": ("synth", "context_cue_period", int),
    "noise_sigma": ("synth", "noise_sigma", float),
    "data_seed": ("synth", "seed", int),
    "heads": ("train", "heads", int),
    "context": ("train", "context", int),
    "compression_dim": ("train", "compression_dim", int),
    "embed_dim": ("train", "embed_dim", int),
    "margin": ("train", "margin", float),
    "scale": ("train", "scale", float),
    "margin_type": ("train", "margin_type", str),
    "lr_start": ("train", "lr_start", float),
    "lr_end": ("train", "lr_end", float),
    "lr_decay": ("train", "lr_decay", str),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "weight_decay": ("train", "weight_decay", float),
    "grad_scale_backbone": ("train", "grad_scale_backbone", float),
    "attention": ("train", "attention", str),
    "train_seed": ("train", "seed", int),
    "check_instances": ("checks", "instances", int),
    "check_seed": ("checks", "seed", int),
}


@dataclasses.dataclass(frozen=True)
class CheckSettings:
    instances: int = 100
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class RunConfig:
    synth: synth.SynthSpec
    train: train.TrainConfig
    checks: CheckSettings


class ConfigFileError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown or repeated keys are errors."""
    values: dict[str, dict] = {"synth": {}, "train": {}, "checks": {}}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        section, name, conv = CONFIG_KEYS[key]
        try:
            values[section][name] = conv(value)
        except ValueError:
            raise ConfigFileError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    try:
        spec = synth.SynthSpec(**values["synth"])
        cfg = train.TrainConfig(**values["train"])
        cfg.validate()
        chk = CheckSettings(**values["checks"])
    except ValueError as exc:
        raise ConfigFileError(f"{source}: {exc}") from None
    if chk.instances < 1:
        raise ConfigFileError(f"{source}: check_instances must be >= 1")
    return RunConfig(spec, cfg, chk)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config("")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), path)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def atomic_output(path: str, mode: str = "w"):
    """Yield a temp file next to ``path``; rename on success, delete on failure."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".camhfa-", dir=directory)
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _require_files(*paths: str) -> None:
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"no such file: {p}")


def thread_cap(environ=os.environ) -> int:
    raw = environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigFileError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.heldout is not None:
        utts = synth.generate_heldout(cfg.synth, args.heldout)
    else:
        utts = synth.generate_dataset(cfg.synth)
    with atomic_output(args.out, "wb") as fh:
        fh.write(synth.encode_features(utts))
    print(f"wrote {len(utts)} utterances to {args.out}")
    return 0


def cmd_trials(args) -> int:
    _require_files(args.features)
    utts = synth.read_features(args.features)
    trials = evaluation.all_pairs_trials([u.utterance_id for u in utts], [u.speaker_id for u in utts])
    with atomic_output(args.out) as fh:
        fh.write(evaluation.format_trials(trials))
    print(f"wrote {len(trials)} trials to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _require_files(args.features)
    dataset = synth.read_features(args.features)
    params, head, log = train.train(dataset, cfg.train)
    with atomic_output(args.out, "wb") as fh:
        fh.write(train.encode_checkpoint(params, head))
    text = "".join(f"epoch {line}\n" for line in log.lines())
    if args.log:
        with atomic_output(args.log) as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_extract(args) -> int:
    _require_files(args.checkpoint, args.features)
    params, _ = train.load_checkpoint(args.checkpoint)
    utts = synth.read_features(args.features)
    emb = train.extract_embeddings(utts, params, args.attention)
    with atomic_output(args.out) as fh:
        fh.write(evaluation.format_embeddings([u.utterance_id for u in utts], emb))
    return 0


def cmd_score(args) -> int:
    _require_files(args.embeddings, args.trials, *([args.cohort] if args.cohort else []))
    embeddings = evaluation.read_embeddings(args.embeddings)
    trials = evaluation.read_trials(args.trials)
    scores = evaluation.score_trials(trials, embeddings)
    if args.cohort:
        cohort = list(evaluation.read_embeddings(args.cohort).values())
        scores = evaluation.adaptive_snorm(scores, embeddings, cohort, args.top_k)
    with atomic_output(args.out) as fh:
        fh.write(evaluation.format_scores(scores))
    return 0


def cmd_eval(args) -> int:
    _require_files(args.scores, args.trials)
    scores = evaluation.attach_labels(evaluation.read_scores(args.scores), evaluation.read_trials(args.trials))
    print(f"EER {evaluation.compute_eer(scores):.6f}")
    return 0


def _report(results) -> int:
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    return _report([checks.check_gradients(cfg.checks.seed)])


def cmd_equiv(args) -> int:
    cfg = load_config(args.config)
    return _report(checks.equivalence_suite(cfg.checks.instances, cfg.checks.seed))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camhfa", description="Context-aware attentive pooling toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature file")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--heldout", type=int, metavar="N",
                   help="write N fresh utterances per speaker instead of the training set")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("trials", help="write an all-pairs trial list for a feature file")
    p.add_argument("features")
    p.add_argument("out")
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("train", help="train a back-end and write a checkpoint")
    p.add_argument("config")
    p.add_argument("features")
    p.add_argument("out")
    p.add_argument("--log", help="write the epoch log here instead of stdout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write embeddings for a feature file")
    p.add_argument("checkpoint")
    p.add_argument("features")
    p.add_argument("out")
    p.add_argument("--attention", choices=("direct", "conv"), default="direct")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("score", help="cosine-score a trial list, optionally with adaptive s-norm")
    p.add_argument("embeddings")
    p.add_argument("trials")
    p.add_argument("out")
    p.add_argument("--cohort", help="cohort embedding file for adaptive s-norm")
    p.add_argument("--top-k", type=int, help="cohort scores kept per side (required with --cohort)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="print the EER of a score file")
    p.add_argument("scores")
    p.add_argument("trials")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("config", nargs="?")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equiv", help="degeneration and conv/direct equivalence suites")
    p.add_argument("config", nargs="?")
    p.set_defaults(func=cmd_equiv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "score":
        if (args.cohort is None) != (args.top_k is None):
            parser.error("--cohort and --top-k must be given together")
        if args.top_k is not None and args.top_k < 2:
            parser.error("--top-k must be at least 2")
    if args.command == "synth" and args.heldout is not None and args.heldout < 1:
        parser.error("--heldout must be positive")
    try:
        threads = thread_cap()
    except ConfigFileError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        print(f"camhfa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
