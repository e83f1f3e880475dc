"""Cosine scoring, adaptive score normalization and EER.

Text formats (whitespace separated, one record per line):

    trial list   ``label enroll_id test_id``      label is 0 or 1
    score file   ``enroll_id test_id score``      score printed with 17 significant digits
    embeddings   ``utterance_id v_1 ... v_E``
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class SnormError(ArithmeticError):
    """A cohort score distribution has zero spread."""


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.trials) != self.scores.shape[0]:
            raise ValueError(f"{len(self.trials)} trials but {self.scores.shape[0]} scores")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.is_target for t in self.trials], dtype=bool)

    def __len__(self) -> int:
        return len(self.trials)


def cosine_score(e1, e2) -> float:
    """Dot product of two unit vectors, clipped to [-1, 1]."""
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    return float(min(1.0, max(-1.0, np.sum(a * b))))


def score_trials(trials: list[Trial], embeddings: dict[str, np.ndarray]) -> ScoreSet:
    missing = sorted(({t.enroll_id for t in trials} | {t.test_id for t in trials}) - embeddings.keys())
    if missing:
        raise KeyError(f"no embedding for {len(missing)} ids, e.g. {missing[:3]}")
    return ScoreSet(trials, [cosine_score(embeddings[t.enroll_id], embeddings[t.test_id]) for t in trials])


# ---------------------------------------------------------------------------
# Adaptive s-norm
# ---------------------------------------------------------------------------

def top_k_stats(cohort_scores, top_k: int) -> tuple[float, float]:
    """Mean and population std of the ``top_k`` largest cohort scores."""
    s = np.sort(np.asarray(cohort_scores, dtype=np.float64))[::-1]
    if not 2 <= top_k <= s.shape[0]:
        raise ValueError(f"need 2 <= top_k <= cohort size ({s.shape[0]}), got {top_k}")
    top = s[:top_k]
    return float(top.mean()), float(top.std())


def snorm(score: float, enroll_cohort_scores, test_cohort_scores, top_k: int) -> float:
    """Symmetric adaptive s-norm of one raw score given both sides' cohort scores."""
    mu_e, sd_e = top_k_stats(enroll_cohort_scores, top_k)
    mu_t, sd_t = top_k_stats(test_cohort_scores, top_k)
    if sd_e == 0.0:
        raise SnormError("enroll-side cohort scores have zero spread")
    if sd_t == 0.0:
        raise SnormError("test-side cohort scores have zero spread")
    return 0.5 * ((score - mu_e) / sd_e + (score - mu_t) / sd_t)


def adaptive_snorm(raw: ScoreSet, embeddings: dict[str, np.ndarray], cohort_embeddings, top_k: int) -> ScoreSet:
    """Normalize every trial score against its enroll and test cohort statistics."""
    cohort = np.asarray(cohort_embeddings, dtype=np.float64)
    if cohort.ndim != 2 or not 2 <= top_k <= cohort.shape[0]:
        raise ValueError(f"need a (M, E) cohort with 2 <= top_k <= M, got shape {cohort.shape}, top_k={top_k}")
    stats: dict[str, tuple[float, float]] = {}

    def side(uid: str, which: str) -> tuple[float, float]:
        if uid not in stats:
            scores = [cosine_score(embeddings[uid], c) for c in cohort]
            stats[uid] = top_k_stats(scores, top_k)
        mu, sd = stats[uid]
        if sd == 0.0:
            raise SnormError(f"{which}-side cohort scores for {uid!r} have zero spread")
        return mu, sd

    out = []
    for trial, s in zip(raw.trials, raw.scores):
        mu_e, sd_e = side(trial.enroll_id, "enroll")
        mu_t, sd_t = side(trial.test_id, "test")
        out.append(0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t))
    return ScoreSet(list(raw.trials), out)


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------

def compute_eer(scores, labels=None) -> float:
    """Equal error rate in [0, 1].

    A trial is accepted when its score is >= the threshold.  Thresholds sweep
    the sorted unique scores plus +inf; where false-reject and false-accept
    rates cross between two adjacent operating points, the crossing of the
    segment joining them with FAR == FRR is returned.
    """
    if isinstance(scores, ScoreSet):
        labels = scores.labels
        scores = scores.scores
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape} scores but {labels.shape} labels")
    tgt = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    if tgt.size == 0 or non.size == 0:
        raise ValueError("EER needs at least one target and one nontarget trial")
    thresholds = np.append(np.unique(scores), np.inf)
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(frr[i])
    # diff[0] is always -1 (nothing rejected, everything accepted), so i >= 1.
    frac = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(frr[i - 1] + frac * (frr[i] - frr[i - 1]))


# ---------------------------------------------------------------------------
# Text files
# ---------------------------------------------------------------------------

def _records(path, ncols_min: int, what: str):
    with open(os.fspath(path), "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < ncols_min:
                raise ValueError(f"{path}:{lineno}: malformed {what} line {line.rstrip()!r}")
            yield lineno, parts


def read_trials(path) -> list[Trial]:
    trials = []
    for lineno, parts in _records(path, 3, "trial"):
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'label enroll_id test_id' with label 0/1")
        trials.append(Trial(parts[1], parts[2], parts[0] == "1"))
    return trials


def format_trials(trials: list[Trial]) -> str:
    return "".join(f"{int(t.is_target)} {t.enroll_id} {t.test_id}\n" for t in trials)


def write_trials(path, trials: list[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_trials(trials))


def format_scores(scores: ScoreSet) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {s:.17g}\n" for t, s in zip(scores.trials, scores.scores))


def read_scores(path) -> dict[tuple[str, str], float]:
    out = {}
    for lineno, parts in _records(path, 3, "score"):
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'enroll_id test_id score'")
        out[(parts[0], parts[1])] = float(parts[2])
    return out


def attach_labels(scores: dict[tuple[str, str], float], trials: list[Trial]) -> ScoreSet:
    missing = [t for t in trials if (t.enroll_id, t.test_id) not in scores]
    if missing:
        raise KeyError(f"{len(missing)} trials have no score, e.g. {missing[0].enroll_id} {missing[0].test_id}")
    return ScoreSet(list(trials), [scores[(t.enroll_id, t.test_id)] for t in trials])


def format_embeddings(ids: list[str], vectors: np.ndarray) -> str:
    return "".join(f"{uid} " + " ".join(f"{x:.17g}" for x in vec) + "\n" for uid, vec in zip(ids, vectors))


def read_embeddings(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dim = None
    for lineno, parts in _records(path, 2, "embedding"):
        vec = np.array([float(x) for x in parts[1:]])
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise ValueError(f"{path}:{lineno}: embedding has {vec.size} values, expected {dim}")
        out[parts[0]] = vec
    return out


def all_pairs_trials(ids: list[str], speakers: list[int]) -> list[Trial]:
    """Every unordered pair of distinct utterances."""
    return [
        Trial(ids[i], ids[j], speakers[i] == speakers[j])
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
    ]
