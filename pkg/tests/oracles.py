"""Slow, loop-based reference implementations used only by the tests."""

import math


def brute_force_eer(scores, labels):
    """Sweep every candidate threshold with explicit counting loops.

    Accept when score >= threshold.  Candidates are the distinct scores plus
    +inf.  At the first candidate where FRR >= FAR, interpolate linearly with
    the previous candidate on the FRR - FAR difference.
    """
    scores = [float(s) for s in scores]
    labels = [bool(x) for x in labels]
    n_tgt = sum(labels)
    n_non = len(labels) - n_tgt
    candidates = sorted(set(scores)) + [math.inf]
    points = []
    for tau in candidates:
        false_reject = 0
        false_accept = 0
        for s, is_tgt in zip(scores, labels):
            if is_tgt and s < tau:
                false_reject += 1
            if not is_tgt and s >= tau:
                false_accept += 1
        points.append((false_reject / n_tgt, false_accept / n_non))
    prev = None
    for frr, far in points:
        if frr >= far:
            if frr == far or prev is None:
                return frr
            d0 = prev[0] - prev[1]
            d1 = frr - far
            w = -d0 / (d1 - d0)
            return prev[0] + w * (frr - prev[0])
        prev = (frr, far)
    raise AssertionError("sweep never crossed")


def _mean_std(xs):
    m = sum(xs) / len(xs)
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def full_snorm(score, enroll_cohort, test_cohort):
    """Symmetric s-norm against entire cohorts (population std)."""
    me, se = _mean_std(list(enroll_cohort))
    mt, st = _mean_std(list(test_cohort))
    return 0.5 * ((score - me) / se + (score - mt) / st)
