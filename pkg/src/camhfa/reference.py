"""Scalar-loop re-implementation of the full forward pass and training loss.

Written element by element with :mod:`mpmath` arithmetic, independently of
:mod:`camhfa.tensor`.  Inputs may be float or ``mpf``; evaluation happens at
``dps`` decimal digits.  Used as the high-precision side of gradient checks
and as an end-to-end oracle for small instances.
"""

from __future__ import annotations

import mpmath
import numpy as np

from .loss import ClassifierHead
from .pooling import PARAM_NAMES


def _mp(x):
    return [mpmath.mpf(v) if not isinstance(v, mpmath.mpf) else v for v in x]


def _softmax(xs):
    m = max(xs)
    es = [mpmath.exp(x - m) for x in xs]
    s = mpmath.fsum(es)
    return [e / s for e in es]


def embedding(Z, p: dict) -> list:
    """Embedding of one utterance ``Z`` (N+1, T, F) from parameter dict ``p``."""
    Z = np.asarray(Z)
    n1, T, F = Z.shape
    G, L, D = np.asarray(p["Q"]).shape
    E = np.asarray(p["W_out"]).shape[1]
    R = (L - 1) // 2

    def mixed(raw, S):
        w = _softmax(_mp(raw))
        S = np.asarray(S)
        out = []
        for t in range(T):
            row = [mpmath.fsum(w[n] * mpmath.mpf(Z[n, t, f]) for n in range(n1)) for f in range(F)]
            out.append([mpmath.fsum(row[f] * S[f, d] for f in range(F)) for d in range(D)])
        return out

    K = mixed(p["omega_k_raw"], p["S_k"])
    V = mixed(p["omega_v_raw"], p["S_v"])
    Q = np.asarray(p["Q"])
    c = []
    for g in range(G):
        scores = []
        for t in range(T):
            acc = []
            for j in range(-R, R + 1):
                if 0 <= t + j < T:
                    acc.extend(Q[g, j + R, d] * K[t + j][d] for d in range(D))
            scores.append(mpmath.fsum(acc) / L)
        a = _softmax(scores)
        c.extend(mpmath.fsum(a[t] * V[t][d] for t in range(T)) for d in range(D))
    W = np.asarray(p["W_out"])
    b = np.asarray(p["b_out"])
    h = [mpmath.fsum(c[i] * W[i, e] for i in range(G * D)) + b[e] for e in range(E)]
    norm = mpmath.sqrt(mpmath.fsum(x * x for x in h))
    return [x / norm for x in h]


def margin_loss(e, label: int, class_weights, margin: float, scale: float, margin_type: str):
    W = np.asarray(class_weights)
    C, E = W.shape
    cos = []
    for c in range(C):
        row = [W[c, i] for i in range(E)]
        norm = mpmath.sqrt(mpmath.fsum(x * x for x in row))
        cos.append(mpmath.fsum(e[i] * row[i] for i in range(E)) / norm)
    m = mpmath.mpf(margin)
    y = cos[label]
    if margin_type == "additive-cosine":
        target = y - m
    elif y >= mpmath.cos(mpmath.pi - m):
        target = y * mpmath.cos(m) - mpmath.sqrt(max(mpmath.mpf(0), 1 - y * y)) * mpmath.sin(m)
    else:
        target = y - m * mpmath.sin(m)
    logits = [scale * (target if c == label else cos[c]) for c in range(C)]
    top = max(logits)
    return top + mpmath.log(mpmath.fsum(mpmath.exp(x - top) for x in logits)) - logits[label]


def batch_loss(batch, arrays: dict, head: ClassifierHead, dps: int = 50):
    """Mean margin loss over labelled utterances, as an ``mpf``.

    ``arrays`` maps parameter names (plus ``class_weights``) to float or
    object arrays; any entry may be swapped for a perturbed copy.
    """
    with mpmath.workdps(dps):
        p = {k: arrays[k] for k in PARAM_NAMES}
        losses = [
            margin_loss(embedding(u.features.layers, p), u.speaker_id, arrays["class_weights"],
                        head.margin, head.scale, head.margin_type)
            for u in batch
        ]
        return mpmath.fsum(losses) / len(losses)
