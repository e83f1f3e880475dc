"""Seeded verification suites: degenerate cases, conv/direct agreement,
normalization invariants and finite-difference gradient checks.

Each suite returns a :class:`CheckResult`.  The reference poolers here are
plain numpy loops written against the textbook definitions and never call
into :mod:`camhfa.pooling`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import mpmath
import numpy as np

from . import pooling
from .loss import ClassifierHead
from .pooling import CaMhfaParams, LayerwiseFeatures
from .synth import LabeledUtterance
from .tensor import finite_difference_gradient, max_relative_error
from .train import batch_loss, loss_and_grads, trainable_arrays
from . import reference
from . import tensor as tn

EQUIV_TOL = 1e-12
GRAD_TOL = 1e-5
CONTEXT_LENGTHS = (1, 3, 5, 9, 17)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max error {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.cases} cases, {self.seconds:.2f}s)")


# ---------------------------------------------------------------------------
# Reference poolers
# ---------------------------------------------------------------------------

def _softmax_loop(x: np.ndarray) -> np.ndarray:
    m = max(x)
    e = np.array([np.exp(v - m) for v in x])
    return e / e.sum()


def _mixed(Z: np.ndarray, raw: np.ndarray) -> np.ndarray:
    w = _softmax_loop(raw)
    out = np.zeros(Z.shape[1:])
    for n in range(Z.shape[0]):
        out += w[n] * Z[n]
    return out


def reference_mhfa(Z: np.ndarray, params: CaMhfaParams) -> tuple[np.ndarray, np.ndarray]:
    """Single-frame multi-head factorized attentive pooling: (A, c)."""
    K = _mixed(Z, params.omega_k_raw) @ params.S_k
    V = _mixed(Z, params.omega_v_raw) @ params.S_v
    G = params.Q.shape[0]
    T = K.shape[0]
    A = np.zeros((T, G))
    c = []
    for g in range(G):
        logits = np.array([np.dot(params.Q[g, 0], K[t]) for t in range(T)])
        A[:, g] = _softmax_loop(logits)
        c.append(sum(A[t, g] * V[t] for t in range(T)))
    return A, np.concatenate(c)


def reference_self_attentive(K: np.ndarray, V: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One learned query: a = softmax(K q), c = sum_t a_t v_t."""
    a = _softmax_loop(K @ q)
    return a, (a[:, None] * V).sum(axis=0)


def reference_windowed_scores(K: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Explicit triple loop over frames, groups and window offsets (zero outside)."""
    T, _ = K.shape
    G, L, _ = Q.shape
    R = (L - 1) // 2
    S = np.zeros((T, G))
    for t in range(T):
        for g in range(G):
            acc = 0.0
            for j in range(-R, R + 1):
                if 0 <= t + j < T:
                    acc += float(np.dot(Q[g, j + R], K[t + j]))
            S[t, g] = acc / L
    return S


# ---------------------------------------------------------------------------
# Random instance family
# ---------------------------------------------------------------------------

def random_instance(rng: np.random.Generator, context: int | None = None, heads: int | None = None,
                    frames: int | None = None):
    T = int(rng.integers(1, 17)) if frames is None else frames
    F = int(rng.integers(2, 9))
    N = int(rng.integers(0, 5))
    D = int(rng.integers(2, 7))
    G = int(rng.integers(1, 5)) if heads is None else heads
    L = int(rng.choice(CONTEXT_LENGTHS)) if context is None else context
    E = int(rng.integers(2, 7))
    Z = rng.standard_normal((N + 1, T, F))
    params = CaMhfaParams(
        omega_k_raw=rng.standard_normal(N + 1),
        omega_v_raw=rng.standard_normal(N + 1),
        S_k=rng.standard_normal((F, D)) / np.sqrt(F),
        S_v=rng.standard_normal((F, D)) / np.sqrt(F),
        Q=rng.standard_normal((G, L, D)),
        W_out=rng.standard_normal((G * D, E)) / np.sqrt(G * D),
        b_out=0.1 * rng.standard_normal(E),
    )
    return Z, params


def _kv(Z, params):
    wk = pooling.normalize_layer_weights(params.omega_k_raw)
    wv = pooling.normalize_layer_weights(params.omega_v_raw)
    return pooling.compute_keys(Z, wk, params.S_k).data, pooling.compute_values(Z, wv, params.S_v).data


def _timed(name, tol, body) -> CheckResult:
    start = time.perf_counter()
    worst, cases = body()
    return CheckResult(name, bool(worst <= tol), worst, tol, cases, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def check_mhfa_degeneration(instances: int = 100, seed: int = 0) -> CheckResult:
    """L=1 matches single-frame MHFA in attention and pooled output."""
    def body():
        rng = np.random.default_rng([seed, 1])
        worst = 0.0
        for _ in range(instances):
            Z, params = random_instance(rng, context=1)
            K, V = _kv(Z, params)
            A = pooling.attention_weights_direct(K, params.Q).data
            c = pooling.pool(V, A).data
            A_ref, c_ref = reference_mhfa(Z, params)
            worst = max(worst, np.max(np.abs(A - A_ref)), np.max(np.abs(c - c_ref)))
        return worst, instances
    return _timed("degeneration: L=1 equals MHFA", EQUIV_TOL, body)


def check_mean_pooling_degeneration(instances: int = 100, seed: int = 0) -> CheckResult:
    """Q = 0 gives weights 1/T and per-group frame means."""
    def body():
        rng = np.random.default_rng([seed, 2])
        worst = 0.0
        for _ in range(instances):
            Z, params = random_instance(rng)
            params.Q = np.zeros_like(params.Q)
            K, V = _kv(Z, params)
            T = K.shape[0]
            A = pooling.attention_weights_direct(K, params.Q).data
            c = pooling.pool(V, A).data
            expected_c = np.tile(V.mean(axis=0), params.Q.shape[0])
            worst = max(worst, np.max(np.abs(A - 1.0 / T)), np.max(np.abs(c - expected_c)))
        return worst, instances
    return _timed("degeneration: Q=0 equals mean pooling", EQUIV_TOL, body)


def check_self_attentive_degeneration(instances: int = 100, seed: int = 0) -> CheckResult:
    """G=1, L=1 matches self-attentive pooling with a single query."""
    def body():
        rng = np.random.default_rng([seed, 3])
        worst = 0.0
        for _ in range(instances):
            Z, params = random_instance(rng, context=1, heads=1)
            K, V = _kv(Z, params)
            A = pooling.attention_weights_direct(K, params.Q).data
            c = pooling.pool(V, A).data
            a_ref, c_ref = reference_self_attentive(K, V, params.Q[0, 0])
            worst = max(worst, np.max(np.abs(A[:, 0] - a_ref)), np.max(np.abs(c - c_ref)))
        return worst, instances
    return _timed("degeneration: G=1,L=1 equals self-attentive pooling", EQUIV_TOL, body)


def check_conv_equivalence(instances: int = 100, seed: int = 0) -> CheckResult:
    """Convolution path equals the direct windowed sum, including T < L."""
    def body():
        rng = np.random.default_rng([seed, 4])
        worst = 0.0
        cases = 0
        for i in range(instances):
            # every third instance forces a context window longer than the utterance
            frames = int(rng.integers(1, 5)) if i % 3 == 0 else None
            context = int(rng.choice([5, 9, 17])) if i % 3 == 0 else None
            Z, params = random_instance(rng, context=context, frames=frames)
            K, _ = _kv(Z, params)
            direct = pooling.attention_weights_direct(K, params.Q).data
            conv = pooling.attention_weights_conv(K, params.Q).data
            worst = max(worst, np.max(np.abs(direct - conv)))
            cases += 1
        return worst, cases
    return _timed("conv/direct equivalence", EQUIV_TOL, body)


def check_normalization(instances: int = 100, seed: int = 0) -> CheckResult:
    """Column sums of A, embedding norms and layer-weight sums all equal 1."""
    def body():
        rng = np.random.default_rng([seed, 5])
        worst = 0.0
        for _ in range(instances):
            Z, params = random_instance(rng)
            out = pooling.forward(Z, params.as_tensors(requires_grad=False))
            A, e = out["A"].data, out["e"].data
            if np.any(A <= 0) or np.any(out["omega_k"].data <= 0) or np.any(out["omega_v"].data <= 0):
                return np.inf, instances
            worst = max(
                worst,
                np.max(np.abs(A.sum(axis=0) - 1.0)),
                abs(float(np.linalg.norm(e)) - 1.0),
                abs(out["omega_k"].data.sum() - 1.0),
                abs(out["omega_v"].data.sum() - 1.0),
            )
        return worst, instances
    return _timed("normalization invariants", EQUIV_TOL, body)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

GRADCHECK_DIMS = dict(T=7, F=5, N=3, D=4, G=2, L=3, E=3, C=4, batch=2)


def gradcheck_problem(seed: int = 0, margin_type: str = "additive-angular", attention: str = "direct"):
    """Tiny random batch, parameters and head at :data:`GRADCHECK_DIMS`."""
    d = GRADCHECK_DIMS
    rng = np.random.default_rng([seed, 6])
    batch = [
        LabeledUtterance(LayerwiseFeatures(rng.standard_normal((d["N"] + 1, d["T"], d["F"]))), int(lab), f"u{i}")
        for i, lab in enumerate(rng.choice(d["C"], size=d["batch"], replace=False))
    ]
    params = CaMhfaParams(
        omega_k_raw=rng.standard_normal(d["N"] + 1),
        omega_v_raw=rng.standard_normal(d["N"] + 1),
        S_k=rng.standard_normal((d["F"], d["D"])) / np.sqrt(d["F"]),
        S_v=rng.standard_normal((d["F"], d["D"])) / np.sqrt(d["F"]),
        Q=rng.standard_normal((d["G"], d["L"], d["D"])),
        W_out=rng.standard_normal((d["G"] * d["D"], d["E"])),
        b_out=0.1 * rng.standard_normal(d["E"]),
    )
    head = ClassifierHead(rng.standard_normal((d["C"], d["E"])), 0.2, 32.0, margin_type)
    return batch, params, head, attention


def gradient_errors(batch, params: CaMhfaParams, head: ClassifierHead, attention: str = "direct",
                    eps: float = 1e-6, precise: bool = True) -> dict[str, float]:
    """Max relative error between tape gradients and central differences, per parameter.

    With ``precise`` the differenced loss is the 50-digit scalar-loop
    implementation in :mod:`camhfa.reference`; otherwise the float64 tape
    forward is differenced, whose roundoff (about 1e-8 absolute at eps=1e-6
    for losses of order 10) swamps gradient entries below ~1e-3.
    """
    _, _, analytic = loss_and_grads(batch, params, head, attention)
    base = trainable_arrays(params, head)
    errors = {}
    for name in base:
        if precise:
            def f(x, name=name):
                return reference.batch_loss(batch, {**base, name: x}, head)
            start = np.array([mpmath.mpf(v) for v in base[name].ravel()], dtype=object).reshape(base[name].shape)
        else:
            def f(x, name=name):
                tensors = {k: tn.Tensor(v) for k, v in {**base, name: x}.items()}
                return batch_loss(batch, tensors, head, attention)[0].item()
            start = base[name]
        numeric = finite_difference_gradient(f, start, eps)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors


def check_gradients(seed: int = 0) -> CheckResult:
    def body():
        worst, cases = 0.0, 0
        for margin_type in ("additive-angular", "additive-cosine"):
            for attention in ("direct", "conv"):
                errs = gradient_errors(*gradcheck_problem(seed, margin_type, attention))
                worst = max(worst, max(errs.values()))
                cases += len(errs)
        return worst, cases
    return _timed("gradient check (all parameters, both margins, both attention paths)", GRAD_TOL, body)


def equivalence_suite(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    return [
        check_mhfa_degeneration(instances, seed),
        check_mean_pooling_degeneration(instances, seed),
        check_self_attentive_degeneration(instances, seed),
        check_conv_equivalence(instances, seed),
        check_normalization(instances, seed),
    ]
