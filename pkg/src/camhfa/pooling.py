"""Context-aware multi-head factorized attentive pooling.

Shapes used throughout (leading batch axes are allowed on every input that
carries frames):

    Z        (..., N+1, T, F)   layer-wise features
    K, V     (..., T, D)        keys / values
    Q        (G, L, D)          query bank, L odd
    A        (..., T, G)        attention map, columns sum to 1
    c        (..., G*D)         concatenated pooled vectors
    e        (..., E)           unit-norm embedding
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as tn
from .tensor import ContractError, ShapeError, Tensor

PARAM_NAMES = ("omega_k_raw", "omega_v_raw", "S_k", "S_v", "Q", "W_out", "b_out")


class ConfigError(ValueError):
    """Invalid model configuration (e.g. even context length)."""


class DegenerateEmbeddingError(ArithmeticError):
    """The pre-normalization embedding vector is exactly zero."""


@dataclass(frozen=True)
class LayerwiseFeatures:
    """Stack of N+1 layer outputs, each T x F."""

    layers: np.ndarray

    def __post_init__(self):
        arr = np.array(self.layers, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"layer stack must be (N+1, T, F), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ShapeError(f"layer stack has an empty axis: {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "layers", arr)

    @classmethod
    def from_layers(cls, layers) -> "LayerwiseFeatures":
        mats = [np.asarray(z, dtype=np.float64) for z in layers]
        if not mats:
            raise ShapeError("need at least one layer")
        first = mats[0].shape
        for n, z in enumerate(mats):
            if z.ndim != 2 or z.shape != first:
                raise ShapeError(f"layer {n} has shape {z.shape}, expected {first}")
        return cls(np.stack(mats))

    @property
    def num_layers(self) -> int:
        """N, so the stack holds N+1 layers."""
        return self.layers.shape[0] - 1

    @property
    def frames(self) -> int:
        return self.layers.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers.shape[2]


@dataclass
class CaMhfaParams:
    """Trainable back-end parameters, stored as float64 arrays."""

    omega_k_raw: np.ndarray  # (N+1,)
    omega_v_raw: np.ndarray  # (N+1,)
    S_k: np.ndarray  # (F, D)
    S_v: np.ndarray  # (F, D)
    Q: np.ndarray  # (G, L, D)
    W_out: np.ndarray  # (G*D, E)
    b_out: np.ndarray  # (E,)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.array(getattr(self, f.name), dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        n1 = self.omega_k_raw.shape
        if self.omega_k_raw.ndim != 1 or self.omega_v_raw.shape != n1:
            raise ShapeError(f"layer weights must both be (N+1,), got {n1} and {self.omega_v_raw.shape}")
        if self.S_k.ndim != 2 or self.S_v.shape != self.S_k.shape:
            raise ShapeError(f"compressors must both be (F, D), got {self.S_k.shape} and {self.S_v.shape}")
        if self.Q.ndim != 3:
            raise ShapeError(f"query bank must be (G, L, D), got {self.Q.shape}")
        G, L, D = self.Q.shape
        if G < 1 or D < 1:
            raise ConfigError(f"need G >= 1 and D >= 1, got G={G}, D={D}")
        check_context_length(L)
        if D != self.S_k.shape[1]:
            raise ShapeError(f"query dim {D} != compression dim {self.S_k.shape[1]}")
        if self.W_out.ndim != 2 or self.W_out.shape[0] != G * D or self.W_out.shape[1] < 1:
            raise ShapeError(f"W_out must be ({G * D}, E), got {self.W_out.shape}")
        if self.b_out.shape != (self.W_out.shape[1],):
            raise ShapeError(f"b_out must be ({self.W_out.shape[1]},), got {self.b_out.shape}")

    @property
    def dims(self) -> dict[str, int]:
        G, L, D = self.Q.shape
        return {
            "N": self.omega_k_raw.shape[0] - 1,
            "F": self.S_k.shape[0],
            "D": D,
            "G": G,
            "L": L,
            "E": self.W_out.shape[1],
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def as_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in self.arrays().items()}

    def copy(self) -> "CaMhfaParams":
        return CaMhfaParams(**{k: v.copy() for k, v in self.arrays().items()})


def check_context_length(L: int) -> None:
    if L < 1 or L % 2 == 0:
        raise ConfigError(f"context length L must be a positive odd integer, got {L}")


def init_params(num_layers: int, feature_dim: int, compression_dim: int, heads: int,
                context: int, embed_dim: int, seed: int = 0) -> CaMhfaParams:
    """Uniform layer weights; everything else U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    check_context_length(context)
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    F, D, G, L, E = feature_dim, compression_dim, heads, context, embed_dim
    return CaMhfaParams(
        omega_k_raw=np.zeros(num_layers + 1),
        omega_v_raw=np.zeros(num_layers + 1),
        S_k=uniform((F, D), F),
        S_v=uniform((F, D), F),
        Q=uniform((G, L, D), L * D),
        W_out=uniform((G * D, E), G * D),
        b_out=uniform((E,), G * D),
    )


# ---------------------------------------------------------------------------
# Key/value construction
# ---------------------------------------------------------------------------

def normalize_layer_weights(raw) -> Tensor:
    """Softmax over the N+1 raw layer scalars."""
    return tn.softmax(raw, axis=-1)


def _aggregate_and_compress(Z, omega, S, side: str) -> Tensor:
    Z, omega, S = tn.as_tensor(Z), tn.as_tensor(omega), tn.as_tensor(S)
    if Z.ndim < 3:
        raise ShapeError(f"Z must be (..., N+1, T, F), got {Z.shape}")
    if omega.shape != (Z.shape[-3],):
        raise ShapeError(f"{side} layer weights shape {omega.shape} does not match {Z.shape[-3]} layers")
    if S.ndim != 2 or S.shape[0] != Z.shape[-1]:
        raise ShapeError(f"{side} compressor shape {S.shape} does not match feature dim {Z.shape[-1]}")
    mixed = tn.sum(Z * tn.reshape(omega, (-1, 1, 1)), axis=-3)
    return tn.matmul(mixed, S)


def compute_keys(Z, omega_k, S_k) -> Tensor:
    """K = (sum_n omega_k[n] * z_n) @ S_k, with ``omega_k`` already normalized."""
    return _aggregate_and_compress(Z, omega_k, S_k, "key")


def compute_values(Z, omega_v, S_v) -> Tensor:
    """V = (sum_n omega_v[n] * z_n) @ S_v, with ``omega_v`` already normalized."""
    return _aggregate_and_compress(Z, omega_v, S_v, "value")


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def _check_attention_inputs(K: Tensor, Q: Tensor) -> tuple[int, int, int]:
    if Q.ndim != 3:
        raise ShapeError(f"query bank must be (G, L, D), got {Q.shape}")
    G, L, D = Q.shape
    check_context_length(L)
    if K.ndim < 2 or K.shape[-1] != D:
        raise ShapeError(f"keys {K.shape} do not match query dim {D}")
    if K.shape[-2] < 1:
        raise ShapeError("need at least one frame")
    return G, L, (L - 1) // 2


def attention_weights_direct(K, Q) -> Tensor:
    """Per-group frame weights from windowed query/key products.

    score[t, g] = (1/L) * sum_{j=-R..R} Q[g, j+R] . K[t+j], with keys outside
    the utterance taken as zero; each column is then softmax-normalized over t.
    """
    K, Q = tn.as_tensor(K), tn.as_tensor(Q)
    G, L, R = _check_attention_inputs(K, Q)
    T = K.shape[-2]
    padded = tn.pad(K, axis=-2, before=R, after=R)
    scores = None
    for j in range(-R, R + 1):
        shifted = tn.slice_axis(padded, -2, R + j, R + j + T)  # row t holds k_{t+j}
        q_j = tn.reshape(tn.slice_axis(Q, 1, j + R, j + R + 1), (G, -1))
        term = tn.matmul(shifted, tn.transpose(q_j))
        scores = term if scores is None else scores + term
    return tn.softmax(scores / float(L), axis=-2)


def context_conv(K, Q) -> Tensor:
    """Zero-padded 'same' correlation of a (..., T, D) key map with G kernels of shape (L, D).

    Returns raw (unscaled) scores of shape (..., T, G).
    """
    K, Q = tn.as_tensor(K), tn.as_tensor(Q)
    G, L, R = _check_attention_inputs(K, Q)
    T = K.shape[-2]
    widths = [(0, 0)] * K.ndim
    widths[-2] = (R, R)
    padded = np.pad(K.data, widths)
    windows = sliding_window_view(padded, L, axis=-2)  # (..., T, D, L)
    out = np.einsum("...tdl,gld->...tg", windows, Q.data)

    def vjp(g):
        gK = gQ = None
        if K.requires_grad:
            gpad = np.zeros(padded.shape)
            for i in range(L):
                gpad[..., i:i + T, :] += np.einsum("...tg,gd->...td", g, Q.data[:, i, :])
            gK = gpad[..., R:R + T, :]
        if Q.requires_grad:
            flat_g = g.reshape((-1,) + g.shape[-2:])
            flat_w = windows.reshape((-1,) + windows.shape[-3:])
            gQ = np.einsum("btg,btdl->gld", flat_g, flat_w)
        return gK, gQ

    return tn.apply_op("context_conv", out, (K, Q), vjp)


def attention_weights_conv(K, Q) -> Tensor:
    """Same map as :func:`attention_weights_direct`, computed as a 2D convolution."""
    Q = tn.as_tensor(Q)
    return tn.softmax(context_conv(K, Q) / float(Q.shape[1]), axis=-2)


# ---------------------------------------------------------------------------
# Pooling and embedding head
# ---------------------------------------------------------------------------

def pool(V, A) -> Tensor:
    """c = concat_g(sum_t A[t, g] * V[t]) in group order."""
    V, A = tn.as_tensor(V), tn.as_tensor(A)
    if V.ndim < 2 or A.ndim != V.ndim or A.shape[-2] != V.shape[-2]:
        raise ShapeError(f"pool: values {V.shape} and attention {A.shape} disagree on frames")
    G, D = A.shape[-1], V.shape[-1]
    per_group = tn.matmul(tn.transpose(A), V)  # (..., G, D)
    return tn.reshape(per_group, V.shape[:-2] + (G * D,))


def l2_normalize(h) -> Tensor:
    h = tn.as_tensor(h)
    sq = (h.data * h.data).sum(axis=-1)
    if np.any(sq == 0.0):
        raise DegenerateEmbeddingError("pre-normalization embedding is the zero vector")
    return h / tn.sqrt(tn.sum(h * h, axis=-1, keepdims=True))


def forward(Z, params: dict[str, Tensor], attention: str = "direct") -> dict[str, Tensor]:
    """Full back-end pass returning every intermediate.

    ``params`` maps :data:`PARAM_NAMES` to tensors (or arrays).
    """
    if attention not in ("direct", "conv"):
        raise ConfigError(f"attention must be 'direct' or 'conv', got {attention!r}")
    p = {k: tn.as_tensor(params[k]) for k in PARAM_NAMES}
    Z = tn.as_tensor(Z.layers if isinstance(Z, LayerwiseFeatures) else Z)
    omega_k = normalize_layer_weights(p["omega_k_raw"])
    omega_v = normalize_layer_weights(p["omega_v_raw"])
    K = compute_keys(Z, omega_k, p["S_k"])
    V = compute_values(Z, omega_v, p["S_v"])
    attend = attention_weights_direct if attention == "direct" else attention_weights_conv
    A = attend(K, p["Q"])
    c = pool(V, A)
    h = tn.matmul(tn.reshape(c, c.shape[:-1] + (1, c.shape[-1])), p["W_out"])
    h = tn.reshape(h, c.shape[:-1] + (h.shape[-1],)) + p["b_out"]
    e = l2_normalize(h)
    return {"omega_k": omega_k, "omega_v": omega_v, "K": K, "V": V, "A": A, "c": c, "h": h, "e": e}


def extract_embedding(Z, params, attention: str = "direct") -> Tensor:
    """Unit-norm embedding for one utterance (or a batch stacked on leading axes)."""
    if isinstance(params, CaMhfaParams):
        params = params.as_tensors(requires_grad=False)
    Z_data = Z.layers if isinstance(Z, LayerwiseFeatures) else tn.as_tensor(Z).data
    if Z_data.shape[-2] < 1:
        raise ContractError("need at least one frame")
    return forward(Z, params, attention)["e"]
