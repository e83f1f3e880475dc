"""Training loop for the pooling back-end plus margin-softmax classifier."""

from __future__ import annotations

import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .loss import MARGIN_TYPES, ClassifierHead, cosine_logits, init_head, margin_softmax_loss
from .pooling import PARAM_NAMES, CaMhfaParams, check_context_length, forward, init_params
from .synth import FormatError, LabeledUtterance, ByteReader

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    heads: int = 8  # G
    context: int = 3  # L
    compression_dim: int = 16  # D
    embed_dim: int = 32  # E
    margin: float = 0.2
    scale: float = 32.0
    margin_type: str = "additive-angular"
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    lr_decay: str = "exponential"
    epochs: int = 10
    batch_size: int = 32
    weight_decay: float = 0.01
    # Gradient multiplier for an upstream encoder; there is none here, so it stays 1.0.
    grad_scale_backbone: float = 1.0
    attention: str = "direct"
    seed: int = 0

    def validate(self) -> None:
        check_context_length(self.context)
        for name in ("heads", "compression_dim", "embed_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.lr_decay not in ("exponential", "linear"):
            raise ValueError(f"lr_decay must be 'exponential' or 'linear', got {self.lr_decay!r}")
        if self.margin < 0 or self.scale <= 0:
            raise ValueError(f"need margin >= 0 and scale > 0, got {self.margin}, {self.scale}")
        if self.margin_type not in MARGIN_TYPES:
            raise ValueError(f"unknown margin type {self.margin_type!r}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_scale_backbone != 1.0:
            raise ValueError("grad_scale_backbone is fixed at 1.0 (no backbone is trained)")
        if self.attention not in ("direct", "conv"):
            raise ValueError(f"attention must be 'direct' or 'conv', got {self.attention!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def lines(self) -> list[str]:
        """Deterministic text form; wall time is left out on purpose."""
        return [f"{r.epoch} {r.loss:.17g} {r.accuracy:.17g} {r.lr:.17g}" for r in self.records]

    def to_text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_start
    frac = epoch / (config.epochs - 1)
    if config.lr_decay == "linear":
        return config.lr_start + (config.lr_end - config.lr_start) * frac
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                   lr: float, weight_decay: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update with decoupled weight decay. Inputs are not modified."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise tn.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        decayed = p - lr * weight_decay * p
        new_params[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# Loss over a batch
# ---------------------------------------------------------------------------

def _stack_by_length(batch: list[LabeledUtterance]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group utterances by frame count, keeping first-appearance order."""
    groups: dict[int, list[LabeledUtterance]] = {}
    for utt in batch:
        groups.setdefault(utt.features.frames, []).append(utt)
    return [
        (np.stack([u.features.layers for u in utts]), np.array([u.speaker_id for u in utts]))
        for utts in groups.values()
    ]


def batch_loss(batch: list[LabeledUtterance], tensors: dict[str, tn.Tensor], head: ClassifierHead,
               attention: str = "direct") -> tuple[tn.Tensor, int]:
    """Mean margin loss over ``batch`` and the number of correct argmax predictions.

    ``tensors`` holds the back-end parameters plus ``class_weights``.
    """
    total = None
    correct = 0
    n = len(batch)
    for Z, labels in _stack_by_length(batch):
        e = forward(Z, tensors, attention)["e"]
        loss = margin_softmax_loss(e, labels, head, tensors["class_weights"])
        part = loss * (len(labels) / n)
        total = part if total is None else total + part
        cos = cosine_logits(e, tensors["class_weights"]).data
        correct += int(np.sum(np.argmax(cos, axis=-1) == labels))
    return total, correct


def loss_and_grads(batch, params: CaMhfaParams, head: ClassifierHead, attention: str = "direct"):
    """(loss, correct, grads) for one batch; grads keyed like :func:`trainable_arrays`."""
    arrays = trainable_arrays(params, head)
    tensors = {k: tn.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with tn.GradTape() as tape:
        loss, correct = batch_loss(batch, tensors, head, attention)
    names = list(tensors)
    grads = tape.gradient(loss, [tensors[k] for k in names])
    return loss.item(), correct, dict(zip(names, grads))


def trainable_arrays(params: CaMhfaParams, head: ClassifierHead) -> dict[str, np.ndarray]:
    arrays = params.arrays()
    arrays["class_weights"] = head.class_weights
    return arrays


def _split_trainable(arrays: dict[str, np.ndarray], head: ClassifierHead) -> tuple[CaMhfaParams, ClassifierHead]:
    params = CaMhfaParams(**{k: arrays[k] for k in PARAM_NAMES})
    return params, replace(head, class_weights=arrays["class_weights"])


def _check_dataset(dataset: list[LabeledUtterance]) -> tuple[int, int, int]:
    if not dataset:
        raise ValueError("dataset is empty")
    n1, F = dataset[0].features.layers.shape[0], dataset[0].features.feature_dim
    for utt in dataset:
        if utt.features.layers.shape[0] != n1 or utt.features.feature_dim != F:
            raise ValueError(f"utterance {utt.utterance_id} has a different layer count or feature dim")
    speakers = {u.speaker_id for u in dataset}
    C = max(speakers) + 1
    missing = sorted(set(range(C)) - speakers)
    if missing:
        raise ValueError(f"speaker ids must be contiguous from 0; missing {missing[:10]}")
    return n1 - 1, F, C


def train(dataset: list[LabeledUtterance], config: TrainConfig,
          on_epoch=None) -> tuple[CaMhfaParams, ClassifierHead, TrainLog]:
    """Mini-batch AdamW training; ``on_epoch(record)`` is called after each epoch."""
    config.validate()
    N, F, C = _check_dataset(dataset)
    init_seed, head_seed, shuffle_seed = (
        int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    params = init_params(N, F, config.compression_dim, config.heads, config.context, config.embed_dim, init_seed)
    head = init_head(C, config.embed_dim, config.margin, config.scale, config.margin_type, head_seed)
    shuffler = np.random.default_rng(shuffle_seed)
    state = AdamState()
    log = TrainLog()
    arrays = trainable_arrays(params, head)

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = shuffler.permutation(len(dataset))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            batch = [dataset[j] for j in order[i:i + config.batch_size]]
            params, head = _split_trainable(arrays, head)
            loss, n_ok, grads = loss_and_grads(batch, params, head, config.attention)
            arrays, state = optimizer_step(arrays, grads, state, lr, config.weight_decay)
            loss_sum += loss * len(batch)
            correct += n_ok
        record = EpochRecord(epoch, loss_sum / len(dataset), correct / len(dataset), lr,
                             time.perf_counter() - start)
        log.records.append(record)
        logger.info("epoch %d loss %.4f acc %.4f lr %.3g", epoch, record.loss, record.accuracy, lr)
        if on_epoch is not None:
            on_epoch(record)
    params, head = _split_trainable(arrays, head)
    return params, head, log


def extract_embeddings(utterances: list[LabeledUtterance], params: CaMhfaParams,
                       attention: str = "direct", batch_size: int = 64) -> np.ndarray:
    """Embeddings in input order, shape (num_utts, E)."""
    tensors = params.as_tensors(requires_grad=False)
    out = np.zeros((len(utterances), params.dims["E"]))
    for i in range(0, len(utterances), batch_size):
        chunk = utterances[i:i + batch_size]
        by_len: dict[int, list[int]] = {}
        for j, u in enumerate(chunk):
            by_len.setdefault(u.features.frames, []).append(i + j)
        for idx in by_len.values():
            Z = np.stack([utterances[k].features.layers for k in idx])
            out[idx] = forward(Z, tensors, attention)["e"].data
    return out


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   magic "CMCK" | version u32 | N F D G L E C (u32 each)
#   omega_k_raw (N+1) | omega_v_raw (N+1) | S_k (F*D) | S_v (F*D) | Q (G*L*D)
#   W_out (G*D*E) | b_out (E) | class_weights (C*E)          float64, row-major
#   margin f64 | scale f64 | margin_type u32 (0 = additive-angular, 1 = additive-cosine)

def _checkpoint_shapes(N, F, D, G, L, E, C) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("omega_k_raw", (N + 1,)),
        ("omega_v_raw", (N + 1,)),
        ("S_k", (F, D)),
        ("S_v", (F, D)),
        ("Q", (G, L, D)),
        ("W_out", (G * D, E)),
        ("b_out", (E,)),
        ("class_weights", (C, E)),
    ]


def encode_checkpoint(params: CaMhfaParams, head: ClassifierHead) -> bytes:
    d = params.dims
    C, E = head.class_weights.shape
    if E != d["E"]:
        raise tn.ShapeError(f"head embedding dim {E} != back-end dim {d['E']}")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<7I", d["N"], d["F"], d["D"], d["G"], d["L"], d["E"], C)]
    arrays = trainable_arrays(params, head)
    for name, _ in _checkpoint_shapes(d["N"], d["F"], d["D"], d["G"], d["L"], d["E"], C):
        parts.append(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    parts.append(struct.pack("<ddI", head.margin, head.scale, MARGIN_TYPES.index(head.margin_type)))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[CaMhfaParams, ClassifierHead]:
    r = ByteReader(buf)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})", 4)
    dims = r.unpack("<7I", "dims block")
    arrays = {}
    for name, shape in _checkpoint_shapes(*dims):
        raw = r.take(8 * math.prod(shape), name)
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    margin, scale, kind = r.unpack("<ddI", "head settings")
    if kind >= len(MARGIN_TYPES):
        raise FormatError(f"unknown margin type code {kind}", r.pos - 4)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    params = CaMhfaParams(**{k: arrays[k] for k in PARAM_NAMES})
    head = ClassifierHead(arrays["class_weights"], margin, scale, MARGIN_TYPES[kind])
    return params, head


def save_checkpoint(path, params: CaMhfaParams, head: ClassifierHead) -> None:
    data = encode_checkpoint(params, head)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> tuple[CaMhfaParams, ClassifierHead]:
    with open(os.fspath(path), "rb") as fh:
        return decode_checkpoint(fh.read())
