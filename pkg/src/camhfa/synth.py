"""Synthetic layer-wise feature stacks standing in for frozen SSL outputs.

Each speaker owns a random identity vector.  Layer ``n`` of an utterance is
``snr[n] * a(t) * identity + noise_sigma * eps``, where ``a(t) = 1 + cos(2*pi*t/P + phase)``
is a sinusoidal amplitude envelope with period ``P`` and a per-utterance
phase.  Frames near the envelope trough carry almost no speaker signal, so a
window of neighbouring frames says more about frame reliability than a single
frame does.

Randomness is keyed by (seed, speaker, utterance index), so utterance ``u`` of
a speaker is the same no matter how many utterances are generated.  That is
what :func:`generate_heldout` relies on.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .pooling import LayerwiseFeatures

FEATURE_MAGIC = b"CMHF"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _default_snr() -> tuple[float, ...]:
    return (1.0, 0.8, 0.6, 0.4, 0.2)


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 20
    utts_per_speaker: int = 30
    frames: int = 50
    feature_dim: int = 16
    num_layers: int = 4
    speaker_snr_per_layer: tuple[float, ...] = field(default_factory=_default_snr)
    context_cue_period: int = 5
    noise_sigma: float = 1.0
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "speaker_snr_per_layer", tuple(float(x) for x in self.speaker_snr_per_layer))
        for name in ("num_speakers", "utts_per_speaker", "frames", "feature_dim", "context_cue_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be >= 0, got {self.num_layers}")
        if len(self.speaker_snr_per_layer) != self.num_layers + 1:
            raise ValueError(
                f"speaker_snr_per_layer needs {self.num_layers + 1} entries, got {len(self.speaker_snr_per_layer)}"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class LabeledUtterance:
    features: LayerwiseFeatures
    speaker_id: int
    utterance_id: str


def speaker_identities(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.standard_normal((spec.num_speakers, spec.feature_dim))


def envelope(frames: int, period: int, phase: float) -> np.ndarray:
    t = np.arange(frames, dtype=np.float64)
    return 1.0 + np.cos(2.0 * np.pi * t / period + phase)


def _utterance(spec: SynthSpec, identity: np.ndarray, speaker: int, index: int) -> LabeledUtterance:
    rng = np.random.default_rng([spec.seed, 1, speaker, index])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    signal = envelope(spec.frames, spec.context_cue_period, phase)[:, None] * identity[None, :]
    snr = np.asarray(spec.speaker_snr_per_layer)[:, None, None]
    noise = rng.standard_normal((spec.num_layers + 1, spec.frames, spec.feature_dim))
    layers = snr * signal[None] + spec.noise_sigma * noise
    return LabeledUtterance(LayerwiseFeatures(layers), speaker, f"spk{speaker:03d}-utt{index:03d}")


def generate_dataset(spec: SynthSpec) -> list[LabeledUtterance]:
    identities = speaker_identities(spec)
    return [
        _utterance(spec, identities[s], s, u)
        for s in range(spec.num_speakers)
        for u in range(spec.utts_per_speaker)
    ]


def generate_heldout(spec: SynthSpec, utts_per_speaker: int) -> list[LabeledUtterance]:
    """Fresh utterances of the same speakers, indexed after the training ones."""
    identities = speaker_identities(spec)
    start = spec.utts_per_speaker
    return [
        _utterance(spec, identities[s], s, u)
        for s in range(spec.num_speakers)
        for u in range(start, start + utts_per_speaker)
    ]


def separability_witness(utterances: list[LabeledUtterance]) -> tuple[float, float]:
    """(mean within-speaker cosine, mean between-speaker cosine) of frame-mean features."""
    vecs = np.stack([u.features.layers.mean(axis=(0, 1)) for u in utterances])
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    labels = np.array([u.speaker_id for u in utterances])
    sims = vecs @ vecs.T
    iu = np.triu_indices(len(utterances), k=1)
    same = labels[iu[0]] == labels[iu[1]]
    return float(sims[iu][same].mean()), float(sims[iu][~same].mean())


# ---------------------------------------------------------------------------
# Binary feature file
# ---------------------------------------------------------------------------

def encode_features(utterances: list[LabeledUtterance]) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(utterances))]
    for utt in utterances:
        name = utt.utterance_id.encode("utf-8")
        if len(name) > 0xFFFF:
            raise ValueError(f"utterance id too long: {len(name)} bytes")
        n1, T, F = utt.features.layers.shape
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<IIII", utt.speaker_id, n1, T, F))
        parts.append(np.ascontiguousarray(utt.features.layers, dtype="<f8").tobytes())
    return b"".join(parts)


class ByteReader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_features(buf: bytes) -> list[LabeledUtterance]:
    r = ByteReader(buf)
    magic = r.take(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    (count,) = r.unpack("<I", "utterance count")
    out = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "utterance id length")
        start = r.pos
        try:
            name = r.take(name_len, "utterance id").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("utterance id is not valid UTF-8", start) from None
        speaker, n1, T, F = r.unpack("<IIII", "utterance header")
        if n1 < 1 or T < 1 or F < 1:
            raise FormatError(f"empty layer stack dims ({n1}, {T}, {F})", r.pos - 12)
        payload = r.take(8 * n1 * T * F, "feature payload")
        layers = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n1, T, F)
        out.append(LabeledUtterance(LayerwiseFeatures(layers), speaker, name))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return out


def write_features(path, utterances: list[LabeledUtterance]) -> None:
    data = encode_features(utterances)
    with open(path, "wb") as fh:
        fh.write(data)


def read_features(path) -> list[LabeledUtterance]:
    with open(os.fspath(path), "rb") as fh:
        return decode_features(fh.read())
