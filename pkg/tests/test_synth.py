import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camhfa import synth
from camhfa.synth import FormatError, SynthSpec


SMALL = SynthSpec(num_speakers=3, utts_per_speaker=2, frames=6, feature_dim=4, num_layers=1,
                  speaker_snr_per_layer=(1.0, 0.5), seed=7)


def layers(utts):
    return [u.features.layers for u in utts]


class TestGenerate:
    def test_counts_and_ids(self):
        utts = synth.generate_dataset(SMALL)
        assert len(utts) == 6
        assert [u.speaker_id for u in utts] == [0, 0, 1, 1, 2, 2]
        assert utts[3].utterance_id == "spk001-utt001"
        assert utts[0].features.layers.shape == (2, 6, 4)

    def test_deterministic(self):
        a, b = synth.generate_dataset(SMALL), synth.generate_dataset(SMALL)
        assert synth.encode_features(a) == synth.encode_features(b)

    def test_seed_changes_data(self):
        other = SynthSpec(**{**SMALL.__dict__, "seed": 8})
        assert synth.encode_features(synth.generate_dataset(SMALL)) != synth.encode_features(
            synth.generate_dataset(other))

    def test_zero_noise_signal_shared_up_to_envelope(self):
        spec = SynthSpec(num_speakers=2, utts_per_speaker=3, frames=8, feature_dim=5, num_layers=2,
                         speaker_snr_per_layer=(1.0, 1.0, 1.0), noise_sigma=0.0)
        utts = synth.generate_dataset(spec)
        ident = synth.speaker_identities(spec)
        for u in utts:
            Z = u.features.layers
            # Every frame is a non-negative multiple of the speaker's identity.
            for t in range(spec.frames):
                scale = Z[0, t] @ ident[u.speaker_id] / (ident[u.speaker_id] @ ident[u.speaker_id])
                np.testing.assert_allclose(Z[:, t], np.broadcast_to(scale * ident[u.speaker_id], Z[:, t].shape),
                                           atol=1e-12)
                assert scale >= -1e-12
            np.testing.assert_allclose(Z.mean(axis=(0, 1)) / Z.mean(axis=(0, 1))[0],
                                       ident[u.speaker_id] / ident[u.speaker_id][0], atol=1e-9)

    def test_heldout_is_continuation(self):
        bigger = SynthSpec(**{**SMALL.__dict__, "utts_per_speaker": 5})
        full = synth.generate_dataset(bigger)
        held = synth.generate_heldout(SMALL, 3)
        expected = [u for u in full if int(u.utterance_id[-3:]) >= 2]
        assert [u.utterance_id for u in held] == [u.utterance_id for u in expected]
        for a, b in zip(layers(held), layers(expected)):
            assert np.array_equal(a, b)

    def test_envelope_period(self):
        env = synth.envelope(10, 5, 0.3)
        np.testing.assert_allclose(env[:5], env[5:], atol=1e-14)
        assert env.min() >= 0.0

    @pytest.mark.parametrize("kwargs", [
        {"num_speakers": 0},
        {"frames": 0},
        {"noise_sigma": -1.0},
        {"num_layers": 2},
        {"seed": -1},
    ])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            SynthSpec(**kwargs)

    def test_separability_at_defaults(self):
        within, between = synth.separability_witness(synth.generate_dataset(SynthSpec()))
        assert within > between

    def test_one_hot_snr_confines_speaker_signal(self):
        spec = SynthSpec(num_speakers=2, utts_per_speaker=2, frames=5, feature_dim=3, num_layers=2,
                         speaker_snr_per_layer=(0.0, 1.0, 0.0), noise_sigma=0.0)
        for u in synth.generate_dataset(spec):
            assert np.all(u.features.layers[[0, 2]] == 0.0)
            assert np.any(u.features.layers[1] != 0.0)


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        utts = synth.generate_dataset(SMALL)
        path = tmp_path / "x.feats"
        synth.write_features(path, utts)
        back = synth.read_features(path)
        assert [(u.speaker_id, u.utterance_id) for u in back] == [(u.speaker_id, u.utterance_id) for u in utts]
        for a, b in zip(layers(back), layers(utts)):
            assert a.tobytes() == b.tobytes()
        assert path.read_bytes() == synth.encode_features(back)

    def test_empty_list(self, tmp_path):
        path = tmp_path / "empty.feats"
        synth.write_features(path, [])
        data = path.read_bytes()
        assert data == b"CMHF" + struct.pack("<II", 1, 0)
        assert synth.read_features(path) == []

    def test_corrupted_magic(self):
        data = bytearray(synth.encode_features(synth.generate_dataset(SMALL)))
        data[0:4] = b"XXXX"
        with pytest.raises(FormatError, match="magic") as info:
            synth.decode_features(bytes(data))
        assert info.value.offset == 0

    def test_bad_version(self):
        data = b"CMHF" + struct.pack("<II", 9, 0)
        with pytest.raises(FormatError, match="version") as info:
            synth.decode_features(data)
        assert info.value.offset == 4

    def test_truncated_payload_reports_offset(self):
        data = synth.encode_features(synth.generate_dataset(SMALL))
        cut = len(data) - 5
        with pytest.raises(FormatError, match="truncated") as info:
            synth.decode_features(data[:cut])
        assert 0 < info.value.offset < cut

    def test_trailing_bytes(self):
        data = synth.encode_features([]) + b"\0"
        with pytest.raises(FormatError, match="trailing") as info:
            synth.decode_features(data)
        assert info.value.offset == 12

    @settings(max_examples=40, deadline=None)
    @given(st.binary(max_size=64))
    def test_garbage_never_crashes_unexpectedly(self, blob):
        try:
            synth.decode_features(blob)
        except FormatError:
            pass

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2), st.integers(0, 2**32))
    def test_round_trip_property(self, speakers, utts, frames, n, seed):
        spec = SynthSpec(num_speakers=speakers, utts_per_speaker=utts, frames=frames, feature_dim=2,
                         num_layers=n, speaker_snr_per_layer=(1.0,) * (n + 1), seed=seed)
        data = synth.generate_dataset(spec)
        back = synth.decode_features(synth.encode_features(data))
        for a, b in zip(layers(back), layers(data)):
            assert a.tobytes() == b.tobytes()
