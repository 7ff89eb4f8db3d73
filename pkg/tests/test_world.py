import numpy as np
import pytest

from dystream.tensor import RngState
from dystream.world import (
    Dataset,
    WorldConfig,
    aligned_audio_index,
    audio_to_wire,
    generate_episode,
    make_dataset,
    mouth_signal_from_audio,
    oracle_motion,
)


@pytest.fixture(scope="module")
def cfg():
    return WorldConfig()


@pytest.fixture(scope="module")
def episode(cfg):
    return generate_episode(cfg, 64, RngState(10))


class TestWorldConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            WorldConfig(coart_lag_q=-1)
        with pytest.raises(ValueError):
            WorldConfig(listener_delay_p=0)
        with pytest.raises(ValueError):
            WorldConfig(drift_coeff=1.0)
        with pytest.raises(ValueError):
            WorldConfig(drift_coeff=0.0)

    def test_channel_split(self, cfg):
        assert list(cfg.mouth_channels) == [0, 1, 2, 3]
        assert list(cfg.pose_channels) == list(range(4, 16))


class TestOracle:
    def test_all_sources_vanish(self):
        cfg = WorldConfig(noise_scale=0.0, drift_coeff=1e-9)
        zeros = np.zeros((32, cfg.audio_feature_dim))
        motion, mouth = oracle_motion(cfg, zeros, zeros, RngState(0))
        assert np.array_equal(motion, np.zeros_like(motion))
        assert np.array_equal(mouth, np.zeros_like(mouth))

    def test_zero_lag_is_causal(self, episode):
        cfg = WorldConfig(coart_lag_q=0)
        aud = episode.audio.speaker
        base = mouth_signal_from_audio(cfg, aud, 20)
        i = 10
        e = aligned_audio_index(i, cfg.audio_frames_per_video_frame)
        perturbed = aud.copy()
        perturbed[e + 1 :] += 7.0
        out = mouth_signal_from_audio(cfg, perturbed, 20)
        assert np.array_equal(base[: i + 1], out[: i + 1])

    def test_future_dependency_is_exactly_q(self, cfg, episode):
        aud = episode.audio.speaker
        base = mouth_signal_from_audio(cfg, aud, 30)
        i = 12
        e = aligned_audio_index(i, cfg.audio_frames_per_video_frame)
        at_q = aud.copy()
        at_q[e + cfg.coart_lag_q] += 1.0
        assert not np.array_equal(
            base[i], mouth_signal_from_audio(cfg, at_q, 30)[i]
        )
        past_q = aud.copy()
        past_q[e + cfg.coart_lag_q + 1 :] += 1.0
        assert np.array_equal(base[i], mouth_signal_from_audio(cfg, past_q, 30)[i])

    def test_listener_channel_is_strictly_causal(self, cfg, episode):
        spk = episode.audio.speaker
        lis = episode.audio.listener
        m1, _ = oracle_motion(cfg, spk, lis, RngState(5))
        i = 15
        e = aligned_audio_index(i, cfg.audio_frames_per_video_frame)
        lis2 = lis.copy()
        lis2[e + 1 :] += 3.0
        m2, _ = oracle_motion(cfg, spk, lis2, RngState(5))
        assert np.array_equal(m1[: i + 1], m2[: i + 1])

    def test_determinism_with_fixed_seed(self, cfg):
        a = generate_episode(cfg, 32, RngState(42))
        b = generate_episode(cfg, 32, RngState(42))
        assert np.array_equal(a.motion, b.motion)
        assert np.array_equal(a.audio.speaker, b.audio.speaker)

    def test_mouth_channels_carry_the_deterministic_signal(self, episode, cfg):
        assert np.array_equal(
            episode.motion[:, cfg.mouth_channels], episode.deterministic_mouth_signal
        )

    def test_audio_bounded(self, episode):
        assert np.abs(episode.audio.speaker).max() <= 3.0
        assert np.abs(episode.audio.listener).max() <= 3.0

    def test_motion_audio_length_ratio(self, episode, cfg):
        assert episode.audio.frames == episode.motion.shape[0] * cfg.audio_frames_per_video_frame

    def test_too_short_rejected(self, cfg):
        with pytest.raises(ValueError):
            generate_episode(cfg, 1, RngState(0))


class TestWire:
    def test_hundred_ms_packets(self, episode):
        # 64 motion frames = 2.56 s of audio; 100 ms packets
        packets = audio_to_wire(episode, 100.0)
        assert len(packets) == 26
        arrivals = [p.arrival_s for p in packets]
        np.testing.assert_allclose(arrivals[:10], np.arange(10) * 0.1)
        assert all(b > a for a, b in zip(arrivals, arrivals[1:]))

    def test_single_packet(self, episode):
        total_ms = episode.audio.frames * episode.audio.frame_period_s * 1000.0
        packets = audio_to_wire(episode, total_ms)
        assert len(packets) == 1

    def test_concatenation_reproduces_tracks(self, episode):
        packets = audio_to_wire(episode, 100.0)
        spk = np.concatenate([p.speaker for p in packets])
        lis = np.concatenate([p.listener for p in packets])
        assert np.array_equal(spk, episode.audio.speaker)
        assert np.array_equal(lis, episode.audio.listener)

    def test_non_multiple_packet_size_rejected(self, episode):
        with pytest.raises(ValueError, match="multiple"):
            audio_to_wire(episode, 30.0)


class TestDataset:
    def test_round_trip_is_bitwise(self, cfg, tmp_path):
        ds = make_dataset(cfg, 2, 40, RngState(3), tmp_path / "d.dysw")
        loaded = Dataset.load(tmp_path / "d.dysw")
        assert loaded.cfg == cfg
        for a, b in zip(ds.episodes, loaded.episodes):
            assert np.array_equal(a.motion, b.motion)
            assert np.array_equal(a.audio.speaker, b.audio.speaker)
            assert np.array_equal(a.audio.listener, b.audio.listener)
            assert np.array_equal(
                a.deterministic_mouth_signal, b.deterministic_mouth_signal
            )

    def test_same_seed_gives_identical_bytes(self, cfg, tmp_path):
        make_dataset(cfg, 2, 40, RngState(3), tmp_path / "a.dysw")
        make_dataset(cfg, 2, 40, RngState(3), tmp_path / "b.dysw")
        assert (tmp_path / "a.dysw").read_bytes() == (tmp_path / "b.dysw").read_bytes()
        assert (tmp_path / "a.dysw.manifest").read_text() == (
            tmp_path / "b.dysw.manifest"
        ).read_text()

    def test_default_sizing_arithmetic(self, cfg):
        ds = make_dataset(cfg, 100, 200, RngState(1))
        assert sum(ep.motion.shape[0] for ep in ds.episodes) == 20000

    def test_manifest_reconstructs_world(self, cfg, tmp_path):
        make_dataset(cfg, 1, 40, RngState(3), tmp_path / "d.dysw")
        manifest = (tmp_path / "d.dysw.manifest").read_text()
        assert "coart_lag_q=2" in manifest
        assert "episodes=1" in manifest

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.dysw"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="DYSW"):
            Dataset.load(p)
