"""Synthetic dyadic-audio world with a known motion oracle.

Audio "features" are smooth filtered noise generated directly at the frame
level (no waveform DSP). Motion ground truth is built from three parts:

* mouth channels (first quarter of the motion dims): a fixed linear map of a
  short speaker-audio window that reaches ``coart_lag_q`` audio frames past
  the frame's aligned end-of-frame audio position, modeling anticipatory
  mouth movement;
* the remaining (pose) channels: a fixed causal linear map of listener audio
  delayed by at least ``listener_delay_p`` audio frames, plus an AR(1) drift
  process with Gaussian innovations of scale ``noise_scale``.

The linear maps are fixed by the world seed, so the oracle can be
reconstructed from the dataset manifest for metric computation. Episode
arrays are snapped to the float32 grid before they leave this module, which
makes the f32 dataset container a lossless round trip.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import RngState, derive_seed

VIDEO_FPS = 25

# mouth-window taps at or before the aligned audio position
MOUTH_PAST_TAPS = 3
# future taps carry extra weight: anticipatory movement should dominate the
# mouth signal enough that a causal model measurably underperforms
FUTURE_TAP_GAIN = 1.5
# listener-map taps (all at or before the delayed position)
LISTENER_TAPS = 3
# one-pole smoothing weight for the generated audio features
AUDIO_SMOOTH = 0.7

_MAGIC = b"DYSW"
_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    motion_dim: int = 16
    audio_feature_dim: int = 8
    audio_frames_per_video_frame: int = 2
    coart_lag_q: int = 2
    listener_delay_p: int = 4
    noise_scale: float = 0.1
    drift_coeff: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.coart_lag_q < 0:
            raise ValueError("coart_lag_q must be >= 0")
        if self.listener_delay_p < 1:
            raise ValueError("listener_delay_p must be >= 1")
        if not (0.0 < self.drift_coeff < 1.0):
            raise ValueError("drift_coeff must lie strictly inside (0, 1)")
        if self.audio_frames_per_video_frame < 1:
            raise ValueError("audio_frames_per_video_frame must be >= 1")

    @property
    def audio_frame_period_s(self) -> float:
        return 1.0 / (VIDEO_FPS * self.audio_frames_per_video_frame)

    @property
    def mouth_channels(self) -> np.ndarray:
        n = max(1, self.motion_dim // 4)
        return np.arange(n)

    @property
    def pose_channels(self) -> np.ndarray:
        n = max(1, self.motion_dim // 4)
        return np.arange(n, self.motion_dim)


@dataclass
class DyadicAudioFeatures:
    """Paired speaker/listener feature tracks, one row per audio frame."""

    speaker: np.ndarray
    listener: np.ndarray
    frame_period_s: float

    def __post_init__(self):
        if self.speaker.shape != self.listener.shape:
            raise ValueError("speaker/listener tracks must have equal shape")

    @property
    def frames(self) -> int:
        return self.speaker.shape[0]


@dataclass
class OracleEpisode:
    audio: DyadicAudioFeatures
    motion: np.ndarray
    mouth_channels: np.ndarray
    deterministic_mouth_signal: np.ndarray


@dataclass(frozen=True)
class StreamPacket:
    """Wire-side chunk of raw audio feature frames.

    ``arrival_s`` is the packet's nominal arrival timestamp; the first packet
    of a stream is stamped 0.
    """

    arrival_s: float
    speaker: np.ndarray
    listener: np.ndarray
    duration_ms: float


def aligned_audio_index(frame, ratio: int):
    """End-of-frame alignment: motion frame i maps to audio index (i+1)*r - 1."""
    return (frame + 1) * ratio - 1


def _f32_snap(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


class _OracleMaps:
    """Seed-fixed linear maps from audio windows to motion channels."""

    def __init__(self, cfg: WorldConfig):
        rng = RngState(derive_seed(cfg.seed, "world-maps"))
        n_mouth = len(cfg.mouth_channels)
        n_pose = len(cfg.pose_channels)
        mouth_taps = MOUTH_PAST_TAPS + cfg.coart_lag_q
        w_mouth = rng.normal((n_mouth, mouth_taps, cfg.audio_feature_dim))
        w_mouth[:, MOUTH_PAST_TAPS:, :] *= FUTURE_TAP_GAIN
        w_mouth /= np.sqrt((w_mouth**2).sum(axis=(1, 2), keepdims=True))
        w_pose = rng.normal((n_pose, LISTENER_TAPS, cfg.audio_feature_dim))
        w_pose /= np.sqrt((w_pose**2).sum(axis=(1, 2), keepdims=True))
        self.w_mouth = w_mouth
        self.w_pose = 0.5 * w_pose


def _windowed_linear_read(
    track: np.ndarray, weights: np.ndarray, first_tap_of_frame: np.ndarray
) -> np.ndarray:
    """Per frame i: sum_t weights[:, t, :] . track[first_tap[i] + t].

    Out-of-range taps read as zeros. ``weights`` is [channels, taps, feat].
    """
    frames = first_tap_of_frame.shape[0]
    taps = weights.shape[1]
    out = np.zeros((frames, weights.shape[0]))
    for t in range(taps):
        idx = first_tap_of_frame + t
        valid = (idx >= 0) & (idx < track.shape[0])
        rows = np.zeros((frames, track.shape[1]))
        rows[valid] = track[idx[valid]]
        out += rows @ weights[:, t, :].T
    return out


def mouth_signal_from_audio(cfg: WorldConfig, speaker: np.ndarray, frames: int) -> np.ndarray:
    """Noise-free mouth component: per frame a linear read of the speaker
    window [e_i - past + 1, e_i + q], e_i the aligned end-of-frame index."""
    maps = _OracleMaps(cfg)
    r = cfg.audio_frames_per_video_frame
    e = aligned_audio_index(np.arange(frames), r)
    return _windowed_linear_read(speaker, maps.w_mouth, e - MOUTH_PAST_TAPS + 1)


def _pose_drive_from_audio(cfg: WorldConfig, listener: np.ndarray, frames: int) -> np.ndarray:
    maps = _OracleMaps(cfg)
    r = cfg.audio_frames_per_video_frame
    hi = aligned_audio_index(np.arange(frames), r) - cfg.listener_delay_p
    return _windowed_linear_read(listener, maps.w_pose, hi - LISTENER_TAPS + 1)


def oracle_motion(
    cfg: WorldConfig, speaker: np.ndarray, listener: np.ndarray, rng: RngState
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth motion for given audio tracks: (motion, mouth_signal)."""
    frames = speaker.shape[0] // cfg.audio_frames_per_video_frame
    mouth = mouth_signal_from_audio(cfg, speaker, frames)
    pose_drive = _pose_drive_from_audio(cfg, listener, frames)

    n_pose = len(cfg.pose_channels)
    drift = np.zeros((frames, n_pose))
    rho = cfg.drift_coeff
    if cfg.noise_scale > 0.0:
        stationary = cfg.noise_scale / np.sqrt(1.0 - rho * rho)
        drift[0] = stationary * rng.normal(n_pose)
        innov = cfg.noise_scale * rng.normal((frames, n_pose))
        for i in range(1, frames):
            drift[i] = rho * drift[i - 1] + innov[i]

    motion = np.zeros((frames, cfg.motion_dim))
    motion[:, cfg.mouth_channels] = mouth
    motion[:, cfg.pose_channels] = pose_drive + drift
    return motion, mouth


def generate_audio(cfg: WorldConfig, audio_frames: int, rng: RngState) -> DyadicAudioFeatures:
    """Smooth filtered noise, unit variance, clipped to [-3, 3]."""
    beta = AUDIO_SMOOTH
    stationary = np.sqrt(beta * beta / (1.0 - (1.0 - beta) ** 2))
    tracks = []
    for _ in range(2):
        white = rng.normal((audio_frames, cfg.audio_feature_dim))
        track = np.empty_like(white)
        track[0] = white[0] * beta / stationary
        for i in range(1, audio_frames):
            track[i] = (1.0 - beta) * track[i - 1] + beta / stationary * white[i]
        tracks.append(np.clip(track, -3.0, 3.0))
    return DyadicAudioFeatures(tracks[0], tracks[1], cfg.audio_frame_period_s)


def generate_episode(cfg: WorldConfig, frames: int, rng: RngState) -> OracleEpisode:
    if frames < 2:
        raise ValueError("an episode needs at least 2 motion frames")
    audio_frames = frames * cfg.audio_frames_per_video_frame
    audio = generate_audio(cfg, audio_frames, rng)
    motion, mouth = oracle_motion(cfg, audio.speaker, audio.listener, rng)
    audio = DyadicAudioFeatures(
        _f32_snap(audio.speaker), _f32_snap(audio.listener), audio.frame_period_s
    )
    return OracleEpisode(
        audio=audio,
        motion=_f32_snap(motion),
        mouth_channels=cfg.mouth_channels,
        deterministic_mouth_signal=_f32_snap(mouth),
    )


def audio_to_wire(episode: OracleEpisode, packet_ms: float) -> list[StreamPacket]:
    """Partition both tracks into packets with nominal arrivals 0, packet_ms, ..."""
    period_ms = episode.audio.frame_period_s * 1000.0
    frames_per_packet = packet_ms / period_ms
    if packet_ms <= 0 or abs(frames_per_packet - round(frames_per_packet)) > 1e-9:
        raise ValueError(
            f"packet_ms={packet_ms} is not a positive multiple of the "
            f"{period_ms:g} ms audio frame period"
        )
    k = int(round(frames_per_packet))
    packets = []
    total = episode.audio.frames
    for n, start in enumerate(range(0, total, k)):
        stop = min(start + k, total)
        packets.append(
            StreamPacket(
                arrival_s=n * packet_ms / 1000.0,
                speaker=episode.audio.speaker[start:stop],
                listener=episode.audio.listener[start:stop],
                duration_ms=(stop - start) * period_ms,
            )
        )
    return packets


# ---------------------------------------------------------------------------
# dataset container (magic "DYSW")
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    cfg: WorldConfig
    episodes: list[OracleEpisode]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<H", _VERSION))
        cfg_block = "".join(
            f"{k}={v}\n" for k, v in sorted(world_config_items(self.cfg).items())
        ).encode()
        buf.write(struct.pack("<I", len(cfg_block)))
        buf.write(cfg_block)
        buf.write(struct.pack("<I", len(self.episodes)))
        for ep in self.episodes:
            frames = ep.motion.shape[0]
            audio_frames = ep.audio.frames
            buf.write(struct.pack("<II", frames, audio_frames))
            for arr in (
                ep.audio.speaker,
                ep.audio.listener,
                ep.motion,
                ep.deterministic_mouth_signal,
            ):
                buf.write(arr.astype("<f4").tobytes())
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
        manifest = Path(str(path) + ".manifest")
        lines = dict(world_config_items(self.cfg))
        lines["episodes"] = str(len(self.episodes))
        lines["frames_per_episode"] = str(
            self.episodes[0].motion.shape[0] if self.episodes else 0
        )
        manifest.write_text("".join(f"{k}={v}\n" for k, v in sorted(lines.items())))
        return path

    @staticmethod
    def load(path: str | Path) -> "Dataset":
        raw = Path(path).read_bytes()
        buf = io.BytesIO(raw)
        if buf.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a DYSW dataset file")
        (version,) = struct.unpack("<H", buf.read(2))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        (cfg_len,) = struct.unpack("<I", buf.read(4))
        cfg = world_config_from_items(_parse_kv(buf.read(cfg_len).decode()))
        (count,) = struct.unpack("<I", buf.read(4))
        episodes = []
        n_mouth = len(cfg.mouth_channels)
        for _ in range(count):
            frames, audio_frames = struct.unpack("<II", buf.read(8))

            def read_arr(rows, cols):
                data = np.frombuffer(buf.read(rows * cols * 4), dtype="<f4")
                return data.reshape(rows, cols).astype(np.float64)

            speaker = read_arr(audio_frames, cfg.audio_feature_dim)
            listener = read_arr(audio_frames, cfg.audio_feature_dim)
            motion = read_arr(frames, cfg.motion_dim)
            mouth = read_arr(frames, n_mouth)
            episodes.append(
                OracleEpisode(
                    audio=DyadicAudioFeatures(speaker, listener, cfg.audio_frame_period_s),
                    motion=motion,
                    mouth_channels=cfg.mouth_channels,
                    deterministic_mouth_signal=mouth,
                )
            )
        return Dataset(cfg, episodes)


def make_dataset(
    cfg: WorldConfig,
    episodes: int,
    frames: int,
    rng: RngState,
    path: str | Path | None = None,
) -> Dataset:
    """Generate episodes with per-episode derived seeds; optionally persist."""
    if episodes < 1 or frames < 2:
        raise ValueError("episodes must be >= 1 and frames >= 2")
    eps = [
        generate_episode(cfg, frames, rng.split(f"episode/{i}"))
        for i in range(episodes)
    ]
    ds = Dataset(cfg, eps)
    if path is not None:
        ds.save(path)
    return ds


def world_config_items(cfg: WorldConfig) -> dict[str, str]:
    return {
        "motion_dim": str(cfg.motion_dim),
        "audio_feature_dim": str(cfg.audio_feature_dim),
        "audio_frames_per_video_frame": str(cfg.audio_frames_per_video_frame),
        "coart_lag_q": str(cfg.coart_lag_q),
        "listener_delay_p": str(cfg.listener_delay_p),
        "noise_scale": repr(cfg.noise_scale),
        "drift_coeff": repr(cfg.drift_coeff),
        "seed": str(cfg.seed),
    }


def world_config_from_items(items: dict[str, str]) -> WorldConfig:
    return WorldConfig(
        motion_dim=int(items["motion_dim"]),
        audio_feature_dim=int(items["audio_feature_dim"]),
        audio_frames_per_video_frame=int(items["audio_frames_per_video_frame"]),
        coart_lag_q=int(items["coart_lag_q"]),
        listener_delay_p=int(items["listener_delay_p"]),
        noise_scale=float(items["noise_scale"]),
        drift_coeff=float(items["drift_coeff"]),
        seed=int(items["seed"]),
    )


def _parse_kv(text: str) -> dict[str, str]:
    items = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items
