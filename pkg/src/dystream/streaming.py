"""Real-time inference: Euler sampler, multi-condition guidance, sliding
window, and the packet-driven scheduler with audio-packet-delay accounting.

The streaming scheduler is a pure re-ordering of the offline computation:
given the same checkpoint, seed and lookahead, ``run_stream`` produces
bitwise the same motion as ``generate_offline``. This holds because the
encoder's forward kernels are prefix stable (see :mod:`dystream.kernels`)
and a frame is only generated once its full lookahead context exists (or
the stream has ended, which matches the offline end-of-track truncation).
"""

from __future__ import annotations

import struct
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .encoder import (
    AudioEncoder,
    EncodedAudio,
    encoder_config_from_items,
    encoder_config_items,
    encoder_from_tensors,
    encoder_tensors,
)
from .generator import (
    ConditionBundle,
    MotionGenerator,
    generator_config_from_items,
    generator_config_items,
)
from .tensor import RngState, Tensor
from .world import (
    VIDEO_FPS,
    DyadicAudioFeatures,
    StreamPacket,
    WorldConfig,
    aligned_audio_index,
    world_config_from_items,
    world_config_items,
)

# condition-presence keys: (speaker, listener, anchor)
BRANCH_ALL = (True, True, True)
BRANCH_S = (True, False, False)
BRANCH_L = (False, True, False)
BRANCH_R = (False, False, True)
BRANCH_UNCOND = (False, False, False)


@dataclass(frozen=True)
class GuidanceWeights:
    w_s: float = 0.5
    w_l: float = 0.5
    w_r: float = 0.5
    w_all: float = 1.0

    @property
    def w_sum(self) -> float:
        return self.w_s + self.w_l + self.w_r + self.w_all

    def coefficients(self) -> dict[tuple[bool, bool, bool], float]:
        return {
            BRANCH_UNCOND: 1.0 - self.w_sum,
            BRANCH_S: self.w_s,
            BRANCH_L: self.w_l,
            BRANCH_R: self.w_r,
            BRANCH_ALL: self.w_all,
        }

    def active_branches(self) -> list[tuple[bool, bool, bool]]:
        return [k for k, c in self.coefficients().items() if c != 0.0]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 5
    guidance: GuidanceWeights = field(default_factory=GuidanceWeights)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one Euler step")


def cfg_combine(
    predictions: dict[tuple[bool, bool, bool], np.ndarray], weights: GuidanceWeights
) -> np.ndarray:
    """Affine multi-conditional guidance combination.

    result = (1 - w_sum) * uncond + w_s * (S,0,0) + w_l * (0,L,0)
             + w_r * (0,0,R) + w_all * (S,L,R)

    Coefficients sum to one identically; zero-weight branches are skipped and
    may be absent from ``predictions``.
    """
    coeffs = weights.coefficients()
    shapes = {p.shape for p in predictions.values()}
    if len(shapes) > 1:
        raise ValueError(f"branch predictions disagree on shape: {shapes}")
    out = None
    for key in (BRANCH_UNCOND, BRANCH_S, BRANCH_L, BRANCH_R, BRANCH_ALL):
        c = coeffs[key]
        if c == 0.0:
            continue
        if key not in predictions:
            raise ValueError(f"missing prediction for active branch {key}")
        term = c * predictions[key]
        out = term if out is None else out + term
    if out is None:
        # all weights zero: the combination degenerates to the unconditional branch
        out = np.array(predictions[BRANCH_UNCOND], copy=True)
    return out


def euler_sample(
    gen: MotionGenerator,
    sampler: SamplerConfig,
    branch_conditions: dict[tuple[bool, bool, bool], np.ndarray],
    rng: RngState,
) -> np.ndarray:
    """Integrate the probability-flow ODE from t=1 noise down to t=0.

    The head predicts clean motion; under the linear schedule the velocity is
    v = (m_t - m0_hat) / t. Evaluation times are {1, (s-1)/s, ..., 1/s}, so
    t=0 is never an evaluation point and the final step lands exactly on the
    last guided prediction.
    """
    weights = sampler.guidance
    active = weights.active_branches() or [BRANCH_UNCOND]
    md = gen.cfg.motion_dim
    m = rng.normal((1, md))
    steps = sampler.steps
    with T.no_grad():
        for k in range(steps):
            t = (steps - k) / steps
            preds = {
                key: gen.head_denoise(m, np.array([t]), branch_conditions[key]).data
                for key in active
            }
            m0_hat = cfg_combine(preds, weights)
            # Euler step m -= (1/steps) * (m - m0_hat)/t, written in the
            # algebraically equal contraction form so the final step (where
            # the ratio is exactly 0) lands bitwise on the guided prediction
            ratio = (steps - k - 1) / (steps - k)
            m = m0_hat + (m - m0_hat) * ratio
    return m[0]


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Generator plus its two (fine-tuned) track encoders and world geometry."""

    gen: MotionGenerator
    enc_s: AudioEncoder
    enc_l: AudioEncoder
    world_cfg: WorldConfig
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def ratio(self) -> int:
        return self.world_cfg.audio_frames_per_video_frame

    @property
    def speaker_lookahead(self) -> int | None:
        return self.enc_s.cfg.effective_lookahead

    def save(self, path) -> None:
        config: dict[str, str] = {}
        config.update(world_config_items(self.world_cfg))
        config = {f"world.{k}": v for k, v in config.items()}
        config.update(encoder_config_items(self.enc_s.cfg, "enc_s."))
        config.update(encoder_config_items(self.enc_l.cfg, "enc_l."))
        config.update(generator_config_items(self.gen.cfg, "gen."))
        config.update({f"meta.{k}": v for k, v in self.meta.items()})
        tensors: dict[str, np.ndarray] = {}
        tensors.update({f"gen.{k}": v.data for k, v in self.gen.params.items()})
        tensors.update(encoder_tensors(self.enc_s, "enc_s."))
        tensors.update(encoder_tensors(self.enc_l, "enc_l."))
        checkpoint.save(path, config, tensors)

    @staticmethod
    def load(path) -> "ModelBundle":
        config, tensors = checkpoint.load(path)
        world_items = {
            k[len("world.") :]: v for k, v in config.items() if k.startswith("world.")
        }
        world_cfg = world_config_from_items(world_items)
        enc_s_cfg = encoder_config_from_items(config, "enc_s.")
        enc_l_cfg = encoder_config_from_items(config, "enc_l.")
        gen_cfg = generator_config_from_items(config, "gen.")
        gen_params = {
            k[len("gen.") :]: T.parameter(v)
            for k, v in tensors.items()
            if k.startswith("gen.")
        }
        meta = {k[len("meta.") :]: v for k, v in config.items() if k.startswith("meta.")}
        return ModelBundle(
            gen=MotionGenerator(gen_cfg, gen_params),
            enc_s=encoder_from_tensors(enc_s_cfg, tensors, "enc_s."),
            enc_l=encoder_from_tensors(enc_l_cfg, tensors, "enc_l."),
            world_cfg=world_cfg,
            meta=meta,
        )


# ---------------------------------------------------------------------------
# sliding-window generation session
# ---------------------------------------------------------------------------


class SlidingWindow:
    """Fixed-capacity autoregressive context.

    Capacity N matches the training window. The motion buffer holds at most
    N-1 generated frames; the aligned audio buffer holds at most N rows (one
    per context token). The AR context for the next frame is the anchor token
    plus ``min(frames_so_far, N-1)`` motion tokens.
    """

    def __init__(self, capacity: int):
        if capacity < 2:
            raise ValueError("window capacity must be >= 2")
        self.capacity = capacity
        self._motion: deque[np.ndarray] = deque(maxlen=capacity - 1)
        self._spk: deque[np.ndarray] = deque(maxlen=capacity)
        self._lis: deque[np.ndarray] = deque(maxlen=capacity)

    def append_audio(self, spk_row: np.ndarray, lis_row: np.ndarray) -> None:
        self._spk.append(spk_row)
        self._lis.append(lis_row)

    def append_motion(self, frame: np.ndarray) -> None:
        self._motion.append(frame)

    def context(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(previous-motion rows, speaker rows, listener rows) for the next frame."""
        k = len(self._motion) + 1
        spk = np.array(list(self._spk)[-k:])
        lis = np.array(list(self._lis)[-k:])
        motion = (
            np.array(list(self._motion))
            if self._motion
            else np.zeros((0, 0))
        )
        return motion, spk, lis

    def __len__(self) -> int:
        return len(self._motion)


class GenerationSession:
    """Per-frame generation shared by the offline and streaming paths."""

    def __init__(self, bundle: ModelBundle, sampler: SamplerConfig, anchor: np.ndarray):
        self.bundle = bundle
        self.sampler = sampler
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.window = SlidingWindow(bundle.gen.cfg.window)
        self.rng = RngState(sampler.seed)
        self.frames: list[np.ndarray] = []
        self._branches = sampler.guidance.active_branches() or [BRANCH_UNCOND]

    def feed_audio(self, spk_row: np.ndarray, lis_row: np.ndarray) -> None:
        self.window.append_audio(spk_row, lis_row)

    def generate_next(self) -> np.ndarray:
        # the AR context has identical content offline and streamed, so the
        # BLAS fast path is safe here (unlike the growing-prefix encode)
        gen = self.bundle.gen
        motion_inputs, spk, lis = self.window.context()
        full = ConditionBundle(spk, lis, self.anchor)
        conditions: dict[tuple[bool, bool, bool], np.ndarray] = {}
        with T.no_grad(), T.fast_forward():
            for key in self._branches:
                c = gen.condition_sequence(motion_inputs, full.branch(*key))
                conditions[key] = c.data[-1:]
            if gen.cfg.deterministic_mode:
                preds = {
                    key: gen.deterministic_project(Tensor(c)).data
                    for key, c in conditions.items()
                }
                frame = cfg_combine(preds, self.sampler.guidance)[0]
            else:
                frame = euler_sample(gen, self.sampler, conditions, self.rng)
        self.window.append_motion(frame)
        self.frames.append(frame)
        return frame


def generate_offline(
    bundle: ModelBundle,
    audio: DyadicAudioFeatures,
    sampler: SamplerConfig,
    anchor: np.ndarray,
) -> np.ndarray:
    """Offline generation: the full audio is encoded in one pass (under the
    encoder's configured lookahead mask), then frames are produced by the
    same sliding-window loop the streaming engine uses."""
    ratio = bundle.ratio
    if audio.frames < ratio:
        raise ValueError("audio shorter than one motion frame")
    frames = audio.frames // ratio
    encoded = EncodedAudio(
        bundle.enc_s.encode(audio.speaker), bundle.enc_l.encode(audio.listener)
    )
    session = GenerationSession(bundle, sampler, anchor)
    out = np.zeros((frames, bundle.gen.cfg.motion_dim))
    for f in range(frames):
        e = aligned_audio_index(f, ratio)
        session.feed_audio(encoded.speaker[e], encoded.listener[e])
        out[f] = session.generate_next()
    return out


# ---------------------------------------------------------------------------
# latency accounting
# ---------------------------------------------------------------------------


@dataclass
class LatencyTrace:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    total_compute_s: float = 0.0
    total_audio_s: float = 0.0

    def record(self, frame: int, arrival_s: float, emit_s: float) -> None:
        apd = emit_s - arrival_s
        if apd < -1e-9:
            raise ValueError("emission before enabling packet arrival")
        self.rows.append((frame, arrival_s, emit_s, apd))

    def snapshot(self) -> "LatencyTrace":
        """Immutable copy safe to hand to concurrent readers mid-stream."""
        return LatencyTrace(list(self.rows), self.total_compute_s, self.total_audio_s)

    @property
    def apd(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def mean_apd_s(self) -> float:
        return float(self.apd.mean()) if self.rows else 0.0

    def max_apd_s(self) -> float:
        return float(self.apd.max()) if self.rows else 0.0

    def fps(self) -> float:
        if self.total_compute_s <= 0:
            return float("inf")
        return len(self.rows) / self.total_compute_s

    def rtf(self) -> float:
        """Real-time factor: processing time over input duration (< 1 keeps up)."""
        if self.total_audio_s <= 0:
            return 0.0
        return self.total_compute_s / self.total_audio_s

    def summary_lines(self) -> list[str]:
        return [
            f"fps={self.fps():.6g}",
            f"mean_apd_s={self.mean_apd_s():.6g}",
            f"max_apd_s={self.max_apd_s():.6g}",
            f"rtf={self.rtf():.6g}",
        ]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("frame,packet_arrival_s,emit_s,apd_s\n")
            for frame, arr, emit, apd in self.rows:
                fh.write(f"{frame},{arr:.9f},{emit:.9f},{apd:.9f}\n")


def run_stream(
    bundle: ModelBundle,
    packets: list[StreamPacket],
    sampler: SamplerConfig,
    anchor: np.ndarray,
    clock: str = "virtual",
) -> tuple[np.ndarray, LatencyTrace]:
    """Consume packets, emit every generable motion frame, measure APD.

    A frame is generable once audio up to its aligned position plus the
    speaker lookahead exists; remaining frames are flushed at end of stream
    with the same truncated context the offline encode would use. Under the
    virtual clock, packet arrivals follow their nominal timestamps and the
    measured wall compute time is injected into the virtual timeline.
    """
    if clock not in ("virtual", "wall"):
        raise ValueError(f"unknown clock {clock!r}")
    ratio = bundle.ratio
    frame_period_s = 1.0 / VIDEO_FPS
    lookahead = bundle.speaker_lookahead
    session = GenerationSession(bundle, sampler, anchor)
    trace = LatencyTrace()

    spk_rows: list[np.ndarray] = []
    lis_rows: list[np.ndarray] = []
    emitted = 0
    vt = 0.0
    prev_arrival = -np.inf
    wall_start = time.perf_counter()

    def generable(avail: int, flush: bool) -> int:
        if flush:
            return avail // ratio
        if lookahead is None:
            return 0  # full-attention speaker encoder cannot stream
        return max(0, (avail - lookahead) // ratio)

    def process(new_count: int, arrival: float, flush: bool) -> None:
        nonlocal emitted, vt
        if new_count <= emitted:
            return
        start = time.perf_counter()
        spk_buf = np.array(spk_rows)
        lis_buf = np.array(lis_rows)
        enc_spk = bundle.enc_s.encode(spk_buf)
        enc_lis = bundle.enc_l.encode(lis_buf)
        for f in range(emitted, new_count):
            e = aligned_audio_index(f, ratio)
            session.feed_audio(enc_spk[e], enc_lis[e])
            session.generate_next()
            elapsed = time.perf_counter() - start
            if clock == "virtual":
                emit = vt + elapsed
            else:
                emit = time.perf_counter() - wall_start
            trace.record(f, arrival, emit)
        total = time.perf_counter() - start
        trace.total_compute_s += total
        if clock == "virtual":
            vt += total
        emitted = new_count

    for idx, pkt in enumerate(packets):
        if pkt.arrival_s <= prev_arrival:
            raise ValueError("out-of-order packet arrival")
        if idx < len(packets) - 1 and pkt.duration_ms < 1000.0 * frame_period_s - 1e-9:
            raise ValueError(
                f"packet duration {pkt.duration_ms} ms below one motion-frame period"
            )
        prev_arrival = pkt.arrival_s
        if clock == "virtual":
            vt = max(vt, pkt.arrival_s)
        else:
            lag = pkt.arrival_s - (time.perf_counter() - wall_start)
            if lag > 0:
                time.sleep(lag)
        spk_rows.extend(pkt.speaker)
        lis_rows.extend(pkt.listener)
        trace.total_audio_s += pkt.duration_ms / 1000.0
        process(generable(len(spk_rows), flush=False), pkt.arrival_s, flush=False)

    # end of stream: flush frames whose lookahead is truncated by the track end
    process(generable(len(spk_rows), flush=True), prev_arrival, flush=True)

    motion = np.array(session.frames) if session.frames else np.zeros((0, bundle.gen.cfg.motion_dim))
    return motion, trace


def simulate_chunk_baseline(
    chunk_s: float,
    compute_per_chunk_s: float,
    total_frames: int,
    packet_ms: float = 100.0,
) -> LatencyTrace:
    """Steady-state APD model of a chunk-buffered generator.

    A chunked pipeline delays every frame by the chunk duration plus its
    compute: frame f (starting at f/fps) is emitted at start + chunk + compute,
    and its APD is measured against the nominal arrival stamp of the packet
    containing that start. Setting chunk_s to one frame period reproduces the
    frame-based regime.
    """
    if chunk_s <= 0:
        raise ValueError("chunk duration must be positive")
    fp = 1.0 / VIDEO_FPS
    packet_s = packet_ms / 1000.0
    delay = chunk_s + compute_per_chunk_s
    trace = LatencyTrace()
    for f in range(total_frames):
        start = f * fp
        stamp = packet_s * np.floor(start / packet_s + 1e-9)
        trace.record(f, float(stamp), start + delay)
    n_chunks = int(np.ceil(total_frames * fp / chunk_s))
    trace.total_compute_s = n_chunks * compute_per_chunk_s
    trace.total_audio_s = total_frames * fp
    return trace


# ---------------------------------------------------------------------------
# wire framing (length-prefixed binary packets on a byte stream)
# ---------------------------------------------------------------------------


def packet_to_binary(pkt: StreamPacket) -> bytes:
    payload = np.concatenate([pkt.speaker.ravel(), pkt.listener.ravel()]).astype("<f4")
    return struct.pack("<I", payload.nbytes) + payload.tobytes()


def packets_from_binary(
    stream, feature_dim: int, frame_period_s: float, packet_ms: float
) -> list[StreamPacket]:
    """Parse u32-length-prefixed f32 payloads (speaker then listener rows)."""
    packets = []
    n = 0
    while True:
        header = stream.read(4)
        if len(header) < 4:
            break
        (length,) = struct.unpack("<I", header)
        payload = stream.read(length)
        if len(payload) < length:
            raise ValueError("truncated packet payload")
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        rows = values.size // (2 * feature_dim)
        spk = values[: rows * feature_dim].reshape(rows, feature_dim)
        lis = values[rows * feature_dim :].reshape(rows, feature_dim)
        packets.append(
            StreamPacket(
                arrival_s=n * packet_ms / 1000.0,
                speaker=spk,
                listener=lis,
                duration_ms=rows * frame_period_s * 1000.0,
            )
        )
        n += 1
    return packets
