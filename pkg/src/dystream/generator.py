"""Audio-driven motion generator: causal AR transformer + flow-matching head.

Token layout for a window of frames ``f0 .. f0+K-1``:

* token 0 is the anchor (embedded anchor motion latent plus that frame's
  fused audio); it emits the condition vector for frame ``f0``;
* token j >= 1 embeds the previous motion frame ``f0+j-1`` plus frame
  ``f0+j``'s fused audio, and emits the condition for frame ``f0+j``.

Under the causal self-attention mask, the condition for position j depends
only on tokens <= j, so training one full window teaches every context
length the sliding-window inference loop will ever present. Audio enters by
element-wise addition per token; dropped conditions are represented by
learned null embeddings, never raw zeros.

The head is a stack of MLP blocks modulated through adaptive layer
normalization; shift/scale/gate come from block-independent projections of
the timestep+condition embedding. With the linear noise schedule
``sigma_t = t`` the interpolant is ``m_t = (1-t) m_0 + t eps`` and the head
is trained to predict ``m_0`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import AudioEncoder
from .optim import AdamW
from .tensor import RngState, Tensor
from .world import Dataset

DROP_SPEAKER_P = 0.5
DROP_LISTENER_P = 0.5
DROP_ANCHOR_P = 0.1


@dataclass(frozen=True)
class GeneratorConfig:
    ar_blocks: int = 2
    ar_dim: int = 64
    ar_heads: int = 4
    head_blocks: int = 2
    head_dim: int = 64
    motion_dim: int = 16
    audio_dim: int = 64  # encoder model_dim
    window: int = 40
    deterministic_mode: bool = False
    rope_base: float = 10000.0
    mlp_mult: int = 4

    def __post_init__(self):
        if self.ar_dim % self.ar_heads != 0:
            raise ValueError("ar_dim must be divisible by ar_heads")
        if self.window < 11:
            raise ValueError("window must be >= 11 (anchor is drawn from the last ten frames)")


@dataclass
class ConditionBundle:
    """Per-window conditioning: aligned encoded audio for both tracks, the
    anchor motion latent, and per-condition drop flags. Dropped conditions
    are represented downstream by learned null embeddings, never raw zeros.
    """

    speaker: object  # [K, audio_dim] Tensor or ndarray
    listener: object
    anchor: np.ndarray | None
    drop_speaker: bool = False
    drop_listener: bool = False
    drop_anchor: bool = False

    def branch(self, has_s: bool, has_l: bool, has_r: bool) -> "ConditionBundle":
        """Guidance branch view: keep only the selected conditions."""
        return ConditionBundle(
            self.speaker,
            self.listener,
            self.anchor,
            drop_speaker=not has_s,
            drop_listener=not has_l,
            drop_anchor=not has_r,
        )


@dataclass(frozen=True)
class FlowSample:
    """One batch of interpolant tuples; sigma_t = t (linear schedule)."""

    m0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    sigma_t: np.ndarray
    m_t: np.ndarray


def make_flow_sample(m0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> FlowSample:
    t = np.asarray(t, dtype=np.float64)
    sigma = t
    m_t = (1.0 - sigma)[:, None] * m0 + sigma[:, None] * eps
    return FlowSample(m0=m0, eps=eps, t=t, sigma_t=sigma, m_t=m_t)


def sample_anchor(n: int, phase: str, rng: RngState | None = None) -> int:
    """Training draws uniformly from the last ten frames; inference pins frame 0."""
    if phase == "infer":
        return 0
    if phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    if n < 11:
        raise ValueError("training windows must have at least 11 frames")
    return int(n - 10 + rng.integers(0, 10))


def aligned_indices(frames: int, ratio: int) -> np.ndarray:
    return (np.arange(frames) + 1) * ratio - 1


def align_audio(encoded: np.ndarray, frames: int, ratio: int) -> np.ndarray:
    """Resample encoded audio onto the motion-frame grid (end-of-frame rule).

    With an integer audio-to-video frame ratio the linear interpolation picks
    grid points exactly: motion frame i reads encoded index (i+1)*ratio - 1.
    """
    if encoded.ndim != 2 or encoded.shape[0] < 1:
        raise ValueError("align_audio needs a nonempty [frames, dim] input")
    idx = aligned_indices(frames, ratio)
    if idx[-1] >= encoded.shape[0]:
        raise ValueError(
            f"encoded track ({encoded.shape[0]} frames) too short for "
            f"{frames} motion frames at ratio {ratio}"
        )
    return encoded[idx]


def _sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = (np.asarray(t, dtype=np.float64) * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class MotionGenerator:
    def __init__(self, cfg: GeneratorConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @staticmethod
    def init(cfg: GeneratorConfig, rng: RngState) -> "MotionGenerator":
        d = cfg.ar_dim
        hd = cfg.head_dim
        md = cfg.motion_dim
        p: dict[str, Tensor] = {}

        def w(name, rows, cols, scale=None):
            scale = scale if scale is not None else 1.0 / np.sqrt(rows)
            p[name] = T.parameter(scale * rng.normal((rows, cols)))

        def b(name, n):
            p[name] = T.parameter(np.zeros(n))

        w("motion_w", md, d)
        b("motion_b", d)
        w("anchor_w", md, d)
        b("anchor_b", d)
        w("spk_w", cfg.audio_dim, d)
        b("spk_b", d)
        w("lis_w", cfg.audio_dim, d)
        b("lis_b", d)
        for nm in ("null_s", "null_l", "null_r"):
            p[nm] = T.parameter(0.02 * rng.normal(d))
        mlp = cfg.mlp_mult * d
        for i in range(cfg.ar_blocks):
            pre = f"ar{i}."
            p[pre + "ln1_g"] = T.parameter(np.ones(d))
            b(pre + "ln1_b", d)
            for nm in ("wq", "wk", "wv", "wo"):
                w(pre + nm, d, d)
                b(pre + nm.replace("w", "b"), d)
            p[pre + "ln2_g"] = T.parameter(np.ones(d))
            b(pre + "ln2_b", d)
            w(pre + "mlp_w1", d, mlp)
            b(pre + "mlp_b1", mlp)
            w(pre + "mlp_w2", mlp, d)
            b(pre + "mlp_b2", d)
        p["ar_final_ln_g"] = T.parameter(np.ones(d))
        b("ar_final_ln_b", d)

        # flow head
        w("h_in_w", md, hd)
        b("h_in_b", hd)
        w("h_t_w", hd, hd)
        b("h_t_b", hd)
        w("h_c_w", d, hd)
        b("h_c_b", hd)
        hmlp = cfg.mlp_mult * hd
        for i in range(cfg.head_blocks):
            pre = f"h{i}."
            # modulation projections start at zero (AdaLN-zero)
            p[pre + "mod_w"] = T.parameter(np.zeros((hd, 3 * hd)))
            b(pre + "mod_b", 3 * hd)
            w(pre + "mlp_w1", hd, hmlp)
            b(pre + "mlp_b1", hmlp)
            w(pre + "mlp_w2", hmlp, hd)
            b(pre + "mlp_b2", hd)
        p["h_out_w"] = T.parameter(np.zeros((hd, md)))
        b("h_out_b", md)
        w("det_w", d, md)
        b("det_b", md)
        return MotionGenerator(cfg, p)

    # -- AR backbone ---------------------------------------------------------

    def condition_sequence(self, motion_inputs, conditions: ConditionBundle) -> Tensor:
        """Condition vectors for K frames from K-1 previous-motion rows plus
        the bundled anchor and per-frame aligned audio features.

        Row i of the result is the condition vector c for frame i: a function
        only of motion rows < i, audio rows <= i, and the anchor.
        """
        p = self.params
        cfg = self.cfg
        spk = conditions.speaker
        lis = conditions.listener
        spk = spk if isinstance(spk, Tensor) else Tensor(spk)
        lis = lis if isinstance(lis, Tensor) else Tensor(lis)
        k_frames = spk.data.shape[0]
        if lis.data.shape[0] != k_frames:
            raise ValueError("speaker/listener aligned features must have equal length")
        if k_frames > cfg.window:
            raise ValueError(f"context of {k_frames} frames exceeds window {cfg.window}")

        ones_col = Tensor(np.ones((k_frames, 1)))
        if conditions.drop_speaker:
            spk_emb = T.mul(ones_col, p["null_s"])
        else:
            spk_emb = T.linear(spk, p["spk_w"], p["spk_b"])
        if conditions.drop_listener:
            lis_emb = T.mul(ones_col, p["null_l"])
        else:
            lis_emb = T.linear(lis, p["lis_w"], p["lis_b"])
        audio_emb = T.add(spk_emb, lis_emb)

        if conditions.drop_anchor or conditions.anchor is None:
            anchor_emb = T.mul(Tensor(np.ones((1, 1))), p["null_r"])
        else:
            anchor_emb = T.linear(
                Tensor(conditions.anchor[None, :]), p["anchor_w"], p["anchor_b"]
            )
        parts = [anchor_emb]
        if k_frames > 1:
            motion_inputs = (
                motion_inputs if isinstance(motion_inputs, Tensor) else Tensor(motion_inputs)
            )
            if motion_inputs.data.shape[0] != k_frames - 1:
                raise ValueError("expected K-1 previous-motion rows for K frames")
            parts.append(T.linear(motion_inputs, p["motion_w"], p["motion_b"]))
        x = T.add(T.concat_rows(parts), audio_emb)

        positions = np.arange(k_frames, dtype=np.float64)
        mask = T.AttentionMask.lookahead(k_frames, 0)
        for i in range(cfg.ar_blocks):
            pre = f"ar{i}."
            h = T.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = T.rope_apply(T.linear(h, p[pre + "wq"], p[pre + "bq"]), positions, cfg.rope_base)
            kk = T.rope_apply(T.linear(h, p[pre + "wk"], p[pre + "bk"]), positions, cfg.rope_base)
            v = T.linear(h, p[pre + "wv"], p[pre + "bv"])
            attn = T.masked_attention(q, kk, v, mask, cfg.ar_heads)
            x = T.add(x, T.linear(attn, p[pre + "wo"], p[pre + "bo"]))
            h = T.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            h = T.silu(T.linear(h, p[pre + "mlp_w1"], p[pre + "mlp_b1"]))
            x = T.add(x, T.linear(h, p[pre + "mlp_w2"], p[pre + "mlp_b2"]))
        return T.layer_norm(x, p["ar_final_ln_g"], p["ar_final_ln_b"])

    # -- flow matching head ----------------------------------------------------

    def head_denoise(self, m_t, t, c) -> Tensor:
        """Predict clean motion from (noised motion, timestep, condition)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("flow timestep t must lie in [0, 1]")
        p = self.params
        cfg = self.cfg
        m_t = m_t if isinstance(m_t, Tensor) else Tensor(np.atleast_2d(m_t))
        c = c if isinstance(c, Tensor) else Tensor(np.atleast_2d(c))
        temb = Tensor(_sinusoidal_embedding(t, cfg.head_dim))
        cond = T.silu(
            T.add(
                T.linear(temb, p["h_t_w"], p["h_t_b"]),
                T.linear(c, p["h_c_w"], p["h_c_b"]),
            )
        )
        x = T.linear(m_t, p["h_in_w"], p["h_in_b"])
        hd = cfg.head_dim
        for i in range(cfg.head_blocks):
            pre = f"h{i}."
            mod = T.linear(cond, p[pre + "mod_w"], p[pre + "mod_b"])
            shift = T.slice_cols(mod, 0, hd)
            scale = T.slice_cols(mod, hd, 2 * hd)
            gate = T.slice_cols(mod, 2 * hd, 3 * hd)
            h = T.layer_norm(x)
            h = T.add(T.mul(h, T.add(scale, 1.0)), shift)
            h = T.silu(T.linear(h, p[pre + "mlp_w1"], p[pre + "mlp_b1"]))
            h = T.linear(h, p[pre + "mlp_w2"], p[pre + "mlp_b2"])
            x = T.add(x, T.mul(gate, h))
        return T.linear(x, p["h_out_w"], p["h_out_b"])

    def deterministic_project(self, c) -> Tensor:
        """Flow head removed: condition vectors map linearly to motion."""
        c = c if isinstance(c, Tensor) else Tensor(np.atleast_2d(c))
        return T.linear(c, self.params["det_w"], self.params["det_b"])


def flow_loss(pred: Tensor, target) -> Tensor:
    """Mean squared residual against the clean motion, over all elements."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    diff = T.sub(pred, target)
    return T.mean_all(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_step(
    gen: MotionGenerator,
    enc_s: AudioEncoder,
    enc_l: AudioEncoder,
    dataset: Dataset,
    opt: AdamW,
    rng: RngState,
    batch: int = 8,
    anchor_mode: str = "last10",
    drop_probs: tuple[float, float, float] = (DROP_SPEAKER_P, DROP_LISTENER_P, DROP_ANCHOR_P),
) -> float:
    """One teacher-forced optimization step over ``batch`` sampled windows.

    Encoders run inside the graph, so their parameters are fine-tuned by the
    same optimizer. Per frame an independent t ~ U[0,1] and noise draw feed
    the interpolant; conditions are dropped per window with the given
    probabilities (anchor_mode "none" drops the anchor always).
    """
    if anchor_mode not in ("last10", "random", "none"):
        raise ValueError(f"unknown anchor_mode {anchor_mode!r}")
    cfg = gen.cfg
    n = cfg.window
    ratio = dataset.cfg.audio_frames_per_video_frame
    losses = []
    for _ in range(batch):
        ep = dataset.episodes[int(rng.integers(0, len(dataset.episodes)))]
        frames = ep.motion.shape[0]
        if frames < n:
            raise ValueError(f"episode of {frames} frames is shorter than window {n}")
        start = int(rng.integers(0, frames - n + 1))
        window = ep.motion[start : start + n]

        if anchor_mode == "none":
            anchor, drop_r = None, True
        else:
            idx = (
                sample_anchor(n, "train", rng)
                if anchor_mode == "last10"
                else int(rng.integers(0, n))
            )
            anchor = window[idx]
            drop_r = bool(rng.uniform() < drop_probs[2])
        drop_s = bool(rng.uniform() < drop_probs[0])
        drop_l = bool(rng.uniform() < drop_probs[1])

        with T.fast_forward():
            spk_feats = enc_s.features(Tensor(ep.audio.speaker))
            lis_feats = enc_l.features(Tensor(ep.audio.listener))
            idx_audio = aligned_indices(n, ratio) + start * ratio
            conditions = ConditionBundle(
                T.take_rows(spk_feats, idx_audio),
                T.take_rows(lis_feats, idx_audio),
                anchor,
                drop_speaker=drop_s,
                drop_listener=drop_l,
                drop_anchor=drop_r,
            )
            c = gen.condition_sequence(window[:-1], conditions)
            if cfg.deterministic_mode:
                pred = gen.deterministic_project(c)
            else:
                sample = make_flow_sample(
                    window, rng.uniform(n), rng.normal((n, cfg.motion_dim))
                )
                pred = gen.head_denoise(sample.m_t, sample.t, c)
            losses.append(flow_loss(pred, window))

    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    loss = T.mul(total, 1.0 / batch)
    val = float(loss.data)
    if not np.isfinite(val):
        raise RuntimeError("training loss became non-finite")
    opt.zero_grad()
    T.backward(loss)
    opt.step()
    return val


def generator_config_items(cfg: GeneratorConfig, prefix: str = "gen.") -> dict[str, str]:
    return {
        prefix + "ar_blocks": str(cfg.ar_blocks),
        prefix + "ar_dim": str(cfg.ar_dim),
        prefix + "ar_heads": str(cfg.ar_heads),
        prefix + "head_blocks": str(cfg.head_blocks),
        prefix + "head_dim": str(cfg.head_dim),
        prefix + "motion_dim": str(cfg.motion_dim),
        prefix + "audio_dim": str(cfg.audio_dim),
        prefix + "window": str(cfg.window),
        prefix + "deterministic_mode": str(int(cfg.deterministic_mode)),
        prefix + "rope_base": repr(cfg.rope_base),
        prefix + "mlp_mult": str(cfg.mlp_mult),
        prefix + "audio_alignment": "end_of_frame",
    }


def generator_config_from_items(items: dict[str, str], prefix: str = "gen.") -> GeneratorConfig:
    return GeneratorConfig(
        ar_blocks=int(items[prefix + "ar_blocks"]),
        ar_dim=int(items[prefix + "ar_dim"]),
        ar_heads=int(items[prefix + "ar_heads"]),
        head_blocks=int(items[prefix + "head_blocks"]),
        head_dim=int(items[prefix + "head_dim"]),
        motion_dim=int(items[prefix + "motion_dim"]),
        audio_dim=int(items[prefix + "audio_dim"]),
        window=int(items[prefix + "window"]),
        deterministic_mode=bool(int(items[prefix + "deterministic_mode"])),
        rope_base=float(items[prefix + "rope_base"]),
        mlp_mult=int(items[prefix + "mlp_mult"]),
    )
