"""Causal audio encoder with a bounded lookahead attention mask.

A small pre-norm transformer over frame-level audio features. Two rules keep
its receptive field fully explicit: normalization only ever happens per
timestep (never across the sequence axis), and positions enter through
rotary embeddings inside attention. The amount of future context is then
governed solely by the attention mask: ``lookahead=L`` admits key ``j`` for
query ``i`` iff ``j <= i + L``. The speaker track uses a small L, the
listener track runs purely causal (L = 0).

Attention lookahead compounds across stacked layers, so the whole budget is
granted to the first attention layer and every deeper layer runs purely
causal; the encoder's receptive field beyond frame i is then exactly L
frames, not layers * L.

Self-supervised pretraining is masked-frame reconstruction (mask 15% of the
input frames, predict their original features from context); restricted
students are then distilled from a full-attention teacher by matching
final-layer features frame by frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .optim import AdamW
from .tensor import AttentionMask, RngState, Tensor
from .world import Dataset

MASK_FRACTION = 0.15
# learned per-head relative-position score bias covers offsets in
# [-REL_PAST, REL_FUTURE]; farther pairs share the clamped edge value
REL_PAST = 8
REL_FUTURE = 8


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    feature_dim: int = 8
    mode: str = "causal_lookahead"  # or "full"
    lookahead: int = 0  # audio frames; ignored when mode == "full"
    rope_base: float = 10000.0
    mlp_mult: int = 4

    def __post_init__(self):
        if self.mode not in ("full", "causal_lookahead"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")
        if self.mode == "causal_lookahead" and self.lookahead < 0:
            raise ValueError("lookahead must be >= 0")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def effective_lookahead(self) -> int | None:
        return None if self.mode == "full" else self.lookahead


@dataclass
class EncodedAudio:
    """Both tracks encoded to model_dim features, one row per audio frame."""

    speaker: np.ndarray
    listener: np.ndarray


def build_lookahead_mask(frames: int, lookahead: int | None) -> AttentionMask:
    """Mask admitting j <= i + L; ``lookahead=None`` gives the all-true mask."""
    return AttentionMask.lookahead(frames, lookahead)


class AudioEncoder:
    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @staticmethod
    def init(cfg: EncoderConfig, rng: RngState) -> "AudioEncoder":
        d = cfg.model_dim
        f = cfg.feature_dim
        h = cfg.mlp_mult * d
        p: dict[str, Tensor] = {}

        def w(name, rows, cols, scale=None):
            scale = scale if scale is not None else 1.0 / np.sqrt(rows)
            p[name] = T.parameter(scale * rng.normal((rows, cols)))

        def b(name, n):
            p[name] = T.parameter(np.zeros(n))

        w("in_w", f, d)
        b("in_b", d)
        p["mask_emb"] = T.parameter(0.02 * rng.normal(d))
        for i in range(cfg.layers):
            pre = f"blk{i}."
            p[pre + "ln1_g"] = T.parameter(np.ones(d))
            b(pre + "ln1_b", d)
            for nm in ("wq", "wk", "wv", "wo"):
                w(pre + nm, d, d)
                b(pre + nm.replace("w", "b"), d)
            b(pre + "relb", (cfg.heads, REL_PAST + REL_FUTURE + 1))
            p[pre + "ln2_g"] = T.parameter(np.ones(d))
            b(pre + "ln2_b", d)
            w(pre + "mlp_w1", d, h)
            b(pre + "mlp_b1", h)
            w(pre + "mlp_w2", h, d)
            b(pre + "mlp_b2", d)
        p["final_ln_g"] = T.parameter(np.ones(d))
        b("final_ln_b", d)
        w("recon_w", d, f)
        b("recon_b", f)
        return AudioEncoder(cfg, p)

    def features(self, audio: Tensor, masked_rows: np.ndarray | None = None) -> Tensor:
        """Final-layer features for one track; differentiable graph.

        ``masked_rows`` (pretraining only) replaces the projected input of the
        given rows with the learned mask embedding.
        """
        if audio.data.ndim != 2 or audio.data.shape[0] < 1:
            raise ValueError("encoder input must be a nonempty [frames, features] track")
        p = self.params
        cfg = self.cfg
        frames = audio.data.shape[0]
        x = T.linear(audio, p["in_w"], p["in_b"])
        if masked_rows is not None and masked_rows.size:
            keep = np.ones((frames, 1))
            keep[masked_rows] = 0.0
            hole = 1.0 - keep
            x = T.add(T.mul(x, Tensor(keep)), T.mul(p["mask_emb"], Tensor(hole)))
        positions = np.arange(frames, dtype=np.float64)
        if cfg.mode == "full":
            layer_masks = [build_lookahead_mask(frames, None)] * cfg.layers
        else:
            # whole lookahead budget on layer 0, deeper layers purely causal
            layer_masks = [build_lookahead_mask(frames, cfg.lookahead)] + [
                build_lookahead_mask(frames, 0)
            ] * (cfg.layers - 1)
        for i in range(cfg.layers):
            pre = f"blk{i}."
            h = T.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = T.rope_apply(T.linear(h, p[pre + "wq"], p[pre + "bq"]), positions, cfg.rope_base)
            k = T.rope_apply(T.linear(h, p[pre + "wk"], p[pre + "bk"]), positions, cfg.rope_base)
            v = T.linear(h, p[pre + "wv"], p[pre + "bv"])
            attn = T.masked_attention(
                q, k, v, layer_masks[i], cfg.heads,
                rel_bias=p[pre + "relb"], rel_range=(REL_PAST, REL_FUTURE),
            )
            x = T.add(x, T.linear(attn, p[pre + "wo"], p[pre + "bo"]))
            h = T.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            h = T.silu(T.linear(h, p[pre + "mlp_w1"], p[pre + "mlp_b1"]))
            x = T.add(x, T.linear(h, p[pre + "mlp_w2"], p[pre + "mlp_b2"]))
        return T.layer_norm(x, p["final_ln_g"], p["final_ln_b"])

    def encode(self, audio: np.ndarray) -> np.ndarray:
        """Inference encode of one track: [frames, feature_dim] -> [frames, model_dim]."""
        with T.no_grad():
            return self.features(Tensor(audio)).data

    def reconstruct(self, feats: Tensor) -> Tensor:
        return T.linear(feats, self.params["recon_w"], self.params["recon_b"])

    def clone(self) -> "AudioEncoder":
        params = {k: T.parameter(v.data.copy()) for k, v in self.params.items()}
        return AudioEncoder(self.cfg, params)

    def with_mode(self, mode: str, lookahead: int = 0) -> "AudioEncoder":
        """Same weights under a different attention mask regime."""
        cfg = replace(self.cfg, mode=mode, lookahead=lookahead)
        return AudioEncoder(cfg, self.params)


def _pretrain_tracks(dataset: Dataset, crop: int, rng: RngState, batch: int) -> list[np.ndarray]:
    tracks = []
    for _ in range(batch):
        ep = dataset.episodes[int(rng.integers(0, len(dataset.episodes)))]
        track = ep.audio.speaker if rng.uniform() < 0.5 else ep.audio.listener
        total = track.shape[0]
        span = min(crop, total)
        start = int(rng.integers(0, total - span + 1))
        tracks.append(track[start : start + span])
    return tracks


def _reconstruction_loss(enc: AudioEncoder, tracks: list[np.ndarray], rng: RngState) -> Tensor:
    losses = []
    for track in tracks:
        frames = track.shape[0]
        n_mask = max(1, int(round(MASK_FRACTION * frames)))
        masked = rng.permutation(frames)[:n_mask]
        feats = enc.features(Tensor(track), masked_rows=masked)
        pred = T.take_rows(enc.reconstruct(feats), masked)
        target = Tensor(track[masked])
        diff = T.sub(pred, target)
        losses.append(T.mean_all(T.mul(diff, diff)))
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.mul(total, 1.0 / len(losses))


def pretrain_teacher(
    cfg: EncoderConfig,
    dataset: Dataset,
    steps: int,
    rng: RngState,
    lr: float = 1e-3,
    batch: int = 4,
    crop: int = 64,
) -> tuple[AudioEncoder, list[float]]:
    """Masked-frame reconstruction pretraining of the full-attention teacher."""
    if not dataset.episodes:
        raise ValueError("pretraining needs a nonempty dataset")
    if cfg.mode != "full":
        cfg = replace(cfg, mode="full")
    enc = AudioEncoder.init(cfg, rng.split("init"))
    opt = AdamW(enc.params, lr=lr)
    data_rng = rng.split("data")
    history: list[float] = []
    for _ in range(steps):
        tracks = _pretrain_tracks(dataset, crop, data_rng, batch)
        with T.fast_forward():
            loss = _reconstruction_loss(enc, tracks, data_rng)
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError(
                f"teacher pretraining diverged at step {len(history)}: loss={val}"
            )
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        history.append(val)
    return enc, history


def distill_student(
    teacher: AudioEncoder,
    student_cfg: EncoderConfig,
    dataset: Dataset,
    steps: int,
    rng: RngState,
    lr: float = 1e-3,
    batch: int = 4,
    crop: int = 64,
    init_from_teacher: bool = True,
) -> tuple[AudioEncoder, list[float]]:
    """Train a restricted-attention student to match teacher features.

    The loss is the per-frame mean squared error between student and teacher
    final-layer features. The student starts from the teacher's weights by
    default, so a full-attention student begins at exactly zero loss.
    """
    if student_cfg.model_dim != teacher.cfg.model_dim:
        raise ValueError("teacher and student must share model_dim")
    if init_from_teacher:
        student = AudioEncoder(student_cfg, teacher.clone().params)
    else:
        student = AudioEncoder.init(student_cfg, rng.split("init"))
    opt = AdamW(student.params, lr=lr)
    data_rng = rng.split("data")
    history: list[float] = []
    for _ in range(steps):
        tracks = _pretrain_tracks(dataset, crop, data_rng, batch)
        with T.fast_forward():
            loss = distillation_loss(student, teacher, tracks)
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError(
                f"distillation diverged at step {len(history)}: loss={val}"
            )
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        history.append(val)
    return student, history


def distillation_loss(student: AudioEncoder, teacher: AudioEncoder, tracks: list[np.ndarray]) -> Tensor:
    losses = []
    for track in tracks:
        with T.no_grad():
            target = teacher.features(Tensor(track)).data
        feats = student.features(Tensor(track))
        diff = T.sub(feats, Tensor(target))
        losses.append(T.mean_all(T.mul(diff, diff)))
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.mul(total, 1.0 / len(losses))


def heldout_distillation_loss(
    student: AudioEncoder, teacher: AudioEncoder, dataset: Dataset
) -> float:
    tracks = [ep.audio.speaker for ep in dataset.episodes]
    with T.no_grad(), T.fast_forward():
        return float(distillation_loss(student, teacher, tracks).data)


# -- checkpoint adapters -----------------------------------------------------


def encoder_config_items(cfg: EncoderConfig, prefix: str) -> dict[str, str]:
    return {
        prefix + "layers": str(cfg.layers),
        prefix + "model_dim": str(cfg.model_dim),
        prefix + "heads": str(cfg.heads),
        prefix + "feature_dim": str(cfg.feature_dim),
        prefix + "mode": cfg.mode,
        prefix + "lookahead": str(cfg.lookahead),
        prefix + "rope_base": repr(cfg.rope_base),
        prefix + "mlp_mult": str(cfg.mlp_mult),
    }


def encoder_config_from_items(items: dict[str, str], prefix: str) -> EncoderConfig:
    return EncoderConfig(
        layers=int(items[prefix + "layers"]),
        model_dim=int(items[prefix + "model_dim"]),
        heads=int(items[prefix + "heads"]),
        feature_dim=int(items[prefix + "feature_dim"]),
        mode=items[prefix + "mode"],
        lookahead=int(items[prefix + "lookahead"]),
        rope_base=float(items[prefix + "rope_base"]),
        mlp_mult=int(items[prefix + "mlp_mult"]),
    )


def encoder_tensors(enc: AudioEncoder, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in enc.params.items()}


def encoder_from_tensors(
    cfg: EncoderConfig, tensors: dict[str, np.ndarray], prefix: str
) -> AudioEncoder:
    params = {
        k[len(prefix):]: T.parameter(v)
        for k, v in tensors.items()
        if k.startswith(prefix)
    }
    if not params:
        raise ValueError(f"no tensors under prefix {prefix!r}")
    return AudioEncoder(cfg, params)
