"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .config import RunConfig
from .encoder import AudioEncoder, distill_student, pretrain_teacher
from .generator import MotionGenerator, train_step
from .metrics import MetricsReport, evaluate_episode, fit_oracle_clusters
from .optim import AdamW
from .streaming import ModelBundle, SamplerConfig, generate_offline
from .tensor import RngState
from .world import Dataset, make_dataset


def worker_limit(requested: int | None = None) -> int:
    """Worker count for parallel sub-experiments, capped by DYSTREAM_THREADS."""
    cap = os.environ.get("DYSTREAM_THREADS", "").strip()
    cap_n = int(cap) if cap else 1
    if requested is None:
        return max(1, cap_n)
    return max(1, min(requested, cap_n))


def synth_dataset(run: RunConfig, episodes: int | None = None, frames: int | None = None) -> Dataset:
    episodes = episodes if episodes is not None else run.get_int("synth.episodes")
    frames = frames if frames is not None else run.get_int("synth.frames")
    rng = RngState(run.world.seed)
    return make_dataset(run.world, episodes, frames, rng)


def build_encoders(
    run: RunConfig,
    dataset: Dataset,
    lookahead: int | None = None,
    teacher: AudioEncoder | None = None,
    pretrain_steps: int | None = None,
    distill_steps: int | None = None,
) -> tuple[AudioEncoder, AudioEncoder, AudioEncoder]:
    """Teacher pretraining plus per-track student distillation.

    Returns (speaker student, listener student, teacher). Passing a teacher
    skips pretraining so sweeps can share one.
    """
    pretrain_steps = (
        pretrain_steps if pretrain_steps is not None else run.get_int("pretrain.steps")
    )
    distill_steps = (
        distill_steps if distill_steps is not None else run.get_int("distill.steps")
    )
    init_rng = RngState(run.subsystem_seed("init"))
    if teacher is None:
        teacher, _ = pretrain_teacher(
            run.encoder_teacher(), dataset, pretrain_steps, init_rng.split("teacher")
        )
    enc_s, _ = distill_student(
        teacher,
        run.encoder_speaker(lookahead),
        dataset,
        distill_steps,
        init_rng.split("student-s"),
    )
    enc_l, _ = distill_student(
        teacher,
        run.encoder_listener(),
        dataset,
        distill_steps,
        init_rng.split("student-l"),
    )
    return enc_s, enc_l, teacher


def train_generator(
    run: RunConfig,
    dataset: Dataset,
    enc_s: AudioEncoder,
    enc_l: AudioEncoder,
    steps: int | None = None,
    anchor_mode: str | None = None,
    deterministic: bool | None = None,
    loss_log: list[tuple[int, float]] | None = None,
    checkpoint_every: int = 0,
    checkpoint_fn=None,
) -> ModelBundle:
    """Teacher-forced generator training with encoder fine-tuning."""
    steps = steps if steps is not None else run.get_int("train.steps")
    anchor_mode = anchor_mode if anchor_mode is not None else run.get("train.anchor_mode")
    gen_cfg = run.generator
    if deterministic is not None:
        gen_cfg = replace(gen_cfg, deterministic_mode=deterministic)
    rng = RngState(run.subsystem_seed("train"))
    gen = MotionGenerator.init(gen_cfg, rng.split("init"))
    params = dict(gen.params)
    params.update({f"enc_s.{k}": v for k, v in enc_s.params.items()})
    params.update({f"enc_l.{k}": v for k, v in enc_l.params.items()})
    base_lr = run.get_float("train.lr")
    opt = AdamW(params, lr=base_lr)
    batch = run.get_int("train.batch")
    warmup = run.get_int("train.warmup_steps")
    decay_step = int(steps * run.get_float("train.lr_decay_frac"))
    step_rng = rng.split("steps")
    bundle = ModelBundle(
        gen=gen,
        enc_s=enc_s,
        enc_l=enc_l,
        world_cfg=dataset.cfg,
        meta={"anchor_mode": anchor_mode, "root_seed": str(run.seed)},
    )
    decay = run.get_float("train.lr_decay")
    for step in range(steps):
        if warmup and step < warmup:
            opt.lr = base_lr * (step + 1) / warmup
        elif step >= decay_step:
            opt.lr = base_lr * decay
        else:
            opt.lr = base_lr
        loss = train_step(
            gen, enc_s, enc_l, dataset, opt, step_rng, batch=batch, anchor_mode=anchor_mode
        )
        if loss_log is not None:
            loss_log.append((step, loss))
        if checkpoint_every and checkpoint_fn and (step + 1) % checkpoint_every == 0:
            checkpoint_fn(bundle, step + 1)
    return bundle


def evaluate_bundle(
    run: RunConfig,
    bundle: ModelBundle,
    eval_dataset: Dataset,
    sampler: SamplerConfig | None = None,
    with_clusters: bool = False,
) -> tuple[list[MetricsReport], dict[str, float]]:
    """Generate offline for each eval episode and score against the oracle."""
    sampler = sampler if sampler is not None else run.sampler
    max_offset = run.get_int("eval.max_offset")
    cluster_exp = cluster_pose = None
    if with_clusters:
        cluster_exp, cluster_pose = fit_oracle_clusters(
            eval_dataset.episodes, eval_dataset.cfg, seed=run.subsystem_seed("clusters")
        )
    reports = []
    for i, ep in enumerate(eval_dataset.episodes):
        ep_sampler = replace(sampler, seed=sampler.seed + i)
        motion = generate_offline(bundle, ep.audio, ep_sampler, ep.motion[0])
        reports.append(
            evaluate_episode(
                motion, ep, eval_dataset.cfg, cluster_exp, cluster_pose, max_offset
            )
        )
    agg = {
        "sync_proxy": float(np.mean([r.sync_proxy for r in reports])),
        "mse": float(np.mean([r.mse for r in reports])),
        "fd_exp": float(np.mean([r.fd_exp for r in reports])),
        "fd_pose": float(np.mean([r.fd_pose for r in reports])),
        "var_exp": float(np.mean([r.var_exp for r in reports])),
        "var_pose": float(np.mean([r.var_pose for r in reports])),
        "sid_exp": float(np.mean([r.sid_exp for r in reports])),
        "sid_pose": float(np.mean([r.sid_pose for r in reports])),
        "drift": float(np.mean([r.drift for r in reports])),
    }
    return reports, agg


def make_eval_dataset(run: RunConfig) -> Dataset:
    rng = RngState(run.subsystem_seed("eval-world"))
    return make_dataset(
        run.world, run.get_int("eval.episodes"), run.get_int("eval.frames"), rng
    )


def _ablate_one(args: tuple) -> dict[str, float]:
    run, dataset, eval_dataset, lookahead, teacher = args
    enc_s, enc_l, _ = build_encoders(run, dataset, lookahead=lookahead, teacher=teacher)
    bundle = train_generator(run, dataset, enc_s, enc_l)
    _, agg = evaluate_bundle(run, bundle, eval_dataset)
    period_ms = 1000.0 * dataset.cfg.audio_frame_period_s
    return {
        "lookahead_frames": float(lookahead),
        "lookahead_ms": lookahead * period_ms,
        "sync_proxy": agg["sync_proxy"],
        "mse": agg["mse"],
    }


def ablate_lookahead(
    run: RunConfig,
    dataset: Dataset,
    lookaheads: list[int],
    eval_dataset: Dataset | None = None,
    on_row=None,
) -> list[dict[str, float]]:
    """Train/evaluate one generator per lookahead with shared seeds.

    The full-attention teacher is pretrained once and shared across the
    sweep. Sub-runs may execute on parallel workers (DYSTREAM_THREADS).
    """
    eval_dataset = eval_dataset if eval_dataset is not None else make_eval_dataset(run)
    init_rng = RngState(run.subsystem_seed("init"))
    teacher, _ = pretrain_teacher(
        run.encoder_teacher(),
        dataset,
        run.get_int("pretrain.steps"),
        init_rng.split("teacher"),
    )
    jobs = [(run, dataset, eval_dataset, la, teacher) for la in lookaheads]
    workers = worker_limit(len(jobs))
    rows: list[dict[str, float]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_ablate_one, jobs):
                rows.append(row)
                if on_row:
                    on_row(row)
    else:
        for job in jobs:
            row = _ablate_one(job)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows
