"""Command-line entry point.

Commands: synth, train, distill, generate, stream, eval, ablate.
Exit codes: 0 success, 1 usage error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, build_run_config
from .encoder import (
    AudioEncoder,
    encoder_config_from_items,
    encoder_config_items,
    encoder_from_tensors,
    encoder_tensors,
    distill_student,
    pretrain_teacher,
)
from .metrics import MetricsReport, evaluate_episode, fit_oracle_clusters
from .pipeline import ablate_lookahead, make_eval_dataset, synth_dataset, train_generator
from .streaming import (
    ModelBundle,
    generate_offline,
    packets_from_binary,
    run_stream,
)
from .tensor import RngState
from .world import Dataset, audio_to_wire


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="root seed")
    p.add_argument("--out", type=str, default=".", help="output directory")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def _run_config(args, extra: dict[str, str] | None = None) -> RunConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if extra:
        overrides.update(extra)
    return build_run_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    if not out.exists():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    return out


def _load_bundle(path: str) -> ModelBundle:
    if not Path(path).exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return ModelBundle.load(path)


def _load_dataset(path: str) -> Dataset:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return Dataset.load(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    extra = {}
    if args.episodes is not None:
        extra["synth.episodes"] = str(args.episodes)
    if args.frames is not None:
        extra["synth.frames"] = str(args.frames)
    run = _run_config(args, extra)
    out = _out_dir(args)
    ds = synth_dataset(run)
    path = ds.save(out / "dataset.dysw")
    print(f"wrote {path} ({len(ds.episodes)} episodes)")
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.steps is not None:
        extra["train.steps"] = str(args.steps)
    if args.deterministic:
        extra["gen.deterministic_mode"] = "1"
    if args.anchor_mode is not None:
        extra["train.anchor_mode"] = args.anchor_mode
    run = _run_config(args, extra)
    out = _out_dir(args)
    dataset = _load_dataset(args.dataset)

    if args.encoder is not None:
        cfg_s, tensors_s = checkpoint.load(args.encoder)
        enc_s = encoder_from_tensors(
            encoder_config_from_items(cfg_s, "enc."), tensors_s, "enc."
        )
    else:
        enc_s = AudioEncoder.init(
            run.encoder_speaker(), RngState(run.subsystem_seed("init")).split("enc-s")
        )
    if args.listener_encoder is not None:
        cfg_l, tensors_l = checkpoint.load(args.listener_encoder)
        enc_l = encoder_from_tensors(
            encoder_config_from_items(cfg_l, "enc."), tensors_l, "enc."
        )
    else:
        enc_l = AudioEncoder.init(
            run.encoder_listener(), RngState(run.subsystem_seed("init")).split("enc-l")
        )
    if enc_s.cfg.model_dim != run.generator.audio_dim:
        raise ValueError("speaker encoder model_dim incompatible with generator audio_dim")
    if enc_l.cfg.model_dim != run.generator.audio_dim:
        raise ValueError("listener encoder model_dim incompatible with generator audio_dim")

    losses: list[tuple[int, float]] = []
    every = args.checkpoint_every or 0

    def save_intermediate(bundle: ModelBundle, step: int) -> None:
        bundle.save(out / f"generator_step{step}.dyst")

    bundle = train_generator(
        run,
        dataset,
        enc_s,
        enc_l,
        loss_log=losses,
        checkpoint_every=every,
        checkpoint_fn=save_intermediate if every else None,
    )
    ckpt = out / "generator.dyst"
    bundle.save(ckpt)
    with open(out / "train_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for step, loss in losses:
            fh.write(f"{step},{loss:.9g}\n")
    print(f"wrote {ckpt}")
    return 0


def cmd_distill(args) -> int:
    extra = {}
    if args.steps is not None:
        if args.pretrain:
            extra["pretrain.steps"] = str(args.steps)
        else:
            extra["distill.steps"] = str(args.steps)
    run = _run_config(args, extra)
    out = _out_dir(args)
    dataset = _load_dataset(args.dataset)
    init_rng = RngState(run.subsystem_seed("init"))

    if args.pretrain:
        teacher, hist = pretrain_teacher(
            run.encoder_teacher(), dataset, run.get_int("pretrain.steps"), init_rng.split("teacher")
        )
        path = out / "teacher.dyst"
        checkpoint.save(
            path, encoder_config_items(teacher.cfg, "enc."), encoder_tensors(teacher, "enc.")
        )
        first = hist[0] if hist else float("nan")
        last = hist[-1] if hist else float("nan")
        print(f"wrote {path} (loss {first:.4g} -> {last:.4g})")
        return 0

    teacher_path = args.teacher or str(Path(args.out) / "teacher.dyst")
    if not Path(teacher_path).exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {teacher_path}")
    cfg_t, tensors_t = checkpoint.load(teacher_path)
    teacher = encoder_from_tensors(
        encoder_config_from_items(cfg_t, "enc."), tensors_t, "enc."
    )
    student, hist = distill_student(
        teacher,
        run.encoder_speaker(args.lookahead),
        dataset,
        run.get_int("distill.steps"),
        init_rng.split("student"),
    )
    path = out / f"encoder_L{args.lookahead}.dyst"
    config = encoder_config_items(student.cfg, "enc.")
    config["enc.init_from_teacher"] = "1"
    checkpoint.save(path, config, encoder_tensors(student, "enc."))
    first = hist[0] if hist else float("nan")
    last = hist[-1] if hist else float("nan")
    print(f"wrote {path} (loss {first:.4g} -> {last:.4g})")
    return 0


def cmd_generate(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    bundle = _load_bundle(args.model)
    dataset = _load_dataset(args.dataset)
    sampler = run.sampler
    indices = (
        range(len(dataset.episodes)) if args.episode == "all" else [int(args.episode)]
    )
    for i in indices:
        ep = dataset.episodes[i]
        motion = generate_offline(bundle, ep.audio, sampler, ep.motion[0])
        path = out / f"motion_{i}.npy"
        np.save(path, motion)
        print(f"wrote {path} ({motion.shape[0]} frames)")
    return 0


def cmd_stream(args) -> int:
    extra = {}
    if args.packet_ms is not None:
        extra["stream.packet_ms"] = str(args.packet_ms)
    if args.clock is not None:
        extra["stream.clock"] = args.clock
    run = _run_config(args, extra)
    out = _out_dir(args)
    bundle = _load_bundle(args.model)
    packet_ms = run.get_float("stream.packet_ms")
    clock = run.get("stream.clock")

    if args.from_stdin:
        period = bundle.world_cfg.audio_frame_period_s
        packets = packets_from_binary(
            sys.stdin.buffer, bundle.world_cfg.audio_feature_dim, period, packet_ms
        )
        anchor = np.zeros(bundle.gen.cfg.motion_dim)
        i = 0
    else:
        dataset = _load_dataset(args.dataset)
        i = int(args.episode)
        ep = dataset.episodes[i]
        packets = audio_to_wire(ep, packet_ms)
        anchor = ep.motion[0]

    motion, trace = run_stream(bundle, packets, run.sampler, anchor, clock=clock)
    np.save(out / f"motion_{i}.npy", motion)
    trace_path = out / "trace.csv"
    trace.to_csv(trace_path)
    for line in trace.summary_lines():
        print(line)
    print(f"wrote {trace_path}")
    return 0


def cmd_eval(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    dataset = _load_dataset(args.dataset)
    cluster_exp, cluster_pose = fit_oracle_clusters(
        dataset.episodes, dataset.cfg, seed=run.subsystem_seed("clusters")
    )
    if args.episode == "all":
        if args.motion is not None:
            raise ValueError("--motion evaluates a single episode; pass --episode <idx>")
        indices = range(len(dataset.episodes))
    else:
        indices = [int(args.episode)]
    rows = []
    for i in indices:
        ep = dataset.episodes[i]
        if args.motion is not None:
            motion = np.load(args.motion)
        else:
            motion = ep.motion  # self-evaluation of the oracle ground truth
        report = evaluate_episode(
            motion, ep, dataset.cfg, cluster_exp, cluster_pose, run.get_int("eval.max_offset")
        )
        rows.append((i, report))
    report_path = out / "report.csv"
    with open(report_path, "w") as fh:
        fh.write(MetricsReport.CSV_HEADER + "\n")
        for i, rep in rows:
            fh.write(rep.csv_row(i) + "\n")
    for line in rows[-1][1].summary_lines():
        print(line)
    print(f"wrote {report_path}")
    return 0


def cmd_ablate(args) -> int:
    extra = {}
    if args.train_steps is not None:
        extra["train.steps"] = str(args.train_steps)
    if args.lookahead_list is not None:
        extra["ablate.lookaheads"] = args.lookahead_list
    run = _run_config(args, extra)
    out = _out_dir(args)
    dataset = _load_dataset(args.dataset)
    lookaheads = [int(x) for x in run.get("ablate.lookaheads").split(",") if x != ""]
    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w") as fh:
        fh.write("lookahead_frames,lookahead_ms,sync_proxy,mse\n")
        fh.flush()

        def on_row(row):
            fh.write(
                f"{int(row['lookahead_frames'])},{row['lookahead_ms']:.6g},"
                f"{row['sync_proxy']:.6g},{row['mse']:.6g}\n"
            )
            fh.flush()

        ablate_lookahead(run, dataset, lookaheads, make_eval_dataset(run), on_row=on_row)
    print(f"wrote {sweep_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dystream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dyadic dataset")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the motion generator")
    _add_common(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", help="remove the flow head")
    p.add_argument("--anchor-mode", choices=["last10", "random", "none"], default=None)
    p.add_argument("--encoder", type=str, default=None, help="speaker encoder checkpoint")
    p.add_argument("--listener-encoder", type=str, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="pretrain a teacher or distill a student encoder")
    _add_common(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--pretrain", action="store_true", help="train the full-attention teacher")
    p.add_argument("--teacher", type=str, default=None)
    p.add_argument("--lookahead", type=int, default=0, help="student future frames")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("generate", help="offline generation from a dataset episode")
    _add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--episode", type=str, default="0")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("stream", help="packetized streaming generation with APD trace")
    _add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--episode", type=str, default="0")
    p.add_argument("--packet-ms", type=float, default=None)
    p.add_argument("--clock", choices=["virtual", "wall"], default=None)
    p.add_argument("--from-stdin", action="store_true", help="read binary packets from stdin")
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("eval", help="score generated motion against the oracle")
    _add_common(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--motion", type=str, default=None, help=".npy motion (default: ground truth)")
    p.add_argument("--episode", type=str, default="0")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="lookahead sweep: train/evaluate per L")
    _add_common(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--lookahead-list", type=str, default=None, help="e.g. 0,1,2,3,4")
    p.add_argument("--train-steps", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError, KeyError, IndexError) as exc:
        print(f"dystream: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
