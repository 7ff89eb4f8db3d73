"""Run configuration: defaults, config-file parsing, CLI overrides.

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments and
dotted keys (``world.coart_lag_q = 2``). Precedence: built-in defaults, then
the file, then explicit CLI settings. All randomness flows from the single
root ``seed``, split per subsystem (world/init/train/sample).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .encoder import EncoderConfig
from .generator import GeneratorConfig
from .streaming import GuidanceWeights, SamplerConfig
from .tensor import derive_seed
from .world import WorldConfig

DEFAULTS: dict[str, str] = {
    "seed": "0",
    # world
    "world.motion_dim": "16",
    "world.audio_feature_dim": "8",
    "world.audio_frames_per_video_frame": "2",
    "world.coart_lag_q": "2",
    "world.listener_delay_p": "4",
    "world.noise_scale": "0.1",
    "world.drift_coeff": "0.95",
    "world.seed": "",  # empty: derive from the root seed
    # encoders (speaker lookahead covers the default coarticulation lag)
    "enc.layers": "2",
    "enc.model_dim": "64",
    "enc.heads": "4",
    "enc_s.lookahead": "2",
    "enc_l.lookahead": "0",
    # generator
    "gen.ar_blocks": "2",
    "gen.ar_dim": "64",
    "gen.ar_heads": "4",
    "gen.head_blocks": "2",
    "gen.head_dim": "64",
    "gen.window": "40",
    "gen.deterministic_mode": "0",
    # sampler / guidance
    "sampler.steps": "5",
    "guidance.w_s": "0.5",
    "guidance.w_l": "0.5",
    "guidance.w_r": "0.5",
    "guidance.w_all": "1.0",
    # synthesis
    "synth.episodes": "48",
    "synth.frames": "64",
    # training
    "train.steps": "1500",
    "train.batch": "8",
    "train.lr": "1e-3",
    "train.warmup_steps": "0",
    "train.lr_decay": "0.25",
    "train.lr_decay_frac": "0.7",
    "train.anchor_mode": "last10",
    "pretrain.steps": "400",
    "distill.steps": "300",
    # streaming
    "stream.packet_ms": "100",
    "stream.clock": "virtual",
    # evaluation
    "eval.max_offset": "5",
    "eval.episodes": "3",
    "eval.frames": "200",
    # ablation sweep
    "ablate.lookaheads": "0,1,2,3,4",
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    items: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key = value): {raw!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items


def merge_settings(*layers: dict[str, str]) -> dict[str, str]:
    flat = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key not in flat:
                raise ValueError(f"unknown config key: {key}")
            flat[key] = value
    return flat


@dataclass
class RunConfig:
    flat: dict[str, str]

    # -- typed accessors -----------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.flat["seed"])

    def subsystem_seed(self, tag: str) -> int:
        return derive_seed(self.seed, tag)

    @property
    def world(self) -> WorldConfig:
        f = self.flat
        seed = f["world.seed"]
        return WorldConfig(
            motion_dim=int(f["world.motion_dim"]),
            audio_feature_dim=int(f["world.audio_feature_dim"]),
            audio_frames_per_video_frame=int(f["world.audio_frames_per_video_frame"]),
            coart_lag_q=int(f["world.coart_lag_q"]),
            listener_delay_p=int(f["world.listener_delay_p"]),
            noise_scale=float(f["world.noise_scale"]),
            drift_coeff=float(f["world.drift_coeff"]),
            seed=int(seed) if seed != "" else self.subsystem_seed("world"),
        )

    def _encoder(self, lookahead_key: str, lookahead_override: int | None = None) -> EncoderConfig:
        f = self.flat
        lookahead = (
            lookahead_override
            if lookahead_override is not None
            else int(f[lookahead_key])
        )
        return EncoderConfig(
            layers=int(f["enc.layers"]),
            model_dim=int(f["enc.model_dim"]),
            heads=int(f["enc.heads"]),
            feature_dim=int(f["world.audio_feature_dim"]),
            mode="causal_lookahead",
            lookahead=lookahead,
        )

    def encoder_speaker(self, lookahead: int | None = None) -> EncoderConfig:
        return self._encoder("enc_s.lookahead", lookahead)

    def encoder_listener(self) -> EncoderConfig:
        return self._encoder("enc_l.lookahead")

    def encoder_teacher(self) -> EncoderConfig:
        from dataclasses import replace

        return replace(self._encoder("enc_s.lookahead"), mode="full", lookahead=0)

    @property
    def generator(self) -> GeneratorConfig:
        f = self.flat
        return GeneratorConfig(
            ar_blocks=int(f["gen.ar_blocks"]),
            ar_dim=int(f["gen.ar_dim"]),
            ar_heads=int(f["gen.ar_heads"]),
            head_blocks=int(f["gen.head_blocks"]),
            head_dim=int(f["gen.head_dim"]),
            motion_dim=int(f["world.motion_dim"]),
            audio_dim=int(f["enc.model_dim"]),
            window=int(f["gen.window"]),
            deterministic_mode=bool(int(f["gen.deterministic_mode"])),
        )

    @property
    def sampler(self) -> SamplerConfig:
        f = self.flat
        return SamplerConfig(
            steps=int(f["sampler.steps"]),
            guidance=GuidanceWeights(
                w_s=float(f["guidance.w_s"]),
                w_l=float(f["guidance.w_l"]),
                w_r=float(f["guidance.w_r"]),
                w_all=float(f["guidance.w_all"]),
            ),
            seed=self.subsystem_seed("sample"),
        )

    def get_int(self, key: str) -> int:
        return int(self.flat[key])

    def get_float(self, key: str) -> float:
        return float(self.flat[key])

    def get(self, key: str) -> str:
        return self.flat[key]


def build_run_config(
    config_path: str | Path | None = None, overrides: dict[str, str] | None = None
) -> RunConfig:
    layers = []
    if config_path is not None:
        layers.append(parse_config_file(config_path))
    if overrides:
        layers.append(overrides)
    return RunConfig(merge_settings(*layers))
