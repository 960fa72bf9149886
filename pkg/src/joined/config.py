"""Run configuration: every tunable of the pipeline with its published default.

Config files are TOML with flat keys matching the RunConfig field names.
Precedence is defaults < config file < command-line flags.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .extraction import FallbackParams
from .losses import LossWeights
from .nets import EncoderSpec, FlmSpec, FsmSpec, JsdmSpec
from .pipeline import AugmentPolicy

ENV_NUM_WORKERS = "JOINED_NUM_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 7
    device: str = "cpu"  # "cpu" | "accelerator"
    deterministic: bool = True
    out_dir: str = "runs"
    data_root: str = "data"
    workers: int = 4

    # model
    base_width: int = 64
    depth: int = 5
    decoder_start_width: int = 0  # 0 -> 4 * base_width
    segmentor_activation: str = "sigmoid"
    bridge: bool = True
    branches: str = "PDS"

    # optimization
    lr: float = 2e-4
    lr_schedule: str = "constant"  # "constant" | "cosine"
    batch_size: int = 8
    coarse_epochs: int = 300
    fine_seg_epochs: int = 300
    fine_loc_epochs: int = 300
    tau0: int = 50
    tau1: int = 100
    lambda0: float = 1.0
    lambda1: float = 1.0
    sigma_divisor: float = 100.0
    consistency_backprop: str = "both"  # "both" | "detector" | "none"
    teacher_forcing: bool = True
    jitter_px: int = 16
    augment: bool = True

    # geometry
    coarse_resolution: int = 256
    seg_crop_size: int = 448
    loc_crop_size: int = 128

    # fovea fallback rule
    fallback_horizontal_fraction: float = 0.3
    fallback_vertical_fraction: float = 0.0
    fallback_confidence_threshold: float = 0.05

    def validate(self) -> None:
        if self.device not in ("cpu", "accelerator"):
            raise ConfigError(f"key 'device' must be cpu or accelerator, got {self.device!r}")
        if self.consistency_backprop not in ("both", "detector", "none"):
            raise ConfigError(
                f"key 'consistency_backprop' must be both/detector/none, got {self.consistency_backprop!r}"
            )
        if self.segmentor_activation not in ("sigmoid", "softmax"):
            raise ConfigError(
                f"key 'segmentor_activation' must be sigmoid or softmax, got {self.segmentor_activation!r}"
            )
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"key 'lr_schedule' must be constant or cosine, got {self.lr_schedule!r}"
            )
        if not self.branches or any(b not in "PDS" for b in self.branches):
            raise ConfigError(f"key 'branches' must be a subset of 'PDS', got {self.branches!r}")
        if self.tau0 >= self.tau1:
            raise ConfigError(f"key 'tau0' must be < tau1 ({self.tau0} >= {self.tau1})")
        for key in ("lr", "lambda0", "lambda1", "sigma_divisor"):
            if getattr(self, key) < 0:
                raise ConfigError(f"key {key!r} must be non-negative")

    # ---- derived objects ---------------------------------------------------

    def decoder_start(self) -> int | None:
        return self.decoder_start_width or None

    def jsdm_spec(self) -> JsdmSpec:
        return JsdmSpec(
            encoder=EncoderSpec(in_channels=3, depth=self.depth, base_width=self.base_width),
            decoder_start_width=self.decoder_start(),
            segmentor_activation=self.segmentor_activation,
            bridge=self.bridge,
            branches=tuple(self.branches),
        )

    def fsm_spec(self) -> FsmSpec:
        return FsmSpec(
            encoder=EncoderSpec(in_channels=4, depth=self.depth, base_width=self.base_width),
            decoder_start_width=self.decoder_start(),
        )

    def flm_spec(self) -> FlmSpec:
        return FlmSpec(
            encoder=EncoderSpec(in_channels=6, depth=self.depth, base_width=self.base_width),
            decoder_start_width=self.decoder_start(),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda0=self.lambda0, lambda1=self.lambda1, tau0=self.tau0, tau1=self.tau1
        )

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy() if self.augment else AugmentPolicy.identity()

    def fallback_params(self) -> FallbackParams:
        return FallbackParams(
            horizontal_fraction=self.fallback_horizontal_fraction,
            vertical_fraction=self.fallback_vertical_fraction,
            confidence_threshold=self.fallback_confidence_threshold,
        )

    def torch_device(self):
        import torch

        if self.device == "accelerator":
            if not torch.cuda.is_available():
                raise ConfigError("device 'accelerator' requested but no CUDA device is available")
            return torch.device("cuda")
        return torch.device("cpu")

    def effective_workers(self) -> int:
        cap = os.environ.get(ENV_NUM_WORKERS)
        if cap is None:
            return max(self.workers, 1)
        try:
            return max(min(self.workers, int(cap)), 1)
        except ValueError as exc:
            raise ConfigError(f"{ENV_NUM_WORKERS} must be an integer, got {cap!r}") from exc


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(config, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"key {key!r} expects a boolean, got {value!r}")
        elif isinstance(current, int) and not isinstance(value, bool):
            if not isinstance(value, int):
                raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
        elif isinstance(current, float):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"key {key!r} expects a number, got {value!r}")
            value = float(value)
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"key {key!r} expects a string, got {value!r}")
        setattr(config, key, value)
    config.validate()
    return config


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        apply_overrides(config, data)
    if overrides:
        apply_overrides(config, overrides)
    config.validate()
    return config


def render_config(config: RunConfig) -> str:
    """Fully resolved config as TOML text (the --print-config output)."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = f'"{value}"'
        else:
            text = repr(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
