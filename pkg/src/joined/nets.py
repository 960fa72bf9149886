"""Network graphs: the three-branch coarse net and the two fine-stage nets.

All three share the same building blocks: a width/depth-parameterized
convolutional encoder with factor-2 max pooling between blocks, and decoders
made of nearest ×2 upsampling followed by two 3x3 conv + BN + ReLU layers,
with long skip connections from every encoder block except the bottleneck.

The paper-scale pretrained backbones are deliberately replaced by this
parameterized encoder; externally supplied weights can be loaded through the
checkpoint mechanism whenever shapes match.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn


class GraphConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 3
    depth: int = 5
    base_width: int = 64

    def __post_init__(self) -> None:
        if self.depth < 3:
            raise GraphConfigError(f"encoder depth must be >= 3, got {self.depth}")
        if self.base_width < 1:
            raise GraphConfigError(f"base_width must be >= 1, got {self.base_width}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width << i for i in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 1 << (self.depth - 1)


@dataclass(frozen=True)
class JsdmSpec:
    """Shared encoder with Predictor/Detector/Segmentor decoder branches."""

    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    decoder_start_width: Optional[int] = None  # None -> 4 * base_width (256 at width 64)
    segmentor_activation: str = "sigmoid"  # "sigmoid" | "softmax"
    bridge: bool = True
    branches: tuple[str, ...] = ("P", "D", "S")

    def start_width(self) -> int:
        return self.decoder_start_width or 4 * self.encoder.base_width


@dataclass(frozen=True)
class FsmSpec:
    """Fine segmenter: RGB crop + coarse-mask channel in, 3-channel probs out."""

    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(in_channels=4))
    decoder_start_width: Optional[int] = None
    activation: str = "sigmoid"

    def start_width(self) -> int:
        return self.decoder_start_width or 4 * self.encoder.base_width


@dataclass(frozen=True)
class FlmSpec:
    """Fine localizer: 6-channel crop in, coordinate pair + 1-channel heatmap out."""

    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(in_channels=6))
    decoder_start_width: Optional[int] = None
    regression_hidden: int = 64

    def start_width(self) -> int:
        return self.decoder_start_width or 4 * self.encoder.base_width


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        ins = [spec.in_channels] + widths[:-1]
        self.blocks = nn.ModuleList(_conv_block(i, o) for i, o in zip(ins, widths))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise GraphConfigError(
                f"expected (B, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        d = self.spec.divisor
        if h % d or w % d:
            raise GraphConfigError(
                f"input {h}x{w} not divisible by {d} (encoder depth {self.spec.depth})"
            )
        skips = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                skips.append(x)
                x = self.pool(x)
        return x, skips


class Decoder(nn.Module):
    """Upsampling decoder with skip links; optionally widened by a bridge
    tensor concatenated at the penultimate layer before the 1x1 head."""

    def __init__(
        self,
        encoder_widths: list[int],
        start_width: int,
        out_channels: int,
        activation: str,
        bridge_width: int = 0,
        head_bias: float | tuple[float, ...] = 0.0,
    ):
        super().__init__()
        if activation not in ("sigmoid", "softmax"):
            raise GraphConfigError(f"unknown activation {activation!r}")
        n_up = len(encoder_widths) - 1
        stage_widths = [max(start_width >> i, 2) for i in range(n_up)]
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        stages = []
        cin = encoder_widths[-1]
        for i, width in enumerate(stage_widths):
            stages.append(_conv_block(cin + encoder_widths[-2 - i], width))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(stage_widths[-1] + bridge_width, out_channels, 1)
        with torch.no_grad():
            self.head.bias.copy_(torch.as_tensor(head_bias, dtype=torch.float32).expand(out_channels))
        self.activation = activation
        self.last_width = stage_widths[-1]

    def forward(
        self,
        bottom: torch.Tensor,
        skips: list[torch.Tensor],
        bridge: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        y = bottom
        for i, stage in enumerate(self.stages):
            y = self.up(y)
            y = stage(torch.cat([y, skips[-1 - i]], dim=1))
        penult = y
        if bridge is not None:
            y = torch.cat([y, bridge], dim=1)
        out = self.head(y)
        if self.activation == "sigmoid":
            out = torch.sigmoid(out)
        else:
            out = torch.softmax(out, dim=1)
        return out, penult


class JsdmOutputs(NamedTuple):
    d_p: Optional[torch.Tensor]  # (B, 1, H, W) distance map
    h_d: Optional[torch.Tensor]  # (B, 2, H, W) OD/fovea heatmaps
    p_s: Optional[torch.Tensor]  # (B, 3, H, W) OC/OD/background probabilities


class JsdmNet(nn.Module):
    """Joint segmentation and detection net: one encoder, up to three decoders.

    The Predictor's penultimate features are bridged into the Detector head
    so the detection branch sees the learned distance field directly.
    """

    def __init__(self, spec: JsdmSpec):
        super().__init__()
        for b in spec.branches:
            if b not in ("P", "D", "S"):
                raise GraphConfigError(f"unknown branch {b!r}")
        if not spec.branches:
            raise GraphConfigError("at least one branch is required")
        self.spec = spec
        self.encoder = Encoder(spec.encoder)
        widths = spec.encoder.widths
        start = spec.start_width()
        self.predictor = (
            Decoder(widths, start, 1, "sigmoid") if "P" in spec.branches else None
        )
        bridge_width = (
            self.predictor.last_width if (spec.bridge and self.predictor) else 0
        )
        # sparse-target heads start at a low-probability prior so the
        # background does not drown the early gradients
        self.detector = (
            Decoder(widths, start, 2, "sigmoid", bridge_width=bridge_width, head_bias=-2.0)
            if "D" in spec.branches
            else None
        )
        self.segmentor = (
            Decoder(widths, start, 3, spec.segmentor_activation, head_bias=(-2.0, -2.0, 2.0))
            if "S" in spec.branches
            else None
        )

    def forward(self, x: torch.Tensor) -> JsdmOutputs:
        bottom, skips = self.encoder(x)
        d_p = h_d = p_s = None
        bridge = None
        if self.predictor is not None:
            d_p, penult = self.predictor(bottom, skips)
            if self.spec.bridge:
                bridge = penult
        if self.detector is not None:
            h_d, _ = self.detector(bottom, skips, bridge=bridge)
        if self.segmentor is not None:
            p_s, _ = self.segmentor(bottom, skips)
        return JsdmOutputs(d_p, h_d, p_s)


class FsmNet(nn.Module):
    def __init__(self, spec: FsmSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.encoder)
        self.decoder = Decoder(
            spec.encoder.widths, spec.start_width(), 3, spec.activation, head_bias=(-2.0, -2.0, 2.0)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bottom, skips = self.encoder(x)
        out, _ = self.decoder(bottom, skips)
        return out


class FlmOutputs(NamedTuple):
    coords: torch.Tensor  # (B, 2) in [0, 1]^2
    heatmap: torch.Tensor  # (B, 1, h, w) in [0, 1]


class FlmNet(nn.Module):
    def __init__(self, spec: FlmSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.encoder)
        self.decoder = Decoder(spec.encoder.widths, spec.start_width(), 1, "sigmoid", head_bias=-2.0)
        bottom_width = spec.encoder.widths[-1]
        self.regression = nn.Sequential(
            nn.Linear(bottom_width, spec.regression_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(spec.regression_hidden, 2),
        )

    def forward(self, x: torch.Tensor) -> FlmOutputs:
        bottom, skips = self.encoder(x)
        pooled = bottom.mean(dim=(-2, -1))
        coords = torch.sigmoid(self.regression(pooled))
        heatmap, _ = self.decoder(bottom, skips)
        return FlmOutputs(coords, heatmap)


def build_jsdm(spec: JsdmSpec) -> JsdmNet:
    return JsdmNet(spec)


def build_fsm(spec: FsmSpec) -> FsmNet:
    return FsmNet(spec)


def build_flm(spec: FlmSpec) -> FlmNet:
    return FlmNet(spec)


_KINDS = {"jsdm": (JsdmSpec, build_jsdm), "fsm": (FsmSpec, build_fsm), "flm": (FlmSpec, build_flm)}

_DTYPE_CODES = {
    torch.float32: "f4",
    torch.float64: "f8",
    torch.int64: "i8",
}
_NP_DTYPES = {"f4": np.float32, "f8": np.float64, "i8": np.int64}


def _spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["branches"] = list(d["branches"]) if "branches" in d else None
    return {k: v for k, v in d.items() if v is not None}


def _spec_from_dict(kind: str, d: dict):
    spec_cls, _ = _KINDS[kind]
    d = dict(d)
    d["encoder"] = EncoderSpec(**d["encoder"])
    if "branches" in d:
        d["branches"] = tuple(d["branches"])
    return spec_cls(**d)


def _tensors(net: nn.Module) -> dict[str, torch.Tensor]:
    out = dict(net.named_parameters())
    out.update(dict(net.named_buffers()))
    return out


def save_checkpoint(path: str | Path, net: nn.Module) -> Path:
    """Write graph.json (spec echo + tensor manifest) plus one raw
    little-endian blob per parameter/buffer, named by its layer path."""
    kind = {JsdmNet: "jsdm", FsmNet: "fsm", FlmNet: "flm"}.get(type(net))
    if kind is None:
        raise CheckpointError(f"cannot checkpoint {type(net).__name__}")
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, tensor in _tensors(net).items():
        code = _DTYPE_CODES.get(tensor.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        blob = tensor.detach().cpu().contiguous().numpy()
        blob.astype(blob.dtype.newbyteorder("<")).tofile(path / "params" / f"{name}.bin")
        manifest[name] = {"shape": list(tensor.shape), "dtype": code}
    graph = {"kind": kind, "spec": _spec_to_dict(net.spec), "tensors": manifest}
    (path / "graph.json").write_text(json.dumps(graph, indent=1))
    return path


def load_checkpoint(path: str | Path) -> nn.Module:
    """Rebuild a net from graph.json and its blobs; any missing tensor or
    shape/size mismatch raises CheckpointError naming the offender."""
    path = Path(path)
    graph_file = path / "graph.json"
    if not graph_file.exists():
        raise CheckpointError(f"no graph.json under {path}")
    graph = json.loads(graph_file.read_text())
    if graph.get("kind") not in _KINDS:
        raise CheckpointError(f"unknown graph kind {graph.get('kind')!r}")
    spec = _spec_from_dict(graph["kind"], graph["spec"])
    net = _KINDS[graph["kind"]][1](spec)
    tensors = _tensors(net)
    manifest = graph["tensors"]
    missing = sorted(set(tensors) - set(manifest))
    extra = sorted(set(manifest) - set(tensors))
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing={missing} extra={extra}")
    with torch.no_grad():
        for name, entry in manifest.items():
            target = tensors[name]
            if list(target.shape) != entry["shape"]:
                raise CheckpointError(
                    f"{name}: graph shape {list(target.shape)} != stored {entry['shape']}"
                )
            blob_path = path / "params" / f"{name}.bin"
            if not blob_path.exists():
                raise CheckpointError(f"{name}: blob missing at {blob_path}")
            data = np.fromfile(blob_path, dtype=_NP_DTYPES[entry["dtype"]])
            if data.size != target.numel():
                raise CheckpointError(
                    f"{name}: blob holds {data.size} values, expected {target.numel()}"
                )
            target.copy_(torch.from_numpy(data.reshape(entry["shape"])))
    return net
