"""Encoder/decoder assembly for the DJSCC, ADJSCC and DA-DJSCC variants."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import ChannelAttention, SpatialAttention
from .channel import ChannelConfig, draw_channel, transmit
from .layers import Conv2d, Conv2dSpec, Layer, Parameter, PReLU, count_params
from .tensor import DEFAULT_DTYPE, Tensor, prelu, sigmoid

VARIANTS = ("djscc", "adjscc", "da_djscc")
INPUT_SHAPE = (3, 32, 32)

# (out_channels, stride); None marks the bandwidth layer of width c
ENCODER_TABLE = ((16, 2), (32, 2), (32, 1), (32, 1), (None, 1))
DECODER_TABLE = ((32, 1), (32, 1), (32, 1), (16, 2), (3, 2))


class CheckpointError(RuntimeError):
    pass


def normalize_variant(name: str) -> str:
    v = name.lower().replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass(frozen=True)
class VariantSpec:
    variant: str = "da_djscc"
    c: int = 4
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.c < 1:
            raise ValueError("c must be positive")

    @property
    def n(self) -> int:
        return int(np.prod(INPUT_SHAPE))

    @property
    def k(self) -> int:
        return 8 * 8 * self.c

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.k, self.n)

    @property
    def has_channel_attention(self) -> bool:
        return self.variant != "djscc"

    @property
    def has_spatial_attention(self) -> bool:
        return self.variant == "da_djscc"


class Stage(Layer):
    """One conv (or transposed conv) with its activation and attention pair."""

    def __init__(self, spec: Conv2dSpec, in_hw: tuple[int, int], activation: str,
                 spec_v: VariantSpec, with_attention: bool, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(spec, rng, dtype)
        self.activation = activation
        self.act = PReLU(dtype=dtype) if activation == "prelu" else None
        self.out_shape = (spec.out_channels,) + spec.output_hw(*in_hw)
        c, h, w = self.out_shape
        self.channel_att = None
        self.spatial_att = None
        if with_attention and spec_v.has_channel_attention:
            self.channel_att = ChannelAttention(c, rng, dtype)
        if with_attention and spec_v.has_spatial_attention:
            self.spatial_att = SpatialAttention(h, w, rng, dtype=dtype)

    def attention_order(self) -> list[str]:
        order = []
        if self.channel_att is not None:
            order.append("channel")
        if self.spatial_att is not None:
            order.append("spatial")
        return order

    def __call__(self, x: Tensor, snr_db) -> Tensor:
        y = self.conv(x)
        y = prelu(y, self.act.slope) if self.act is not None else sigmoid(y)
        if self.channel_att is not None:
            y = self.channel_att(y, snr_db)
        if self.spatial_att is not None:
            y = self.spatial_att(y, snr_db)
        return y


class Model(Layer):
    def __init__(self, spec: VariantSpec, encoder: list[Stage], decoder: list[Stage]):
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder
        self.named("model")
        for p in self.parameters():
            p.name = p.name.removeprefix("model.")

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def count_params(self) -> int:
        return count_params(self)

    def encode(self, s, snr_db) -> Tensor:
        return encode(self, s, snr_db)

    def decode(self, y, snr_db) -> Tensor:
        return decode(self, y, snr_db)


def build_model(spec: VariantSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Model:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    encoder, decoder = [], []
    cin, hw = INPUT_SHAPE[0], INPUT_SHAPE[1:]
    for out, stride in ENCODER_TABLE:
        cspec = Conv2dSpec(cin, out or spec.c, stride)
        stage = Stage(cspec, hw, "prelu", spec, True, rng, dtype)
        encoder.append(stage)
        cin, hw = stage.out_shape[0], stage.out_shape[1:]
    for i, (out, stride) in enumerate(DECODER_TABLE):
        last = i == len(DECODER_TABLE) - 1
        cspec = Conv2dSpec.transposed_for(cin, out, stride)
        stage = Stage(cspec, hw, "sigmoid" if last else "prelu", spec, not last, rng, dtype)
        decoder.append(stage)
        cin, hw = stage.out_shape[0], stage.out_shape[1:]
    if decoder[-1].out_shape != INPUT_SHAPE:
        raise AssertionError(f"decoder output {decoder[-1].out_shape} != {INPUT_SHAPE}")
    return Model(spec, encoder, decoder)


def _as_input(s) -> Tensor:
    return s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=DEFAULT_DTYPE))


def encode(model: Model, s, snr_db) -> Tensor:
    """Image ``[3,32,32]`` (or batch) to code ``[c,8,8]``."""
    s = _as_input(s)
    if s.shape[-3:] != INPUT_SHAPE:
        raise ValueError(f"expected images of shape {INPUT_SHAPE}, got {s.shape}")
    if s.data.min() < 0 or s.data.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    x = s
    for stage in model.encoder:
        x = stage(x, snr_db)
    return x


def decode(model: Model, y, snr_db) -> Tensor:
    """Received code ``[c,8,8]`` (or batch) to image ``[3,32,32]`` in (0, 1)."""
    y = _as_input(y)
    expected = model.encoder[-1].out_shape
    if y.shape[-3:] != expected or y.ndim not in (3, 4):
        raise ValueError(f"expected codes of shape {expected}, got {y.shape}")
    out = y
    for stage in model.decoder:
        out = stage(out, snr_db)
    return out


def end_to_end(model: Model, s, cfg: ChannelConfig, rng: np.random.Generator):
    """Encode, transmit and decode; returns ``(S_hat, effective SNR)``."""
    s = _as_input(s)
    batched = s.ndim == 4
    draw = draw_channel(cfg, s.shape[0] if batched else 1, model.spec.k, rng)
    snr = draw.snr_db_effective if batched else float(draw.snr_db_effective[0])
    x = encode(model, s, snr)
    y, snr_eff = transmit(x, cfg, rng, draw=draw)
    return decode(model, y, snr_eff), snr_eff


# -- checkpoints ------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".manifest", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".manifest"), p.with_name(p.name + ".bin")


def save_arrays(arrays: dict[str, np.ndarray], path) -> None:
    """Write a text manifest plus a little-endian float32 blob."""
    manifest, blob = _paths(path)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    lines, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        data = np.ascontiguousarray(arr, dtype="<f4")
        dims = ",".join(str(d) for d in data.shape) if data.ndim else "-"
        lines.append(f"{name} f32 {dims} {offset}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    try:
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        blob.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {manifest}: {exc}") from exc


def load_arrays(path) -> dict[str, np.ndarray]:
    manifest, blob = _paths(path)
    try:
        text = manifest.read_text(encoding="utf-8")
        raw = blob.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {manifest.with_suffix('')}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4 or parts[1] != "f32":
            raise CheckpointError(f"{manifest}:{lineno}: malformed manifest line {line!r}")
        name, _, dims, offset = parts
        shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
        offset = int(offset)
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{blob}: truncated blob (need {offset + nbytes} bytes, "
                                  f"have {len(raw)})")
        out[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4,
                                  offset=offset).reshape(shape).astype(np.float32)
    return out


def assign_arrays(params: dict[str, Parameter], arrays: dict[str, np.ndarray], where="") -> None:
    if list(arrays) != list(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"manifest mismatch{where}: missing {missing[:5]}, "
                              f"unexpected {extra[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"manifest mismatch{where}: {name} has shape "
                                  f"{arrays[name].shape}, model expects {p.shape}")
    for name, p in params.items():
        p.data = arrays[name].astype(p.dtype, copy=True)
        p.grad = None


def save_checkpoint(model, path) -> None:
    save_arrays({name: p.data for name, p in _named(model).items()}, path)


def load_checkpoint(path, spec: VariantSpec) -> Model:
    model = build_model(spec, np.random.default_rng(0))
    assign_arrays(model.named_parameters(), load_arrays(path), f" in {path}")
    return model


def load_into(model, path) -> None:
    assign_arrays(_named(model), load_arrays(path), f" in {path}")


def _named(model) -> dict[str, Parameter]:
    if hasattr(model, "named_parameters"):
        return model.named_parameters()
    return {p.name: p for p in model.parameters()}
