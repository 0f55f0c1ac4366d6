"""Content, emotion and fusion networks.

Both modalities are first projected to a common width by their own input
layer; everything after that (encoder, decoder, emotion MLP, classifier,
fusion layer) is a single set of weights used for video and music alike.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ConfigurationError
from .numgrad import ParamTensor, Tensor, as_tensor, concat, dense_forward

MODALITIES = ("video", "music")
FUSION_MODES = ("splicing", "interactive")


@dataclass(frozen=True)
class ModelDims:
    video_content_dim: int
    music_content_dim: int
    video_emotion_dim: int
    music_emotion_dim: int
    content_code_dim: int = 256
    emotion_code_dim: int = 256
    fused_dim: int = 256
    num_emotion_classes: int = 4
    content_hidden_dim: int = 512
    emotion_hidden_dim: int = 256
    encoder_layers: int = 2
    mlp_layers: int = 2
    hidden_activation: str = "relu"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "hidden_activation":
                if value not in ("relu", "identity"):
                    raise ConfigurationError(f"hidden_activation must be relu or identity, got {value!r}")
            elif not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{f.name} must be an integer >= 1, got {value!r}")
        if self.num_emotion_classes < 2:
            raise ConfigurationError("num_emotion_classes must be at least 2")
        if self.content_code_dim > min(self.video_content_dim, self.music_content_dim):
            raise ConfigurationError(
                f"content_code_dim {self.content_code_dim} must not exceed the native content dims "
                f"({self.video_content_dim}, {self.music_content_dim})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def native_dim(self, path: str, modality: str) -> int:
        return getattr(self, f"{modality}_{path}_dim")


class Dense:
    """One affine layer with an activation."""

    def __init__(self, weight: ParamTensor, bias: ParamTensor, activation: str):
        self.weight = weight
        self.bias = bias
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.weight, self.bias, self.activation)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def _run(stack: list[Dense], x: Tensor) -> Tensor:
    for layer in stack:
        x = layer(x)
    return x


class ModelParams:
    """All learnable weights, grouped by network."""

    def __init__(self, dims: ModelDims, layers: dict[str, Dense]):
        self.dims = dims
        self.layers = layers
        self.video_content_proj = layers["video_content_proj"]
        self.music_content_proj = layers["music_content_proj"]
        self.shared_encoder = [layers[f"shared_encoder.{i}"] for i in range(dims.encoder_layers)]
        self.shared_decoder = [layers[f"shared_decoder.{i}"] for i in range(dims.encoder_layers)]
        self.video_decoder_out = layers["video_decoder_out"]
        self.music_decoder_out = layers["music_decoder_out"]
        self.emotion_proj_v = layers["emotion_proj_v"]
        self.emotion_proj_m = layers["emotion_proj_m"]
        self.shared_emotion_mlp = [layers[f"shared_emotion_mlp.{i}"] for i in range(dims.mlp_layers)]
        self.emotion_classifier = layers["emotion_classifier"]
        self.fusion_fc = layers["fusion_fc"]

    def named_parameters(self) -> Iterator[tuple[str, ParamTensor]]:
        for name, layer in self.layers.items():
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias

    def parameters(self) -> list[ParamTensor]:
        return [p for _, p in self.named_parameters()]

    def group(self, prefixes) -> list[ParamTensor]:
        """Parameters whose layer name starts with any of ``prefixes``."""
        return [p for n, p in self.named_parameters() if n.startswith(tuple(prefixes))]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        layers = {
            name: Dense(
                ParamTensor(layer.weight.value.astype(dtype), layer.weight.name),
                ParamTensor(layer.bias.value.astype(dtype), layer.bias.name),
                layer.activation,
            )
            for name, layer in self.layers.items()
        }
        return ModelParams(self.dims, layers)

    @property
    def dtype(self):
        return self.fusion_fc.weight.dtype


def layer_plan(dims: ModelDims) -> list[tuple[str, int, int, str]]:
    """(name, in_dim, out_dim, activation) for every layer, in a fixed order."""
    hid = dims.hidden_activation
    ch, eh = dims.content_hidden_dim, dims.emotion_hidden_dim
    plan = [
        ("video_content_proj", dims.video_content_dim, ch, hid),
        ("music_content_proj", dims.music_content_dim, ch, hid),
    ]
    widths = [ch] * dims.encoder_layers + [dims.content_code_dim]
    for i in range(dims.encoder_layers):
        last = i == dims.encoder_layers - 1
        plan.append((f"shared_encoder.{i}", widths[i], widths[i + 1], "identity" if last else hid))
    dec_widths = [dims.content_code_dim] + [ch] * dims.encoder_layers
    for i in range(dims.encoder_layers):
        plan.append((f"shared_decoder.{i}", dec_widths[i], dec_widths[i + 1], hid))
    plan += [
        ("video_decoder_out", ch, dims.video_content_dim, "identity"),
        ("music_decoder_out", ch, dims.music_content_dim, "identity"),
        ("emotion_proj_v", dims.video_emotion_dim, eh, hid),
        ("emotion_proj_m", dims.music_emotion_dim, eh, hid),
    ]
    mlp_widths = [eh] * dims.mlp_layers + [dims.emotion_code_dim]
    for i in range(dims.mlp_layers):
        last = i == dims.mlp_layers - 1
        plan.append((f"shared_emotion_mlp.{i}", mlp_widths[i], mlp_widths[i + 1], "identity" if last else hid))
    plan += [
        ("emotion_classifier", dims.emotion_code_dim, dims.num_emotion_classes, "identity"),
        ("fusion_fc", dims.content_code_dim + dims.emotion_code_dim, dims.fused_dim, "identity"),
    ]
    return plan


def init_model(dims: ModelDims, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases."""
    if not isinstance(dims, ModelDims):
        raise ConfigurationError("init_model needs a ModelDims")
    rng = np.random.default_rng(seed)
    layers = {}
    for name, fan_in, fan_out, act in layer_plan(dims):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros((1, fan_out), dtype=dtype)
        layers[name] = Dense(ParamTensor(w, f"{name}.weight"), ParamTensor(b, f"{name}.bias"), act)
    return ModelParams(dims, layers)


def _rows(x, expected: int, what: str, dtype) -> Tensor:
    t = as_tensor(x)
    if t.value.ndim == 1:
        t = Tensor(t.value.reshape(1, -1))
    if t.value.ndim != 2 or t.shape[1] != expected:
        raise ConfigurationError(f"{what} has shape {t.shape}, expected width {expected}")
    if t.dtype != dtype and not t.requires_grad:
        t = Tensor(t.value.astype(dtype))
    return t


def encode_content(params: ModelParams, feat, modality: str) -> Tensor:
    dims = params.dims
    x = _rows(feat, dims.native_dim("content", modality), f"{modality} content feature", params.dtype)
    proj = params.video_content_proj if modality == "video" else params.music_content_proj
    return _run(params.shared_encoder, proj(x))


def decode_content(params: ModelParams, code: Tensor, modality: str) -> Tensor:
    out = params.video_decoder_out if modality == "video" else params.music_decoder_out
    return out(_run(params.shared_decoder, code))


def content_forward(params: ModelParams, v_feat, m_feat):
    """Return (code_v, code_m, recon_v, recon_m) for row batches of features."""
    code_v = encode_content(params, v_feat, "video")
    code_m = encode_content(params, m_feat, "music")
    return code_v, code_m, decode_content(params, code_v, "video"), decode_content(params, code_m, "music")


def emotion_forward(params: ModelParams, feat, modality: str):
    """Return (emotion_code, logits) for one modality."""
    if modality not in MODALITIES:
        raise ConfigurationError(f"unknown modality {modality!r}")
    dims = params.dims
    x = _rows(feat, dims.native_dim("emotion", modality), f"{modality} emotion feature", params.dtype)
    proj = params.emotion_proj_v if modality == "video" else params.emotion_proj_m
    code = _run(params.shared_emotion_mlp, proj(x))
    return code, params.emotion_classifier(code)


def fuse(params: ModelParams, content_code, emotion_code, mode: str) -> Tensor:
    dims = params.dims
    if mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion mode {mode!r}")
    c = _rows(content_code, dims.content_code_dim, "content code", params.dtype)
    e = _rows(emotion_code, dims.emotion_code_dim, "emotion code", params.dtype)
    spliced = concat(c, e)
    if mode == "splicing":
        return spliced
    return params.fusion_fc(spliced)


@dataclass
class ForwardOutputs:
    content_code_v: Tensor
    content_code_m: Tensor
    recon_v: Tensor
    recon_m: Tensor
    emotion_code_v: Tensor
    emotion_code_m: Tensor
    logits_v: Tensor
    logits_m: Tensor
    fused_v: Tensor
    fused_m: Tensor


def full_forward(params: ModelParams, v_content, m_content, v_emotion, m_emotion, mode: str) -> ForwardOutputs:
    code_v, code_m, recon_v, recon_m = content_forward(params, v_content, m_content)
    ecode_v, logits_v = emotion_forward(params, v_emotion, "video")
    ecode_m, logits_m = emotion_forward(params, m_emotion, "music")
    return ForwardOutputs(
        code_v, code_m, recon_v, recon_m,
        ecode_v, ecode_m, logits_v, logits_m,
        fuse(params, code_v, ecode_v, mode), fuse(params, code_m, ecode_m, mode),
    )
