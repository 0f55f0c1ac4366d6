"""Training loop, Adam, loss logs and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .data import Batch, FeatureDims, PairSet, make_batches
from .errors import CheckpointError, ConfigurationError, NumericError
from .model import (
    ModelDims,
    ModelParams,
    content_forward,
    emotion_forward,
    fuse,
    init_model,
)
from .numgrad import ParamTensor

log = logging.getLogger(__name__)

ABLATIONS = ("content_only", "emotion_only", "splicing", "interactive")
LOG_COLUMNS = ("epoch", "step", "L_R", "L_Mcontent", "L_D", "L_Minter", "L_Fusion", "L_total")


@dataclass(frozen=True)
class TrainConfig:
    dims: ModelDims
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    ablation: str = "interactive"
    all_pairs: bool = False
    train_fraction: float = 0.7

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError(
                f"batch_size must be >= 2: the metric losses need in-batch negatives (got {self.batch_size})"
            )
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ConfigurationError("adam_epsilon must be positive")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ablation in ("splicing", "interactive") and self.loss.fusion_mode != self.ablation:
            object.__setattr__(self, "loss", replace(self.loss, fusion_mode=self.ablation))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["dims"] = ModelDims(**d["dims"])
        d["loss"] = L.LossConfig(**d["loss"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def dims_for_data(feature_dims: FeatureDims, **arch) -> ModelDims:
    """ModelDims whose native widths come from a dataset header."""
    return ModelDims(
        video_content_dim=feature_dims.video_content,
        music_content_dim=feature_dims.music_content,
        video_emotion_dim=feature_dims.video_emotion,
        music_emotion_dim=feature_dims.music_emotion,
        num_emotion_classes=feature_dims.classes,
        **arch,
    )


# --- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[ParamTensor], state: AdamState, cfg: TrainConfig, grads=None) -> AdamState:
    """Bias-corrected Adam update, in place. ``grads`` defaults to each ``p.grad``."""
    grads = [p.grad for p in params] if grads is None else list(grads)
    step = state.step + 1
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match {p.name} {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name} at step {step}")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for p, g in zip(params, grads):
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_epsilon)
        p.value -= update.astype(p.value.dtype)
    state.step = step
    return state


# --- objective -----------------------------------------------------------------

def batch_objective(params: ModelParams, batch: Batch, cfg: TrainConfig):
    """Forward one batch; return (total tensor, dict of component floats).

    Components absent from an ablation are reported as 0.
    """
    lc = cfg.loss
    parts = {}
    metric_on_fused = (
        lc.metric_variant != "contrastive" and lc.ppml_site == "fused"
        and cfg.ablation in ("splicing", "interactive")
    )
    if cfg.ablation != "emotion_only":
        code_v, code_m, recon_v, recon_m = content_forward(params, batch.video_content, batch.music_content)
        parts["L_R"] = L.reconstruction_loss(batch.video_content, recon_v, batch.music_content, recon_m)
        if not metric_on_fused:
            parts["L_Mcontent"] = L.content_metric_term(code_v, code_m, batch.polarity, lc)
    if cfg.ablation != "content_only":
        ecode_v, logits_v = emotion_forward(params, batch.video_emotion, "video")
        ecode_m, logits_m = emotion_forward(params, batch.music_emotion, "music")
        parts["L_D"] = L.discrimination_loss(logits_v, logits_m, batch.video_class, batch.music_class)
        parts["L_Minter"] = L.intermodal_loss(ecode_v, ecode_m)

    if cfg.ablation == "content_only":
        total = lc.lambda1 * parts["L_R"] + lc.lambda2 * parts["L_Mcontent"]
    elif cfg.ablation == "emotion_only":
        total = lc.mu1 * parts["L_D"] + lc.mu2 * parts["L_Minter"]
    else:
        fused_v = fuse(params, code_v, ecode_v, cfg.ablation)
        fused_m = fuse(params, code_m, ecode_m, cfg.ablation)
        parts["L_Fusion"] = L.fusion_loss(fused_v, fused_m)
        if metric_on_fused:
            parts["L_Mcontent"] = L.content_metric_term(fused_v, fused_m, batch.polarity, lc)
        _, _, total = L.composite_losses(parts, lc)

    values = {name: float(parts[name]) if name in parts else 0.0 for name in LOG_COLUMNS[2:-1]}
    values["L_total"] = float(total)
    return total, values


# --- training loop -------------------------------------------------------------

@dataclass
class Checkpoint:
    dims: ModelDims
    params: ModelParams
    config: TrainConfig
    final_epoch: int
    loss_history: np.ndarray  # rows of LOG_COLUMNS

    def mean_loss_by_epoch(self, column: str = "L_total") -> np.ndarray:
        h = self.loss_history
        col = LOG_COLUMNS.index(column)
        epochs = np.unique(h[:, 0])
        return np.array([h[h[:, 0] == e, col].mean() for e in epochs])


def _check_data(cfg: TrainConfig, data: PairSet) -> None:
    d, fd = cfg.dims, data.dims
    got = (fd.video_content, fd.music_content, fd.video_emotion, fd.music_emotion)
    want = (d.video_content_dim, d.music_content_dim, d.video_emotion_dim, d.music_emotion_dim)
    if got != want:
        raise ConfigurationError(f"data feature dims {got} do not match model dims {want}")
    if fd.classes != d.num_emotion_classes:
        raise ConfigurationError(f"data has {fd.classes} classes, model expects {d.num_emotion_classes}")
    if not data.pairs:
        raise ConfigurationError("training data has no pairs")


def train(cfg: TrainConfig, data: PairSet, params: ModelParams | None = None):
    """Train on every pair of ``data``; return (Checkpoint, loss log rows)."""
    _check_data(cfg, data)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if params is None:
        params = init_model(cfg.dims, int(seeds[0].generate_state(1)[0]))
    batch_rng = np.random.default_rng(seeds[1])
    plist = params.parameters()
    state = AdamState()
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        for batch in make_batches(data, cfg.batch_size, batch_rng, all_pairs=cfg.all_pairs):
            params.zero_grad()
            where = f"epoch {epoch}, step {state.step + 1} (videos {batch.video_ids[:4]}...)"
            try:
                total, values = batch_objective(params, batch, cfg)
            except NumericError as exc:
                raise NumericError(f"non-finite loss at {where}: {exc}") from exc
            if not np.isfinite(values["L_total"]):
                raise NumericError(f"non-finite loss at {where}: {values}")
            total.backward()
            adam_step(plist, state, cfg)
            rows.append([epoch, state.step] + [values[c] for c in LOG_COLUMNS[2:]])
        if epoch == 1 or epoch % 10 == 0 or epoch == cfg.epochs:
            last = [r for r in rows if r[0] == epoch]
            log.info("epoch %d mean L_total %.4f", epoch, float(np.mean([r[-1] for r in last])))
    history = np.array(rows, dtype=np.float64).reshape(-1, len(LOG_COLUMNS))
    return Checkpoint(cfg.dims, params, cfg, cfg.epochs, history), history


def format_loss_log(history: np.ndarray, config: TrainConfig | None = None) -> str:
    lines = []
    if config is not None:
        lines += [f"# {k}={v}" for k, v in flat_config(config).items()]
    lines.append("# " + ",".join(LOG_COLUMNS))
    for row in history:
        lines.append(",".join([str(int(row[0])), str(int(row[1]))] + [repr(float(x)) for x in row[2:]]))
    return "\n".join(lines) + "\n"


def flat_config(config: TrainConfig) -> dict:
    out = {}
    for key, value in config.to_dict().items():
        if isinstance(value, dict):
            out.update(value)
        else:
            out[key] = value
    return out


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- checkpoint file -------------------------------------------------------------
#
# little-endian layout:
#   magic "DPVMCKPT" | u32 version | 12 x u32 dims | u8 activation | 32 B sha256(config)
#   u32 len + config JSON | u32 final epoch | u32 rows + rows*8 f64 loss history
#   u32 block count, per block: u16 name len, name, u8 dtype, u32 rows, u32 cols, data
#   u32 crc32 of everything above

MAGIC = b"DPVMCKPT"
VERSION = 1
_DIM_FIELDS = (
    "video_content_dim", "music_content_dim", "video_emotion_dim", "music_emotion_dim",
    "content_code_dim", "emotion_code_dim", "fused_dim", "num_emotion_classes",
    "content_hidden_dim", "emotion_hidden_dim", "encoder_layers", "mlp_layers",
)
_ACTIVATIONS = ("relu", "identity")
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack("<12I", *(getattr(ckpt.dims, f) for f in _DIM_FIELDS))
    out += struct.pack("<B", _ACTIVATIONS.index(ckpt.dims.hidden_activation))
    out += bytes.fromhex(ckpt.config.digest())
    cfg_json = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode()
    out += struct.pack("<I", len(cfg_json)) + cfg_json
    out += struct.pack("<I", ckpt.final_epoch)
    hist = np.ascontiguousarray(ckpt.loss_history, dtype="<f8").reshape(-1, len(LOG_COLUMNS))
    out += struct.pack("<I", hist.shape[0]) + hist.tobytes()
    named = list(ckpt.params.named_parameters())
    out += struct.pack("<I", len(named))
    for name, p in named:
        raw = name.encode()
        dt = np.dtype(p.value.dtype).newbyteorder("<")
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported parameter dtype {dt} for {name}")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BII", _DTYPES.index(dt), *p.value.shape)
        out += np.ascontiguousarray(p.value, dtype=dt).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    write_atomic(path, checkpoint_bytes(ckpt))
    return Path(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic or truncated)")
    r = _Reader(blob)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    dim_values = r.unpack("<12I")
    (act,) = r.unpack("<B")
    digest = r.take(32).hex()
    (cfg_len,) = r.unpack("<I")
    try:
        config = TrainConfig.from_dict(json.loads(r.take(cfg_len)))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable config block: {exc}") from exc
    if config.digest() != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    dims = ModelDims(**dict(zip(_DIM_FIELDS, dim_values)), hidden_activation=_ACTIVATIONS[act])
    if dims != config.dims:
        raise CheckpointError(f"{path}: header dims disagree with stored config")
    (final_epoch,) = r.unpack("<I")
    (n_rows,) = r.unpack("<I")
    history = np.frombuffer(r.take(n_rows * len(LOG_COLUMNS) * 8), dtype="<f8").reshape(n_rows, len(LOG_COLUMNS))
    params = init_model(dims, seed=0)
    expected = dict(params.named_parameters())
    (n_blocks,) = r.unpack("<I")
    if n_blocks != len(expected):
        raise CheckpointError(f"{path}: expected {len(expected)} parameter blocks, found {n_blocks}")
    values = {}
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, rows, cols = r.unpack("<BII")
        if name not in expected or expected[name].shape != (rows, cols) or code >= len(_DTYPES):
            raise CheckpointError(f"{path}: unexpected parameter block {name!r} {(rows, cols)}")
        dt = _DTYPES[code]
        values[name] = np.frombuffer(r.take(rows * cols * dt.itemsize), dtype=dt).reshape(rows, cols)
    if r.pos != len(blob) - 4:
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    dtype = next(iter(values.values())).dtype if values else np.float32
    params = params.astype(dtype.newbyteorder("="))
    for name, p in params.named_parameters():
        p.value[...] = values[name]
    return Checkpoint(dims, params, config, final_epoch, history.copy())
